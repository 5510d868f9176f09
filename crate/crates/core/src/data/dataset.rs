//! Newline-delimited dataset files. Each line is one JSON object with the
//! record's fields plus `seed`, and either `pixels` (hex-encoded 8-bit RGB,
//! row-major) or `regenerate: true`, meaning the pixels are re-rendered from
//! `(seed, index)` when read.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{render_bytes, Record, Vocab, CANVAS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelEncoding {
    Hex,
    Regenerate,
}

#[derive(Serialize, Deserialize)]
struct Line {
    seed: u64,
    #[serde(flatten)]
    record: Record,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixels: Option<String>,
    #[serde(default)]
    regenerate: bool,
}

fn encode(seed: u64, records: &[Record], encoding: PixelEncoding) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        let line = Line {
            seed,
            record: r.clone(),
            pixels: (encoding == PixelEncoding::Hex).then(|| hex::encode(&r.pixels)),
            regenerate: encoding == PixelEncoding::Regenerate,
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::Data(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

/// SHA-256 of the serialized dataset, hex encoded.
pub fn dataset_hash(seed: u64, records: &[Record], encoding: PixelEncoding) -> Result<String> {
    Ok(hex::encode(Sha256::digest(encode(seed, records, encoding)?)))
}

/// Writes the dataset and returns its hash.
pub fn write_dataset(path: &Path, seed: u64, records: &[Record], encoding: PixelEncoding) -> Result<String> {
    let bytes = encode(seed, records, encoding)?;
    fs::write(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let vocab = Vocab::builtin();
    let mut records = Vec::new();
    for (n, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: String| Error::Data(format!("{}:{}: {m}", path.display(), n + 1));
        let line: Line = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
        let mut record = line.record;
        record.scene.validate().map_err(|e| bad(e.to_string()))?;
        record.pixels = match (line.pixels, line.regenerate) {
            (Some(h), false) => {
                let px = hex::decode(h).map_err(|e| bad(e.to_string()))?;
                if px.len() != CANVAS * CANVAS * 3 {
                    return Err(bad(format!("pixel payload has {} bytes", px.len())));
                }
                px
            }
            (None, true) => {
                let fresh = Record::generate(line.seed, record.index, &vocab);
                if fresh.scene != record.scene {
                    return Err(bad("scene does not match its seed".into()));
                }
                render_bytes(&record.scene)
            }
            _ => return Err(bad("exactly one of `pixels` or `regenerate` is required".into())),
        };
        for t in record.targets.iter().chain(&record.prompt_targets) {
            if t.span.0 >= t.span.1 {
                return Err(bad(format!("empty span {:?}", t.span)));
            }
        }
        if record.targets.iter().any(|t| t.span.1 > record.tokens.len()) {
            return Err(bad("span beyond caption".into()));
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{} holds no records", path.display())));
    }
    Ok(records)
}
