//! Autoregressive captioning with the text backbone as a causal decoder.
//! Only the image-to-text cross-attention of the fused layers is kept. The
//! seq2seq variant attends to the final image features in every fused
//! layer; the ladder variant attends, in fused layer `j`, to the image hidden
//! state entering the image block paired with `j`.

use std::fmt;
use std::str::FromStr;

use fiber_tensor::{Tensor, Var};

use crate::data::{BOS, EOS, PAD};
use crate::error::{contract, Error, Result};
use crate::fusion::{Backbone, FusionBlock, FusionConfig, Strategy};
use crate::nn::{causal_mask, dims4, LinearParams};
use crate::objectives::cross_entropy;
use crate::params::{Bound, Builder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptionVariant {
    Seq2Seq,
    Ladder,
}

impl CaptionVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            CaptionVariant::Seq2Seq => "seq2seq",
            CaptionVariant::Ladder => "ladder",
        }
    }
}

impl fmt::Display for CaptionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaptionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq2seq" => Ok(CaptionVariant::Seq2Seq),
            "ladder" => Ok(CaptionVariant::Ladder),
            _ => Err(Error::Config(format!("unknown caption variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionerConfig {
    pub variant: CaptionVariant,
    pub beam: usize,
    /// Maximum decoded length including bos and eos.
    pub max_len: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            variant: CaptionVariant::Seq2Seq,
            beam: 5,
            max_len: 24,
        }
    }
}

/// Next-token projection of the decoder.
#[derive(Debug, Clone, Copy)]
pub struct CaptionHead {
    pub out: LinearParams,
}

impl CaptionHead {
    pub fn new(b: &mut Builder, bb: &Backbone) -> Self {
        Self {
            out: LinearParams::new(b, "caption_head", bb.cfg.text.width, bb.cfg.text.vocab_size),
        }
    }
}

/// Image features consumed by each fused decoder layer, `[B, N, d_top]`.
pub struct ImageContext {
    pub per_layer: Vec<Var>,
}

impl ImageContext {
    pub fn select(&self, rows: &[usize]) -> Result<ImageContext> {
        Ok(ImageContext {
            per_layer: self.per_layer.iter().map(|c| c.select_rows(rows)).collect::<std::result::Result<_, _>>()?,
        })
    }
}

/// Fails unless the architecture can caption: a co-attention strategy with
/// at least one fused layer.
pub fn image_context_supported(cfg: &FusionConfig) -> Result<()> {
    if cfg.strategy == Strategy::MergedAttention {
        return Err(Error::Config("captioning keeps image-to-text cross-attention and needs a co-attention fusion strategy".into()));
    }
    if cfg.fused_layers == 0 {
        return Err(Error::Config("captioning needs at least one fused layer".into()));
    }
    Ok(())
}

fn check_strategy(bb: &Backbone) -> Result<()> {
    image_context_supported(&bb.cfg)
}

/// Runs the (uni-modal) image backbone and collects what each fused decoder
/// layer attends to.
pub fn image_context(bb: &Backbone, p: &Bound, pixels: &Tensor, variant: CaptionVariant) -> Result<ImageContext> {
    check_strategy(bb)?;
    let (_, mut x) = bb.image_lower(p, pixels)?;
    let top = bb.cfg.image.widths.len() - 1;
    let mut ladder = Vec::with_capacity(bb.cfg.fused_layers);
    let flat = |x: &Var| -> Result<Var> {
        let (b, h, w, d) = dims4(x)?;
        Ok(x.reshape(vec![b, h * w, d])?)
    };
    for j in 0..bb.cfg.fused_layers {
        ladder.push(flat(&x)?);
        let idx = bb.first_fused_image_block() + j;
        x = bb.image_block(p, &bb.image.stages[top].blocks[idx], &x, top, idx)?;
    }
    let per_layer = match variant {
        CaptionVariant::Ladder => ladder,
        CaptionVariant::Seq2Seq => {
            let last = flat(&bb.image.out_norms[top].forward(p, &x)?)?;
            vec![last; bb.cfg.fused_layers]
        }
    };
    Ok(ImageContext { per_layer })
}

/// Teacher-forced next-token logits `[B, L, V]` for equal-length inputs.
pub fn caption_logits(bb: &Backbone, head: &CaptionHead, p: &Bound, ctx: &ImageContext, ids: &[Vec<usize>]) -> Result<Var> {
    check_strategy(bb)?;
    let l = ids.first().map_or(0, Vec::len);
    if ids.iter().any(|s| s.len() != l) {
        return Err(contract("decoder inputs must share one length"));
    }
    let mut x = bb.embed_text(p, &crate::fusion::TextBatch::new(ids.to_vec()))?;
    let mask = causal_mask(l);
    let first = bb.first_fused_text_layer();
    for (i, layer) in bb.text.layers.iter().enumerate() {
        if i < first {
            x = layer.forward_sequence(p, &x, Some(&mask))?;
            continue;
        }
        let cross = match &bb.fusion[i - first] {
            FusionBlock::Co { text, .. } => text,
            FusionBlock::Merged { .. } => unreachable!("checked above"),
        };
        let x_tilde = layer.self_attention(p, &x, Some(&mask))?;
        x = layer.ffn_residual(p, &cross.update(p, &x, &x_tilde, &ctx.per_layer[i - first], None)?)?;
    }
    head.out.forward(p, &bb.text.final_norm.forward(p, &x)?)
}

/// Teacher-forced cross-entropy of predicting `ids[t + 1]` from `ids[..=t]`,
/// averaged over non-pad targets.
pub fn caption_train_step(bb: &Backbone, head: &CaptionHead, p: &Bound, cfg: &CaptionerConfig, pixels: &Tensor, ids: &[Vec<usize>]) -> Result<Var> {
    let ctx = image_context(bb, p, pixels, cfg.variant)?;
    caption_loss(bb, head, p, &ctx, ids)
}

pub fn caption_loss(bb: &Backbone, head: &CaptionHead, p: &Bound, ctx: &ImageContext, ids: &[Vec<usize>]) -> Result<Var> {
    let l = ids.iter().map(Vec::len).max().unwrap_or(0);
    if l < 2 {
        return Err(contract("captions need at least bos and one token"));
    }
    let padded: Vec<Vec<usize>> = ids.iter().map(|s| s.iter().copied().chain(std::iter::repeat(PAD)).take(l).collect()).collect();
    let inputs: Vec<Vec<usize>> = padded.iter().map(|s| s[..l - 1].to_vec()).collect();
    let logits = caption_logits(bb, head, p, ctx, &inputs)?;
    let v = bb.cfg.text.vocab_size;
    let flat = logits.reshape(vec![ids.len() * (l - 1), v])?;
    let (rows, targets): (Vec<usize>, Vec<usize>) = padded
        .iter()
        .enumerate()
        .flat_map(|(b, s)| (1..l).filter(move |&t| s[t] != PAD).map(move |t| (b * (l - 1) + t - 1, s[t])))
        .unzip();
    cross_entropy(&flat.select_rows(&rows)?, &targets)
}

/// Beam search for one image (`pixels` is `[1, H, W, 3]`). Hypotheses are
/// ranked by summed log-probability divided by the number of generated
/// tokens. Each step expands the best `2·beam` candidates; an eos candidate
/// is retired into the finished pool only when it ranks within the first
/// `beam`, and the pool keeps the `beam` best. Search stops when the pool is
/// full and its worst score beats the best live hypothesis' current score,
/// or, for `beam = 1`, as soon as one hypothesis finishes (greedy decoding).
/// Returns the generated ids without bos and eos.
pub fn caption_decode(bb: &Backbone, head: &CaptionHead, p: &Bound, cfg: &CaptionerConfig, pixels: &Tensor) -> Result<Vec<usize>> {
    if cfg.beam == 0 {
        return Err(contract("beam size must be at least 1"));
    }
    let max_len = cfg.max_len.min(bb.cfg.text.max_len);
    let ctx = image_context(bb, p, pixels, cfg.variant)?;
    let v = bb.cfg.text.vocab_size;
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    let normalized = |seq: &Vec<usize>, score: f64| score / (seq.len() - 1) as f64;
    while !live.is_empty() && live[0].0.len() < max_len {
        let t = live[0].0.len();
        let seqs: Vec<Vec<usize>> = live.iter().map(|(s, _)| s.clone()).collect();
        let bctx = ctx.select(&vec![0; live.len()])?;
        let logits = caption_logits(bb, head, p, &bctx, &seqs)?;
        let last = logits.value().narrow(1, t - 1, 1)?.reshape(vec![live.len(), v])?.log_softmax(1)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * v);
        for (bi, (_, score)) in live.iter().enumerate() {
            for tok in 0..v {
                cands.push((score + last.data()[bi * v + tok], bi, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(cfg.beam);
        for (rank, &(score, bi, tok)) in cands.iter().take(2 * cfg.beam).enumerate() {
            let mut seq = live[bi].0.clone();
            seq.push(tok);
            if tok == EOS {
                if rank < cfg.beam {
                    let s = normalized(&seq, score);
                    finished.push((seq, s));
                }
            } else {
                next.push((seq, score));
            }
            if next.len() == cfg.beam {
                break;
            }
        }
        finished.sort_by(|a, b| b.1.total_cmp(&a.1));
        finished.truncate(cfg.beam);
        live = next;
        if finished.len() >= cfg.beam {
            if cfg.beam == 1 {
                break;
            }
            let worst = finished.last().map_or(f64::NEG_INFINITY, |h| h.1);
            let best_live = live.iter().map(|(s, sc)| normalized(s, *sc)).fold(f64::NEG_INFINITY, f64::max);
            if worst >= best_live {
                break;
            }
        }
    }
    if finished.len() < cfg.beam || cfg.beam > 1 {
        for (seq, score) in live {
            let s = normalized(&seq, score);
            finished.push((seq, s));
        }
    }
    let best = finished
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
        .map(|(_, h)| h.0.clone())
        .unwrap_or_default();
    Ok(best.into_iter().filter(|&t| t != BOS && t != EOS).collect())
}
