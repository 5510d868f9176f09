//! Grounding head: FPN over the multi-scale image features, a shared 4-layer
//! convolutional tower, and three sibling outputs per location (box
//! distances, centerness, region feature). Region features are scored
//! against token features to replace class logits.

use std::io::Write;

use serde::{Deserialize, Serialize};

use fiber_tensor::{sigmoid_scalar, Var};

use crate::data::CANVAS;
use crate::error::{contract, Result};
use crate::fusion::{EncoderOutput, FusionConfig};
use crate::nn::{conv3x3, dims4, fpn_combine, FpnParams, LinearParams};
use crate::objectives::{iou, BBox, Level};
use crate::params::{Bound, Builder};

pub const TOWER_DEPTH: usize = 4;
pub const DEFAULT_NMS_IOU: f64 = 0.6;

#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub fpn: FpnParams,
    pub tower: Vec<LinearParams>,
    pub box_out: LinearParams,
    pub centerness_out: LinearParams,
    pub region_out: LinearParams,
    pub levels: Vec<Level>,
}

/// Per-location head outputs concatenated over levels (level-major,
/// row-major inside a level).
pub struct HeadOutput {
    /// `[B, R, 4]` distances `(l, t, r, b)` in pixels.
    pub ltrb: Var,
    /// `[B, R]` centerness logits.
    pub centerness: Var,
    /// `[B, R, dt]` region features R_TA.
    pub regions: Var,
}

impl DetectionHead {
    pub fn new(b: &mut Builder, cfg: &FusionConfig, width: usize) -> Self {
        let mut s = b.sub("od_head");
        let levels = cfg
            .image
            .grid_sides()
            .into_iter()
            .zip(cfg.image.strides())
            .map(|(side, stride)| Level { side, stride })
            .collect();
        Self {
            fpn: FpnParams::new(&mut s, "fpn", &cfg.image.widths, width),
            tower: (0..TOWER_DEPTH).map(|i| LinearParams::new(&mut s, &format!("tower.{i}"), 9 * width, width)).collect(),
            box_out: LinearParams::new(&mut s, "box", width, 4),
            centerness_out: LinearParams::new(&mut s, "centerness", width, 1),
            region_out: LinearParams::new(&mut s, "region", width, cfg.text.width),
            levels,
        }
    }

    pub fn num_locations(&self) -> usize {
        self.levels.iter().map(|l| l.side * l.side).sum()
    }

    /// Runs the head over I_TA (finest scale first).
    pub fn forward(&self, p: &Bound, image_scales: &[Var]) -> Result<HeadOutput> {
        let pyramid = fpn_combine(&self.fpn, p, image_scales)?;
        let (mut ltrb, mut ctr, mut reg) = (Vec::new(), Vec::new(), Vec::new());
        for (x, level) in pyramid.iter().zip(&self.levels) {
            let (b, h, w, _) = dims4(x)?;
            if h != level.side || w != level.side {
                return Err(contract(format!("level grid {h}×{w} does not match configured side {}", level.side)));
            }
            let mut t = x.clone();
            for conv in &self.tower {
                t = conv3x3(conv, p, &t)?.gelu();
            }
            let r = h * w;
            ltrb.push(self.box_out.forward(p, &t)?.exp().scale(level.stride as f64).reshape(vec![b, r, 4])?);
            ctr.push(self.centerness_out.forward(p, &t)?.reshape(vec![b, r])?);
            reg.push(self.region_out.forward(p, &t)?.reshape(vec![b, r, self.region_out.d_out])?);
        }
        let cat = |v: Vec<Var>| -> Result<Var> { Ok(Var::concat(&v.iter().collect::<Vec<_>>(), 1)?) };
        Ok(HeadOutput {
            ltrb: cat(ltrb)?,
            centerness: cat(ctr)?,
            regions: cat(reg)?,
        })
    }

    /// Location centers in pixels, in output order.
    pub fn locations(&self) -> Vec<(f64, f64)> {
        self.levels.iter().flat_map(|l| l.locations().collect::<Vec<_>>()).collect()
    }
}

/// `S = R_TA · T_IAᵀ`: `[R, d] × [L, d] → [R, L]`, or batched `[B, R, L]`.
pub fn grounding_score(regions: &Var, tokens: &Var) -> Result<Var> {
    let (dr, dt) = (regions.shape().last(), tokens.shape().last());
    if dr != dt || regions.shape().len() != tokens.shape().len() {
        return Err(contract(format!("region features {:?} and token features {:?} differ in width", regions.shape(), tokens.shape())));
    }
    Ok(regions.matmul_t(tokens)?)
}

/// Greedy non-maximum suppression; returns kept indices in descending score
/// order. A box is suppressed when its IoU with a kept box is ≥ `iou_thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) < iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// One detection for one caption phrase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhraseDetection {
    pub span: (usize, usize),
    pub bbox: BBox,
    pub score: f64,
}

/// Scores every location for every phrase span of a single-image fused
/// encoding: `sigmoid(mean of S over the span) · sigmoid(centerness)`. Keeps
/// scores above `score_thresh`, applies NMS per phrase and returns the
/// survivors grouped by span, best first. Boxes are clipped to the canvas.
pub fn detect(head: &DetectionHead, p: &Bound, enc: &EncoderOutput, spans: &[(usize, usize)], score_thresh: f64, nms_iou: f64) -> Result<Vec<PhraseDetection>> {
    let f = enc.features().map_err(|_| contract("detect needs fused-mode encoder output"))?;
    if f.text_lengths.len() != 1 {
        return Err(contract(format!("detect works on one image at a time, got {}", f.text_lengths.len())));
    }
    let len = f.text_lengths[0];
    if spans.is_empty() || len <= 2 {
        return Err(contract("empty caption: nothing to ground"));
    }
    if let Some(s) = spans.iter().find(|(s, e)| s >= e || *e > len) {
        return Err(contract(format!("span {s:?} outside caption of {len} tokens")));
    }
    let out = head.forward(p, &f.image_scales)?;
    let r = head.num_locations();
    let l = f.text.shape()[1];
    let s = grounding_score(&out.regions, &f.text)?;
    let s = s.value().data();
    let ctr = out.centerness.value().data();
    let ltrb = out.ltrb.value().data();
    let locs = head.locations();
    let canvas = CANVAS as f64;
    let boxes: Vec<BBox> = (0..r)
        .map(|i| {
            let d = &ltrb[i * 4..i * 4 + 4];
            BBox::from_ltrb(locs[i].0, locs[i].1, [d[0], d[1], d[2], d[3]]).clip(canvas, canvas)
        })
        .collect();
    let mut result = Vec::new();
    for &(a, b) in spans {
        let scores: Vec<f64> = (0..r)
            .map(|i| {
                let mean = s[i * l + a..i * l + b].iter().sum::<f64>() / (b - a) as f64;
                sigmoid_scalar(mean) * sigmoid_scalar(ctr[i])
            })
            .collect();
        let cand: Vec<usize> = (0..r).filter(|&i| scores[i] > score_thresh && boxes[i].is_valid()).collect();
        let cb: Vec<BBox> = cand.iter().map(|&i| boxes[i]).collect();
        let cs: Vec<f64> = cand.iter().map(|&i| scores[i]).collect();
        for k in nms(&cb, &cs, nms_iou) {
            result.push(PhraseDetection {
                span: (a, b),
                bbox: cb[k],
                score: cs[k],
            });
        }
    }
    Ok(result)
}

/// Phrase spans of a detection prompt: maximal runs of tokens between
/// bos, periods and eos.
pub fn prompt_spans(ids: &[usize], period: usize) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &t) in ids.iter().enumerate() {
        let boundary = t == period || crate::data::Vocab::is_special(t);
        match (boundary, start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, ids.len()));
    }
    spans
}

/// Serialized detection: image id, box `[x1, y1, x2, y2]`, phrase span, score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub bbox: [f64; 4],
    pub span: [usize; 2],
    pub score: f64,
}

impl DetectionRecord {
    pub fn new(image_id: u64, d: &PhraseDetection) -> Self {
        Self {
            image_id,
            bbox: [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
            span: [d.span.0, d.span.1],
            score: d.score,
        }
    }
}

pub fn write_detections(mut w: impl Write, records: &[DetectionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| crate::error::Error::Data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
