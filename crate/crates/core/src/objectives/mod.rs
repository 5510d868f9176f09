//! Training losses: image-text contrastive, masked language modeling,
//! image-text matching with hard negatives, word-region grounding, and the
//! box localization losses.

mod boxes;

pub use boxes::{bce_with_logits, centerness, giou, giou_loss, giou_loss_ltrb, iou, BBox};

use fiber_tensor::{Rng, Tensor, Var};

use crate::data::{MASK, PAD};
use crate::error::{contract, Result};

/// Initial logit scale `1/τ`.
pub const INITIAL_INV_TEMPERATURE: f64 = 14.3;
pub const MLM_RATE: f64 = 0.15;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
/// Center-sampling radius in strides.
pub const CENTER_RADIUS: f64 = 1.5;

/// `[N, N]` logits `exp(log_scale) · I·Tᵀ` from L2-normalized embeddings.
pub fn similarity_logits(images: &Var, texts: &Var, log_scale: &Var) -> Result<Var> {
    Ok(images.matmul_t(texts)?.mul(&log_scale.exp())?)
}

/// Mean cross-entropy of `[N, C]` logits against class indices.
pub fn cross_entropy(logits: &Var, targets: &[usize]) -> Result<Var> {
    let (n, c) = match logits.shape() {
        [n, c] if *n == targets.len() => (*n, *c),
        s => return Err(contract(format!("cross_entropy: logits {s:?} for {} targets", targets.len()))),
    };
    if let Some(t) = targets.iter().find(|&&t| t >= c) {
        return Err(contract(format!("target class {t} outside {c} classes")));
    }
    let onehot = Tensor::from_fn(vec![n, c], |i| if targets[i / c] == i % c { 1.0 } else { 0.0 });
    Ok(logits.log_softmax(1)?.mul(&Var::constant(onehot))?.sum_all().scale(-1.0 / n as f64))
}

/// Symmetric InfoNCE over `[N, N]` logits (similarities already divided by τ)
/// with the positives on the diagonal.
pub fn itc_loss(logits: &Var) -> Result<Var> {
    let n = match logits.shape() {
        [a, b] if a == b => *a,
        s => return Err(contract(format!("itc_loss expects a square matrix, got {s:?}"))),
    };
    if n < 2 {
        return Err(contract("itc_loss needs at least two pairs"));
    }
    let eye = Var::constant(Tensor::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 }));
    let i2t = logits.log_softmax(1)?.mul(&eye)?.sum_all();
    let t2i = logits.log_softmax(0)?.mul(&eye)?.sum_all();
    Ok(i2t.add(&t2i)?.scale(-0.5 / n as f64))
}

/// Corrupted inputs and reconstruction labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmBatch {
    pub inputs: Vec<Vec<usize>>,
    /// Original id at masked positions.
    pub labels: Vec<Vec<Option<usize>>>,
}

impl MlmBatch {
    pub fn masked_count(&self) -> usize {
        self.labels.iter().flatten().filter(|l| l.is_some()).count()
    }
}

/// Masks each non-special token with probability `rate`; a masked token is
/// replaced by the mask id (80%), a random word (10%) or kept (10%).
pub fn mask_tokens(ids: &[Vec<usize>], rng: &mut Rng, rate: f64, vocab_size: usize) -> MlmBatch {
    let first_word = MASK + 1;
    let mut inputs = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for seq in ids {
        let mut inp = seq.clone();
        let mut lab = vec![None; seq.len()];
        for (t, &id) in seq.iter().enumerate() {
            if id <= MASK || !rng.bernoulli(rate) {
                continue;
            }
            lab[t] = Some(id);
            let u = rng.uniform();
            if u < 0.8 {
                inp[t] = MASK;
            } else if u < 0.9 {
                inp[t] = first_word + rng.below(vocab_size - first_word);
            }
        }
        inputs.push(inp);
        labels.push(lab);
    }
    MlmBatch { inputs, labels }
}

/// A loss averaged over a possibly empty set of positions; an empty set
/// gives a constant zero and `count == 0`.
pub struct MaskedLoss {
    pub loss: Var,
    pub count: usize,
}

/// Mean cross-entropy over `[L, V]` logits at the labelled positions only.
pub fn mlm_loss(logits: &Var, labels: &[Option<usize>]) -> Result<MaskedLoss> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(contract(format!("mlm_loss: logits {:?} for {} labels", logits.shape(), labels.len())));
    }
    let (rows, targets): (Vec<usize>, Vec<usize>) = labels.iter().enumerate().filter_map(|(i, l)| l.map(|t| (i, t))).unzip();
    if rows.is_empty() {
        return Ok(MaskedLoss {
            loss: Var::constant(Tensor::scalar(0.0)),
            count: 0,
        });
    }
    Ok(MaskedLoss {
        loss: cross_entropy(&logits.select_rows(&rows)?, &targets)?,
        count: rows.len(),
    })
}

/// For each row of `[N, N]` logits, a negative column drawn from the softmax
/// over the off-diagonal entries. Use the transpose for the other direction.
pub fn sample_hard_negatives(logits: &Tensor, rng: &mut Rng) -> Result<Vec<usize>> {
    let n = match logits.shape() {
        [a, b] if a == b && *a >= 2 => *a,
        s => return Err(contract(format!("hard negatives need a square matrix with N ≥ 2, got {s:?}"))),
    };
    Ok((0..n)
        .map(|i| {
            let row = &logits.data()[i * n..(i + 1) * n];
            let max = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = row.iter().enumerate().map(|(j, v)| if j == i { 0.0 } else { (v - max).exp() }).collect();
            rng.categorical(&w)
        })
        .collect())
}

/// Binary matching loss over `[P, 2]` logits (class 1 = matched).
pub fn itm_loss(pair_logits: &Var, is_match: &[bool]) -> Result<Var> {
    let targets: Vec<usize> = is_match.iter().map(|&m| usize::from(m)).collect();
    cross_entropy(pair_logits, &targets)
}

/// Summed focal binary cross-entropy,
/// `−α(1−p)^γ log p` on positives and `−(1−α)p^γ log(1−p)` on negatives,
/// with per-entry `weights` (0 drops an entry).
pub fn focal_loss_sum(logits: &Var, targets: &Tensor, weights: &Tensor) -> Result<Var> {
    if targets.shape() != logits.shape() || weights.shape() != logits.shape() {
        return Err(contract(format!("focal loss: logits {:?}, targets {:?}, weights {:?}", logits.shape(), targets.shape(), weights.shape())));
    }
    let p = logits.sigmoid();
    let q = logits.neg().sigmoid();
    let pos = q.mul(&q)?.mul(&logits.neg().softplus())?.scale(FOCAL_ALPHA);
    let neg = p.mul(&p)?.mul(&logits.softplus())?.scale(1.0 - FOCAL_ALPHA);
    let pos_w = targets.mul(weights)?;
    let neg_w = targets.map(|t| 1.0 - t).mul(weights)?;
    Ok(pos.mul(&Var::constant(pos_w))?.add(&neg.mul(&Var::constant(neg_w))?)?.sum_all())
}

/// Positive-entry matrix `[R, L]` for one image: region `r` assigned to target
/// `k` is positive for every token in that target's span.
pub fn grounding_targets(assignment: &[Option<usize>], spans: &[(usize, usize)], len: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(vec![assignment.len(), len]);
    let data = t.data_mut();
    for (r, a) in assignment.iter().enumerate() {
        if let Some(k) = a {
            let (s, e) = *spans.get(*k).ok_or_else(|| contract(format!("region {r} assigned to missing target {k}")))?;
            if s >= e || e > len {
                return Err(contract(format!("span {s}..{e} outside {len} tokens")));
            }
            for tok in s..e {
                data[r * len + tok] = 1.0;
            }
        }
    }
    Ok(t)
}

/// Focal word-region alignment loss (sum) on grounding scores `S: [R, L]`.
/// Tokens at or beyond `text_len` (padding) are ignored.
pub fn grounding_loss(s: &Var, assignment: &[Option<usize>], spans: &[(usize, usize)], text_len: usize) -> Result<Var> {
    let (r, l) = match s.shape() {
        [r, l] => (*r, *l),
        sh => return Err(contract(format!("grounding scores must be [R, L], got {sh:?}"))),
    };
    if assignment.len() != r {
        return Err(contract(format!("{} assignments for {r} regions", assignment.len())));
    }
    let targets = grounding_targets(assignment, spans, l)?;
    let weights = Tensor::from_fn(vec![r, l], |i| if i % l < text_len { 1.0 } else { 0.0 });
    focal_loss_sum(s, &targets, &weights)
}

/// Binary cross-entropy between centerness logits and targets, mean over entries.
pub fn centerness_loss(logits: &Var, targets: &Tensor) -> Result<Var> {
    Ok(bce_with_logits(logits, targets)?.mean_all())
}

/// Geometry of one pyramid level: a `side × side` grid with cell `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Level {
    pub side: usize,
    pub stride: usize,
}

impl Level {
    pub fn locations(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let s = self.stride as f64;
        (0..self.side * self.side).map(move |i| (((i % self.side) as f64 + 0.5) * s, ((i / self.side) as f64 + 0.5) * s))
    }
}

/// Size range `[lo, hi)` of the boxes (by longer side) handled by each level:
/// boundaries at four strides of the finer level.
pub fn level_ranges(levels: &[Level]) -> Vec<(f64, f64)> {
    (0..levels.len())
        .map(|i| {
            let lo = if i == 0 { 0.0 } else { 4.0 * levels[i - 1].stride as f64 };
            let hi = if i + 1 == levels.len() { f64::INFINITY } else { 4.0 * levels[i].stride as f64 };
            (lo, hi)
        })
        .collect()
}

/// Location-to-target assignment over the concatenated levels (level-major,
/// row-major within a level).
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub targets: Vec<Option<usize>>,
}

impl Assignment {
    pub fn positives(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Center sampling: a location is positive for a box if it lies inside it,
/// within `radius · stride` (per axis) of its center, and on the level whose
/// size range holds the box's longer side. Overlaps go to the smaller box. A
/// box left without locations takes the nearest location inside it on its
/// level.
pub fn assign_targets(levels: &[Level], boxes: &[BBox], radius: f64) -> Assignment {
    let ranges = level_ranges(levels);
    let total: usize = levels.iter().map(|l| l.side * l.side).sum();
    let mut assigned: Vec<Option<usize>> = vec![None; total];
    let level_of = |b: &BBox| -> usize {
        let side = b.width().max(b.height());
        ranges.iter().position(|(lo, hi)| side >= *lo && side < *hi).unwrap_or(levels.len() - 1)
    };
    let better = |cur: Option<usize>, cand: usize| -> bool {
        match cur {
            None => true,
            Some(c) => boxes[cand].area() < boxes[c].area() || (boxes[cand].area() == boxes[c].area() && cand < c),
        }
    };
    let mut offset = 0;
    let mut offsets = Vec::with_capacity(levels.len());
    for (li, level) in levels.iter().enumerate() {
        offsets.push(offset);
        let reach = radius * level.stride as f64;
        for (i, (x, y)) in level.locations().enumerate() {
            for (k, b) in boxes.iter().enumerate() {
                if level_of(b) != li || !b.contains(x, y) {
                    continue;
                }
                let (cx, cy) = b.center();
                if (x - cx).abs() <= reach && (y - cy).abs() <= reach && better(assigned[offset + i], k) {
                    assigned[offset + i] = Some(k);
                }
            }
        }
        offset += level.side * level.side;
    }
    for (k, b) in boxes.iter().enumerate() {
        if assigned.contains(&Some(k)) {
            continue;
        }
        let li = level_of(b);
        let (cx, cy) = b.center();
        let nearest = levels[li]
            .locations()
            .enumerate()
            .filter(|(_, (x, y))| b.contains(*x, *y))
            .map(|(i, (x, y))| (i, (x - cx).powi(2) + (y - cy).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(i, _)| offsets[li] + i);
        if let Some(i) = nearest {
            if better(assigned[i], k) {
                assigned[i] = Some(k);
            }
        }
    }
    Assignment { targets: assigned }
}

/// Location centers of every level, concatenated like [`Assignment`].
pub fn all_locations(levels: &[Level]) -> Vec<(f64, f64, usize)> {
    levels.iter().flat_map(|l| l.locations().map(move |(x, y)| (x, y, l.stride))).collect()
}

/// Drops pad ids from a token-length count.
pub fn valid_length(ids: &[usize]) -> usize {
    ids.iter().take_while(|&&t| t != PAD).count()
}
