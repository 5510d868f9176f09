//! Retrieval, grounding, detection and captioning metrics.

use std::collections::HashMap;

use crate::objectives::{iou, BBox};

/// Fraction of queries whose gold index is among the first `k` entries of
/// their ranking.
pub fn recall_at_k(rankings: &[Vec<usize>], gold: &[usize], k: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings.iter().zip(gold).filter(|(r, g)| r.iter().take(k).any(|i| i == *g)).count();
    hits as f64 / rankings.len() as f64
}

/// Phrase grounding Recall@1/5/10: a phrase is a hit at `k` if any of its
/// top-`k` boxes has IoU ≥ `iou_thresh` (inclusive) with its gold box.
pub fn grounding_recall(preds: &[Vec<BBox>], golds: &[BBox], iou_thresh: f64) -> [f64; 3] {
    let at = |k: usize| -> f64 {
        if preds.is_empty() {
            return 0.0;
        }
        let hits = preds
            .iter()
            .zip(golds)
            .filter(|(p, g)| p.iter().take(k).any(|b| iou(b, g) >= iou_thresh))
            .count();
        hits as f64 / preds.len() as f64
    };
    [at(1), at(5), at(10)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// All-point interpolated average precision. Predictions are matched in
/// descending score order to the best unmatched gold box of the same image.
pub fn average_precision(preds: &[Detection], golds: &[(usize, BBox)], iou_thresh: f64) -> f64 {
    if golds.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut by_image: HashMap<usize, Vec<usize>> = HashMap::new();
    for (gi, (img, _)) in golds.iter().enumerate() {
        by_image.entry(*img).or_default().push(gi);
    }
    let mut used = vec![false; golds.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(preds.len());
    for &pi in &order {
        let p = &preds[pi];
        let best = by_image
            .get(&p.image)
            .into_iter()
            .flatten()
            .filter(|&&gi| !used[gi])
            .map(|&gi| (gi, iou(&p.bbox, &golds[gi].1)))
            .filter(|(_, v)| *v >= iou_thresh)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((gi, _)) => {
                used[gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / golds.len() as f64, tp as f64 / (tp + fp) as f64));
    }
    // precision envelope, then area under the step curve
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..curve.len() {
        let envelope = curve[i..].iter().map(|c| c.1).fold(0.0, f64::max);
        ap += (curve[i].0 - prev_recall) * envelope;
        prev_recall = curve[i].0;
    }
    ap
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 with one reference per candidate, uniform weights, brevity
/// penalty and no smoothing.
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<String>]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngrams(r, n);
            for (g, count) in ngrams(c, n) {
                matched[n - 1] += count.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if total.contains(&0) || matched.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_p.exp()
}

/// Splits on whitespace for [`bleu4`].
pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}
