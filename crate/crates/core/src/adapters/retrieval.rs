//! Dual-encoder retrieval, fusion re-ranking of a top-k shortlist, and full
//! score ensembling.

use fiber_tensor::{Tensor, Var};

use super::ItmHead;
use crate::error::{contract, Result};
use crate::fusion::{Backbone, Streams, TextBatch};
use crate::params::ParamStore;

/// Indices sorted by descending score, ties to the lower index.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn rows(m: &Tensor) -> Result<(usize, usize)> {
    match m.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(contract(format!("expected a score matrix, got {s:?}"))),
    }
}

/// Top-k lists in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct DualRetrieval {
    /// Per image: `(text, score)` best first.
    pub i2t: Vec<Vec<(usize, f64)>>,
    /// Per text: `(image, score)` best first.
    pub t2i: Vec<Vec<(usize, f64)>>,
    /// Dual similarity matrix `[n, m]`.
    pub scores: Tensor,
    /// Set when `k` exceeded a corpus size and was clamped.
    pub clamped: bool,
}

/// Cosine retrieval between L2-normalized image rows `[n, d]` and text rows
/// `[m, d]`.
pub fn retrieve_dual(images: &Tensor, texts: &Tensor, k: usize) -> Result<DualRetrieval> {
    let scores = images.matmul(&texts.transpose()?)?;
    let (n, m) = rows(&scores)?;
    let top = |row: &[f64], k: usize| -> Vec<(usize, f64)> { rank_desc(row).into_iter().take(k).map(|j| (j, row[j])).collect() };
    let i2t = (0..n).map(|i| top(&scores.data()[i * m..(i + 1) * m], k.min(m))).collect();
    let st = scores.transpose()?;
    let t2i = (0..m).map(|j| top(&st.data()[j * n..(j + 1) * n], k.min(n))).collect();
    Ok(DualRetrieval {
        i2t,
        t2i,
        clamped: k > n.min(m),
        scores,
    })
}

/// Re-ranks each query's dual top-`k` by `dual + fusion`. The re-scored
/// candidates come first, ordered by the sum with ties to the lower index;
/// the rest follow in dual order. `fusion` receives every
/// `(query, candidate)` pair that needs a score.
pub fn rerank_topk(dual: &Tensor, k: usize, mut fusion: impl FnMut(&[(usize, usize)]) -> Result<Vec<f64>>) -> Result<Vec<Vec<usize>>> {
    let (q, c) = rows(dual)?;
    let k = k.min(c);
    let base: Vec<Vec<usize>> = (0..q).map(|i| rank_desc(&dual.data()[i * c..(i + 1) * c])).collect();
    let pairs: Vec<(usize, usize)> = base.iter().enumerate().flat_map(|(i, r)| r[..k].iter().map(move |&j| (i, j))).collect();
    let fused = if pairs.is_empty() { Vec::new() } else { fusion(&pairs)? };
    if fused.len() != pairs.len() {
        return Err(contract(format!("fusion scorer returned {} scores for {} pairs", fused.len(), pairs.len())));
    }
    Ok(base
        .into_iter()
        .enumerate()
        .map(|(i, ranking)| {
            let head = &ranking[..k];
            let mut ranked: Vec<(usize, f64)> = head.iter().enumerate().map(|(t, &j)| (j, dual.data()[i * c + j] + fused[i * k + t])).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut out: Vec<usize> = ranked.into_iter().map(|(j, _)| j).collect();
            out.extend_from_slice(&ranking[k..]);
            out
        })
        .collect())
}

/// Ranks every candidate of every query by `dual + fusion`.
pub fn ensemble_rank(dual: &Tensor, fusion: &Tensor) -> Result<Vec<Vec<usize>>> {
    if dual.shape() != fusion.shape() {
        return Err(fiber_tensor::TensorError::InvalidShape {
            op: "ensemble_rank",
            lhs: dual.shape().to_vec(),
            rhs: fusion.shape().to_vec(),
        }
        .into());
    }
    let sum = dual.add(fusion)?;
    let (q, c) = rows(&sum)?;
    Ok((0..q).map(|i| rank_desc(&sum.data()[i * c..(i + 1) * c])).collect())
}

/// Lower-layer outputs of a corpus, kept as plain tensors so they can be
/// shared across scoring threads.
pub struct CorpusCache {
    text: Tensor,
    text_lengths: Vec<usize>,
    lower_scales: Vec<Tensor>,
    image: Tensor,
}

impl CorpusCache {
    pub fn build(bb: &Backbone, store: &ParamStore, images: &Tensor, texts: &TextBatch) -> Result<Self> {
        let p = store.bind(None);
        let (text, text_lengths) = bb.text_lower(&p, texts)?;
        let (scales, image) = bb.image_lower(&p, images)?;
        Ok(Self {
            text: text.into_value(),
            text_lengths,
            lower_scales: scales.into_iter().map(Var::into_value).collect(),
            image: image.into_value(),
        })
    }

    fn streams(&self) -> Streams {
        Streams {
            text: Var::constant(self.text.clone()),
            text_lengths: self.text_lengths.clone(),
            lower_scales: self.lower_scales.iter().cloned().map(Var::constant).collect(),
            image: Var::constant(self.image.clone()),
        }
    }
}

/// Pairs scored per fused forward call.
pub const PAIR_CHUNK: usize = 32;

/// ITM log-odds of `(image, text)` pairs through the fused top layers,
/// reusing the cached lower layers. Counts one fused pass per pair.
pub fn fused_pair_scores(bb: &Backbone, itm: &ItmHead, store: &ParamStore, cache: &CorpusCache, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    #[cfg(feature = "parallel")]
    return fused_pair_scores_parallel(bb, itm, store, cache, pairs);
    #[cfg(not(feature = "parallel"))]
    fused_pair_scores_sequential(bb, itm, store, cache, pairs)
}

fn score_chunk(bb: &Backbone, itm: &ItmHead, store: &ParamStore, cache: &CorpusCache, chunk: &[(usize, usize)]) -> Result<Vec<f64>> {
    let p = store.bind(None);
    let (i_idx, t_idx): (Vec<usize>, Vec<usize>) = chunk.iter().copied().unzip();
    let f = bb.upper(&p, &cache.streams().pair(&t_idx, &i_idx)?, true)?;
    itm.log_odds(&p, &f)
}

fn collect_chunks(bb: &Backbone, n: usize, chunks: Vec<Result<Vec<f64>>>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    bb.count_fused(n);
    Ok(out)
}

pub fn fused_pair_scores_sequential(bb: &Backbone, itm: &ItmHead, store: &ParamStore, cache: &CorpusCache, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    let chunks = pairs.chunks(PAIR_CHUNK).map(|c| score_chunk(bb, itm, store, cache, c)).collect();
    collect_chunks(bb, pairs.len(), chunks)
}

/// Scores chunks on the rayon pool; bit-identical to the sequential path.
#[cfg(feature = "parallel")]
pub fn fused_pair_scores_parallel(bb: &Backbone, itm: &ItmHead, store: &ParamStore, cache: &CorpusCache, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let chunks = pairs.par_chunks(PAIR_CHUNK).map(|c| score_chunk(bb, itm, store, cache, c)).collect();
    collect_chunks(bb, pairs.len(), chunks)
}
