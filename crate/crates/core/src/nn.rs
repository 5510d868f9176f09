//! Parameterized building blocks: linear maps, layer norm, multi-head
//! attention, feed-forward, shifted-window attention, patch merging, 3×3
//! convolution and the feature pyramid.
//!
//! Sequences are `[batch, length, width]`; image grids are
//! `[batch, height, width, channels]`. Attention masks are additive constant
//! tensors holding `0` (keep) or `-inf` (drop) whose shape is a suffix of the
//! score shape `[heads, batch, queries, keys]`.

use fiber_tensor::{Tensor, Var, LAYER_NORM_EPS};

use crate::error::{contract, Result};
use crate::params::{Bound, Builder, ParamId};

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearParams {
    /// Xavier-uniform weight (`d_out × d_in`) and zero bias.
    pub fn new(b: &mut Builder, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = b.sub(name);
        let weight = s.xavier("weight", d_out, d_in);
        let bias = s.zeros("bias", vec![d_out]);
        Self { weight, bias, d_in, d_out }
    }

    /// `x · Wᵀ + b` over the last axis; a vector is treated as one row.
    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        if x.shape().len() == 1 {
            let row = x.reshape(vec![1, x.shape()[0]])?;
            return Ok(self.forward(p, &row)?.reshape(vec![self.d_out])?);
        }
        Ok(x.matmul_t(&p[self.weight])?.add(&p[self.bias])?)
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl NormParams {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let mut s = b.sub(name);
        let gain = s.ones("gain", vec![dim]);
        let bias = s.zeros("bias", vec![dim]);
        Self { gain, bias, dim }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        Ok(x.layer_norm(&p[self.gain], &p[self.bias], LAYER_NORM_EPS)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
    pub heads: usize,
}

impl AttentionParams {
    /// Queries live in `d_model`; keys and values are projected from `d_kv`.
    pub fn new(b: &mut Builder, name: &str, d_model: usize, d_kv: usize, heads: usize) -> Self {
        assert!(heads > 0 && d_model.is_multiple_of(heads), "width {d_model} not divisible by {heads} heads");
        let mut s = b.sub(name);
        Self {
            q: LinearParams::new(&mut s, "q", d_model, d_model),
            k: LinearParams::new(&mut s, "k", d_kv, d_model),
            v: LinearParams::new(&mut s, "v", d_kv, d_model),
            o: LinearParams::new(&mut s, "o", d_model, d_model),
            heads,
        }
    }

    pub fn d_model(&self) -> usize {
        self.q.d_out
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params() + self.k.num_params() + self.v.num_params() + self.o.num_params()
    }
}

fn check_mask_rows(mask: &Tensor) -> Result<()> {
    let lk = *mask.shape().last().unwrap_or(&0);
    if lk == 0 {
        return Err(contract("attention mask has no keys"));
    }
    for (r, row) in mask.data().chunks(lk).enumerate() {
        if row.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(contract(format!("attention row {r} is fully masked")));
        }
    }
    Ok(())
}

/// Scaled dot-product attention on already-projected `[B, L, d]` tensors,
/// split into `heads` heads of width `d / heads`.
pub fn attend(q: &Var, k: &Var, v: &Var, heads: usize, mask: Option<&Tensor>) -> Result<Var> {
    let (b, lq, d) = dims3(q)?;
    let (bk, lk, dk) = dims3(k)?;
    if bk != b || dk != d || v.shape() != k.shape() {
        return Err(fiber_tensor::TensorError::InvalidShape {
            op: "attend",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        }
        .into());
    }
    if let Some(m) = mask {
        check_mask_rows(m)?;
    }
    let dh = d / heads;
    let split = |x: &Var, l: usize| -> Result<Var> { Ok(x.reshape(vec![b, l, heads, dh])?.permute(&[2, 0, 1, 3])?) };
    let qh = split(q, lq)?;
    let kh = split(k, lk)?;
    let vh = split(v, lk)?;
    let mut scores = qh.matmul_t(&kh)?.scale(1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        scores = scores.add(&Var::constant(m.clone()))?;
    }
    let probs = scores.softmax(3)?;
    let out = probs.matmul(&vh)?;
    Ok(out.permute(&[1, 2, 0, 3])?.reshape(vec![b, lq, d])?)
}

pub(crate) fn dims3(x: &Var) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(contract(format!("expected a [batch, length, width] tensor, got {s:?}"))),
    }
}

pub(crate) fn dims4(x: &Var) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(contract(format!("expected a [batch, height, width, channels] grid, got {s:?}"))),
    }
}

/// Multi-head attention: self-attention when `q_src` and `kv_src` are the
/// same sequence, cross-attention otherwise.
pub fn multi_head_attention(p: &AttentionParams, bound: &Bound, q_src: &Var, kv_src: &Var, mask: Option<&Tensor>) -> Result<Var> {
    let q = p.q.forward(bound, q_src)?;
    let k = p.k.forward(bound, kv_src)?;
    let v = p.v.forward(bound, kv_src)?;
    p.o.forward(bound, &attend(&q, &k, &v, p.heads, mask)?)
}

/// `[B, Lq, Lk]` mask dropping keys at or beyond each sequence's length.
pub fn key_padding_mask(lengths: &[usize], lq: usize, lk: usize) -> Tensor {
    let b = lengths.len();
    Tensor::from_fn(vec![b, lq, lk], |i| {
        let key = i % lk;
        let batch = i / (lq * lk);
        if key < lengths[batch] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// `[L, L]` lower-triangular mask: position `t` sees keys `0..=t`.
pub fn causal_mask(len: usize) -> Tensor {
    Tensor::from_fn(vec![len, len], |i| if i % len <= i / len { 0.0 } else { f64::NEG_INFINITY })
}

/// Elementwise sum of two masks under the crate's broadcast rule.
pub fn combine_masks(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.add(b)?)
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

/// Hidden expansion factor of the feed-forward block.
pub const FFN_EXPANSION: usize = 4;

impl FfnParams {
    pub fn new(b: &mut Builder, name: &str, d: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            fc1: LinearParams::new(&mut s, "fc1", d, FFN_EXPANSION * d),
            fc2: LinearParams::new(&mut s, "fc2", FFN_EXPANSION * d, d),
        }
    }

    /// linear → GELU → linear.
    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        self.fc2.forward(p, &self.fc1.forward(p, x)?.gelu())
    }
}

/// Window geometry for one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    /// Window side in grid cells.
    pub window: usize,
    /// Cyclic shift, `0` or `window / 2`.
    pub shift: usize,
}

impl WindowConfig {
    /// A grid no larger than the window is attended as a single unshifted
    /// window.
    pub fn effective(&self, h: usize, w: usize) -> WindowConfig {
        let side = h.min(w);
        if side <= self.window {
            WindowConfig { window: side, shift: 0 }
        } else {
            *self
        }
    }

    fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.window == 0 || !h.is_multiple_of(self.window) || !w.is_multiple_of(self.window) || self.shift >= self.window {
            return Err(fiber_tensor::TensorError::InvalidShape {
                op: "window_attention",
                lhs: vec![h, w],
                rhs: vec![self.window, self.shift],
            }
            .into());
        }
        Ok(())
    }
}

/// Row indices gathering a flattened `[B·H·W, d]` grid into window order
/// `[B, windows_y, windows_x, w, w]` after rolling the grid by `(-shift, -shift)`.
pub fn window_partition_index(batch: usize, h: usize, w: usize, cfg: WindowConfig) -> Vec<usize> {
    let (win, s) = (cfg.window, cfg.shift);
    let mut idx = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for wy in 0..h / win {
            for wx in 0..w / win {
                for iy in 0..win {
                    for ix in 0..win {
                        let y = (wy * win + iy + s) % h;
                        let x = (wx * win + ix + s) % w;
                        idx.push((b * h + y) * w + x);
                    }
                }
            }
        }
    }
    idx
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `[windows, w², w²]` mask for a shifted partition: after the roll, tokens
/// that wrapped around the border share a window with tokens they were not
/// adjacent to, and may not attend to them.
pub fn shift_window_mask(h: usize, w: usize, cfg: WindowConfig) -> Tensor {
    let (win, s) = (cfg.window, cfg.shift);
    let label = |r: usize, ext: usize| -> usize {
        if r < ext - win {
            0
        } else if r < ext - s {
            1
        } else {
            2
        }
    };
    let (ny, nx) = (h / win, w / win);
    let t = win * win;
    let mut data = Vec::with_capacity(ny * nx * t * t);
    for wy in 0..ny {
        for wx in 0..nx {
            let labels: Vec<(usize, usize)> = (0..t)
                .map(|i| (label(wy * win + i / win, h), label(wx * win + i % win, w)))
                .collect();
            for a in 0..t {
                for bb in 0..t {
                    data.push(if labels[a] == labels[bb] { 0.0 } else { f64::NEG_INFINITY });
                }
            }
        }
    }
    Tensor::new(vec![ny * nx, t, t], data).expect("mask shape")
}

/// Extra key/value tokens appended to every window (merged attention).
pub struct ExtraKeys<'a> {
    /// Projected keys `[B, Le, d]`.
    pub k: &'a Var,
    /// Projected values `[B, Le, d]`.
    pub v: &'a Var,
    /// Per-sequence valid lengths of the extra tokens.
    pub lengths: &'a [usize],
}

/// Self-attention confined to (optionally shifted) windows of the grid.
pub fn window_attention(cfg: WindowConfig, p: &AttentionParams, bound: &Bound, grid: &Var) -> Result<Var> {
    window_attention_ext(cfg, p, bound, grid, None)
}

/// [`window_attention`] with optional extra keys visible from every window.
pub fn window_attention_ext(cfg: WindowConfig, p: &AttentionParams, bound: &Bound, grid: &Var, extra: Option<ExtraKeys>) -> Result<Var> {
    let (b, h, w, d) = dims4(grid)?;
    cfg.validate(h, w)?;
    let win = cfg.window;
    let nwin = (h / win) * (w / win);
    let t = win * win;
    let perm = window_partition_index(b, h, w, cfg);
    let flat = grid.reshape(vec![b * h * w, d])?;
    let windows = flat.select_rows(&perm)?.reshape(vec![b * nwin, t, d])?;
    let q = p.q.forward(bound, &windows)?;
    let mut k = p.k.forward(bound, &windows)?;
    let mut v = p.v.forward(bound, &windows)?;

    let mut mask = if cfg.shift > 0 {
        let m = shift_window_mask(h, w, cfg);
        Some(Tensor::concat(&vec![&m; b], 0)?)
    } else {
        None
    };
    if let Some(extra) = extra {
        let le = extra.k.shape()[1];
        let rep: Vec<usize> = (0..b).flat_map(|bi| std::iter::repeat_n(bi, nwin)).collect();
        k = Var::concat(&[&k, &extra.k.select_rows(&rep)?], 1)?;
        v = Var::concat(&[&v, &extra.v.select_rows(&rep)?], 1)?;
        let own = mask.unwrap_or_else(|| Tensor::zeros(vec![b * nwin, t, t]));
        let lens: Vec<usize> = rep.iter().map(|&bi| extra.lengths[bi]).collect();
        let pad = key_padding_mask(&lens, t, le);
        mask = Some(Tensor::concat(&[&own, &pad], 2)?);
    }
    let out = attend(&q, &k, &v, p.heads, mask.as_ref())?;
    let out = p.o.forward(bound, &out)?.reshape(vec![b * h * w, d])?;
    Ok(out.select_rows(&invert(&perm))?.reshape(vec![b, h, w, d])?)
}

/// Concatenates each 2×2 neighbourhood (row-major sub-pixel order
/// `(0,0), (1,0), (0,1), (1,1)`) and projects `4d → 2d`.
pub fn patch_merging(p: &LinearParams, bound: &Bound, grid: &Var) -> Result<Var> {
    let (b, h, w, d) = dims4(grid)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(fiber_tensor::TensorError::InvalidShape {
            op: "patch_merging",
            lhs: grid.shape().to_vec(),
            rhs: vec![2, 2],
        }
        .into());
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for y in 0..h2 {
            for x in 0..w2 {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    idx.push((bi * h + 2 * y + dy) * w + 2 * x + dx);
                }
            }
        }
    }
    let merged = grid.reshape(vec![b * h * w, d])?.select_rows(&idx)?.reshape(vec![b, h2, w2, 4 * d])?;
    p.forward(bound, &merged)
}

/// Zero-padded 3×3 convolution as a sliding-window matmul; the weight is
/// `d_out × 9·d_in` with offsets `(dy, dx)` in row-major order over `-1..=1`.
pub fn conv3x3(p: &LinearParams, bound: &Bound, x: &Var) -> Result<Var> {
    let (b, h, w, c) = dims4(x)?;
    if p.d_in != 9 * c {
        return Err(contract(format!("conv3x3 expects {} input channels, got {c}", p.d_in / 9)));
    }
    let mut idx = Vec::with_capacity(b * h * w * 9);
    for bi in 0..b {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (sy, sx) = (y + dy, xx + dx);
                        idx.push(if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            Some((bi * h + sy as usize) * w + sx as usize)
                        } else {
                            None
                        });
                    }
                }
            }
        }
    }
    let cols = x.reshape(vec![b * h * w, c])?.gather_rows(&idx)?.reshape(vec![b, h, w, 9 * c])?;
    p.forward(bound, &cols)
}

/// Nearest-neighbour 2× upsampling of a grid.
pub fn upsample2(x: &Var) -> Result<Var> {
    let (b, h, w, c) = dims4(x)?;
    let mut idx = Vec::with_capacity(b * h * w * 4);
    for bi in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                idx.push((bi * h + y / 2) * w + xx / 2);
            }
        }
    }
    Ok(x.reshape(vec![b * h * w, c])?.select_rows(&idx)?.reshape(vec![b, 2 * h, 2 * w, c])?)
}

#[derive(Debug, Clone)]
pub struct FpnParams {
    pub lateral: Vec<LinearParams>,
    pub smooth: Vec<LinearParams>,
    pub width: usize,
}

impl FpnParams {
    pub fn new(b: &mut Builder, name: &str, in_widths: &[usize], width: usize) -> Self {
        let mut s = b.sub(name);
        let lateral = in_widths
            .iter()
            .enumerate()
            .map(|(i, &d)| LinearParams::new(&mut s, &format!("lateral.{i}"), d, width))
            .collect();
        let smooth = (0..in_widths.len())
            .map(|i| LinearParams::new(&mut s, &format!("smooth.{i}"), 9 * width, width))
            .collect();
        Self { lateral, smooth, width }
    }
}

/// Lateral 1×1 projections, a top-down pathway adding the upsampled coarser
/// level, and a 3×3 smoothing convolution per level. `features` run from
/// finest to coarsest; each level must halve the previous resolution.
pub fn fpn_combine(p: &FpnParams, bound: &Bound, features: &[Var]) -> Result<Vec<Var>> {
    if features.is_empty() || features.len() != p.lateral.len() {
        return Err(contract(format!("fpn expects {} levels, got {}", p.lateral.len(), features.len())));
    }
    for pair in features.windows(2) {
        let (_, h0, w0, _) = dims4(&pair[0])?;
        let (_, h1, w1, _) = dims4(&pair[1])?;
        if h0 != 2 * h1 || w0 != 2 * w1 {
            return Err(fiber_tensor::TensorError::InvalidShape {
                op: "fpn_combine",
                lhs: pair[0].shape().to_vec(),
                rhs: pair[1].shape().to_vec(),
            }
            .into());
        }
    }
    let laterals: Vec<Var> = features
        .iter()
        .zip(&p.lateral)
        .map(|(f, l)| l.forward(bound, f))
        .collect::<Result<_>>()?;
    let n = laterals.len();
    let mut merged: Vec<Var> = vec![laterals[n - 1].clone()];
    for i in (0..n - 1).rev() {
        let up = upsample2(merged.last().expect("non-empty"))?;
        merged.push(laterals[i].add(&up)?);
    }
    merged.reverse();
    merged.iter().zip(&p.smooth).map(|(m, s)| conv3x3(s, bound, m)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Group, ParamStore};

    #[test]
    fn fully_masked_row_is_rejected() {
        let q = Var::constant(Tensor::zeros(vec![1, 2, 4]));
        let mut m = Tensor::zeros(vec![1, 2, 2]);
        m.data_mut()[2] = f64::NEG_INFINITY;
        m.data_mut()[3] = f64::NEG_INFINITY;
        assert!(attend(&q, &q, &q, 2, Some(&m)).is_err());
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut Builder::new(&mut store, 0, Group::Backbone), "a", 4, 4, 1);
        let bound = store.bind(None);
        let g = Var::constant(Tensor::zeros(vec![1, 6, 6, 4]));
        let cfg = WindowConfig { window: 4, shift: 0 };
        assert!(window_attention(cfg, &p, &bound, &g).is_err());
    }

    #[test]
    fn odd_grid_cannot_merge() {
        let mut store = ParamStore::new();
        let p = LinearParams::new(&mut Builder::new(&mut store, 0, Group::Backbone), "m", 8, 4);
        let bound = store.bind(None);
        let g = Var::constant(Tensor::zeros(vec![1, 3, 2, 2]));
        assert!(patch_merging(&p, &bound, &g).is_err());
    }

    #[test]
    fn non_halving_pyramid_is_rejected() {
        let mut store = ParamStore::new();
        let p = FpnParams::new(&mut Builder::new(&mut store, 0, Group::Head), "fpn", &[2, 2], 2);
        let bound = store.bind(None);
        let a = Var::constant(Tensor::zeros(vec![1, 4, 4, 2]));
        let b = Var::constant(Tensor::zeros(vec![1, 4, 4, 2]));
        assert!(fpn_combine(&p, &bound, &[a, b]).is_err());
    }

    #[test]
    fn effective_window_collapses_small_grids() {
        let cfg = WindowConfig { window: 4, shift: 2 };
        assert_eq!(cfg.effective(2, 2), WindowConfig { window: 2, shift: 0 });
        assert_eq!(cfg.effective(8, 8), cfg);
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = causal_mask(3);
        assert_eq!(m.at(&[0, 0]), 0.0);
        assert_eq!(m.at(&[0, 1]), f64::NEG_INFINITY);
        assert_eq!(m.at(&[2, 1]), 0.0);
    }
}
