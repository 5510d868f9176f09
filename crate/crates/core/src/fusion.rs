//! Fusion in the backbone.
//!
//! A text transformer and a windowed hierarchical image transformer run side
//! by side. The top `fused_layers` blocks of the text backbone and of the last
//! image stage are paired; in fused mode each pair exchanges information
//! through cross-attention (or merged attention), in dual mode the pair runs as
//! two independent uni-modal blocks. With the gated strategy a layer computes
//!
//! ```text
//! x̃ = SelfAtt(LN(x))
//! x = x + x̃ + α · CrossAtt(x̃, LN_y(y))
//! x = x + FFN(LN(x))
//! ```
//!
//! where `y` is the other modality's input to the same layer and `α` is a
//! learnable scalar per direction, initialized to `alpha_init` (0 by default).
//! At `α = 0` fused features equal dual features exactly.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use fiber_tensor::{Tensor, Var};

use crate::error::{contract, Error, Result};
use crate::nn::{
    dims3, dims4, key_padding_mask, multi_head_attention, patch_merging, window_attention, window_attention_ext,
    AttentionParams, ExtraKeys, FfnParams, LinearParams, NormParams, WindowConfig,
};
use crate::params::{Bound, Builder, Group, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    MergedAttention,
    CoAttentionUngated,
    CoAttentionGated,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::MergedAttention, Strategy::CoAttentionUngated, Strategy::CoAttentionGated];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::MergedAttention => "merged_attention",
            Strategy::CoAttentionUngated => "co_attention_ungated",
            Strategy::CoAttentionGated => "co_attention_gated",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Cross-modal blocks switched off; modalities encoded independently.
    Dual,
    /// Cross-modal blocks active in the top layers.
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageConfig {
    pub size: usize,
    pub patch: usize,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
}

impl ImageConfig {
    pub const CHANNELS: usize = 3;

    /// Grid side of each stage.
    pub fn grid_sides(&self) -> Vec<usize> {
        let g0 = self.size / self.patch;
        (0..self.widths.len()).map(|s| g0 >> s).collect()
    }

    pub fn strides(&self) -> Vec<usize> {
        (0..self.widths.len()).map(|s| self.patch << s).collect()
    }

    pub fn top_width(&self) -> usize {
        *self.widths.last().expect("at least one stage")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub strategy: Strategy,
    /// Number of fused layers `M` per backbone.
    pub fused_layers: usize,
    pub text: TextConfig,
    pub image: ImageConfig,
    /// Width of the shared dual-encoder embedding space.
    pub embed_dim: usize,
    pub alpha_init: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::CoAttentionGated,
            fused_layers: 2,
            text: TextConfig {
                vocab_size: crate::data::Vocab::builtin().len(),
                width: 64,
                depth: 6,
                heads: 4,
                max_len: 24,
            },
            image: ImageConfig {
                size: 64,
                patch: 4,
                widths: vec![32, 64, 128],
                depths: vec![2, 2, 2],
                heads: vec![2, 4, 8],
                window: 4,
            },
            embed_dim: 64,
            alpha_init: 0.0,
        }
    }
}

impl FusionConfig {
    /// A reduced architecture (8-pixel patches, narrower widths, 4 text
    /// layers, one fused layer) used for fast training runs.
    pub fn compact() -> Self {
        Self {
            strategy: Strategy::CoAttentionGated,
            fused_layers: 1,
            text: TextConfig {
                vocab_size: crate::data::Vocab::builtin().len(),
                width: 32,
                depth: 4,
                heads: 2,
                max_len: 24,
            },
            image: ImageConfig {
                size: 64,
                patch: 8,
                widths: vec![16, 32, 64],
                depths: vec![2, 2, 2],
                heads: vec![1, 2, 4],
                window: 4,
            },
            embed_dim: 32,
            alpha_init: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let im = &self.image;
        if im.widths.is_empty() || im.widths.len() != im.depths.len() || im.widths.len() != im.heads.len() {
            return bad("image widths, depths and heads must have equal non-zero length".into());
        }
        if im.patch == 0 || !im.size.is_multiple_of(im.patch) {
            return bad(format!("image size {} not divisible by patch {}", im.size, im.patch));
        }
        let g0 = im.size / im.patch;
        if !g0.is_multiple_of(1 << (im.widths.len() - 1)) {
            return bad(format!("grid side {g0} cannot be halved {} times", im.widths.len() - 1));
        }
        for (s, side) in im.grid_sides().into_iter().enumerate() {
            let eff = WindowConfig { window: im.window, shift: im.window / 2 }.effective(side, side);
            if side % eff.window != 0 {
                return bad(format!("stage {s} grid {side} not divisible by window {}", im.window));
            }
            if !im.widths[s].is_multiple_of(im.heads[s]) {
                return bad(format!("stage {s} width not divisible by heads"));
            }
            if s > 0 && im.widths[s] != 2 * im.widths[s - 1] {
                return bad("each image stage must double the previous width".into());
            }
        }
        if !self.text.width.is_multiple_of(self.text.heads) {
            return bad("text width not divisible by heads".into());
        }
        let top_depth = *im.depths.last().expect("validated");
        if self.fused_layers > self.text.depth.min(top_depth) {
            return bad(format!(
                "fused_layers {} exceeds min(text depth {}, top image stage depth {top_depth})",
                self.fused_layers, self.text.depth
            ));
        }
        if self.text.max_len < 2 || self.text.vocab_size < 5 {
            return bad("text max_len must be ≥ 2 and vocab ≥ 5".into());
        }
        Ok(())
    }

    fn window_for(&self, stage: usize, block: usize) -> WindowConfig {
        let side = self.image.grid_sides()[stage];
        let shift = if block % 2 == 1 { self.image.window / 2 } else { 0 };
        WindowConfig { window: self.image.window, shift }.effective(side, side)
    }
}

/// Parameters added by fusion, counted analytically from the configuration.
pub fn count_fusion_params(cfg: &FusionConfig) -> usize {
    let dt = cfg.text.width;
    let di = cfg.image.top_width();
    let per_direction = |dc: usize, dp: usize| -> usize {
        match cfg.strategy {
            Strategy::CoAttentionGated | Strategy::CoAttentionUngated => {
                let gate = usize::from(cfg.strategy == Strategy::CoAttentionGated);
                // q, o: dc×dc; k, v: dc×dp; four biases; producer norm; gate
                2 * dc * dc + 2 * dc * dp + 4 * dc + 2 * dp + gate
            }
            // extra k, v for the other modality's tokens plus its norm
            Strategy::MergedAttention => 2 * dc * dp + 2 * dc + 2 * dp,
        }
    };
    cfg.fused_layers * (per_direction(dt, di) + per_direction(di, dt))
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub norm1: NormParams,
    pub attn: AttentionParams,
    pub norm2: NormParams,
    pub ffn: FfnParams,
}

impl Block {
    pub fn new(b: &mut Builder, name: &str, d: usize, heads: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            norm1: NormParams::new(&mut s, "norm1", d),
            attn: AttentionParams::new(&mut s, "attn", d, d, heads),
            norm2: NormParams::new(&mut s, "norm2", d),
            ffn: FfnParams::new(&mut s, "ffn", d),
        }
    }

    pub fn ffn_residual(&self, p: &Bound, x: &Var) -> Result<Var> {
        Ok(x.add(&self.ffn.forward(p, &self.norm2.forward(p, x)?)?)?)
    }

    /// Plain sequence block: `x + SelfAtt(LN x)`, then the FFN residual.
    pub fn forward_sequence(&self, p: &Bound, x: &Var, mask: Option<&Tensor>) -> Result<Var> {
        let x_tilde = self.self_attention(p, x, mask)?;
        self.ffn_residual(p, &x.add(&x_tilde)?)
    }

    pub fn self_attention(&self, p: &Bound, x: &Var, mask: Option<&Tensor>) -> Result<Var> {
        let h = self.norm1.forward(p, x)?;
        multi_head_attention(&self.attn, p, &h, &h, mask)
    }

    pub fn window_self_attention(&self, p: &Bound, grid: &Var, cfg: WindowConfig) -> Result<Var> {
        window_attention(cfg, &self.attn, p, &self.norm1.forward(p, grid)?)
    }
}

/// One direction of co-attention: queries from the consumer, keys/values
/// from the (normalized) producer.
#[derive(Debug, Clone, Copy)]
pub struct CrossParams {
    pub attn: AttentionParams,
    pub norm_y: NormParams,
    pub gate: Option<ParamId>,
}

impl CrossParams {
    pub fn new(b: &mut Builder, name: &str, d_consumer: usize, d_producer: usize, heads: usize, gate_init: Option<f64>) -> Self {
        let mut s = b.sub(name);
        let attn = AttentionParams::new(&mut s, "cross", d_consumer, d_producer, heads);
        let norm_y = NormParams::new(&mut s, "norm_y", d_producer);
        let gate = gate_init.map(|a| s.constant("gate", Tensor::scalar(a)));
        Self { attn, norm_y, gate }
    }

    /// `x + x̃ + α·CrossAtt(x̃, LN_y(y))`; without a gate `α = 1`.
    pub fn update(&self, p: &Bound, x: &Var, x_tilde: &Var, y: &Var, y_lengths: Option<&[usize]>) -> Result<Var> {
        let (_, lq, _) = dims3(x_tilde)?;
        let (_, ly, _) = dims3(y)?;
        let mask = y_lengths.map(|l| key_padding_mask(l, lq, ly));
        let y_n = self.norm_y.forward(p, y)?;
        let cross = multi_head_attention(&self.attn, p, x_tilde, &y_n, mask.as_ref())?;
        let cross = match self.gate {
            Some(g) => cross.mul(&p[g])?,
            None => cross,
        };
        Ok(x.add(x_tilde)?.add(&cross)?)
    }
}

/// One side of merged attention: this modality's own self-attention keys
/// extended with separately projected keys/values of the other modality.
#[derive(Debug, Clone, Copy)]
pub struct MergedParams {
    pub k: LinearParams,
    pub v: LinearParams,
    pub norm_y: NormParams,
}

impl MergedParams {
    pub fn new(b: &mut Builder, name: &str, d_consumer: usize, d_producer: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            k: LinearParams::new(&mut s, "k_other", d_producer, d_consumer),
            v: LinearParams::new(&mut s, "v_other", d_producer, d_consumer),
            norm_y: NormParams::new(&mut s, "norm_y", d_producer),
        }
    }

    fn other_kv(&self, p: &Bound, y: &Var) -> Result<(Var, Var)> {
        let y_n = self.norm_y.forward(p, y)?;
        Ok((self.k.forward(p, &y_n)?, self.v.forward(p, &y_n)?))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum FusionBlock {
    Co { text: CrossParams, image: CrossParams },
    Merged { text: MergedParams, image: MergedParams },
}

/// Sequence-form co-attention layer (used for text and in tests): returns the
/// updated `x` given the other modality `y`, or the plain block when `cross`
/// is `None`.
pub fn fused_coattention_layer(
    block: &Block,
    cross: Option<&CrossParams>,
    p: &Bound,
    x: &Var,
    y: &Var,
    x_lengths: &[usize],
    y_lengths: &[usize],
) -> Result<Var> {
    let (_, lx, _) = dims3(x)?;
    let mask = key_padding_mask(x_lengths, lx, lx);
    let x_tilde = block.self_attention(p, x, Some(&mask))?;
    let x = match cross {
        Some(c) => c.update(p, x, &x_tilde, y, Some(y_lengths))?,
        None => x.add(&x_tilde)?,
    };
    block.ffn_residual(p, &x)
}

/// Merged-attention layer over two sequences with per-modality keys/values.
/// Returns the updated `(x, y)`. A zero-length `y` reduces `x`'s update to
/// plain self-attention.
#[allow(clippy::too_many_arguments)]
pub fn merged_attention_layer(
    bx: &Block,
    by: &Block,
    mx: &MergedParams,
    my: &MergedParams,
    p: &Bound,
    x: &Var,
    y: Option<&Var>,
    x_lengths: &[usize],
    y_lengths: &[usize],
) -> Result<(Var, Option<Var>)> {
    let x_out = merged_side(bx, mx, p, x, y, x_lengths, y_lengths)?;
    let y_out = match y {
        Some(y) => Some(merged_side(by, my, p, y, Some(x), y_lengths, x_lengths)?),
        None => None,
    };
    Ok((x_out, y_out))
}

fn merged_side(block: &Block, m: &MergedParams, p: &Bound, x: &Var, y: Option<&Var>, x_lengths: &[usize], y_lengths: &[usize]) -> Result<Var> {
    let (_, lx, _) = dims3(x)?;
    let h = block.norm1.forward(p, x)?;
    let q = block.attn.q.forward(p, &h)?;
    let mut k = block.attn.k.forward(p, &h)?;
    let mut v = block.attn.v.forward(p, &h)?;
    let mut mask = key_padding_mask(x_lengths, lx, lx);
    if let Some(y) = y {
        let (_, ly, _) = dims3(y)?;
        let (ky, vy) = m.other_kv(p, y)?;
        k = Var::concat(&[&k, &ky], 1)?;
        v = Var::concat(&[&v, &vy], 1)?;
        mask = Tensor::concat(&[&mask, &key_padding_mask(y_lengths, lx, ly)], 2)?;
    }
    let att = crate::nn::attend(&q, &k, &v, block.attn.heads, Some(&mask))?;
    let x = x.add(&block.attn.o.forward(p, &att)?)?;
    block.ffn_residual(p, &x)
}

#[derive(Debug, Clone)]
pub struct TextBackbone {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub layers: Vec<Block>,
    pub final_norm: NormParams,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<Block>,
    /// Patch merging into the next stage.
    pub merge: Option<LinearParams>,
}

#[derive(Debug, Clone)]
pub struct ImageBackbone {
    pub patch_embed: LinearParams,
    pub positions: ParamId,
    pub embed_norm: NormParams,
    pub stages: Vec<Stage>,
    pub out_norms: Vec<NormParams>,
}

/// Counts uni-modal and fused backbone passes.
#[derive(Debug, Default)]
pub struct PassCounter {
    dual_images: AtomicU64,
    dual_texts: AtomicU64,
    fused_pairs: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PassCounts {
    pub dual_images: u64,
    pub dual_texts: u64,
    pub fused_pairs: u64,
}

impl PassCounts {
    pub fn total(&self) -> u64 {
        self.dual_images + self.dual_texts + self.fused_pairs
    }
}

impl PassCounter {
    pub fn snapshot(&self) -> PassCounts {
        PassCounts {
            dual_images: self.dual_images.load(Ordering::Relaxed),
            dual_texts: self.dual_texts.load(Ordering::Relaxed),
            fused_pairs: self.fused_pairs.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.dual_images.store(0, Ordering::Relaxed);
        self.dual_texts.store(0, Ordering::Relaxed);
        self.fused_pairs.store(0, Ordering::Relaxed);
    }

    fn add_images(&self, n: usize) {
        self.dual_images.fetch_add(n as u64, Ordering::Relaxed);
    }

    fn add_texts(&self, n: usize) {
        self.dual_texts.fetch_add(n as u64, Ordering::Relaxed);
    }

    fn add_fused(&self, n: usize) {
        self.fused_pairs.fetch_add(n as u64, Ordering::Relaxed);
    }
}

/// Padded token batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBatch {
    pub ids: Vec<Vec<usize>>,
}

impl TextBatch {
    pub fn new(ids: Vec<Vec<usize>>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.ids.iter().map(Vec::len).collect()
    }

    pub fn max_len(&self) -> usize {
        self.ids.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn select(&self, idx: &[usize]) -> TextBatch {
        TextBatch {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }
}

/// Uni-modal streams at the entrance of the fused layers.
#[derive(Clone)]
pub struct Streams {
    /// `[B, L, dt]`
    pub text: Var,
    pub text_lengths: Vec<usize>,
    /// Normalized outputs of the image stages below the top stage.
    pub lower_scales: Vec<Var>,
    /// `[B, G, G, d_top]` top-stage grid entering the fused blocks.
    pub image: Var,
}

impl Streams {
    /// Re-pairs cached streams: text `t_idx[i]` with image `i_idx[i]`.
    pub fn pair(&self, t_idx: &[usize], i_idx: &[usize]) -> Result<Streams> {
        Ok(Streams {
            text: self.text.select_rows(t_idx)?,
            text_lengths: t_idx.iter().map(|&i| self.text_lengths[i]).collect(),
            lower_scales: self
                .lower_scales
                .iter()
                .map(|s| s.select_rows(i_idx))
                .collect::<std::result::Result<_, _>>()?,
            image: self.image.select_rows(i_idx)?,
        })
    }
}

/// Final features of both backbones.
#[derive(Clone)]
pub struct Features {
    /// `[B, L, dt]` after the final text norm (image-aware when fused).
    pub text: Var,
    pub text_lengths: Vec<usize>,
    /// Per-scale normalized image features, finest first (text-aware top
    /// scale when fused).
    pub image_scales: Vec<Var>,
}

impl Features {
    pub fn top_image(&self) -> &Var {
        self.image_scales.last().expect("at least one scale")
    }

    /// Mean over valid tokens, `[B, dt]`.
    pub fn pooled_text(&self) -> Result<Var> {
        mean_pool_tokens(&self.text, &self.text_lengths)
    }

    /// Mean over the top grid, `[B, d_top]`.
    pub fn pooled_image(&self) -> Result<Var> {
        let (b, h, w, d) = dims4(self.top_image())?;
        Ok(self.top_image().reshape(vec![b, h * w, d])?.mean_axis(1)?)
    }
}

/// Output of [`Backbone::encode`].
#[derive(Clone)]
pub struct EncoderOutput {
    pub mode: Mode,
    /// I_TA per scale (fused mode only).
    pub image_features: Vec<Var>,
    /// T_IA `[B, L, dt]` (fused mode only).
    pub text_features: Option<Var>,
    pub text_lengths: Vec<usize>,
    /// L2-normalized pooled embeddings `[B, E]` (dual mode only).
    pub image_embedding: Option<Var>,
    pub text_embedding: Option<Var>,
}

impl EncoderOutput {
    pub fn features(&self) -> Result<Features> {
        match (&self.text_features, self.mode) {
            (Some(t), Mode::Fused) => Ok(Features {
                text: t.clone(),
                text_lengths: self.text_lengths.clone(),
                image_scales: self.image_features.clone(),
            }),
            _ => Err(contract("encoder output was produced in dual mode and carries no fused features")),
        }
    }
}

/// Mean over the first `lengths[b]` tokens of each sequence.
pub fn mean_pool_tokens(x: &Var, lengths: &[usize]) -> Result<Var> {
    let (b, l, d) = dims3(x)?;
    let weights = Tensor::from_fn(vec![b, 1, l], |i| {
        let (bi, t) = (i / l, i % l);
        if t < lengths[bi] {
            1.0 / lengths[bi] as f64
        } else {
            0.0
        }
    });
    Ok(Var::constant(weights).matmul(x)?.reshape(vec![b, d])?)
}

/// Row-wise L2 normalization of `[N, E]`.
pub fn l2_normalize_rows(x: &Var) -> Result<Var> {
    let (n, e) = match x.shape() {
        [n, e] => (*n, *e),
        s => return Err(contract(format!("expected [N, E], got {s:?}"))),
    };
    let norms = x.mul(x)?.sum_axis(1)?.add_scalar(1e-12).sqrt().reshape(vec![n, 1])?;
    let spread = norms.matmul(&Var::constant(Tensor::ones(vec![1, e])))?;
    Ok(x.div(&spread)?)
}

/// All backbone parameters: both uni-modal towers, the fusion blocks and the
/// dual-encoder pooling projections.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: FusionConfig,
    pub text: TextBackbone,
    pub image: ImageBackbone,
    pub fusion: Vec<FusionBlock>,
    pub text_pool: LinearParams,
    pub image_pool: LinearParams,
    pub counter: Arc<PassCounter>,
}

impl Backbone {
    pub fn new(cfg: &FusionConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut root = Builder::new(store, seed, Group::Backbone);
        let tc = &cfg.text;
        let text = {
            let mut b = root.sub("text");
            TextBackbone {
                tokens: b.normal("tokens", vec![tc.vocab_size, tc.width], 0.02_f64.max(1.0 / (tc.width as f64).sqrt())),
                positions: b.normal("positions", vec![tc.max_len, tc.width], 0.02),
                layers: (0..tc.depth).map(|i| Block::new(&mut b, &format!("layers.{i}"), tc.width, tc.heads)).collect(),
                final_norm: NormParams::new(&mut b, "final_norm", tc.width),
            }
        };
        let ic = &cfg.image;
        let image = {
            let mut b = root.sub("image");
            let g0 = ic.size / ic.patch;
            let patch_in = ic.patch * ic.patch * ImageConfig::CHANNELS;
            let patch_embed = LinearParams::new(&mut b, "patch_embed", patch_in, ic.widths[0]);
            let positions = b.normal("positions", vec![g0 * g0, ic.widths[0]], 0.02);
            let embed_norm = NormParams::new(&mut b, "embed_norm", ic.widths[0]);
            let n_stages = ic.widths.len();
            let stages = (0..n_stages)
                .map(|s| {
                    let mut sb = b.sub(&format!("stages.{s}"));
                    let blocks = (0..ic.depths[s])
                        .map(|i| Block::new(&mut sb, &format!("blocks.{i}"), ic.widths[s], ic.heads[s]))
                        .collect();
                    let merge = (s + 1 < n_stages).then(|| LinearParams::new(&mut sb, "merge", 4 * ic.widths[s], 2 * ic.widths[s]));
                    Stage { blocks, merge }
                })
                .collect();
            let out_norms = (0..n_stages).map(|s| NormParams::new(&mut b, &format!("out_norms.{s}"), ic.widths[s])).collect();
            ImageBackbone {
                patch_embed,
                positions,
                embed_norm,
                stages,
                out_norms,
            }
        };
        let (text_pool, image_pool) = {
            let mut b = root.sub("pool");
            (
                LinearParams::new(&mut b, "text", tc.width, cfg.embed_dim),
                LinearParams::new(&mut b, "image", ic.top_width(), cfg.embed_dim),
            )
        };
        let mut fb = root.group(Group::CrossModal);
        let mut fb = fb.sub("fusion");
        let (dt, di) = (tc.width, ic.top_width());
        let top_heads = *ic.heads.last().expect("validated");
        let fusion = (0..cfg.fused_layers)
            .map(|j| {
                let mut lb = fb.sub(&j.to_string());
                match cfg.strategy {
                    Strategy::CoAttentionGated | Strategy::CoAttentionUngated => {
                        let gate = (cfg.strategy == Strategy::CoAttentionGated).then_some(cfg.alpha_init);
                        FusionBlock::Co {
                            text: CrossParams::new(&mut lb, "text", dt, di, tc.heads, gate),
                            image: CrossParams::new(&mut lb, "image", di, dt, top_heads, gate),
                        }
                    }
                    Strategy::MergedAttention => FusionBlock::Merged {
                        text: MergedParams::new(&mut lb, "text", dt, di),
                        image: MergedParams::new(&mut lb, "image", di, dt),
                    },
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            text,
            image,
            fusion,
            text_pool,
            image_pool,
            counter: Arc::new(PassCounter::default()),
        })
    }

    pub fn gate_ids(&self) -> Vec<ParamId> {
        self.fusion
            .iter()
            .flat_map(|f| match f {
                FusionBlock::Co { text, image } => vec![text.gate, image.gate],
                FusionBlock::Merged { .. } => vec![],
            })
            .flatten()
            .collect()
    }

    pub(crate) fn first_fused_text_layer(&self) -> usize {
        self.cfg.text.depth - self.cfg.fused_layers
    }

    pub(crate) fn first_fused_image_block(&self) -> usize {
        self.cfg.image.depths.last().expect("validated") - self.cfg.fused_layers
    }

    pub fn embed_text(&self, p: &Bound, texts: &TextBatch) -> Result<Var> {
        let l = texts.max_len();
        if l > self.cfg.text.max_len {
            return Err(contract(format!("token length {l} exceeds maximum {}", self.cfg.text.max_len)));
        }
        if texts.ids.iter().any(|s| s.is_empty()) {
            return Err(contract("empty token sequence"));
        }
        let v = self.cfg.text.vocab_size;
        let mut flat = Vec::with_capacity(texts.len() * l);
        for seq in &texts.ids {
            for t in 0..l {
                let id = seq.get(t).copied().unwrap_or(crate::data::PAD);
                if id >= v {
                    return Err(contract(format!("token id {id} outside vocabulary of {v}")));
                }
                flat.push(id);
            }
        }
        let d = self.cfg.text.width;
        let tok = p[self.text.tokens].select_rows(&flat)?.reshape(vec![texts.len(), l, d])?;
        let pos = p[self.text.positions].narrow(0, 0, l)?;
        Ok(tok.add(&pos)?)
    }

    /// Text layers below the fused ones.
    pub fn text_lower(&self, p: &Bound, texts: &TextBatch) -> Result<(Var, Vec<usize>)> {
        let lengths = texts.lengths();
        let mut x = self.embed_text(p, texts)?;
        let l = texts.max_len();
        let mask = key_padding_mask(&lengths, l, l);
        for layer in &self.text.layers[..self.first_fused_text_layer()] {
            x = layer.forward_sequence(p, &x, Some(&mask))?;
        }
        Ok((x, lengths))
    }

    /// Cuts `[B, H, W, 3]` pixels into `[B, G, G, patch²·3]` patch vectors.
    pub fn patchify(&self, pixels: &Tensor) -> Result<Tensor> {
        let ic = &self.cfg.image;
        let (b, h, w, c) = match pixels.shape() {
            [b, h, w, c] => (*b, *h, *w, *c),
            s => return Err(contract(format!("expected [B, H, W, 3] pixels, got {s:?}"))),
        };
        if h != ic.size || w != ic.size || c != ImageConfig::CHANNELS {
            return Err(contract(format!("expected {0}×{0}×3 images, got {h}×{w}×{c}", ic.size)));
        }
        let p = ic.patch;
        let g = ic.size / p;
        let src = pixels.data();
        let mut out = Vec::with_capacity(pixels.numel());
        for bi in 0..b {
            for gy in 0..g {
                for gx in 0..g {
                    for py in 0..p {
                        let row = ((bi * h + gy * p + py) * w + gx * p) * c;
                        out.extend_from_slice(&src[row..row + p * c]);
                    }
                }
            }
        }
        Ok(Tensor::new(vec![b, g, g, p * p * c], out)?)
    }

    /// Image stages below the fused blocks: normalized outputs of the lower
    /// stages and the top-stage grid entering the fused blocks.
    pub fn image_lower(&self, p: &Bound, pixels: &Tensor) -> Result<(Vec<Var>, Var)> {
        let ic = &self.cfg.image;
        let patches = Var::constant(self.patchify(pixels)?);
        let mut x = self.image.patch_embed.forward(p, &patches)?;
        let (b, g, _, d0) = dims4(&x)?;
        x = x.add(&p[self.image.positions].reshape(vec![g, g, d0])?)?;
        x = self.image.embed_norm.forward(p, &x)?;
        let _ = b;
        let n = ic.widths.len();
        let mut scales = Vec::with_capacity(n - 1);
        for (s, stage) in self.image.stages.iter().enumerate() {
            let stop = if s + 1 == n { self.first_fused_image_block() } else { stage.blocks.len() };
            for (i, block) in stage.blocks[..stop].iter().enumerate() {
                x = self.image_block(p, block, &x, s, i)?;
            }
            if let Some(merge) = &stage.merge {
                scales.push(self.image.out_norms[s].forward(p, &x)?);
                x = patch_merging(merge, p, &x)?;
            }
        }
        Ok((scales, x))
    }

    pub(crate) fn image_block(&self, p: &Bound, block: &Block, x: &Var, stage: usize, index: usize) -> Result<Var> {
        let x_tilde = block.window_self_attention(p, x, self.cfg.window_for(stage, index))?;
        block.ffn_residual(p, &x.add(&x_tilde)?)
    }

    pub fn lower(&self, p: &Bound, pixels: &Tensor, texts: &TextBatch) -> Result<Streams> {
        let (text, text_lengths) = self.text_lower(p, texts)?;
        let (lower_scales, image) = self.image_lower(p, pixels)?;
        Ok(Streams {
            text,
            text_lengths,
            lower_scales,
            image,
        })
    }

    /// Runs the top `M` paired layers, with (`fuse`) or without cross-modal
    /// interaction, and applies the final norms.
    pub fn upper(&self, p: &Bound, streams: &Streams, fuse: bool) -> Result<Features> {
        let top = self.cfg.image.widths.len() - 1;
        let mut xt = streams.text.clone();
        let mut xi = streams.image.clone();
        let lengths = &streams.text_lengths;
        let (b, lt, _) = dims3(&xt)?;
        let text_mask = key_padding_mask(lengths, lt, lt);
        for j in 0..self.cfg.fused_layers {
            let tl = &self.text.layers[self.first_fused_text_layer() + j];
            let ib_index = self.first_fused_image_block() + j;
            let ib = &self.image.stages[top].blocks[ib_index];
            let wcfg = self.cfg.window_for(top, ib_index);
            let (_, g, _, di) = dims4(&xi)?;
            match (&self.fusion[j], fuse) {
                (FusionBlock::Co { text, image }, true) => {
                    let t_tilde = tl.self_attention(p, &xt, Some(&text_mask))?;
                    let i_tilde = ib.window_self_attention(p, &xi, wcfg)?;
                    let xi_seq = xi.reshape(vec![b, g * g, di])?;
                    let it_seq = i_tilde.reshape(vec![b, g * g, di])?;
                    let new_t = text.update(p, &xt, &t_tilde, &xi_seq, None)?;
                    let new_i = image.update(p, &xi_seq, &it_seq, &xt, Some(lengths))?;
                    xt = tl.ffn_residual(p, &new_t)?;
                    xi = ib.ffn_residual(p, &new_i.reshape(vec![b, g, g, di])?)?;
                }
                (FusionBlock::Merged { text, image }, true) => {
                    let xi_seq = xi.reshape(vec![b, g * g, di])?;
                    let new_t = merged_side(tl, text, p, &xt, Some(&xi_seq), lengths, &vec![g * g; b])?;
                    let (ky, vy) = image.other_kv(p, &xt)?;
                    let extra = ExtraKeys {
                        k: &ky,
                        v: &vy,
                        lengths,
                    };
                    let att = window_attention_ext(wcfg, &ib.attn, p, &ib.norm1.forward(p, &xi)?, Some(extra))?;
                    xi = ib.ffn_residual(p, &xi.add(&att)?)?;
                    xt = new_t;
                }
                (_, false) => {
                    xt = tl.forward_sequence(p, &xt, Some(&text_mask))?;
                    xi = self.image_block(p, ib, &xi, top, ib_index)?;
                }
            }
        }
        let text = self.text.final_norm.forward(p, &xt)?;
        let mut image_scales = streams.lower_scales.clone();
        image_scales.push(self.image.out_norms[top].forward(p, &xi)?);
        Ok(Features {
            text,
            text_lengths: lengths.clone(),
            image_scales,
        })
    }

    /// Full features of paired inputs; `fuse = false` is the backbone with
    /// every cross-modal block deleted.
    pub fn features(&self, p: &Bound, pixels: &Tensor, texts: &TextBatch, fuse: bool) -> Result<Features> {
        self.upper(p, &self.lower(p, pixels, texts)?, fuse)
    }

    pub fn pool_text(&self, p: &Bound, f: &Features) -> Result<Var> {
        l2_normalize_rows(&self.text_pool.forward(p, &f.pooled_text()?)?)
    }

    pub fn pool_image(&self, p: &Bound, f: &Features) -> Result<Var> {
        l2_normalize_rows(&self.image_pool.forward(p, &f.pooled_image()?)?)
    }

    /// Encodes paired images and texts. Dual mode counts one pass per image
    /// and per text and fills only the pooled embeddings; fused mode counts
    /// one pass per pair and fills I_TA and T_IA.
    pub fn encode(&self, p: &Bound, pixels: &Tensor, texts: &TextBatch, mode: Mode) -> Result<EncoderOutput> {
        let n = texts.len();
        if pixels.shape().first() != Some(&n) {
            return Err(contract(format!("{} texts paired with image batch {:?}", n, pixels.shape())));
        }
        match mode {
            Mode::Dual => {
                let f = self.features(p, pixels, texts, false)?;
                self.counter.add_images(n);
                self.counter.add_texts(n);
                Ok(EncoderOutput {
                    mode,
                    image_features: Vec::new(),
                    text_features: None,
                    text_lengths: f.text_lengths.clone(),
                    image_embedding: Some(self.pool_image(p, &f)?),
                    text_embedding: Some(self.pool_text(p, &f)?),
                })
            }
            Mode::Fused => {
                let f = self.features(p, pixels, texts, true)?;
                self.counter.add_fused(n);
                Ok(EncoderOutput {
                    mode,
                    image_features: f.image_scales,
                    text_features: Some(f.text),
                    text_lengths: f.text_lengths,
                    image_embedding: None,
                    text_embedding: None,
                })
            }
        }
    }

    /// Dual-mode image embeddings `[n, E]`; one pass per image.
    pub fn embed_images(&self, p: &Bound, pixels: &Tensor) -> Result<Var> {
        let (lower_scales, x) = self.image_lower(p, pixels)?;
        let top = self.cfg.image.widths.len() - 1;
        let mut xi = x;
        for j in 0..self.cfg.fused_layers {
            let idx = self.first_fused_image_block() + j;
            xi = self.image_block(p, &self.image.stages[top].blocks[idx], &xi, top, idx)?;
        }
        let mut image_scales = lower_scales;
        image_scales.push(self.image.out_norms[top].forward(p, &xi)?);
        self.counter.add_images(pixels.shape()[0]);
        let f = Features {
            text: Var::constant(Tensor::zeros(vec![0, 0, 0])),
            text_lengths: vec![],
            image_scales,
        };
        self.pool_image(p, &f)
    }

    /// Dual-mode text embeddings `[m, E]`; one pass per text.
    pub fn embed_texts(&self, p: &Bound, texts: &TextBatch) -> Result<Var> {
        let (mut xt, lengths) = self.text_lower(p, texts)?;
        let l = texts.max_len();
        let mask = key_padding_mask(&lengths, l, l);
        for layer in &self.text.layers[self.first_fused_text_layer()..] {
            xt = layer.forward_sequence(p, &xt, Some(&mask))?;
        }
        let text = self.text.final_norm.forward(p, &xt)?;
        self.counter.add_texts(texts.len());
        l2_normalize_rows(&self.text_pool.forward(p, &mean_pool_tokens(&text, &lengths)?)?)
    }

    /// Records fused passes performed outside [`Backbone::encode`] (training
    /// code that reuses cached lower layers).
    pub fn count_fused(&self, n: usize) {
        self.counter.add_fused(n);
    }
}
