//! Task heads on top of the backbone: question classification, image-text
//! matching, masked-token prediction, grounding/detection, retrieval with
//! re-ranking, and captioning.

pub mod caption;
pub mod detection;
pub mod retrieval;

pub use caption::{CaptionHead, CaptionVariant, CaptionerConfig};
pub use detection::{detect, grounding_score, nms, DetectionHead, DetectionRecord, HeadOutput, PhraseDetection};
pub use retrieval::{ensemble_rank, rank_desc, rerank_topk, retrieve_dual, DualRetrieval};

use fiber_tensor::Var;

use crate::error::{contract, Result};
use crate::fusion::{EncoderOutput, Features, FusionConfig};
use crate::nn::{LinearParams, NormParams};
use crate::params::{Bound, Builder};

/// Pooled T_IA and pooled top-scale I_TA side by side, `[B, dt + d_top]`.
pub fn pair_features(f: &Features) -> Result<Var> {
    Ok(Var::concat(&[&f.pooled_text()?, &f.pooled_image()?], 1)?)
}

fn fused_features(enc: &EncoderOutput) -> Result<Features> {
    enc.features()
        .map_err(|_| contract("this head needs fused-mode encoder output; dual-mode output carries no T_IA / I_TA"))
}

/// Two-layer MLP over concatenated pooled features.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl ClassifierHead {
    pub fn new(b: &mut Builder, cfg: &FusionConfig, hidden: usize, labels: usize) -> Self {
        let mut s = b.sub("classifier");
        let d_in = cfg.text.width + cfg.image.top_width();
        Self {
            fc1: LinearParams::new(&mut s, "fc1", d_in, hidden),
            fc2: LinearParams::new(&mut s, "fc2", hidden, labels),
        }
    }

    pub fn forward(&self, p: &Bound, pair: &Var) -> Result<Var> {
        self.fc2.forward(p, &self.fc1.forward(p, pair)?.gelu())
    }
}

/// Label logits `[B, labels]` from a fused encoding.
pub fn classify(head: &ClassifierHead, p: &Bound, enc: &EncoderOutput) -> Result<Var> {
    head.forward(p, &pair_features(&fused_features(enc)?)?)
}

/// Binary matching head; class 1 means matched.
#[derive(Debug, Clone, Copy)]
pub struct ItmHead {
    pub fc: LinearParams,
}

impl ItmHead {
    pub fn new(b: &mut Builder, cfg: &FusionConfig) -> Self {
        Self {
            fc: LinearParams::new(b, "itm", cfg.text.width + cfg.image.top_width(), 2),
        }
    }

    pub fn logits(&self, p: &Bound, f: &Features) -> Result<Var> {
        self.fc.forward(p, &pair_features(f)?)
    }

    /// Matching log-odds `logit[1] − logit[0]` per pair.
    pub fn log_odds(&self, p: &Bound, f: &Features) -> Result<Vec<f64>> {
        let l = self.logits(p, f)?;
        Ok(l.value().data().chunks(2).map(|c| c[1] - c[0]).collect())
    }
}

/// dense → GELU → norm → vocabulary decoder, applied per token.
#[derive(Debug, Clone, Copy)]
pub struct MlmHead {
    pub dense: LinearParams,
    pub norm: NormParams,
    pub decoder: LinearParams,
}

impl MlmHead {
    pub fn new(b: &mut Builder, cfg: &FusionConfig) -> Self {
        let mut s = b.sub("mlm");
        let d = cfg.text.width;
        Self {
            dense: LinearParams::new(&mut s, "dense", d, d),
            norm: NormParams::new(&mut s, "norm", d),
            decoder: LinearParams::new(&mut s, "decoder", d, cfg.text.vocab_size),
        }
    }

    pub fn forward(&self, p: &Bound, tokens: &Var) -> Result<Var> {
        let h = self.norm.forward(p, &self.dense.forward(p, tokens)?.gelu())?;
        self.decoder.forward(p, &h)
    }
}
