//! Encoder, FourierNAT decoder, autoregressive baseline and checkpoints.
//!
//! Activations for a batch are stacked row-wise: a batch of `B` targets of
//! padded length `T` is a `(B·T)×d` matrix, and every per-sequence operation
//! (attention, spectral mixing) works on its own block of rows.

mod ar;
mod checkpoint;
mod encoder;
pub mod layers;
mod nat;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::NUM_SPECIAL;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use ar::{ArCache, ArTransformer};
pub use checkpoint::{load_checkpoint, save_checkpoint, AnyModel, CHECKPOINT_MAGIC};
pub use encoder::{Encoder, EncoderCache, EncoderState};
pub use nat::{DecoderTrace, FourierNat, NatCache, NatOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftInit {
    /// Masked draft rows carry only their positional embedding.
    Zeros,
    /// Masked draft rows carry the learned MASK token embedding.
    MaskEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Fouriernat,
    ArBaseline,
    /// Gates fixed at 0 and never updated, which disables spectral mixing.
    FouriernatNogate,
}

impl Arch {
    pub fn is_nat(self) -> bool {
        !matches!(self, Arch::ArBaseline)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Fouriernat => "fouriernat",
            Arch::ArBaseline => "ar-baseline",
            Arch::FouriernatNogate => "fouriernat-nogate",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fouriernat" => Ok(Arch::Fouriernat),
            "ar-baseline" => Ok(Arch::ArBaseline),
            "fouriernat-nogate" => Ok(Arch::FouriernatNogate),
            other => Err(Error::config(format!(
                "unknown arch {other:?} (expected fouriernat, ar-baseline or fouriernat-nogate)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    /// Padded target length; a power of two.
    pub t_max: usize,
    pub s_max: usize,
    pub dropout: f64,
    pub draft_init: DraftInit,
    /// Concatenate real and imaginary mixing outputs and project back to `d`
    /// instead of discarding the imaginary part.
    pub combine_imag: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            vocab: 64,
            t_max: 16,
            s_max: 16,
            dropout: 0.1,
            draft_init: DraftInit::MaskEmbedding,
            combine_imag: false,
        }
    }

    pub fn paper() -> Self {
        Self {
            d: 512,
            n_layers: 6,
            n_heads: 8,
            d_ff: 2048,
            t_max: 64,
            s_max: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.d == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("d, n_layers, n_heads and d_ff must be positive".into());
        }
        if self.d % self.n_heads != 0 {
            return fail(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            ));
        }
        if !self.t_max.is_power_of_two() || self.t_max < 2 {
            return fail(format!(
                "t_max = {} must be a power of two ≥ 2",
                self.t_max
            ));
        }
        if self.s_max == 0 {
            return fail("s_max must be positive".into());
        }
        if self.vocab <= NUM_SPECIAL {
            return fail(format!(
                "vocab = {} leaves no content ids after the {NUM_SPECIAL} specials",
                self.vocab
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Row-wise argmax with ties to the lowest index, and the softmax
/// probability of the chosen entry.
pub fn argmax_with_prob<F: Real>(logits: &[F]) -> (usize, f64) {
    let mut best = 0;
    for (j, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = j;
        }
    }
    let max = logits[best].as_f64();
    let z: f64 = logits.iter().map(|&v| (v.as_f64() - max).exp()).sum();
    (best, 1.0 / z)
}

/// Shared behaviour of both decoders.
pub trait Seq2Seq<F: Real>: Send + Sync {
    fn config(&self) -> &ModelConfig;
    fn arch(&self) -> Arch;
    fn params(&self) -> &crate::tensor::ParamStore<F>;
    fn params_mut(&mut self) -> &mut crate::tensor::ParamStore<F>;
    fn encoder(&self) -> &Encoder;
    /// Decoder stack evaluations since construction or the last reset.
    fn forward_count(&self) -> usize;
    fn reset_forward_count(&self);

    fn encode(&self, sources: &[Vec<usize>]) -> Result<EncoderState<F>> {
        let mut drop = layers::Dropout::inference();
        self.encoder()
            .forward(self.params(), self.config(), sources, &mut drop)
            .map(|(state, _)| state)
    }
}

pub(crate) fn check_finite<F: Real>(t: &Tensor<F>, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
