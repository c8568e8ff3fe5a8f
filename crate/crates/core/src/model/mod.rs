//! The lifetime-estimation network: a differential-transformer
//! encoder-decoder over gate-token sequences. The instrument response
//! drives the encoder; the photon histogram drives the decoder, which
//! cross-attends to the encoder output. Three pointwise heads emit the
//! short lifetime, long lifetime and fractional amplitude.

pub mod blocks;
pub mod infer;
pub mod io;
pub mod weights;

pub use blocks::{decoder_block, embed_sequence, encoder_block, forward_pixel, swiglu_ffn};
pub use infer::{predict_dataset, Prediction};
pub use weights::{BoundModel, MFliNetWeights};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    Differential,
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Feed-forward hidden width; `None` means 4 * d_model.
    pub ffn_hidden: Option<usize>,
    pub gates: usize,
    pub image_side: usize,
    pub attention: AttentionKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            ffn_hidden: None,
            gates: 176,
            image_side: 28,
            attention: AttentionKind::Differential,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(
                "model.d_model",
                format!(
                    "d_model {} must be a positive multiple of heads {}",
                    self.d_model, self.heads
                ),
            ));
        }
        if self.gates < 2 {
            return Err(Error::config("model.gates", "must be >= 2"));
        }
        if self.encoder_blocks != 2 || self.decoder_blocks != 2 {
            return Err(Error::config(
                "model.encoder_blocks",
                "the architecture is fixed at two encoder and two decoder blocks",
            ));
        }
        if self.image_side == 0 {
            return Err(Error::config("model.image_side", "must be >= 1"));
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.d_model)
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn is_differential(&self) -> bool {
        matches!(self.attention, AttentionKind::Differential)
    }
}
