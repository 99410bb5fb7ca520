use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, AttentionMode};
use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Layers in the encoder and, separately, in the decoder.
    pub num_layers: usize,
    pub attention: AttentionConfig,
    pub encoder_mode: AttentionMode,
    pub dropout_rate: f64,
    pub max_target_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let attention = AttentionConfig::default();
        Self {
            vocab_size: 8296,
            d_model: attention.d_model(),
            d_ff: 4 * attention.d_model(),
            num_layers: 2,
            attention,
            encoder_mode: AttentionMode::TGlobal,
            dropout_rate: 0.0,
            max_target_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.attention.d_model() != self.d_model {
            return Err(Error::Invalid(format!(
                "d_model {} != num_heads {} x head_dim {}",
                self.d_model, self.attention.num_heads, self.attention.head_dim
            )));
        }
        if self.vocab_size <= EOS_ID as usize {
            return Err(Error::Invalid(format!(
                "vocab_size {} leaves no room for tokens",
                self.vocab_size
            )));
        }
        if self.d_ff == 0 || self.max_target_len == 0 {
            return Err(Error::Invalid("d_ff and max_target_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn head_product_must_match_width() {
        let cfg = ModelConfig {
            d_model: 63,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.dropout_rate = 0.1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
        assert_eq!(a.hash().len(), 64);
    }
}
