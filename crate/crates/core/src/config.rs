//! Training configuration: flat key-value files (TOML) covering the GNN,
//! autoencoder, and optimizer settings, plus a fingerprint for reproducibility.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Neighborhood aggregation. Only mean aggregation is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggType {
    #[default]
    Mean,
}

/// Positional encoding attached to the autoencoder input (ablation surface;
/// the default model uses none).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PeKind {
    #[default]
    None,
    Sinusoidal,
    Learnable,
}

/// Attention-mask strictness: `All` isolates a masked position from every
/// other position (keeping its self-key); `MaskedPairs` only blocks pairs
/// where both ends are masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    #[default]
    All,
    MaskedPairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    // GNN
    pub edim_out: usize,
    pub nhops: usize,
    pub fanout: usize,
    pub agg_type: AggType,
    pub gnn_dropout: f64,
    /// Hidden width of each message-passing layer; defaults to `edim_out`.
    pub gnn_hidden_dim: Option<usize>,
    /// Aggregate over in- and out-edges of a node (default) or out-edges only.
    pub bidirectional_neighborhood: bool,

    // Autoencoder
    pub num_layers: usize,
    pub embed_dim: usize,
    pub window_size: usize,
    /// Number of windows per autoencoder batch.
    pub ae_batch_size: usize,
    pub mask_ratio: f64,
    pub mask_scope: MaskScope,
    pub ae_dropout: f64,
    /// Attention heads; defaults to `embed_dim / 16`, floored at 1.
    pub n_heads: Option<usize>,
    /// Feed-forward width as a multiple of `embed_dim`.
    pub ff_factor: usize,
    pub positional_encoding: PeKind,

    // Optimization
    pub learning_rate: f64,
    /// Learning rate override used by the no-GNN ablation; that variant
    /// benefits from a hotter schedule.
    pub t_mae_learning_rate: Option<f64>,
    pub gnn_weight_decay: f64,
    pub ae_weight_decay: f64,
    pub gnn_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Global gradient-norm clip; disabled by default.
    pub grad_clip: Option<f64>,
    pub seed: u64,

    /// Bottleneck width for the MLP-autoencoder ablation; defaults to
    /// `edim_out / 2`.
    pub bottleneck: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            edim_out: 64,
            nhops: 1,
            fanout: 32_768,
            agg_type: AggType::Mean,
            gnn_dropout: 0.5,
            gnn_hidden_dim: None,
            bidirectional_neighborhood: true,
            num_layers: 1,
            embed_dim: 32,
            window_size: 512,
            ae_batch_size: 64,
            mask_ratio: 0.15,
            mask_scope: MaskScope::All,
            ae_dropout: 0.0,
            n_heads: None,
            ff_factor: 4,
            positional_encoding: PeKind::None,
            learning_rate: 1e-4,
            t_mae_learning_rate: None,
            gnn_weight_decay: 0.6,
            ae_weight_decay: 0.04,
            gnn_batch_size: 16_384,
            max_epochs: 100,
            patience: 20,
            grad_clip: None,
            seed: 0,
            bottleneck: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_path(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.edim_out == 0 || self.embed_dim == 0 {
            return fail("edim_out and embed_dim must be positive");
        }
        if self.nhops == 0 {
            return fail("nhops must be at least 1");
        }
        if self.fanout == 0 {
            return fail("fanout must be at least 1");
        }
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1");
        }
        if self.window_size == 0 || self.ae_batch_size == 0 || self.gnn_batch_size == 0 {
            return fail("batch sizes must be at least 1");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail("mask_ratio must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.gnn_dropout) || !(0.0..1.0).contains(&self.ae_dropout) {
            return fail("dropout rates must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive and finite");
        }
        if self.gnn_weight_decay < 0.0 || self.ae_weight_decay < 0.0 {
            return fail("weight decay must be nonnegative");
        }
        if self.patience > self.max_epochs {
            return fail("patience must not exceed max_epochs");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1");
        }
        let heads = self.heads();
        if self.embed_dim % heads != 0 {
            return fail("n_heads must divide embed_dim");
        }
        if let Some(b) = self.bottleneck {
            if b == 0 {
                return fail("bottleneck must be positive");
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail("grad_clip must be positive");
            }
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        self.n_heads.unwrap_or_else(|| (self.embed_dim / 16).max(1))
    }

    pub fn gnn_hidden(&self) -> usize {
        self.gnn_hidden_dim.unwrap_or(self.edim_out)
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.bottleneck.unwrap_or_else(|| (self.edim_out / 2).max(1))
    }

    /// Flows per autoencoder batch (`window_size × ae_batch_size`).
    pub fn sequence_len(&self) -> usize {
        self.window_size * self.ae_batch_size
    }

    /// Hex digest of the canonical serialized config; printed by every
    /// command so a run can be reproduced from its log line.
    pub fn fingerprint(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
