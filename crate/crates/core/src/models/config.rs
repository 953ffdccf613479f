use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstmp::LstmpParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    PlainLstm,
    Ltlstm,
    Cltlstm,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::PlainLstm => "plain_lstm",
            Variant::Ltlstm => "ltlstm",
            Variant::Cltlstm => "cltlstm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub proj_dim: usize,
    pub input_dim: usize,
    pub num_senones: usize,
    /// Per-layer look-ahead in frames.
    pub tau: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.hidden_dim == 0
            || self.proj_dim == 0
            || self.input_dim == 0
            || self.num_senones == 0
        {
            return Err(Error::Config(format!("all model dimensions must be >= 1: {self:?}")));
        }
        if self.variant != Variant::Cltlstm && self.tau != 0 {
            return Err(Error::Config(format!("variant {} requires tau == 0", self.variant)));
        }
        Ok(())
    }

    /// Same dimensions with a different variant and look-ahead.
    pub fn with_variant(&self, variant: Variant, tau: usize) -> Self {
        Self {
            variant,
            tau,
            ..self.clone()
        }
    }
}

/// Total look-ahead of a model: `L × τ` frames.
pub fn lookahead_frames(config: &ModelConfig) -> usize {
    config.num_layers * config.tau
}

/// Parameters of the shared time-LSTM stack.
pub fn time_stack_param_count(config: &ModelConfig) -> usize {
    (0..config.num_layers)
        .map(|l| {
            let input = if l == 0 { config.input_dim } else { config.proj_dim };
            LstmpParams::count(input, config.hidden_dim, config.proj_dim, true)
        })
        .sum()
}

fn output_param_count(config: &ModelConfig) -> usize {
    config.num_senones * config.proj_dim + config.num_senones
}

/// Parameters of a depth head (depth-LSTMs, context matrices, output layer).
/// Zero-look-ahead variants have no context matrices.
pub fn head_param_count(config: &ModelConfig) -> usize {
    match config.variant {
        Variant::PlainLstm => output_param_count(config),
        Variant::Ltlstm | Variant::Cltlstm => {
            let depth: usize = (0..config.num_layers)
                .map(|l| LstmpParams::count(config.proj_dim, config.hidden_dim, config.proj_dim, l > 0))
                .sum();
            let context = if config.variant == Variant::Cltlstm {
                config.num_layers * (config.tau + 1) * config.proj_dim * config.proj_dim
            } else {
                0
            };
            depth + context + output_param_count(config)
        }
    }
}

/// Exact parameter total for the configured variant.
pub fn param_count(config: &ModelConfig) -> usize {
    time_stack_param_count(config) + head_param_count(config)
}

/// Production dimensions: 6 layers of 1024 cells, 512 projection, 80-dim
/// input, 9404 senones.
pub fn production_config(variant: Variant, tau: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 6,
        hidden_dim: 1024,
        proj_dim: 512,
        input_dim: 80,
        num_senones: 9404,
        tau,
        variant,
    }
}

/// One row of the production parameter-count table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountRow {
    pub model: String,
    pub count: usize,
    pub published_millions: f64,
    /// `(count − published) / published`.
    pub deviation: f64,
}

/// Counts at production dimensions against the published totals: LSTM,
/// ltLSTM, cltLSTM with τ = 4 and the τ = 2 second head alone.
pub fn production_param_table() -> Vec<ParamCountRow> {
    let rows = [
        ("lstm", param_count(&production_config(Variant::PlainLstm, 0)), 31.0),
        ("ltlstm", param_count(&production_config(Variant::Ltlstm, 0)), 57.0),
        ("cltlstm_tau4", param_count(&production_config(Variant::Cltlstm, 4)), 63.0),
        ("second_head_tau2", head_param_count(&production_config(Variant::Cltlstm, 2)), 34.0),
    ];
    rows.into_iter()
        .map(|(model, count, published)| ParamCountRow {
            model: model.into(),
            count,
            published_millions: published,
            deviation: (count as f64 / 1e6 - published) / published,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: Variant, tau: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 6,
            hidden_dim: 1024,
            proj_dim: 512,
            input_dim: 80,
            num_senones: 9404,
            tau,
            variant,
        }
    }

    #[test]
    fn lookahead_is_layers_times_tau() {
        assert_eq!(lookahead_frames(&cfg(Variant::Cltlstm, 4)), 24);
        assert_eq!(lookahead_frames(&cfg(Variant::Cltlstm, 2)), 12);
        assert_eq!(lookahead_frames(&cfg(Variant::Cltlstm, 0)), 0);
    }

    #[test]
    fn unit_dims_hand_count() {
        let one = ModelConfig {
            num_layers: 1,
            hidden_dim: 1,
            proj_dim: 1,
            input_dim: 1,
            num_senones: 1,
            tau: 1,
            variant: Variant::Cltlstm,
        };
        // time cell: 4*(1+1) weights + 4 biases + 1 proj = 13
        // depth cell (no partner): 4*1 + 4 + 1 = 9
        // context: 1 level * 2 matrices * 1 = 2
        // output: 1 + 1 = 2
        assert_eq!(param_count(&one), 13 + 9 + 2 + 2);
        assert_eq!(param_count(&one.with_variant(Variant::Ltlstm, 0)), 13 + 9 + 2);
        assert_eq!(param_count(&one.with_variant(Variant::PlainLstm, 0)), 13 + 2);
    }

    #[test]
    fn production_counts_near_published() {
        let table = production_param_table();
        assert_eq!(table.len(), 4);
        for row in &table {
            assert!(row.deviation.abs() <= 0.10, "{row:?}");
        }
    }

    #[test]
    fn validate_rejects_tau_on_ltlstm() {
        assert!(cfg(Variant::Ltlstm, 1).validate().is_err());
        assert!(cfg(Variant::Cltlstm, 0).validate().is_ok());
    }
}
