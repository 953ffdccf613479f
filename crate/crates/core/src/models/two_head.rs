//! Two heads over one shared time-LSTM stack.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, Variant};
use super::net::{DepthHead, Head, HeadStream, LayerTrajectoryModel, TimeLstmStack, TimeStream};
use crate::error::{Error, Result};
use crate::graph::{Eval, Graph, Parameterized};
use crate::tensor::Tensor;

/// Shared time-LSTM with an ltLSTM head (first pass, no added look-ahead) and
/// a cltLSTM head (second pass).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoHeadModel {
    pub config: ModelConfig,
    pub shared: TimeLstmStack,
    pub head_lt: Head,
    pub head_clt: Head,
    pub frozen_shared: bool,
}

/// Output of [`forward_two_head`].
#[derive(Debug, Clone, PartialEq)]
pub struct TwoHeadOutput {
    pub lt_logits: Vec<Tensor>,
    pub clt_logits: Vec<Tensor>,
    /// `h_t^l`, indexed `[t][l]`.
    pub stored_h: Vec<Vec<Tensor>>,
}

/// SHA-256 over the little-endian bytes of every tensor, in order.
pub fn checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn stack_checksum(stack: &TimeLstmStack) -> String {
    checksum(stack.layers.iter().flat_map(|p| p.tensors()))
}

/// Builds the two-head model from a trained cltLSTM: the time stack and depth
/// head are copied by value, and a fresh zero-look-ahead depth head with its
/// own output layer is drawn from the seeded initializer.
pub fn build_second_head(trained_clt: &LayerTrajectoryModel, seed: u64) -> Result<TwoHeadModel> {
    if trained_clt.config.variant != Variant::Cltlstm {
        return Err(Error::WrongVariant {
            expected: "cltlstm",
            actual: trained_clt.config.variant.to_string(),
        });
    }
    let lt_config = trained_clt.config.with_variant(Variant::Ltlstm, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head_lt = DepthHead::init(&lt_config, &mut rng)?;
    Ok(TwoHeadModel {
        config: trained_clt.config.clone(),
        shared: trained_clt.time.clone(),
        head_lt: Head::Depth(head_lt),
        head_clt: trained_clt.head.clone(),
        frozen_shared: true,
    })
}

impl TwoHeadModel {
    pub fn lt_config(&self) -> ModelConfig {
        self.config.with_variant(Variant::Ltlstm, 0)
    }

    /// Added look-ahead `N` of the second head.
    pub fn lookahead(&self) -> usize {
        match &self.head_clt {
            Head::Depth(d) => d.lookahead(),
            Head::Plain(_) => 0,
        }
    }

    /// The first head as a standalone ltLSTM (shared stack copied).
    pub fn lt_model(&self) -> LayerTrajectoryModel {
        LayerTrajectoryModel {
            config: self.lt_config(),
            time: self.shared.clone(),
            head: self.head_lt.clone(),
        }
    }

    /// The second head as a standalone cltLSTM (shared stack copied).
    pub fn clt_model(&self) -> LayerTrajectoryModel {
        LayerTrajectoryModel {
            config: self.config.clone(),
            time: self.shared.clone(),
            head: self.head_clt.clone(),
        }
    }

    pub fn param_groups() -> &'static [&'static str] {
        &["shared", "head_lt", "head_clt"]
    }

    pub fn shared_checksum(&self) -> String {
        stack_checksum(&self.shared)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (l, p) in self.shared.layers.iter().enumerate() {
            for (name, t) in ["gate_weights", "gate_biases", "proj_weights"].iter().zip(p.tensors()) {
                out.push((format!("shared.{l}.{name}"), t));
            }
        }
        out.extend(head_names(&self.head_lt, "head_lt"));
        out.extend(head_names(&self.head_clt, "head_clt"));
        out
    }
}

fn head_names<'a>(head: &'a Head, prefix: &str) -> Vec<(String, &'a Tensor)> {
    match head {
        Head::Plain(o) => vec![
            (format!("{prefix}.output.weights"), &o.weights),
            (format!("{prefix}.output.bias"), &o.bias),
        ],
        Head::Depth(d) => d.named_params(prefix),
    }
}

impl Parameterized for TwoHeadModel {
    fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.shared.layers.iter_mut().flat_map(|p| p.tensors_mut()).collect();
        for head in [&mut self.head_lt, &mut self.head_clt] {
            match head {
                Head::Plain(o) => {
                    out.push(&mut o.weights);
                    out.push(&mut o.bias);
                }
                Head::Depth(d) => {
                    out.extend(d.layers.iter_mut().flat_map(|p| p.tensors_mut()));
                    if let Some(ctx) = &mut d.context {
                        out.extend(ctx.iter_mut().flatten());
                    }
                    out.push(&mut d.output.weights);
                    out.push(&mut d.output.bias);
                }
            }
        }
        out
    }
}

/// One time-LSTM pass feeding both heads.
pub fn forward_two_head(model: &TwoHeadModel, frames: &[Tensor]) -> Result<TwoHeadOutput> {
    let mut g = Eval::new();
    let mut time = TimeStream::new(&mut g, &model.shared);
    let mut lt = HeadStream::new(&mut g, &model.head_lt);
    let mut clt = HeadStream::new(&mut g, &model.head_clt);
    let mut out = TwoHeadOutput {
        lt_logits: Vec::with_capacity(frames.len()),
        clt_logits: Vec::with_capacity(frames.len()),
        stored_h: Vec::with_capacity(frames.len()),
    };
    for f in frames {
        let x = g.constant(f.clone());
        let hs = time.step(&mut g, &x)?;
        out.lt_logits
            .extend(lt.push(&mut g, &hs)?.into_iter().map(|(_, v)| v.into_owned()));
        out.clt_logits
            .extend(clt.push(&mut g, &hs)?.into_iter().map(|(_, v)| v.into_owned()));
        out.stored_h.push(hs.into_iter().map(|v| v.into_owned()).collect());
    }
    out.lt_logits
        .extend(lt.flush(&mut g)?.into_iter().map(|(_, v)| v.into_owned()));
    out.clt_logits
        .extend(clt.flush(&mut g)?.into_iter().map(|(_, v)| v.into_owned()));
    Ok(out)
}
