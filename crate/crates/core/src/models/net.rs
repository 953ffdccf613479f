//! Time-LSTM stacks, depth heads and the single-head model.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::graph::{Eval, Graph, Parameterized};
use crate::lstmp::{lstmp_step_graph, LstmpParams, INIT_RANGE};
use crate::tensor::Tensor;

/// Affine map from the top representation to senone logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputLayer {
    /// `[num_senones × proj_dim]`
    pub weights: Tensor,
    /// `[num_senones]`
    pub bias: Tensor,
}

impl OutputLayer {
    fn init<R: Rng>(num_senones: usize, proj_dim: usize, rng: &mut R) -> Self {
        Self {
            weights: uniform(&[num_senones, proj_dim], rng),
            bias: uniform(&[num_senones], rng),
        }
    }

    fn apply<'p, G: Graph<'p>>(&'p self, g: &mut G, x: &G::V) -> Result<G::V> {
        let w = g.param(&self.weights);
        let b = g.param(&self.bias);
        let wx = g.matvec(&w, x)?;
        g.add(&wx, &b)
    }
}

fn uniform<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
    }
    t
}

/// Rescales freshly initialized tensors from `±INIT_RANGE` to `±range`,
/// skipping the forget-gate block of every `gate_biases` tensor.
pub fn rescale_init<'a>(named: impl IntoIterator<Item = (String, &'a mut Tensor)>, range: f64) -> Result<()> {
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::Config(format!("init range must be positive, got {range}")));
    }
    let factor = range / INIT_RANGE;
    for (name, t) in named {
        let data = t.data_mut();
        if name.ends_with("gate_biases") {
            let h = data.len() / 4;
            for (i, v) in data.iter_mut().enumerate() {
                if !(h..2 * h).contains(&i) {
                    *v *= factor;
                }
            }
        } else {
            data.iter_mut().for_each(|v| *v *= factor);
        }
    }
    Ok(())
}

/// Stack of time-LSTM layers. Layer 1 reads the feature frame, layer `l > 1`
/// reads the output of layer `l − 1` at the same frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeLstmStack {
    pub layers: Vec<LstmpParams>,
}

impl TimeLstmStack {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let layers = (0..config.num_layers)
            .map(|l| {
                let input = if l == 0 { config.input_dim } else { config.proj_dim };
                LstmpParams::init(input, config.hidden_dim, config.proj_dim, true, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, p) in self.layers.iter().enumerate() {
            for (name, t) in ["gate_weights", "gate_biases", "proj_weights"].iter().zip(p.tensors()) {
                out.push((format!("{prefix}.{l}.{name}"), t));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|p| p.tensors_mut()).collect()
    }
}

/// Depth-LSTM sweep over the layer axis plus output layer. When `context` is
/// present (cltLSTM), the partner fed to layer `l + 1` is the look-ahead
/// embedding of layer `l`'s outputs over frames `t..=t+τ`, and the top-level
/// embedding feeds the output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthHead {
    pub tau: usize,
    /// Layer 1 has no partner weights: its partner `g^0` is always zero.
    pub layers: Vec<LstmpParams>,
    /// `context[l][δ]`, each `[proj_dim × proj_dim]`.
    pub context: Option<Vec<Vec<Tensor>>>,
    pub output: OutputLayer,
}

impl DepthHead {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (tau, with_context) = match config.variant {
            Variant::Ltlstm => (0, false),
            Variant::Cltlstm => (config.tau, true),
            Variant::PlainLstm => {
                return Err(Error::WrongVariant {
                    expected: "ltlstm or cltlstm",
                    actual: config.variant.to_string(),
                })
            }
        };
        let layers = (0..config.num_layers)
            .map(|l| LstmpParams::init(config.proj_dim, config.hidden_dim, config.proj_dim, l > 0, rng))
            .collect::<Result<Vec<_>>>()?;
        let context = with_context.then(|| {
            (0..config.num_layers)
                .map(|_| {
                    (0..=tau)
                        .map(|_| uniform(&[config.proj_dim, config.proj_dim], rng))
                        .collect()
                })
                .collect()
        });
        let output = OutputLayer::init(config.num_senones, config.proj_dim, rng);
        Ok(Self {
            tau,
            layers,
            context,
            output,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Added look-ahead of this head in frames.
    pub fn lookahead(&self) -> usize {
        if self.context.is_some() {
            self.layers.len() * self.tau
        } else {
            0
        }
    }

    pub(crate) fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, p) in self.layers.iter().enumerate() {
            for (name, t) in ["gate_weights", "gate_biases", "proj_weights"].iter().zip(p.tensors()) {
                out.push((format!("{prefix}.depth.{l}.{name}"), t));
            }
        }
        if let Some(ctx) = &self.context {
            for (l, mats) in ctx.iter().enumerate() {
                for (d, m) in mats.iter().enumerate() {
                    out.push((format!("{prefix}.context.{l}.{d}"), m));
                }
            }
        }
        out.push((format!("{prefix}.output.weights"), &self.output.weights));
        out.push((format!("{prefix}.output.bias"), &self.output.bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.layers.iter_mut().flat_map(|p| p.tensors_mut()).collect();
        if let Some(ctx) = &mut self.context {
            out.extend(ctx.iter_mut().flatten());
        }
        out.push(&mut self.output.weights);
        out.push(&mut self.output.bias);
        out
    }
}

/// Look-ahead embedding `ζ_t = Σ_δ G_δ g_{t+δ}` over a window of exactly
/// `τ + 1` depth outputs.
pub fn lookahead_embedding(window: &[Tensor], matrices: &[Tensor]) -> Result<Tensor> {
    let mut g = Eval::new();
    let vals: Vec<_> = window.iter().map(|w| g.constant(w.clone())).collect();
    let refs: Vec<_> = vals.iter().collect();
    lookahead_embedding_graph(&mut g, &refs, matrices).map(|v| v.into_owned())
}

pub(crate) fn lookahead_embedding_graph<'p, G: Graph<'p>>(
    g: &mut G,
    window: &[&G::V],
    matrices: &'p [Tensor],
) -> Result<G::V> {
    if window.len() != matrices.len() {
        return Err(Error::ShortWindow {
            got: window.len(),
            need: matrices.len(),
        });
    }
    let mut acc: Option<G::V> = None;
    for (gv, m) in window.iter().zip(matrices) {
        let mv = g.param(m);
        let term = g.matvec(&mv, gv)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(&a, &term)?,
        });
    }
    acc.ok_or(Error::Empty("look-ahead window"))
}

/// Output stage of a model: either a plain output layer on top of the time
/// stack, or a depth head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Head {
    Plain(OutputLayer),
    Depth(DepthHead),
}

/// Any model variant: configuration plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrajectoryModel {
    pub config: ModelConfig,
    pub time: TimeLstmStack,
    pub head: Head,
}

impl LayerTrajectoryModel {
    /// Seeded initialization: time stack first, then the head.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let time = TimeLstmStack::init(config, &mut rng)?;
        let head = match config.variant {
            Variant::PlainLstm => Head::Plain(OutputLayer::init(config.num_senones, config.proj_dim, &mut rng)),
            _ => Head::Depth(DepthHead::init(config, &mut rng)?),
        };
        Ok(Self {
            config: config.clone(),
            time,
            head,
        })
    }

    /// Seeded initialization with weights uniform in `±range` instead of
    /// `±INIT_RANGE`. Forget-gate biases stay at their initial value.
    pub fn init_with_range(config: &ModelConfig, seed: u64, range: f64) -> Result<Self> {
        let mut m = Self::init(config, seed)?;
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        rescale_init(names.into_iter().zip(m.params_mut()), range)?;
        Ok(m)
    }

    /// Model of the given shape with every parameter zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut m = Self::init(config, 0)?;
        for p in m.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(m)
    }

    pub fn from_parts(config: ModelConfig, time: TimeLstmStack, head: DepthHead) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            time,
            head: Head::Depth(head),
        })
    }

    pub fn depth_head(&self) -> Option<&DepthHead> {
        match &self.head {
            Head::Depth(d) => Some(d),
            Head::Plain(_) => None,
        }
    }

    pub fn depth_head_mut(&mut self) -> Option<&mut DepthHead> {
        match &mut self.head {
            Head::Depth(d) => Some(d),
            Head::Plain(_) => None,
        }
    }

    /// Parameters with stable names, in [`Parameterized::params`] order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.time.named_params("time");
        match &self.head {
            Head::Plain(o) => {
                out.push(("head.output.weights".into(), &o.weights));
                out.push(("head.output.bias".into(), &o.bias));
            }
            Head::Depth(d) => out.extend(d.named_params("head")),
        }
        out
    }

    /// Name of the parameter group a named parameter belongs to.
    pub fn group_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }

    pub fn param_groups() -> &'static [&'static str] {
        &["time", "head"]
    }

    /// Senone logits for a whole utterance, one per frame.
    pub fn forward(&self, frames: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut g = Eval::new();
        Ok(self
            .forward_graph(&mut g, frames)?
            .into_iter()
            .map(|v| v.into_owned())
            .collect())
    }

    /// Whole-utterance forward pass on any graph. Runs the streaming engine
    /// over all frames and flushes, so batch and streaming agree bitwise.
    pub fn forward_graph<'p, G: Graph<'p>>(&'p self, g: &mut G, frames: &[Tensor]) -> Result<Vec<G::V>> {
        let mut time = TimeStream::new(g, &self.time);
        let mut head = HeadStream::new(g, &self.head);
        let mut out = Vec::with_capacity(frames.len());
        for f in frames {
            let x = g.constant(f.clone());
            let hs = time.step(g, &x)?;
            out.extend(head.push(g, &hs)?.into_iter().map(|(_, v)| v));
        }
        out.extend(head.flush(g)?.into_iter().map(|(_, v)| v));
        Ok(out)
    }

    pub fn stream(&self) -> ModelStream<'_> {
        let mut g = Eval::new();
        ModelStream {
            time: TimeStream::new(&mut g, &self.time),
            head: HeadStream::new(&mut g, &self.head),
            g,
        }
    }

    fn expect_variant(&self, v: Variant, name: &'static str) -> Result<()> {
        if self.config.variant != v {
            return Err(Error::WrongVariant {
                expected: name,
                actual: self.config.variant.to_string(),
            });
        }
        Ok(())
    }
}

impl Parameterized for LayerTrajectoryModel {
    fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.time.params_mut();
        match &mut self.head {
            Head::Plain(o) => {
                out.push(&mut o.weights);
                out.push(&mut o.bias);
            }
            Head::Depth(d) => out.extend(d.params_mut()),
        }
        out
    }
}

/// Per-layer outputs `h_t^l` of a time-LSTM stack, indexed `[t][l]`.
pub fn forward_time_lstm(stack: &TimeLstmStack, frames: &[Tensor]) -> Result<Vec<Vec<Tensor>>> {
    let mut g = Eval::new();
    let mut ts = TimeStream::new(&mut g, stack);
    frames
        .iter()
        .map(|f| {
            let x = g.constant(f.clone());
            Ok(ts.step(&mut g, &x)?.into_iter().map(|v| v.into_owned()).collect())
        })
        .collect()
}

/// ltLSTM logits; rejects other variants.
pub fn forward_ltlstm(model: &LayerTrajectoryModel, frames: &[Tensor]) -> Result<Vec<Tensor>> {
    model.expect_variant(Variant::Ltlstm, "ltlstm")?;
    model.forward(frames)
}

/// cltLSTM logits; rejects other variants.
pub fn forward_cltlstm(model: &LayerTrajectoryModel, frames: &[Tensor]) -> Result<Vec<Tensor>> {
    model.expect_variant(Variant::Cltlstm, "cltlstm")?;
    model.forward(frames)
}

/// Incremental time-LSTM evaluation.
pub struct TimeStream<'p, G: Graph<'p>> {
    stack: &'p TimeLstmStack,
    states: Vec<(G::V, G::V)>,
    steps: usize,
}

impl<'p, G: Graph<'p>> TimeStream<'p, G> {
    pub fn new(g: &mut G, stack: &'p TimeLstmStack) -> Self {
        let states = stack
            .layers
            .iter()
            .map(|p| (g.zeros(p.hidden_dim), g.zeros(p.proj_dim)))
            .collect();
        Self {
            stack,
            states,
            steps: 0,
        }
    }

    /// Consumes one feature frame, returning `h_t^l` for every layer.
    pub fn step(&mut self, g: &mut G, frame: &G::V) -> Result<Vec<G::V>> {
        let mut input = frame.clone();
        let mut hs = Vec::with_capacity(self.states.len());
        for (p, (cell, out)) in self.stack.layers.iter().zip(self.states.iter_mut()) {
            let (c, h) = lstmp_step_graph(g, p, cell, Some(out), &input)?;
            *cell = c;
            *out = h.clone();
            input = h.clone();
            hs.push(h);
        }
        self.steps += 1;
        Ok(hs)
    }

    /// Number of frames consumed so far.
    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Incremental head evaluation. Depth outputs are buffered per layer until
/// the `τ` future frames each look-ahead embedding needs have arrived.
pub struct HeadStream<'p, G: Graph<'p>> {
    head: &'p Head,
    zero_cell: Option<G::V>,
    h_wait: Vec<VecDeque<G::V>>,
    // (g, c) per level, front is frame `front[l]`
    g_buf: Vec<VecDeque<(G::V, G::V)>>,
    front: Vec<usize>,
    pushed: usize,
}

impl<'p, G: Graph<'p>> HeadStream<'p, G> {
    pub fn new(g: &mut G, head: &'p Head) -> Self {
        let levels = match head {
            Head::Plain(_) => 0,
            Head::Depth(d) => d.num_layers(),
        };
        let zero_cell = match head {
            Head::Depth(d) => Some(g.zeros(d.layers[0].hidden_dim)),
            Head::Plain(_) => None,
        };
        Self {
            head,
            zero_cell,
            h_wait: (0..levels).map(|_| VecDeque::new()).collect(),
            g_buf: (0..levels).map(|_| VecDeque::new()).collect(),
            front: vec![0; levels],
            pushed: 0,
        }
    }

    /// Feeds the time-LSTM outputs of the next frame; returns every logit
    /// vector that became computable, tagged with its frame index.
    pub fn push(&mut self, g: &mut G, hs: &[G::V]) -> Result<Vec<(usize, G::V)>> {
        let t = self.pushed;
        self.pushed += 1;
        match self.head {
            Head::Plain(o) => {
                let top = hs.last().ok_or(Error::Empty("time-LSTM outputs"))?;
                Ok(vec![(t, o.apply(g, top)?)])
            }
            Head::Depth(d) => {
                if hs.len() != d.num_layers() {
                    return Err(Error::Shape {
                        operand: "time-LSTM outputs per frame",
                        expected: vec![d.num_layers()],
                        actual: vec![hs.len()],
                    });
                }
                let zero = self.zero_cell.clone().expect("depth head");
                let (c, gv) = lstmp_step_graph(g, &d.layers[0], &zero, None, &hs[0])?;
                self.g_buf[0].push_back((gv, c));
                for (l, h) in hs.iter().enumerate().skip(1) {
                    self.h_wait[l].push_back(h.clone());
                }
                self.process(g, d, false)
            }
        }
    }

    /// End of stream: pads each layer's look-ahead window with its last depth
    /// output and returns the remaining logits.
    pub fn flush(&mut self, g: &mut G) -> Result<Vec<(usize, G::V)>> {
        match self.head {
            Head::Plain(_) => Ok(Vec::new()),
            Head::Depth(d) => self.process(g, d, true),
        }
    }

    fn process(&mut self, g: &mut G, d: &'p DepthHead, flushing: bool) -> Result<Vec<(usize, G::V)>> {
        let levels = d.num_layers();
        let tau = if d.context.is_some() { d.tau } else { 0 };
        let mut out = Vec::new();
        for l in 0..levels {
            loop {
                let n = self.g_buf[l].len();
                if n == 0 || (!flushing && n < tau + 1) {
                    break;
                }
                let zeta = match &d.context {
                    Some(ctx) => {
                        let window: Vec<&G::V> = (0..=tau).map(|k| &self.g_buf[l][k.min(n - 1)].0).collect();
                        lookahead_embedding_graph(g, &window, &ctx[l])?
                    }
                    None => self.g_buf[l][0].0.clone(),
                };
                let (_, cell) = self.g_buf[l].pop_front().expect("non-empty");
                let frame = self.front[l];
                self.front[l] += 1;
                if l + 1 < levels {
                    let h = self.h_wait[l + 1]
                        .pop_front()
                        .expect("time output buffered for every depth frame");
                    let (c, gv) = lstmp_step_graph(g, &d.layers[l + 1], &cell, Some(&zeta), &h)?;
                    self.g_buf[l + 1].push_back((gv, c));
                } else {
                    out.push((frame, d.output.apply(g, &zeta)?));
                }
            }
        }
        Ok(out)
    }
}

/// Frame-by-frame inference for one stream.
pub struct ModelStream<'m> {
    g: Eval<'m>,
    time: TimeStream<'m, Eval<'m>>,
    head: HeadStream<'m, Eval<'m>>,
}

impl<'m> ModelStream<'m> {
    pub fn push(&mut self, frame: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let x = self.g.constant(frame.clone());
        let hs = self.time.step(&mut self.g, &x)?;
        Ok(self
            .head
            .push(&mut self.g, &hs)?
            .into_iter()
            .map(|(t, v)| (t, v.into_owned()))
            .collect())
    }

    pub fn finish(mut self) -> Result<Vec<(usize, Tensor)>> {
        Ok(self
            .head
            .flush(&mut self.g)?
            .into_iter()
            .map(|(t, v)| (t, v.into_owned()))
            .collect())
    }

    pub fn time_steps(&self) -> usize {
        self.time.steps()
    }
}
