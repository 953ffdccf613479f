//! LSTM cell with a linear output projection.
//!
//! Gate rows are stacked in the order input, forget, cell-candidate, output.
//! There are no peephole connections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Eval, Graph};
use crate::tensor::Tensor;

/// Half-width of the uniform initializer.
pub const INIT_RANGE: f64 = 0.05;
/// Initial forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmpParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub proj_dim: usize,
    /// Width of the recurrent partner concatenated after the input: either
    /// `proj_dim`, or 0 for a cell whose partner is always zero.
    pub recurrent_dim: usize,
    /// `[4·hidden_dim × (input_dim + recurrent_dim)]`
    pub gate_weights: Tensor,
    /// `[4·hidden_dim]`
    pub gate_biases: Tensor,
    /// `[proj_dim × hidden_dim]`
    pub proj_weights: Tensor,
}

/// Recurrent state of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub cell: Tensor,
    pub output: Tensor,
}

impl CellState {
    pub fn zeros(params: &LstmpParams) -> Self {
        Self {
            cell: Tensor::zeros(&[params.hidden_dim]),
            output: Tensor::zeros(&[params.proj_dim]),
        }
    }
}

impl LstmpParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, proj_dim: usize, recurrent: bool) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || proj_dim == 0 {
            return Err(Error::InvalidValue(format!(
                "lstmp dimensions must be >= 1 (input {input_dim}, hidden {hidden_dim}, proj {proj_dim})"
            )));
        }
        let recurrent_dim = if recurrent { proj_dim } else { 0 };
        Ok(Self {
            input_dim,
            hidden_dim,
            proj_dim,
            recurrent_dim,
            gate_weights: Tensor::zeros(&[4 * hidden_dim, input_dim + recurrent_dim]),
            gate_biases: Tensor::zeros(&[4 * hidden_dim]),
            proj_weights: Tensor::zeros(&[proj_dim, hidden_dim]),
        })
    }

    /// Uniform `[-INIT_RANGE, INIT_RANGE]` weights and biases, forget bias 1.
    pub fn init<R: Rng>(
        input_dim: usize,
        hidden_dim: usize,
        proj_dim: usize,
        recurrent: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(input_dim, hidden_dim, proj_dim, recurrent)?;
        for t in [&mut p.gate_weights, &mut p.gate_biases, &mut p.proj_weights] {
            for v in t.data_mut() {
                *v = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
            }
        }
        for v in &mut p.gate_biases.data_mut()[hidden_dim..2 * hidden_dim] {
            *v = FORGET_BIAS;
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.gate_weights.len() + self.gate_biases.len() + self.proj_weights.len()
    }

    /// Count without allocating, for the same dimensions.
    pub fn count(input_dim: usize, hidden_dim: usize, proj_dim: usize, recurrent: bool) -> usize {
        let r = if recurrent { proj_dim } else { 0 };
        4 * hidden_dim * (input_dim + r) + 4 * hidden_dim + proj_dim * hidden_dim
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.gate_weights, &self.gate_biases, &self.proj_weights]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.gate_weights, &mut self.gate_biases, &mut self.proj_weights]
    }

    fn validate(&self) -> Result<()> {
        let h = self.hidden_dim;
        self.gate_weights
            .expect_shape("gate_weights", &[4 * h, self.input_dim + self.recurrent_dim])?;
        self.gate_biases.expect_shape("gate_biases", &[4 * h])?;
        self.proj_weights.expect_shape("proj_weights", &[self.proj_dim, h])
    }
}

/// One cell step on any graph. Returns `(cell, output)`.
///
/// `partner` is the recurrent output fed back next to the input; it must be
/// `None` exactly when the cell has `recurrent_dim == 0`.
pub fn lstmp_step_graph<'p, G: Graph<'p>>(
    g: &mut G,
    params: &'p LstmpParams,
    prev_cell: &G::V,
    partner: Option<&G::V>,
    input: &G::V,
) -> Result<(G::V, G::V)> {
    params.validate()?;
    let h = params.hidden_dim;
    g.value(input).expect_shape("lstmp input", &[params.input_dim])?;
    g.value(prev_cell).expect_shape("lstmp previous cell", &[h])?;
    let x = match (partner, params.recurrent_dim) {
        (Some(r), d) if d > 0 => {
            g.value(r).expect_shape("lstmp recurrent output", &[d])?;
            g.concat(&[input.clone(), r.clone()])?
        }
        (None, 0) => input.clone(),
        (Some(r), _) => {
            return Err(Error::Shape {
                operand: "lstmp recurrent output",
                expected: vec![0],
                actual: g.value(r).shape().to_vec(),
            })
        }
        (None, d) => {
            return Err(Error::Shape {
                operand: "lstmp recurrent output",
                expected: vec![d],
                actual: vec![0],
            })
        }
    };
    let w = g.param(&params.gate_weights);
    let b = g.param(&params.gate_biases);
    let wx = g.matvec(&w, &x)?;
    let z = g.add(&wx, &b)?;
    let zi = g.slice(&z, 0, h)?;
    let zf = g.slice(&z, h, h)?;
    let zc = g.slice(&z, 2 * h, h)?;
    let zo = g.slice(&z, 3 * h, h)?;
    let i = g.sigmoid(&zi);
    let f = g.sigmoid(&zf);
    let cand = g.tanh(&zc);
    let o = g.sigmoid(&zo);
    let kept = g.mul(&f, prev_cell)?;
    let added = g.mul(&i, &cand)?;
    let cell = g.add(&kept, &added)?;
    let tc = g.tanh(&cell);
    let m = g.mul(&o, &tc)?;
    let p = g.param(&params.proj_weights);
    let out = g.matvec(&p, &m)?;
    Ok((cell, out))
}

/// Pure single step: the new state after consuming `input`.
pub fn lstmp_step(params: &LstmpParams, prev: &CellState, input: &Tensor) -> Result<CellState> {
    let mut g = Eval::new();
    let c = g.constant(prev.cell.clone());
    let x = g.constant(input.clone());
    let partner = if params.recurrent_dim > 0 {
        Some(g.constant(prev.output.clone()))
    } else {
        None
    };
    let (cell, out) = lstmp_step_graph(&mut g, params, &c, partner.as_ref(), &x)?;
    Ok(CellState {
        cell: cell.into_owned(),
        output: out.into_owned(),
    })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::InvalidValue("non-finite logits".into()));
    }
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::InvalidValue("non-finite logits".into()));
    }
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|v| v - lse).collect())
}

/// `log(Σ exp(v))` with max extraction; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.into_iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_zero_output() {
        let p = LstmpParams::zeros(3, 4, 2, true).unwrap();
        let s = lstmp_step(&p, &CellState::zeros(&p), &Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        assert!(s.output.data().iter().all(|&v| v == 0.0));
        assert!(s.cell.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_cell_matches_hand_computation() {
        // input 1, hidden 1, proj 1, recurrent 1: W = [wi_x wi_r; wf_x wf_r; wc_x wc_r; wo_x wo_r]
        let mut p = LstmpParams::zeros(1, 1, 1, true).unwrap();
        p.gate_weights = Tensor::new(vec![4, 2], vec![0.5, -0.3, 0.2, 0.4, 0.8, 0.1, -0.6, 0.7]).unwrap();
        p.gate_biases = Tensor::vector(vec![0.1, 1.0, -0.2, 0.3]).unwrap();
        p.proj_weights = Tensor::new(vec![1, 1], vec![1.5]).unwrap();
        let prev = CellState {
            cell: Tensor::vector(vec![0.25]).unwrap(),
            output: Tensor::vector(vec![-0.4]).unwrap(),
        };
        let x = 0.9;
        let r = -0.4;
        // hand arithmetic, written out gate by gate
        let i = sigmoid(0.5 * x - 0.3 * r + 0.1);
        let f = sigmoid(0.2 * x + 0.4 * r + 1.0);
        let c = (0.8 * x + 0.1 * r - 0.2).tanh();
        let o = sigmoid(-0.6 * x + 0.7 * r + 0.3);
        let cell = f * 0.25 + i * c;
        let out = 1.5 * o * cell.tanh();
        let s = lstmp_step(&p, &prev, &Tensor::vector(vec![x]).unwrap()).unwrap();
        assert!((s.cell.data()[0] - cell).abs() < 1e-15);
        assert!((s.output.data()[0] - out).abs() < 1e-15);
    }

    #[test]
    fn zero_input_decays_cell_by_forget_factor() {
        let mut p = LstmpParams::zeros(1, 1, 1, true).unwrap();
        // input column drives the candidate, recurrent column is zero
        p.gate_weights = Tensor::new(vec![4, 2], vec![3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        p.gate_biases = Tensor::vector(vec![0.0, 0.7, 0.0, 0.0]).unwrap();
        p.proj_weights = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let s0 = CellState::zeros(&p);
        let s1 = lstmp_step(&p, &s0, &Tensor::vector(vec![1.0]).unwrap()).unwrap();
        assert!(s1.cell.data()[0] > 0.0);
        let zero = Tensor::vector(vec![0.0]).unwrap();
        let s2 = lstmp_step(&p, &s1, &zero).unwrap();
        let s3 = lstmp_step(&p, &s2, &zero).unwrap();
        let f = sigmoid(0.7);
        assert_eq!(s2.cell.data()[0], f * s1.cell.data()[0]);
        assert_eq!(s3.cell.data()[0], f * s2.cell.data()[0]);
    }

    #[test]
    fn dimension_mismatch_names_operand() {
        let p = LstmpParams::zeros(3, 4, 2, true).unwrap();
        let err = lstmp_step(&p, &CellState::zeros(&p), &Tensor::vector(vec![1.0]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("lstmp input"), "{err}");
        let bad = CellState {
            cell: Tensor::zeros(&[3]),
            output: Tensor::zeros(&[2]),
        };
        let err = lstmp_step(&p, &bad, &Tensor::zeros(&[3])).unwrap_err();
        assert!(err.to_string().contains("previous cell"), "{err}");
    }

    #[test]
    fn step_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = LstmpParams::init(3, 5, 2, true, &mut rng).unwrap();
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]).unwrap();
        let a = lstmp_step(&p, &CellState::zeros(&p), &x).unwrap();
        let b = lstmp_step(&p, &CellState::zeros(&p), &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_sets_forget_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LstmpParams::init(2, 3, 2, false, &mut rng).unwrap();
        assert_eq!(&p.gate_biases.data()[3..6], &[1.0, 1.0, 1.0]);
        assert!(p.gate_weights.data().iter().all(|v| v.abs() <= INIT_RANGE));
        assert_eq!(p.num_params(), LstmpParams::count(2, 3, 2, false));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[2.0; 4]).unwrap(), vec![0.25; 4]);
        let s = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        let a = softmax(&[0.1, -0.5, 2.0]).unwrap();
        let b = softmax(&[1000.1, 999.5, 1002.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(softmax(&[]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-700.0f64..700.0, 1..40)) {
            let s = softmax(&v).unwrap();
            proptest::prop_assert!(s.iter().all(|&p| p >= 0.0));
            proptest::prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
