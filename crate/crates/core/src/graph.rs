//! Computation graphs over tensors.
//!
//! Model and loss code is written once against [`Graph`]. [`Eval`] runs it
//! directly on tensors; [`Tape`] records every operation so that
//! [`Tape::backward`] can replay it in reverse and produce gradients for every
//! parameter that took part.

use std::borrow::Cow;
use std::collections::HashMap;
use std::marker::PhantomData;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The operation set shared by forward evaluation and gradient recording.
pub trait Graph<'p> {
    type V: Clone;

    fn constant(&mut self, t: Tensor) -> Self::V;
    /// A model parameter. On a tape, repeated uses of the same tensor map to
    /// one leaf, so its gradient accumulates every use.
    fn param(&mut self, p: &'p Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// Matrix `[r x c]` times vector `[c]`.
    fn matvec(&mut self, m: &Self::V, x: &Self::V) -> Result<Self::V>;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn concat(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn slice(&mut self, a: &Self::V, start: usize, len: usize) -> Result<Self::V>;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, k: f64) -> Self::V;
    /// A scalar computed outside the graph, together with its gradient with
    /// respect to each parent. Lattice criteria use this to attach their
    /// closed-form gradients to the model outputs.
    fn custom_scalar(&mut self, value: f64, parents: Vec<(Self::V, Vec<f64>)>)
        -> Result<Self::V>;

    fn zeros(&mut self, n: usize) -> Self::V {
        self.constant(Tensor::zeros(&[n]))
    }
}

fn same_shape(operand: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            operand,
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect())
        .expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn concat_values(parts: &[&Tensor]) -> Result<Tensor> {
    let mut data = Vec::new();
    for p in parts {
        if p.shape().len() != 1 {
            return Err(Error::Shape {
                operand: "concat part",
                expected: vec![p.len()],
                actual: p.shape().to_vec(),
            });
        }
        data.extend_from_slice(p.data());
    }
    if data.is_empty() {
        return Err(Error::Empty("concat"));
    }
    Tensor::vector(data)
}

fn slice_value(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if len == 0 || start + len > a.len() {
        return Err(Error::Shape {
            operand: "slice range",
            expected: vec![a.len()],
            actual: vec![start + len],
        });
    }
    Tensor::vector(a.data()[start..start + len].to_vec())
}

fn matvec_value(m: &Tensor, x: &Tensor) -> Result<Tensor> {
    if m.shape().len() != 2 {
        return Err(Error::Shape {
            operand: "matvec matrix",
            expected: vec![0, x.len()],
            actual: m.shape().to_vec(),
        });
    }
    Tensor::vector(m.matvec(x.data())?)
}

/// Plain forward evaluation.
#[derive(Debug, Default)]
pub struct Eval<'p> {
    _params: PhantomData<&'p Tensor>,
}

impl<'p> Eval<'p> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<'p> Graph<'p> for Eval<'p> {
    type V = Cow<'p, Tensor>;

    fn constant(&mut self, t: Tensor) -> Self::V {
        Cow::Owned(t)
    }

    fn param(&mut self, p: &'p Tensor) -> Self::V {
        Cow::Borrowed(p)
    }

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor {
        v
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        same_shape("add operand", a, b)?;
        Ok(Cow::Owned(zip(a, b, |x, y| x + y)))
    }

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        same_shape("mul operand", a, b)?;
        Ok(Cow::Owned(zip(a, b, |x, y| x * y)))
    }

    fn matvec(&mut self, m: &Self::V, x: &Self::V) -> Result<Self::V> {
        matvec_value(m, x).map(Cow::Owned)
    }

    fn sigmoid(&mut self, a: &Self::V) -> Self::V {
        Cow::Owned(map(a, sigmoid))
    }

    fn tanh(&mut self, a: &Self::V) -> Self::V {
        Cow::Owned(map(a, f64::tanh))
    }

    fn concat(&mut self, parts: &[Self::V]) -> Result<Self::V> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        concat_values(&refs).map(Cow::Owned)
    }

    fn slice(&mut self, a: &Self::V, start: usize, len: usize) -> Result<Self::V> {
        slice_value(a, start, len).map(Cow::Owned)
    }

    fn sum(&mut self, a: &Self::V) -> Self::V {
        Cow::Owned(Tensor::scalar(a.sum()))
    }

    fn scale(&mut self, a: &Self::V, k: f64) -> Self::V {
        Cow::Owned(map(a, |v| v * k))
    }

    fn custom_scalar(
        &mut self,
        value: f64,
        parents: Vec<(Self::V, Vec<f64>)>,
    ) -> Result<Self::V> {
        for (p, g) in &parents {
            if p.len() != g.len() {
                return Err(Error::Shape {
                    operand: "custom gradient",
                    expected: vec![p.len()],
                    actual: vec![g.len()],
                });
            }
        }
        Ok(Cow::Owned(Tensor::scalar(value)))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    MatVec(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Sum(usize),
    Scale(usize, f64),
    Custom(Vec<(usize, Vec<f64>)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode gradient tape.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node>,
    // keyed by tensor address; the borrow `'p` pins every registered tensor
    params: HashMap<usize, usize>,
    _params: PhantomData<&'p Tensor>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<usize, usize>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradient for a parameter tensor; zeros if it never entered the graph.
    pub fn for_param(&self, p: &Tensor) -> Tensor {
        match self.params.get(&(p as *const Tensor as usize)) {
            Some(&i) => self.of(Var(i)),
            None => Tensor::zeros(p.shape()),
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Replays the tape backwards from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.val(loss).shape().to_vec();
        if self.val(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], i: usize, n: usize) -> &mut Vec<f64> {
            grads[i].get_or_insert_with(|| vec![0.0; n])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for p in [*a, *b] {
                        let ga = acc(&mut grads, p, g.len());
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    let da: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    let ga = acc(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&da).for_each(|(x, y)| *x += y);
                    let gb = acc(&mut grads, *b, g.len());
                    gb.iter_mut().zip(&db).for_each(|(x, y)| *x += y);
                }
                Op::MatVec(m, x) => {
                    let mv = &self.nodes[*m].value;
                    let xv = self.nodes[*x].value.data();
                    let cols = xv.len();
                    {
                        let gm = acc(&mut grads, *m, mv.len());
                        for (r, &gr) in g.iter().enumerate() {
                            if gr == 0.0 {
                                continue;
                            }
                            let row = &mut gm[r * cols..(r + 1) * cols];
                            row.iter_mut().zip(xv).for_each(|(w, v)| *w += gr * v);
                        }
                    }
                    let mut dx = vec![0.0; cols];
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &mv.data()[r * cols..(r + 1) * cols];
                        dx.iter_mut().zip(row).for_each(|(d, w)| *d += gr * w);
                    }
                    let gx = acc(&mut grads, *x, cols);
                    gx.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    let ga = acc(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    let ga = acc(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.len();
                        let gp = acc(&mut grads, p, n);
                        gp.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(x, y)| *x += y);
                        off += n;
                    }
                }
                Op::Slice(a, start) => {
                    let n = self.nodes[*a].value.len();
                    let ga = acc(&mut grads, *a, n);
                    ga[*start..*start + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, y)| *x += y);
                }
                Op::Sum(a) => {
                    let n = self.nodes[*a].value.len();
                    let ga = acc(&mut grads, *a, n);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
                Op::Scale(a, k) => {
                    let ga = acc(&mut grads, *a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += k * y);
                }
                Op::Custom(parents) => {
                    for (p, local) in parents {
                        let gp = acc(&mut grads, *p, local.len());
                        gp.iter_mut().zip(local).for_each(|(x, y)| *x += g[0] * y);
                    }
                }
            }
            // keep leaf gradients; interior ones are no longer needed
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

impl<'p> Graph<'p> for Tape<'p> {
    type V = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn param(&mut self, p: &'p Tensor) -> Var {
        let key = p as *const Tensor as usize;
        if let Some(&i) = self.params.get(&key) {
            return Var(i);
        }
        let v = self.push(p.clone(), Op::Leaf);
        self.params.insert(key, v.0);
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("add operand", self.val(*a), self.val(*b))?;
        let v = zip(self.val(*a), self.val(*b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("mul operand", self.val(*a), self.val(*b))?;
        let v = zip(self.val(*a), self.val(*b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    fn matvec(&mut self, m: &Var, x: &Var) -> Result<Var> {
        let v = matvec_value(self.val(*m), self.val(*x))?;
        Ok(self.push(v, Op::MatVec(m.0, x.0)))
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        let v = map(self.val(*a), sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    fn tanh(&mut self, a: &Var) -> Var {
        let v = map(self.val(*a), f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
        let v = concat_values(&refs)?;
        Ok(self.push(v, Op::Concat(parts.iter().map(|p| p.0).collect())))
    }

    fn slice(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let v = slice_value(self.val(*a), start, len)?;
        Ok(self.push(v, Op::Slice(a.0, start)))
    }

    fn sum(&mut self, a: &Var) -> Var {
        let v = Tensor::scalar(self.val(*a).sum());
        self.push(v, Op::Sum(a.0))
    }

    fn scale(&mut self, a: &Var, k: f64) -> Var {
        let v = map(self.val(*a), |x| x * k);
        self.push(v, Op::Scale(a.0, k))
    }

    fn custom_scalar(&mut self, value: f64, parents: Vec<(Var, Vec<f64>)>) -> Result<Var> {
        for (p, g) in &parents {
            if self.val(*p).len() != g.len() {
                return Err(Error::Shape {
                    operand: "custom gradient",
                    expected: vec![self.val(*p).len()],
                    actual: vec![g.len()],
                });
            }
        }
        let ps = parents.into_iter().map(|(p, g)| (p.0, g)).collect();
        Ok(self.push(Tensor::scalar(value), Op::Custom(ps)))
    }
}

/// A scalar loss over a flat parameter list, evaluable on any [`Graph`].
pub trait LossFn {
    fn loss<'p, G: Graph<'p>>(&self, g: &mut G, params: &'p [Tensor]) -> Result<G::V>;
}

/// Forward value of `loss` at `params`.
pub fn eval_loss<L: LossFn>(loss: &L, params: &[Tensor]) -> Result<f64> {
    let mut g = Eval::new();
    let out = loss.loss(&mut g, params)?;
    if out.len() != 1 {
        return Err(Error::NonScalarLoss(out.shape().to_vec()));
    }
    Ok(out.data()[0])
}

/// Loss value and one gradient tensor per parameter tensor.
pub fn grad<L: LossFn>(loss: &L, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let out = loss.loss(&mut tape, params)?;
    let value = tape.value(&out).data()[0];
    let grads = tape.backward(out)?;
    Ok((value, params.iter().map(|p| grads.for_param(p)).collect()))
}

/// Anything exposing an ordered list of parameter tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

impl Parameterized for Vec<Tensor> {
    fn params(&self) -> Vec<&Tensor> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }
}

/// Central-difference gradient of `f` at `model`.
pub fn numeric_gradient<M, F>(model: &M, mut f: F, step: f64) -> Result<Vec<Tensor>>
where
    M: Parameterized + Clone,
    F: FnMut(&M) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidValue(format!("step must be positive, got {step}")));
    }
    let mut probe = model.clone();
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (k, shape) in shapes.iter().enumerate() {
        let n: usize = shape.iter().product();
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = probe.params()[k].data()[i];
            probe.params_mut()[k].data_mut()[i] = orig + step;
            let plus = f(&probe)?;
            probe.params_mut()[k].data_mut()[i] = orig - step;
            let minus = f(&probe)?;
            probe.params_mut()[k].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * step);
        }
        out.push(Tensor::new(shape.clone(), g)?);
    }
    Ok(out)
}

/// Absolute difference under which a coordinate always passes.
pub const GRAD_ABS_FLOOR: f64 = 1e-7;

/// Outcome of an analytic-vs-numeric gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative deviation per parameter tensor.
    pub per_param: Vec<f64>,
    pub worst: f64,
    /// Largest absolute analytic-numeric difference over all coordinates.
    pub max_abs: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Relative deviation between two gradient coordinates, zero under the
/// absolute floor.
pub fn relative_deviation(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if !diff.is_finite() {
        return f64::INFINITY;
    }
    if diff <= abs_floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

pub fn compare_gradients(analytic: &[Tensor], numeric: &[Tensor], tol: f64) -> Result<GradCheckReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::Shape {
            operand: "gradient list",
            expected: vec![numeric.len()],
            actual: vec![analytic.len()],
        });
    }
    let mut per_param = Vec::with_capacity(analytic.len());
    let mut max_abs: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        a.expect_shape("analytic gradient", n.shape())?;
        let worst = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(&x, &y)| relative_deviation(x, y, GRAD_ABS_FLOOR))
            .fold(0.0, f64::max);
        per_param.push(worst);
        max_abs = a.data().iter().zip(n.data()).map(|(x, y)| (x - y).abs()).fold(max_abs, f64::max);
    }
    let worst = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        worst,
        max_abs,
        tol,
        passed: worst <= tol,
    })
}

/// Checks [`grad`] against central differences for a flat-parameter loss.
pub fn finite_diff_check<L: LossFn>(
    loss: &L,
    params: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = grad(loss, params)?;
    let owned: Vec<Tensor> = params.to_vec();
    let numeric = numeric_gradient(&owned, |p| eval_loss(loss, p), step)?;
    compare_gradients(&analytic, &numeric, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumLoss;
    impl LossFn for SumLoss {
        fn loss<'p, G: Graph<'p>>(&self, g: &mut G, params: &'p [Tensor]) -> Result<G::V> {
            let mut total = g.constant(Tensor::scalar(0.0));
            for p in params {
                let v = g.param(p);
                let s = g.sum(&v);
                total = g.add(&total, &s)?;
            }
            Ok(total)
        }
    }

    struct ZeroLoss;
    impl LossFn for ZeroLoss {
        fn loss<'p, G: Graph<'p>>(&self, g: &mut G, params: &'p [Tensor]) -> Result<G::V> {
            let v = g.param(&params[0]);
            let s = g.sum(&v);
            Ok(g.scale(&s, 0.0))
        }
    }

    struct Quadratic;
    impl LossFn for Quadratic {
        fn loss<'p, G: Graph<'p>>(&self, g: &mut G, params: &'p [Tensor]) -> Result<G::V> {
            let v = g.param(&params[0]);
            let sq = g.mul(&v, &v)?;
            Ok(g.sum(&sq))
        }
    }

    struct VectorLoss;
    impl LossFn for VectorLoss {
        fn loss<'p, G: Graph<'p>>(&self, g: &mut G, params: &'p [Tensor]) -> Result<G::V> {
            Ok(g.param(&params[0]))
        }
    }

    /// Every op on one graph, to exercise each backward rule.
    struct Mixed;
    impl LossFn for Mixed {
        fn loss<'p, G: Graph<'p>>(&self, g: &mut G, params: &'p [Tensor]) -> Result<G::V> {
            let m = g.param(&params[0]);
            let x = g.param(&params[1]);
            let y = g.matvec(&m, &x)?;
            let s = g.sigmoid(&y);
            let t = g.tanh(&x);
            let c = g.concat(&[s.clone(), t])?;
            let sl = g.slice(&c, 1, 3)?;
            let p = g.mul(&sl, &sl)?;
            let q = g.scale(&p, 0.7);
            let tot = g.sum(&q);
            let xv = g.value(&x).data().to_vec();
            let extra = g.custom_scalar(
                xv.iter().map(|v| v * v * v).sum(),
                vec![(x.clone(), xv.iter().map(|v| 3.0 * v * v).collect())],
            )?;
            g.add(&tot, &extra)
        }
    }

    fn params() -> Vec<Tensor> {
        vec![
            Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.9, -0.4]).unwrap(),
            Tensor::vector(vec![0.2, -0.7, 1.1]).unwrap(),
        ]
    }

    #[test]
    fn linear_loss_gives_unit_gradients() {
        let (v, g) = grad(&SumLoss, &params()).unwrap();
        assert!((v - (1.2 + 0.6)).abs() < 1e-12);
        for t in g {
            assert!(t.data().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let (_, g) = grad(&ZeroLoss, &params()).unwrap();
        assert!(g.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        assert!(matches!(grad(&VectorLoss, &params()), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn quadratic_passes_tight_check() {
        let r = finite_diff_check(&Quadratic, &params(), 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let r = finite_diff_check(&Mixed, &params(), 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let p = params();
        let (_, mut analytic) = grad(&Mixed, &p).unwrap();
        analytic[1].data_mut()[0] += 0.05;
        let numeric = numeric_gradient(&p, |q| eval_loss(&Mixed, q), 1e-5).unwrap();
        let r = compare_gradients(&analytic, &numeric, 1e-4).unwrap();
        assert!(!r.passed);
        assert!(r.per_param[1] > 1e-3 && r.per_param[0] <= 1e-6);
    }

    #[test]
    fn step_must_be_positive() {
        assert!(finite_diff_check(&Quadratic, &params(), 0.0, 1e-6).is_err());
    }

    #[test]
    fn gradient_shapes_match_params() {
        let p = params();
        let (_, g) = grad(&Mixed, &p).unwrap();
        for (a, b) in g.iter().zip(&p) {
            assert_eq!(a.shape(), b.shape());
        }
    }
}
