//! Training criteria over frame logits.
//!
//! Every criterion maps a `frames × senones` logit matrix to a scalar and its
//! gradient with respect to those logits ([`FrameCriterion`]). Model-level
//! losses attach that closed-form gradient to the model graph, so back-prop
//! through the recurrences is shared by all criteria.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Eval, Graph, Parameterized, Tape};
use crate::lattice::{enumerate_paths, forward_backward_with, Lattice, Path, SenoneId, WordId};
use crate::lstmp::{log_softmax, log_sum_exp, softmax};
use crate::models::LayerTrajectoryModel;
use crate::scoring::edit_distance;
use crate::tensor::{Matrix, Tensor};

/// The training criteria a stage can optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CriterionKind {
    Ce,
    Mmi,
    Embr,
    SeqTs,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 4] = [Self::Ce, Self::Mmi, Self::Embr, Self::SeqTs];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ce => "CE",
            Self::Mmi => "MMI",
            Self::Embr => "EMBR",
            Self::SeqTs => "SEQ_TS",
        }
    }
}

impl std::fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Log priors and acoustic scale turning posteriors into scaled likelihoods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticScale {
    pub log_priors: Vec<f64>,
    pub kappa: f64,
}

impl AcousticScale {
    pub fn new(priors: &[f64], kappa: f64) -> Result<Self> {
        if priors.is_empty() {
            return Err(Error::Empty("priors"));
        }
        if let Some(p) = priors.iter().find(|&&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidValue(format!("prior entries must be positive, got {p}")));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidValue(format!("priors sum to {total}, not 1")));
        }
        if !kappa.is_finite() || kappa < 0.0 {
            return Err(Error::InvalidValue(format!("acoustic scale must be >= 0, got {kappa}")));
        }
        Ok(Self {
            log_priors: priors.iter().map(|p| p.ln()).collect(),
            kappa,
        })
    }

    pub fn uniform(num_senones: usize, kappa: f64) -> Self {
        Self {
            log_priors: vec![-(num_senones as f64).ln(); num_senones],
            kappa,
        }
    }

    pub fn num_senones(&self) -> usize {
        self.log_priors.len()
    }

    /// Scores from per-frame log posteriors.
    pub fn from_log_posteriors(&self, log_post: &Matrix) -> Result<Matrix> {
        expect_cols("log posteriors", log_post, self.num_senones())?;
        let mut out = Matrix::zeros(log_post.rows(), log_post.cols());
        for t in 0..log_post.rows() {
            for (s, (o, lp)) in out.row_mut(t).iter_mut().zip(log_post.row(t)).enumerate() {
                *o = self.kappa * (lp - self.log_priors[s]);
            }
        }
        Ok(out)
    }
}

/// `κ · (log P(s | x_t) − log prior(s))` for every frame and senone.
pub fn acoustic_score(posteriors: &Matrix, priors: &[f64], kappa: f64) -> Result<Matrix> {
    let scale = AcousticScale::new(priors, kappa)?;
    let mut logp = Matrix::zeros(posteriors.rows(), posteriors.cols());
    for t in 0..posteriors.rows() {
        for (o, p) in logp.row_mut(t).iter_mut().zip(posteriors.row(t)) {
            *o = p.ln();
        }
    }
    scale.from_log_posteriors(&logp)
}

fn expect_cols(operand: &'static str, m: &Matrix, cols: usize) -> Result<()> {
    if m.cols() != cols {
        return Err(Error::Shape {
            operand,
            expected: vec![cols],
            actual: vec![m.cols()],
        });
    }
    Ok(())
}

fn expect_rows(operand: &'static str, m: &Matrix, rows: usize) -> Result<()> {
    if m.rows() != rows {
        return Err(Error::Shape {
            operand,
            expected: vec![rows],
            actual: vec![m.rows()],
        });
    }
    Ok(())
}

pub fn log_posteriors(logits: &Matrix) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = logits.iter_rows().map(log_softmax).collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

pub fn posteriors(logits: &Matrix) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = logits.iter_rows().map(softmax).collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

/// Converts a gradient w.r.t. log-softmax outputs into one w.r.t. logits.
pub fn logit_gradient(d_logpost: &Matrix, logits: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for t in 0..logits.rows() {
        let p = softmax(logits.row(t))?;
        let total: f64 = d_logpost.row(t).iter().sum();
        for ((o, g), pi) in out.row_mut(t).iter_mut().zip(d_logpost.row(t)).zip(p) {
            *o = g - pi * total;
        }
    }
    Ok(out)
}

/// A scalar function of frame logits with its logit gradient.
pub trait FrameCriterion {
    fn evaluate(&self, logits: &Matrix) -> Result<(f64, Matrix)>;
}

fn check_alignment(align: &[SenoneId], logits: &Matrix) -> Result<()> {
    if align.len() != logits.rows() {
        return Err(Error::Shape {
            operand: "alignment",
            expected: vec![logits.rows()],
            actual: vec![align.len()],
        });
    }
    if let Some(&s) = align.iter().find(|&&s| s as usize >= logits.cols()) {
        return Err(Error::Shape {
            operand: "alignment senone",
            expected: vec![logits.cols()],
            actual: vec![s as usize + 1],
        });
    }
    Ok(())
}

/// Mean frame cross-entropy against reference senones.
pub struct Ce<'a> {
    pub align: &'a [SenoneId],
}

impl FrameCriterion for Ce<'_> {
    fn evaluate(&self, logits: &Matrix) -> Result<(f64, Matrix)> {
        check_alignment(self.align, logits)?;
        let n = logits.rows() as f64;
        let mut loss = 0.0;
        let mut grad = Matrix::zeros(logits.rows(), logits.cols());
        for (t, &a) in self.align.iter().enumerate() {
            let lp = log_softmax(logits.row(t))?;
            loss -= lp[a as usize];
            for (g, l) in grad.row_mut(t).iter_mut().zip(&lp) {
                *g = l.exp() / n;
            }
            grad.add_at(t, a as usize, -1.0 / n);
        }
        Ok((loss / n, grad))
    }
}

/// Maximum mutual information: `−(numerator − log Σ_den)`.
///
/// The numerator is the reference alignment scored like any lattice path
/// (acoustic plus `numerator_lm`); the denominator is the lattice rescored
/// with the current model.
pub struct Mmi<'a> {
    pub align: &'a [SenoneId],
    pub numerator_lm: f64,
    pub den: &'a Lattice,
    pub scale: &'a AcousticScale,
}

impl FrameCriterion for Mmi<'_> {
    fn evaluate(&self, logits: &Matrix) -> Result<(f64, Matrix)> {
        check_alignment(self.align, logits)?;
        expect_rows("denominator lattice frames", logits, self.den.num_frames())?;
        let ac = self.scale.from_log_posteriors(&log_posteriors(logits)?)?;
        let num: f64 = self.align.iter().enumerate().map(|(t, &s)| ac.get(t, s as usize)).sum::<f64>()
            + self.numerator_lm;
        let fb = forward_backward_with(self.den, &arc_scores(self.den, &ac)?, logits.cols())?;
        let mut d = fb.occupancy;
        for (t, &s) in self.align.iter().enumerate() {
            d.add_at(t, s as usize, -1.0);
        }
        scale_in_place(&mut d, self.scale.kappa);
        Ok((fb.total - num, logit_gradient(&d, logits)?))
    }
}

fn arc_scores(lat: &Lattice, ac: &Matrix) -> Result<Vec<f64>> {
    let acoustic = lat.acoustic_scores(ac)?;
    Ok(acoustic.iter().zip(lat.arcs()).map(|(a, arc)| a + arc.lm).collect())
}

fn scale_in_place(m: &mut Matrix, k: f64) {
    for t in 0..m.rows() {
        m.row_mut(t).iter_mut().for_each(|v| *v *= k);
    }
}

/// A fixed hypothesis for n-best criteria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub words: Vec<WordId>,
    pub senones: Vec<SenoneId>,
    pub lm: f64,
}

impl Hypothesis {
    pub fn from_path(lat: &Lattice, path: &Path) -> Self {
        Self {
            words: path.words(lat),
            senones: path.senones(lat),
            lm: path.arcs.iter().map(|&a| lat.arcs()[a].lm).sum(),
        }
    }
}

/// Expected risk under the softmax of hypothesis scores, and its gradient
/// `P̂_i · (r_i − E[r])` w.r.t. each score.
pub fn embr_loss(scores: &[f64], risks: &[f64]) -> Result<(f64, Vec<f64>)> {
    if scores.is_empty() {
        return Err(Error::Empty("n-best list"));
    }
    if scores.len() != risks.len() {
        return Err(Error::Shape {
            operand: "risks",
            expected: vec![scores.len()],
            actual: vec![risks.len()],
        });
    }
    let p = softmax(scores)?;
    let expected: f64 = p.iter().zip(risks).map(|(p, r)| p * r).sum();
    let grad = p.iter().zip(risks).map(|(p, r)| p * (r - expected)).collect();
    Ok((expected, grad))
}

/// Word-level expected edit distance over a fixed n-best list.
pub struct Embr<'a> {
    pub nbest: &'a [Hypothesis],
    pub reference: &'a [WordId],
    pub scale: &'a AcousticScale,
}

impl FrameCriterion for Embr<'_> {
    fn evaluate(&self, logits: &Matrix) -> Result<(f64, Matrix)> {
        let ac = self.scale.from_log_posteriors(&log_posteriors(logits)?)?;
        let mut scores = Vec::with_capacity(self.nbest.len());
        for h in self.nbest {
            check_alignment(&h.senones, logits)?;
            let a: f64 = h.senones.iter().enumerate().map(|(t, &s)| ac.get(t, s as usize)).sum();
            scores.push(a + h.lm);
        }
        let risks: Vec<f64> = self
            .nbest
            .iter()
            .map(|h| edit_distance(&h.words, self.reference) as f64)
            .collect();
        let (loss, g) = embr_loss(&scores, &risks)?;
        let mut d = Matrix::zeros(logits.rows(), logits.cols());
        for (h, gi) in self.nbest.iter().zip(g) {
            for (t, &s) in h.senones.iter().enumerate() {
                d.add_at(t, s as usize, gi);
            }
        }
        scale_in_place(&mut d, self.scale.kappa);
        Ok((loss, logit_gradient(&d, logits)?))
    }
}

/// Sequence-level teacher-student cross-entropy over a fixed lattice:
/// `−Σ_H P_T(H) log P_S(H)`, teacher paths scored with `teacher_scores`.
pub struct SeqTs<'a> {
    pub lat: &'a Lattice,
    /// Teacher per-frame senone log-scores (already scaled).
    pub teacher_scores: &'a Matrix,
    pub scale: &'a AcousticScale,
}

impl FrameCriterion for SeqTs<'_> {
    fn evaluate(&self, logits: &Matrix) -> Result<(f64, Matrix)> {
        expect_rows("teacher scores", logits, self.teacher_scores.rows())?;
        expect_cols("teacher scores", self.teacher_scores, logits.cols())?;
        let student = self.scale.from_log_posteriors(&log_posteriors(logits)?)?;
        let (loss, mut d) = seq_ts_from_scores(self.lat, &student, self.teacher_scores)?;
        scale_in_place(&mut d, self.scale.kappa);
        Ok((loss, logit_gradient(&d, logits)?))
    }
}

/// Loss and its gradient `γ_S − γ_T` w.r.t. the student frame scores.
pub fn seq_ts_from_scores(lat: &Lattice, student: &Matrix, teacher: &Matrix) -> Result<(f64, Matrix)> {
    let s_scores = arc_scores(lat, student)?;
    let fb_s = forward_backward_with(lat, &s_scores, student.cols())?;
    let fb_t = forward_backward_with(lat, &arc_scores(lat, teacher)?, student.cols())?;
    let loss = fb_s.total - fb_t.expect(&s_scores);
    let mut d = fb_s.occupancy;
    for t in 0..d.rows() {
        for (g, gt) in d.row_mut(t).iter_mut().zip(fb_t.occupancy.row(t)) {
            *g -= gt;
        }
    }
    Ok((loss, d))
}

/// Entropy of the lattice path distribution under `scores`.
pub fn lattice_entropy(lat: &Lattice, scores: &Matrix) -> Result<f64> {
    let s = arc_scores(lat, scores)?;
    let fb = forward_backward_with(lat, &s, scores.cols())?;
    Ok(fb.total - fb.expect(&s))
}

/// Teacher weights `α_k`, non-negative and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub weights: Vec<f64>,
}

impl EnsembleSpec {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let spec = Self { weights };
        spec.validate()?;
        Ok(spec)
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Empty("ensemble weights"));
        }
        if self.weights.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config(format!("ensemble weights must be >= 0: {:?}", self.weights)));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("ensemble weights sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// `Σ_k α_k P_k` row by row.
pub fn frame_combine(teachers: &[Matrix], spec: &EnsembleSpec) -> Result<Matrix> {
    spec.validate()?;
    if teachers.len() != spec.weights.len() {
        return Err(Error::Shape {
            operand: "teacher list",
            expected: vec![spec.weights.len()],
            actual: vec![teachers.len()],
        });
    }
    let first = &teachers[0];
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for (m, &a) in teachers.iter().zip(&spec.weights) {
        expect_rows("teacher posteriors", m, first.rows())?;
        expect_cols("teacher posteriors", m, first.cols())?;
        for t in 0..m.rows() {
            for (o, p) in out.row_mut(t).iter_mut().zip(m.row(t)) {
                *o += a * p;
            }
        }
    }
    Ok(out)
}

/// Hypothesis-level mixture `Σ_k α_k P_k(H)` over every lattice path, each
/// teacher's path posterior using its own frame scores. Enumerates paths, so
/// intended for small lattices.
pub fn hyp_combine(
    lat: &Lattice,
    teacher_scores: &[Matrix],
    spec: &EnsembleSpec,
    cap: usize,
) -> Result<Vec<(Path, f64)>> {
    spec.validate()?;
    if teacher_scores.len() != spec.weights.len() {
        return Err(Error::Shape {
            operand: "teacher list",
            expected: vec![spec.weights.len()],
            actual: vec![teacher_scores.len()],
        });
    }
    let paths = enumerate_paths(lat, cap)?;
    let mut mix = vec![0.0; paths.len()];
    for (scores, &a) in teacher_scores.iter().zip(&spec.weights) {
        let arc = arc_scores(lat, scores)?;
        let totals: Vec<f64> = paths.iter().map(|p| p.arcs.iter().map(|&i| arc[i]).sum()).collect();
        let z = log_sum_exp(totals.iter().copied());
        for (m, s) in mix.iter_mut().zip(&totals) {
            *m += a * (s - z).exp();
        }
    }
    Ok(paths.into_iter().zip(mix).collect())
}

fn logits_matrix<'p, G: Graph<'p>>(g: &G, outs: &[G::V]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = outs.iter().map(|v| g.value(v).data().to_vec()).collect();
    Matrix::from_rows(&rows)
}

/// Criterion value at the model's current parameters.
pub fn criterion_value<C: FrameCriterion>(model: &LayerTrajectoryModel, frames: &[Tensor], c: &C) -> Result<f64> {
    let mut g = Eval::new();
    let outs = model.forward_graph(&mut g, frames)?;
    Ok(c.evaluate(&logits_matrix(&g, &outs)?)?.0)
}

/// Criterion value and one gradient per model parameter tensor, in
/// [`Parameterized::params`] order.
pub fn criterion_grad<C: FrameCriterion>(
    model: &LayerTrajectoryModel,
    frames: &[Tensor],
    c: &C,
) -> Result<(f64, Vec<Tensor>)> {
    if frames.is_empty() {
        return Err(Error::Empty("frames"));
    }
    let mut tape = Tape::new();
    let outs = model.forward_graph(&mut tape, frames)?;
    let logits = logits_matrix(&tape, &outs)?;
    let (value, d) = c.evaluate(&logits)?;
    let parents = outs.into_iter().zip(d.iter_rows()).map(|(v, r)| (v, r.to_vec())).collect();
    let loss = tape.custom_scalar(value, parents)?;
    let grads = tape.backward(loss)?;
    Ok((value, model.params().into_iter().map(|p| grads.for_param(p)).collect()))
}

pub fn ce_loss(model: &LayerTrajectoryModel, frames: &[Tensor], align: &[SenoneId]) -> Result<(f64, Vec<Tensor>)> {
    criterion_grad(model, frames, &Ce { align })
}

pub fn mmi_loss(
    model: &LayerTrajectoryModel,
    frames: &[Tensor],
    align: &[SenoneId],
    numerator_lm: f64,
    den: &Lattice,
    scale: &AcousticScale,
) -> Result<(f64, Vec<Tensor>)> {
    criterion_grad(model, frames, &Mmi { align, numerator_lm, den, scale })
}

pub fn seq_ts_loss(
    student: &LayerTrajectoryModel,
    frames: &[Tensor],
    lat: &Lattice,
    teacher_posteriors: &Matrix,
    scale: &AcousticScale,
) -> Result<(f64, Vec<Tensor>)> {
    let mut logp = Matrix::zeros(teacher_posteriors.rows(), teacher_posteriors.cols());
    for t in 0..logp.rows() {
        for (o, p) in logp.row_mut(t).iter_mut().zip(teacher_posteriors.row(t)) {
            *o = p.ln();
        }
    }
    let teacher_scores = scale.from_log_posteriors(&logp)?;
    criterion_grad(student, frames, &SeqTs { lat, teacher_scores: &teacher_scores, scale })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_priors_add_log_senones() {
        let post = Matrix::from_rows(&[vec![0.5, 0.25, 0.25]]).unwrap();
        let a = acoustic_score(&post, &[1.0 / 3.0; 3], 1.0).unwrap();
        for (s, p) in post.row(0).iter().enumerate() {
            assert!((a.get(0, s) - (p.ln() + 3f64.ln())).abs() < 1e-12);
        }
        let z = acoustic_score(&post, &[1.0 / 3.0; 3], 0.0).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_senone_hand_case() {
        // posteriors (0.8, 0.2), priors (0.4, 0.6), κ = 2
        let post = Matrix::from_rows(&[vec![0.8, 0.2]]).unwrap();
        let a = acoustic_score(&post, &[0.4, 0.6], 2.0).unwrap();
        assert!((a.get(0, 0) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((a.get(0, 1) - 2.0 * (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_prior_rejected() {
        let post = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(acoustic_score(&post, &[1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn ce_of_uniform_logits_is_log_s() {
        let logits = Matrix::zeros(3, 5);
        let (l, _) = Ce { align: &[0, 4, 2] }.evaluate(&logits).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_large_margin_goes_to_zero() {
        let logits = Matrix::from_rows(&[vec![50.0, 0.0, 0.0]]).unwrap();
        let (l, _) = Ce { align: &[0] }.evaluate(&logits).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn ce_rejects_bad_alignment() {
        let logits = Matrix::zeros(2, 3);
        assert!(Ce { align: &[0] }.evaluate(&logits).is_err());
        assert!(Ce { align: &[0, 3] }.evaluate(&logits).is_err());
    }

    #[test]
    fn embr_examples() {
        let (l, g) = embr_loss(&[1.0, -2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let (l, _) = embr_loss(&[0.3, 0.3], &[0.0, 2.0]).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        assert!(embr_loss(&[], &[]).is_err());
    }

    #[test]
    fn embr_gradient_matches_differences() {
        let scores = [0.2, -1.0, 0.7, 0.1];
        let risks = [1.0, 0.0, 3.0, 2.0];
        let (_, g) = embr_loss(&scores, &risks).unwrap();
        let h = 1e-6;
        for i in 0..scores.len() {
            let mut p = scores;
            p[i] += h;
            let mut m = scores;
            m[i] -= h;
            let fd = (embr_loss(&p, &risks).unwrap().0 - embr_loss(&m, &risks).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn frame_combine_examples() {
        let a = Matrix::from_rows(&[vec![0.8, 0.2]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.4, 0.6]]).unwrap();
        let mixed = frame_combine(&[a.clone(), b.clone()], &EnsembleSpec::uniform(2).unwrap()).unwrap();
        assert!((mixed.get(0, 0) - 0.6).abs() < 1e-15 && (mixed.get(0, 1) - 0.4).abs() < 1e-15);
        let first = frame_combine(&[a.clone(), b], &EnsembleSpec::new(vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(first, a);
        let same = frame_combine(&[a.clone(), a.clone()], &EnsembleSpec::new(vec![0.3, 0.7]).unwrap()).unwrap();
        for (x, y) in same.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(EnsembleSpec::new(vec![0.5, 0.6]).is_err());
        assert!(EnsembleSpec::new(vec![1.5, -0.5]).is_err());
    }
}
