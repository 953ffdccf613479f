//! Finite-difference verification of every model variant under every
//! criterion, on seeded random small instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{
    criterion_grad, criterion_value, AcousticScale, Ce, CriterionKind, Embr, FrameCriterion, Hypothesis, Mmi,
    SeqTs,
};
use crate::error::Result;
use crate::graph::{compare_gradients, numeric_gradient, GradCheckReport, Parameterized};
use crate::lattice::{Lattice, LatticeArc, LatticeNode};
use crate::lstmp::softmax;
use crate::models::{LayerTrajectoryModel, ModelConfig, Variant};
use crate::tensor::{Matrix, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// A variant under test with its per-layer look-ahead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantCase {
    pub variant: Variant,
    pub tau: usize,
}

impl std::fmt::Display for VariantCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.variant {
            Variant::Cltlstm => write!(f, "cltlstm(tau={})", self.tau),
            v => write!(f, "{v}"),
        }
    }
}

pub const VARIANT_CASES: [VariantCase; 4] = [
    VariantCase { variant: Variant::PlainLstm, tau: 0 },
    VariantCase { variant: Variant::Ltlstm, tau: 0 },
    VariantCase { variant: Variant::Cltlstm, tau: 1 },
    VariantCase { variant: Variant::Cltlstm, tau: 2 },
];

pub fn small_config(case: VariantCase) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_dim: 5,
        proj_dim: 3,
        input_dim: 4,
        num_senones: 6,
        tau: case.tau,
        variant: case.variant,
    }
}

/// Random acyclic lattice over `frames` frames in which every node lies on
/// a complete path. Nodes get random times; arcs only move forward in time.
pub fn random_lattice<R: Rng>(rng: &mut R, frames: usize, senones: usize) -> Result<Lattice> {
    let inner = rng.gen_range(0..=4.min(frames.saturating_sub(1)) * 2);
    let mut times = vec![0];
    let mut mid: Vec<usize> = (0..inner).map(|_| rng.gen_range(1..frames.max(2))).collect();
    mid.sort_unstable();
    times.extend(mid.into_iter().filter(|&t| t < frames));
    times.push(frames);
    let end = times.len() - 1;
    let mut arcs = Vec::new();
    let mut add = |rng: &mut R, from: usize, to: usize| {
        let span = times[to] - times[from];
        arcs.push(LatticeArc {
            from,
            to,
            word: Some(rng.gen_range(0..5)),
            senones: (0..span).map(|_| rng.gen_range(0..senones as u32)).collect(),
            acoustic: 0.0,
            lm: rng.gen_range(-2.0..0.0),
        });
    };
    for j in 1..=end {
        let from = rng.gen_range(0..j);
        add(rng, from, j);
    }
    for i in 1..end {
        let to = rng.gen_range(i + 1..=end);
        add(rng, i, to);
    }
    for _ in 0..rng.gen_range(1..5) {
        let i = rng.gen_range(0..end);
        let j = rng.gen_range(i + 1..=end);
        add(rng, i, j);
    }
    let nodes = times.iter().map(|&time| LatticeNode { time }).collect();
    Lattice::new(frames, nodes, arcs)
}

/// Everything one criterion evaluation needs, drawn from a seed.
pub struct Instance {
    pub model: LayerTrajectoryModel,
    pub frames: Vec<Tensor>,
    pub align: Vec<u32>,
    pub numerator_lm: f64,
    pub den: Lattice,
    pub scale: AcousticScale,
    pub nbest: Vec<Hypothesis>,
    pub reference: Vec<u32>,
    pub teacher_scores: Matrix,
}

impl Instance {
    pub fn random(case: VariantCase, seed: u64) -> Result<Self> {
        let cfg = small_config(case);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = LayerTrajectoryModel::init(&cfg, seed)?;
        for p in model.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        let s = cfg.num_senones;
        let t = rng.gen_range(4..=8);
        let frames = (0..t)
            .map(|_| Tensor::vector((0..cfg.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect::<Result<Vec<_>>>()?;
        let align: Vec<u32> = (0..t).map(|_| rng.gen_range(0..s as u32)).collect();
        let numerator_lm = rng.gen_range(-3.0..0.0);
        let den = random_lattice(&mut rng, t, s)?.with_path(&[LatticeArc {
            from: 0,
            to: 0,
            word: Some(9),
            senones: align.clone(),
            acoustic: 0.0,
            lm: numerator_lm,
        }])?;
        let raw: Vec<f64> = (0..s).map(|_| rng.gen_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let priors: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let scale = AcousticScale::new(&priors, 0.7)?;
        let nbest = (0..4)
            .map(|_| Hypothesis {
                words: (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..4)).collect(),
                senones: (0..t).map(|_| rng.gen_range(0..s as u32)).collect(),
                lm: rng.gen_range(-3.0..0.0),
            })
            .collect();
        let reference = (0..3).map(|_| rng.gen_range(0..4)).collect();
        let mut logp = Matrix::zeros(t, s);
        for r in 0..t {
            let logits: Vec<f64> = (0..s).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for (o, p) in logp.row_mut(r).iter_mut().zip(softmax(&logits)?) {
                *o = p.ln();
            }
        }
        let teacher_scores = scale.from_log_posteriors(&logp)?;
        Ok(Self {
            model,
            frames,
            align,
            numerator_lm,
            den,
            scale,
            nbest,
            reference,
            teacher_scores,
        })
    }

    fn check_with<C: FrameCriterion>(&self, c: &C) -> Result<GradCheckReport> {
        let (_, analytic) = criterion_grad(&self.model, &self.frames, c)?;
        let numeric = numeric_gradient(&self.model, |m| criterion_value(m, &self.frames, c), FD_STEP)?;
        compare_gradients(&analytic, &numeric, FD_TOL)
    }

    pub fn check(&self, kind: CriterionKind) -> Result<GradCheckReport> {
        match kind {
            CriterionKind::Ce => self.check_with(&Ce { align: &self.align }),
            CriterionKind::Mmi => self.check_with(&Mmi {
                align: &self.align,
                numerator_lm: self.numerator_lm,
                den: &self.den,
                scale: &self.scale,
            }),
            CriterionKind::Embr => self.check_with(&Embr {
                nbest: &self.nbest,
                reference: &self.reference,
                scale: &self.scale,
            }),
            CriterionKind::SeqTs => self.check_with(&SeqTs {
                lat: &self.den,
                teacher_scores: &self.teacher_scores,
                scale: &self.scale,
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub variant: String,
    pub criterion: CriterionKind,
    pub instances: usize,
    pub worst: f64,
    pub max_abs: f64,
    pub passed: bool,
}

/// Runs `instances` seeded checks for every variant × criterion pair.
pub fn gradcheck_suite(instances: usize, seed: u64) -> Result<Vec<GradCheckRow>> {
    let pairs: Vec<(VariantCase, CriterionKind)> = VARIANT_CASES
        .iter()
        .flat_map(|&v| CriterionKind::ALL.iter().map(move |&c| (v, c)))
        .collect();
    pairs
        .par_iter()
        .map(|&(case, kind)| {
            let mut worst: f64 = 0.0;
            let mut max_abs: f64 = 0.0;
            let mut passed = true;
            for i in 0..instances {
                let r = Instance::random(case, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?.check(kind)?;
                worst = worst.max(r.worst);
                max_abs = max_abs.max(r.max_abs);
                passed &= r.passed;
            }
            Ok(GradCheckRow {
                variant: case.to_string(),
                criterion: kind,
                instances,
                worst,
                max_abs,
                passed,
            })
        })
        .collect()
}
