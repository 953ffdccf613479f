#![allow(dead_code)]

use ltstream::graph::Parameterized;
use ltstream::models::{LayerTrajectoryModel, ModelConfig, Variant};
use ltstream::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(variant: Variant, tau: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_dim: 5,
        proj_dim: 3,
        input_dim: 4,
        num_senones: 6,
        tau,
        variant,
    }
}

/// Initialized model with every parameter redrawn from `[-scale, scale]`, so
/// that probes see generic (non-degenerate) weights.
pub fn random_model(config: &ModelConfig, seed: u64, scale: f64) -> LayerTrajectoryModel {
    let mut m = LayerTrajectoryModel::init(config, seed).unwrap();
    randomize(&mut m, seed.wrapping_add(1000), scale);
    m
}

pub fn randomize<M: Parameterized>(m: &mut M, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v = rng.gen_range(-scale..=scale);
        }
    }
}

pub fn random_frames(n: usize, dim: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::vector((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

/// Acoustic scores for posteriors putting `peak` on the aligned senone.
pub fn peaked_scores(align: &[u32], num_senones: usize, peak: f64) -> ltstream::Matrix {
    let rest = (1.0 - peak) / (num_senones - 1) as f64;
    let rows: Vec<Vec<f64>> = align
        .iter()
        .map(|&s| (0..num_senones).map(|k| if k == s as usize { peak } else { rest }).collect())
        .collect();
    let post = ltstream::Matrix::from_rows(&rows).unwrap();
    ltstream::criteria::acoustic_score(&post, &vec![1.0 / num_senones as f64; num_senones], 1.0).unwrap()
}

/// Frame alignment of `words`: silence, `per_senone` frames per senone, silence.
pub fn word_alignment(words: &[u32], lex: &ltstream::lm::Lexicon, per_senone: usize, sil: usize) -> Vec<u32> {
    let mut out = vec![lex.silence; sil];
    for &w in words {
        for &s in lex.pron(w) {
            out.extend(std::iter::repeat_n(s, per_senone));
        }
    }
    out.extend(std::iter::repeat_n(lex.silence, sil));
    out
}
