use std::cmp::Ordering;

use super::Lattice;
use crate::error::{Error, Result};
use crate::lstmp::log_add;
use crate::tensor::Matrix;

/// Default cap on the number of paths [`enumerate_paths`] will list.
pub const DEFAULT_PATH_CAP: usize = 100_000;

/// Result of a log-semiring forward-backward pass.
#[derive(Debug, Clone)]
pub struct FbResult {
    /// Log of the summed exponentiated path scores.
    pub total: f64,
    pub arc_posteriors: Vec<f64>,
    /// Per-frame senone occupancies `γ(t, s)`, `frames × senones`.
    pub occupancy: Matrix,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl FbResult {
    /// Expectation of per-arc `values` under the arc posteriors.
    pub fn expect(&self, values: &[f64]) -> f64 {
        self.arc_posteriors.iter().zip(values).map(|(p, v)| p * v).sum()
    }
}

/// Forward-backward with each arc scored as `acoustic + lm`.
pub fn forward_backward(lat: &Lattice, num_senones: usize) -> Result<FbResult> {
    let scores: Vec<f64> = lat.arcs().iter().map(|a| a.score()).collect();
    forward_backward_with(lat, &scores, num_senones)
}

/// Forward-backward with caller-supplied arc scores.
pub fn forward_backward_with(lat: &Lattice, scores: &[f64], num_senones: usize) -> Result<FbResult> {
    let arcs = lat.arcs();
    if scores.len() != arcs.len() {
        return Err(Error::Shape {
            operand: "arc scores",
            expected: vec![arcs.len()],
            actual: vec![scores.len()],
        });
    }
    let n = lat.nodes().len();
    let mut alpha = vec![f64::NEG_INFINITY; n];
    alpha[lat.start()] = 0.0;
    // arcs are sorted by source node, which is in topological order
    for (a, &s) in arcs.iter().zip(scores) {
        alpha[a.to] = log_add(alpha[a.to], alpha[a.from] + s);
    }
    let mut beta = vec![f64::NEG_INFINITY; n];
    beta[lat.end()] = 0.0;
    for (a, &s) in arcs.iter().zip(scores).rev() {
        beta[a.from] = log_add(beta[a.from], beta[a.to] + s);
    }
    let total = alpha[lat.end()];
    if !total.is_finite() {
        return Err(Error::MalformedLattice("total score is not finite".into()));
    }
    let mut occupancy = Matrix::zeros(lat.num_frames(), num_senones);
    let mut arc_posteriors = Vec::with_capacity(arcs.len());
    for (a, &s) in arcs.iter().zip(scores) {
        let p = (alpha[a.from] + s + beta[a.to] - total).exp();
        let t0 = lat.nodes()[a.from].time;
        for (k, &sen) in a.senones.iter().enumerate() {
            if sen as usize >= num_senones {
                return Err(Error::Shape {
                    operand: "senone id",
                    expected: vec![num_senones],
                    actual: vec![sen as usize + 1],
                });
            }
            occupancy.add_at(t0 + k, sen as usize, p);
        }
        arc_posteriors.push(p);
    }
    Ok(FbResult {
        total,
        arc_posteriors,
        occupancy,
        alpha,
        beta,
    })
}

/// A complete start-to-end path: arc indices and summed score.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub arcs: Vec<usize>,
    pub score: f64,
}

impl Path {
    pub fn words(&self, lat: &Lattice) -> Vec<u32> {
        self.arcs.iter().filter_map(|&a| lat.arcs()[a].word).collect()
    }

    /// Per-frame senone sequence along the path.
    pub fn senones(&self, lat: &Lattice) -> Vec<u32> {
        self.arcs
            .iter()
            .flat_map(|&a| lat.arcs()[a].senones.iter().copied())
            .collect()
    }
}

/// Exhaustive list of complete paths (scored `acoustic + lm`); refuses when
/// more than `cap` exist.
pub fn enumerate_paths(lat: &Lattice, cap: usize) -> Result<Vec<Path>> {
    let out = lat.out_arcs();
    // count first so the refusal is cheap
    let mut count = vec![0u128; lat.nodes().len()];
    count[lat.end()] = 1;
    for node in (0..lat.nodes().len()).rev() {
        for &ai in &out[node] {
            count[node] = count[node].saturating_add(count[lat.arcs()[ai].to]);
        }
    }
    if count[lat.start()] > cap as u128 {
        return Err(Error::PathCapExceeded(cap));
    }
    let mut paths = Vec::new();
    let mut stack: Vec<(usize, Vec<usize>, f64)> = vec![(lat.start(), Vec::new(), 0.0)];
    while let Some((node, arcs, score)) = stack.pop() {
        if node == lat.end() {
            paths.push(Path { arcs, score });
            continue;
        }
        for &ai in out[node].iter().rev() {
            let mut next = arcs.clone();
            next.push(ai);
            stack.push((lat.arcs()[ai].to, next, score + lat.arcs()[ai].score()));
        }
    }
    Ok(paths)
}

/// Highest-scoring path; ties go to the lower arc index.
pub fn best_path(lat: &Lattice) -> Result<Path> {
    kbest_paths(lat, 1)?
        .pop()
        .ok_or_else(|| Error::MalformedLattice("no complete path".into()))
}

#[derive(Clone, Copy)]
struct Entry {
    score: f64,
    arc: usize,
    rank: usize,
}

/// The `k` highest-scoring complete paths, best first.
pub fn kbest_paths(lat: &Lattice, k: usize) -> Result<Vec<Path>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let n = lat.nodes().len();
    let mut lists: Vec<Vec<Entry>> = vec![Vec::new(); n];
    lists[lat.start()].push(Entry {
        score: 0.0,
        arc: usize::MAX,
        rank: 0,
    });
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, a) in lat.arcs().iter().enumerate() {
        incoming[a.to].push(i);
    }
    for node in 0..n {
        if node == lat.start() {
            continue;
        }
        let mut cands: Vec<Entry> = Vec::new();
        for &ai in &incoming[node] {
            let a = &lat.arcs()[ai];
            for (rank, e) in lists[a.from].iter().enumerate() {
                cands.push(Entry {
                    score: e.score + a.score(),
                    arc: ai,
                    rank,
                });
            }
        }
        cands.sort_by(|x, y| {
            y.score
                .partial_cmp(&x.score)
                .unwrap_or(Ordering::Equal)
                .then(x.arc.cmp(&y.arc))
                .then(x.rank.cmp(&y.rank))
        });
        cands.truncate(k);
        lists[node] = cands;
    }
    let mut paths = Vec::new();
    for e in &lists[lat.end()] {
        let mut arcs = Vec::new();
        let mut cur = *e;
        while cur.arc != usize::MAX {
            arcs.push(cur.arc);
            let from = lat.arcs()[cur.arc].from;
            cur = lists[from][cur.rank];
        }
        arcs.reverse();
        paths.push(Path { arcs, score: e.score });
    }
    Ok(paths)
}
