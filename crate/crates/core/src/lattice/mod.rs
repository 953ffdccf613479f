//! Time-aligned hypothesis lattices.
//!
//! A lattice is an acyclic graph whose arcs carry a word label (or epsilon),
//! the senone for each frame the arc spans, and separate acoustic and LM
//! log-scores. Nodes are kept in topological order with the start node first
//! and the end node last.

mod io;
mod search;

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use search::{
    best_path, enumerate_paths, forward_backward, forward_backward_with, kbest_paths,
    FbResult, Path, DEFAULT_PATH_CAP,
};

pub type WordId = u32;
pub type SenoneId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeNode {
    pub time: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeArc {
    pub from: usize,
    pub to: usize,
    pub word: Option<WordId>,
    /// One senone per frame spanned, starting at the source node's time.
    pub senones: Vec<SenoneId>,
    pub acoustic: f64,
    pub lm: f64,
}

impl LatticeArc {
    pub fn score(&self) -> f64 {
        self.acoustic + self.lm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    num_frames: usize,
    nodes: Vec<LatticeNode>,
    arcs: Vec<LatticeArc>,
}

impl Lattice {
    /// Validates and topologically renumbers a lattice.
    ///
    /// The start node is the node without incoming arcs and the end node the
    /// node without outgoing arcs; any other such node is reported dead.
    pub fn new(num_frames: usize, nodes: Vec<LatticeNode>, arcs: Vec<LatticeArc>) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::MalformedLattice("no nodes".into()));
        }
        for a in &arcs {
            if a.from >= n || a.to >= n {
                return Err(Error::MalformedLattice(format!(
                    "arc {}->{} references a missing node",
                    a.from, a.to
                )));
            }
            let (tf, tt) = (nodes[a.from].time, nodes[a.to].time);
            if tt < tf || tt - tf != a.senones.len() {
                return Err(Error::MalformedLattice(format!(
                    "arc {}->{} spans frames {tf}..{tt} but carries {} senones",
                    a.from,
                    a.to,
                    a.senones.len()
                )));
            }
            if !a.acoustic.is_finite() || !a.lm.is_finite() {
                return Err(Error::MalformedLattice(format!(
                    "arc {}->{} has a non-finite score",
                    a.from, a.to
                )));
            }
        }
        let mut indeg = vec![0usize; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, a) in arcs.iter().enumerate() {
            indeg[a.to] += 1;
            out[a.from].push(i);
        }
        let sources: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let sinks: Vec<usize> = (0..n).filter(|&i| out[i].is_empty()).collect();
        let start = *sources
            .iter()
            .find(|&&i| nodes[i].time == 0)
            .ok_or_else(|| Error::MalformedLattice("no start node at frame 0".into()))?;
        if let Some(&dead) = sources.iter().find(|&&i| i != start) {
            return Err(Error::DeadNode(dead));
        }

        // Kahn's algorithm, smallest original id first for a deterministic order
        let mut order = Vec::with_capacity(n);
        let mut ready: BTreeSet<usize> = BTreeSet::from([start]);
        let mut deg = indeg.clone();
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &ai in &out[i] {
                let t = arcs[ai].to;
                deg[t] -= 1;
                if deg[t] == 0 {
                    ready.insert(t);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| deg[i] > 0).unwrap_or(0);
            return Err(Error::LatticeCycle(stuck));
        }
        let end = *order.last().expect("non-empty");
        if let Some(&dead) = sinks.iter().find(|&&i| i != end) {
            return Err(Error::DeadNode(dead));
        }
        if nodes[end].time != num_frames {
            return Err(Error::MalformedLattice(format!(
                "end node at frame {} but the utterance has {num_frames} frames",
                nodes[end].time
            )));
        }

        let mut rank = vec![0usize; n];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        let new_nodes = order.iter().map(|&i| nodes[i]).collect();
        let mut new_arcs: Vec<LatticeArc> = arcs
            .into_iter()
            .map(|mut a| {
                a.from = rank[a.from];
                a.to = rank[a.to];
                a
            })
            .collect();
        new_arcs.sort_by_key(|a| (a.from, a.to));
        let lat = Self {
            num_frames,
            nodes: new_nodes,
            arcs: new_arcs,
        };
        // every node reaches the end node (sinks were checked) and is reached
        // from the start (sources were checked); acyclicity makes both exact
        Ok(lat)
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn nodes(&self) -> &[LatticeNode] {
        &self.nodes
    }

    pub fn arcs(&self) -> &[LatticeArc] {
        &self.arcs
    }

    pub fn start(&self) -> usize {
        0
    }

    pub fn end(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn out_arcs(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, a) in self.arcs.iter().enumerate() {
            out[a.from].push(i);
        }
        out
    }

    /// Acoustic score of every arc under per-frame senone scores
    /// (`frames × senones`).
    pub fn acoustic_scores(&self, frame_scores: &Matrix) -> Result<Vec<f64>> {
        if frame_scores.rows() != self.num_frames {
            return Err(Error::Shape {
                operand: "frame scores",
                expected: vec![self.num_frames],
                actual: vec![frame_scores.rows()],
            });
        }
        self.arcs
            .iter()
            .map(|a| {
                let t0 = self.nodes[a.from].time;
                a.senones
                    .iter()
                    .enumerate()
                    .map(|(k, &s)| {
                        let s = s as usize;
                        if s >= frame_scores.cols() {
                            return Err(Error::Shape {
                                operand: "senone id",
                                expected: vec![frame_scores.cols()],
                                actual: vec![s + 1],
                            });
                        }
                        Ok(frame_scores.get(t0 + k, s))
                    })
                    .sum()
            })
            .collect()
    }

    /// Copy with arc acoustic scores replaced by a rescoring under
    /// `frame_scores`; LM scores untouched.
    pub fn rescored(&self, frame_scores: &Matrix) -> Result<Self> {
        let ac = self.acoustic_scores(frame_scores)?;
        let mut out = self.clone();
        for (a, s) in out.arcs.iter_mut().zip(ac) {
            a.acoustic = s;
        }
        Ok(out)
    }

    /// Largest senone id on any arc, plus one.
    pub fn senone_bound(&self) -> usize {
        self.arcs
            .iter()
            .flat_map(|a| a.senones.iter())
            .map(|&s| s as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Whether a complete path with exactly these arcs' labels, alignments
    /// and LM scores exists.
    pub fn contains_path(&self, arcs: &[LatticeArc]) -> bool {
        let out = self.out_arcs();
        let mut frontier: VecDeque<(usize, usize)> = VecDeque::from([(self.start(), 0)]);
        let mut seen = BTreeSet::new();
        while let Some((node, k)) = frontier.pop_front() {
            if k == arcs.len() {
                if node == self.end() {
                    return true;
                }
                continue;
            }
            if !seen.insert((node, k)) {
                continue;
            }
            let want = &arcs[k];
            for &ai in &out[node] {
                let a = &self.arcs[ai];
                if a.word == want.word && a.senones == want.senones && a.lm == want.lm {
                    frontier.push_back((a.to, k + 1));
                }
            }
        }
        false
    }

    /// Adds a complete path as a chain of fresh nodes from start to end,
    /// unless an identical path already exists. The chain's arcs must start
    /// at frame 0 and tile the utterance.
    pub fn with_path(&self, path: &[LatticeArc]) -> Result<Self> {
        if self.contains_path(path) {
            return Ok(self.clone());
        }
        let mut nodes = self.nodes.clone();
        let mut arcs = self.arcs.clone();
        let mut prev = self.start();
        let mut time = 0;
        for (k, a) in path.iter().enumerate() {
            time += a.senones.len();
            let to = if k + 1 == path.len() {
                self.end()
            } else {
                nodes.push(LatticeNode { time });
                nodes.len() - 1
            };
            arcs.push(LatticeArc {
                from: prev,
                to,
                ..a.clone()
            });
            prev = to;
        }
        if time != self.num_frames {
            return Err(Error::MalformedLattice(format!(
                "path spans {time} frames, lattice has {}",
                self.num_frames
            )));
        }
        Self::new(self.num_frames, nodes, arcs)
    }

    /// Drops arcs with posterior below the `max_arcs`-th largest, always
    /// keeping the best path, then removes nodes that became dead.
    pub fn pruned(&self, max_arcs: usize) -> Result<Self> {
        if self.arcs.len() <= max_arcs {
            return Ok(self.clone());
        }
        let fb = forward_backward(self, self.senone_bound())?;
        let best = best_path(self)?;
        let mut keep = vec![false; self.arcs.len()];
        for &a in &best.arcs {
            keep[a] = true;
        }
        let mut ranked: Vec<usize> = (0..self.arcs.len()).collect();
        ranked.sort_by(|&a, &b| {
            fb.arc_posteriors[b]
                .partial_cmp(&fb.arc_posteriors[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut kept = keep.iter().filter(|&&k| k).count();
        for &a in &ranked {
            if kept >= max_arcs {
                break;
            }
            if !keep[a] {
                keep[a] = true;
                kept += 1;
            }
        }
        let arcs: Vec<LatticeArc> = self
            .arcs
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(a, _)| a.clone())
            .collect();
        trim(self.num_frames, self.nodes.clone(), arcs, self.start(), self.end())
    }
}

/// Removes every node (and its arcs) not on some start→end path, then builds
/// a validated lattice.
pub(crate) fn trim(
    num_frames: usize,
    nodes: Vec<LatticeNode>,
    arcs: Vec<LatticeArc>,
    start: usize,
    end: usize,
) -> Result<Lattice> {
    let n = nodes.len();
    let mut fwd = vec![false; n];
    let mut bwd = vec![false; n];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut inc: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, a) in arcs.iter().enumerate() {
        out[a.from].push(i);
        inc[a.to].push(i);
    }
    let mut stack = vec![start];
    fwd[start] = true;
    while let Some(i) = stack.pop() {
        for &ai in &out[i] {
            let t = arcs[ai].to;
            if !fwd[t] {
                fwd[t] = true;
                stack.push(t);
            }
        }
    }
    let mut stack = vec![end];
    bwd[end] = true;
    while let Some(i) = stack.pop() {
        for &ai in &inc[i] {
            let f = arcs[ai].from;
            if !bwd[f] {
                bwd[f] = true;
                stack.push(f);
            }
        }
    }
    if !fwd[end] {
        return Err(Error::MalformedLattice("end node unreachable".into()));
    }
    let live: Vec<bool> = (0..n).map(|i| fwd[i] && bwd[i]).collect();
    let mut remap = vec![usize::MAX; n];
    let mut new_nodes = Vec::new();
    for i in 0..n {
        if live[i] {
            remap[i] = new_nodes.len();
            new_nodes.push(nodes[i]);
        }
    }
    let new_arcs = arcs
        .into_iter()
        .filter(|a| live[a.from] && live[a.to])
        .map(|mut a| {
            a.from = remap[a.from];
            a.to = remap[a.to];
            a
        })
        .collect();
    Lattice::new(num_frames, new_nodes, new_arcs)
}
