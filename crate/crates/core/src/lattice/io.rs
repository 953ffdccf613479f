//! Lattice text format.
//!
//! ```text
//! <num_nodes> <num_arcs> <num_frames>
//! <node_id> <frame>                                  (one line per node)
//! <from> <to> <word|-> <s1,s2,...|-> <acoustic> <lm>  (one line per arc)
//! ```
//!
//! Scores are written in shortest round-trip decimal form, so reading back a
//! written lattice reproduces every score bit for bit.

use std::fmt::Write as _;

use super::{Lattice, LatticeArc, LatticeNode};
use crate::error::{Error, Result};

impl Lattice {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {} {}", self.nodes.len(), self.arcs.len(), self.num_frames);
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(s, "{i} {}", n.time);
        }
        for a in &self.arcs {
            let word = a.word.map_or("-".to_string(), |w| w.to_string());
            let sen = if a.senones.is_empty() {
                "-".to_string()
            } else {
                a.senones.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            };
            let _ = writeln!(s, "{} {} {word} {sen} {:?} {:?}", a.from, a.to, a.acoustic, a.lm);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let bad = |m: String| Error::Format(format!("lattice: {m}"));
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("missing header".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(format!("bad header field {t:?}"))))
            .collect::<Result<_>>()?;
        let [num_nodes, num_arcs, num_frames] = header[..] else {
            return Err(bad("header needs 3 fields".into()));
        };
        let mut nodes = vec![None; num_nodes];
        for _ in 0..num_nodes {
            let l = lines.next().ok_or_else(|| bad("missing node line".into()))?;
            let f: Vec<&str> = l.split_whitespace().collect();
            let [id, time] = f[..] else {
                return Err(bad(format!("bad node line {l:?}")));
            };
            let id: usize = id.parse().map_err(|_| bad(format!("bad node id {id:?}")))?;
            let time: usize = time.parse().map_err(|_| bad(format!("bad frame {time:?}")))?;
            *nodes
                .get_mut(id)
                .ok_or_else(|| bad(format!("node id {id} out of range")))? = Some(LatticeNode { time });
        }
        let nodes: Vec<LatticeNode> = nodes
            .into_iter()
            .enumerate()
            .map(|(i, n)| n.ok_or_else(|| bad(format!("node {i} missing"))))
            .collect::<Result<_>>()?;
        let mut arcs = Vec::with_capacity(num_arcs);
        for _ in 0..num_arcs {
            let l = lines.next().ok_or_else(|| bad("missing arc line".into()))?;
            let f: Vec<&str> = l.split_whitespace().collect();
            let [from, to, word, sen, ac, lm] = f[..] else {
                return Err(bad(format!("bad arc line {l:?}")));
            };
            let num = |t: &str| -> Result<f64> { t.parse().map_err(|_| bad(format!("bad score {t:?}"))) };
            let idx = |t: &str| -> Result<usize> { t.parse().map_err(|_| bad(format!("bad node ref {t:?}"))) };
            arcs.push(LatticeArc {
                from: idx(from)?,
                to: idx(to)?,
                word: if word == "-" {
                    None
                } else {
                    Some(word.parse().map_err(|_| bad(format!("bad word {word:?}")))?)
                },
                senones: if sen == "-" {
                    Vec::new()
                } else {
                    sen.split(',')
                        .map(|x| x.parse().map_err(|_| bad(format!("bad senone {x:?}"))))
                        .collect::<Result<_>>()?
                },
                acoustic: num(ac)?,
                lm: num(lm)?,
            });
        }
        if lines.next().is_some() {
            return Err(bad("trailing lines".into()));
        }
        Lattice::new(num_frames, nodes, arcs)
    }
}
