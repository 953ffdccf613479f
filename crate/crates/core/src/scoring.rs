//! Word error rate and frame accuracy.

use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Edit-operation counts of a hypothesis against a reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredResult {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl ScoredResult {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / N`. With an empty reference this is the raw error count.
    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_len.max(1) as f64
    }
}

/// Pooling: counts add, so the pooled WER weights utterances by length.
impl Add for ScoredResult {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            substitutions: self.substitutions + o.substitutions,
            deletions: self.deletions + o.deletions,
            insertions: self.insertions + o.insertions,
            ref_len: self.ref_len + o.ref_len,
        }
    }
}

impl std::iter::Sum for ScoredResult {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Levenshtein alignment with unit costs. On equal cost, a substitution is
/// preferred over a deletion, and a deletion over an insertion.
pub fn score_wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> ScoredResult {
    let (n, m) = (reference.len(), hyp.len());
    // cell = (cost, subs, dels, ins)
    let mut dp = vec![vec![(0usize, 0usize, 0usize, 0usize); m + 1]; n + 1];
    for i in 1..=n {
        dp[i][0] = (i, 0, i, 0);
    }
    for j in 1..=m {
        dp[0][j] = (j, 0, 0, j);
    }
    for i in 1..=n {
        for j in 1..=m {
            let d = dp[i - 1][j - 1];
            let diag = if reference[i - 1] == hyp[j - 1] { d } else { (d.0 + 1, d.1 + 1, d.2, d.3) };
            let up = dp[i - 1][j];
            let del = (up.0 + 1, up.1, up.2 + 1, up.3);
            let left = dp[i][j - 1];
            let ins = (left.0 + 1, left.1, left.2, left.3 + 1);
            let mut best = diag;
            if del.0 < best.0 {
                best = del;
            }
            if ins.0 < best.0 {
                best = ins;
            }
            dp[i][j] = best;
        }
    }
    let (_, substitutions, deletions, insertions) = dp[n][m];
    ScoredResult {
        substitutions,
        deletions,
        insertions,
        ref_len: n,
    }
}

/// One step of a minimum-edit alignment; indices point into the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditOp {
    Match { hyp: usize, reference: usize },
    Substitute { hyp: usize, reference: usize },
    /// Reference word missing from the hypothesis.
    Delete { reference: usize },
    /// Hypothesis word absent from the reference.
    Insert { hyp: usize },
}

impl EditOp {
    pub fn is_match(&self) -> bool {
        matches!(self, EditOp::Match { .. })
    }
}

/// Minimum-edit alignment in reference order, with the tie-breaking of
/// [`score_wer`].
pub fn align<T: PartialEq>(hyp: &[T], reference: &[T]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hyp.len());
    // cell = (cost, move) with move 0 = diagonal, 1 = deletion, 2 = insertion
    let mut dp = vec![vec![(0usize, 0u8); m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate().skip(1) {
        row[0] = (i, 1);
    }
    for j in 1..=m {
        dp[0][j] = (j, 2);
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dp[i - 1][j - 1].0 + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = dp[i - 1][j].0 + 1;
            let ins = dp[i][j - 1].0 + 1;
            let mut best = (diag, 0);
            if del < best.0 {
                best = (del, 1);
            }
            if ins < best.0 {
                best = (ins, 2);
            }
            dp[i][j] = best;
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        match dp[i][j].1 {
            0 => {
                let op = if reference[i - 1] == hyp[j - 1] {
                    EditOp::Match { hyp: j - 1, reference: i - 1 }
                } else {
                    EditOp::Substitute { hyp: j - 1, reference: i - 1 }
                };
                ops.push(op);
                i -= 1;
                j -= 1;
            }
            1 => {
                ops.push(EditOp::Delete { reference: i - 1 });
                i -= 1;
            }
            _ => {
                ops.push(EditOp::Insert { hyp: j - 1 });
                j -= 1;
            }
        }
    }
    ops.reverse();
    ops
}

pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    score_wer(a, b).errors()
}

/// Pooled score over utterance pairs `(hyp, ref)`.
pub fn score_corpus<'a, T: PartialEq + 'a>(pairs: impl IntoIterator<Item = (&'a [T], &'a [T])>) -> ScoredResult {
    pairs.into_iter().map(|(h, r)| score_wer(h, r)).sum()
}

/// `(base − new) / base`.
pub fn relative_wer_reduction(base: f64, new: f64) -> Result<f64> {
    if !(base > 0.0) {
        return Err(Error::InvalidValue(format!("baseline WER must be positive, got {base}")));
    }
    Ok((base - new) / base)
}

/// Fraction of frames whose predicted senone matches the reference.
pub fn senone_accuracy(pred: &[u32], reference: &[u32]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::Shape {
            operand: "predicted senones",
            expected: vec![reference.len()],
            actual: vec![pred.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("senone sequence"));
    }
    let hit = pred.iter().zip(reference).filter(|(a, b)| a == b).count();
    Ok(hit as f64 / pred.len() as f64)
}
