//! Two-pass streaming decode simulation.
//!
//! Frames arrive on a simulated clock. The shared time-LSTM runs once per
//! frame and its outputs are stored. Pass 1 decodes the zero-look-ahead head
//! immediately. Pass 2 decodes the look-ahead head from the stored outputs
//! and runs `N` frames behind pass 1. Whenever pass 2 commits words, they are
//! aligned against the pass-1 words covering the same region, and each
//! differing span becomes a replacement event.

use serde::{Deserialize, Serialize};

use crate::criteria::{log_posteriors, AcousticScale};
use crate::decoder::{DecodedWord, SearchConfig, StreamingDecoder};
use crate::error::{Error, Result};
use crate::graph::{Eval, Graph};
use crate::lattice::WordId;
use crate::lm::{Lexicon, NGramLm};
use crate::models::{HeadStream, TimeStream, TwoHeadModel};
use crate::scoring::{align, EditOp};
use crate::tensor::{Matrix, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameClock {
    pub frame_ms: f64,
    pub skip_factor: usize,
}

impl Default for FrameClock {
    fn default() -> Self {
        Self {
            frame_ms: 10.0,
            skip_factor: 2,
        }
    }
}

impl FrameClock {
    /// Duration of one model frame.
    pub fn effective_ms(&self) -> f64 {
        self.frame_ms * self.skip_factor as f64
    }

    /// Simulated time at which model frame `t` is available.
    pub fn arrival_ms(&self, t: usize) -> f64 {
        t as f64 * self.effective_ms()
    }
}

/// Added latency of `n` look-ahead frames.
pub fn latency_ms(n: usize, clock: &FrameClock) -> f64 {
    n as f64 * clock.frame_ms * clock.skip_factor as f64
}

/// Per-frame compute time in ms of `(pass, frame)`, for sensitivity studies.
pub type ComputeCost<'a> = &'a dyn Fn(u8, usize) -> f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    pub word: WordId,
    pub start: usize,
    pub end: usize,
    /// Frame being processed when the word was emitted.
    pub frame: usize,
    pub time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub time_ms: f64,
    /// Frame span covered by the replaced and replacing words.
    pub span: (usize, usize),
    /// Indices into the pass-1 words.
    pub old: Vec<usize>,
    /// Indices into the pass-2 words.
    pub new: Vec<usize>,
}

/// One exported timeline record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TimelineEvent {
    Emit {
        time_ms: f64,
        pass: u8,
        frame: usize,
        word: WordId,
        start: usize,
        end: usize,
    },
    Replace {
        time_ms: f64,
        span: (usize, usize),
        old: Vec<WordId>,
        new: Vec<WordId>,
    },
}

impl TimelineEvent {
    pub fn time_ms(&self) -> f64 {
        match self {
            TimelineEvent::Emit { time_ms, .. } | TimelineEvent::Replace { time_ms, .. } => *time_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTimeline {
    pub clock: FrameClock,
    pub lookahead: usize,
    pub num_frames: usize,
    pub pass1: Vec<TimedWord>,
    pub pass2: Vec<TimedWord>,
    pub replacements: Vec<Replacement>,
    /// Frames evaluated by the shared time-LSTM.
    pub time_lstm_steps: usize,
}

impl DecodeTimeline {
    /// The final transcript: everything pass 2 emitted.
    pub fn final_words(&self) -> Vec<WordId> {
        self.pass2.iter().map(|w| w.word).collect()
    }

    pub fn pass1_words(&self) -> Vec<WordId> {
        self.pass1.iter().map(|w| w.word).collect()
    }

    /// All events in time order; on equal times pass-1 emissions come first,
    /// then pass-2 emissions, then replacements.
    pub fn events(&self) -> Vec<TimelineEvent> {
        let emit = |pass: u8, w: &TimedWord| TimelineEvent::Emit {
            time_ms: w.time_ms,
            pass,
            frame: w.frame,
            word: w.word,
            start: w.start,
            end: w.end,
        };
        let mut keyed: Vec<(f64, u8, usize, TimelineEvent)> = Vec::new();
        keyed.extend(self.pass1.iter().enumerate().map(|(i, w)| (w.time_ms, 0, i, emit(1, w))));
        keyed.extend(self.pass2.iter().enumerate().map(|(i, w)| (w.time_ms, 1, i, emit(2, w))));
        keyed.extend(self.replacements.iter().enumerate().map(|(i, r)| {
            (
                r.time_ms,
                2,
                i,
                TimelineEvent::Replace {
                    time_ms: r.time_ms,
                    span: r.span,
                    old: r.old.iter().map(|&k| self.pass1[k].word).collect(),
                    new: r.new.iter().map(|&k| self.pass2[k].word).collect(),
                },
            )
        }));
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        keyed.into_iter().map(|(.., e)| e).collect()
    }

    /// Line-delimited export, one event per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in self.events() {
            s.push_str(&serde_json::to_string(&e)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// Checks the ordering and timing contracts: no pass-2 word is emitted
    /// before pass 1 has processed `N` frames past the frame that produced it.
    pub fn check_timing(&self) -> Result<()> {
        let events = self.events();
        if events.windows(2).any(|w| w[1].time_ms() < w[0].time_ms()) {
            return Err(Error::InvalidValue("timeline events out of order".into()));
        }
        let last = self.num_frames.saturating_sub(1);
        for w in &self.pass2 {
            let needed = self.clock.arrival_ms((w.frame + self.lookahead).min(last));
            if w.time_ms < needed {
                return Err(Error::InvalidValue(format!(
                    "pass-2 word at frame {} emitted at {} ms, before {} ms",
                    w.frame, w.time_ms, needed
                )));
            }
        }
        Ok(())
    }
}

/// Fraction of pass-1 words later overwritten by pass 2.
pub fn replacement_rate(timeline: &DecodeTimeline) -> f64 {
    if timeline.pass1.is_empty() {
        return 0.0;
    }
    let replaced: usize = timeline.replacements.iter().map(|r| r.old.len()).sum();
    replaced as f64 / timeline.pass1.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceivedLatency {
    /// Correction delay per pass-1 word: replacement time minus first
    /// emission time, 0 when never replaced.
    pub per_word_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub max_ms: f64,
}

pub fn perceived_latency(timeline: &DecodeTimeline) -> PerceivedLatency {
    let mut per_word_ms = vec![0.0; timeline.pass1.len()];
    for r in &timeline.replacements {
        for &k in &r.old {
            per_word_ms[k] = r.time_ms - timeline.pass1[k].time_ms;
        }
    }
    let n = per_word_ms.len();
    if n == 0 {
        return PerceivedLatency {
            per_word_ms,
            mean_ms: 0.0,
            median_ms: 0.0,
            max_ms: 0.0,
        };
    }
    let mut sorted = per_word_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let median_ms = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    PerceivedLatency {
        mean_ms: per_word_ms.iter().sum::<f64>() / n as f64,
        median_ms,
        max_ms: sorted[n - 1],
        per_word_ms,
    }
}

/// Longest delay between a word's last frame arriving and its emission,
/// over both passes.
pub fn max_decoding_lag_ms(timeline: &DecodeTimeline) -> f64 {
    timeline
        .pass1
        .iter()
        .chain(&timeline.pass2)
        .map(|w| w.time_ms - timeline.clock.arrival_ms(w.end))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub lookahead_frames: usize,
    pub first_pass_added_latency_ms: f64,
    pub second_pass_added_latency_ms: f64,
    pub replacement_rate: f64,
    pub perceived: PerceivedLatency,
    pub max_decoding_lag_ms: f64,
}

pub fn latency_report(timeline: &DecodeTimeline) -> LatencyReport {
    LatencyReport {
        lookahead_frames: timeline.lookahead,
        first_pass_added_latency_ms: 0.0,
        second_pass_added_latency_ms: latency_ms(timeline.lookahead, &timeline.clock),
        replacement_rate: replacement_rate(timeline),
        perceived: perceived_latency(timeline),
        max_decoding_lag_ms: max_decoding_lag_ms(timeline),
    }
}

/// Decoder inputs shared by both passes.
pub struct DecodeSetup<'a> {
    pub lm: &'a NGramLm,
    pub lexicon: &'a Lexicon,
    pub search: SearchConfig,
    pub clock: FrameClock,
}

/// Tracks which pass-1 and pass-2 words have been reconciled.
struct Reconciler {
    pass1_done: usize,
    pass2_done: usize,
    replacements: Vec<Replacement>,
}

impl Reconciler {
    /// Aligns newly committed pass-2 words with the pass-1 words whose
    /// midpoint lies before the end of the last pass-2 word (everything
    /// when `all`).
    fn settle(&mut self, p1: &[TimedWord], p2: &[TimedWord], time_ms: f64, all: bool) {
        if self.pass2_done == p2.len() && !all {
            return;
        }
        let horizon = p2.last().map(|w| w.end);
        let p1_end = if all {
            p1.len()
        } else {
            let h = horizon.expect("pass 2 committed a word");
            self.pass1_done + p1[self.pass1_done..].iter().take_while(|w| w.start + w.end < 2 * h).count()
        };
        let old = &p1[self.pass1_done..p1_end];
        let new = &p2[self.pass2_done..];
        let old_ids: Vec<WordId> = old.iter().map(|w| w.word).collect();
        let new_ids: Vec<WordId> = new.iter().map(|w| w.word).collect();
        let ops = align(&new_ids, &old_ids);
        let mut run: Vec<EditOp> = Vec::new();
        for op in ops.into_iter().chain(std::iter::once(EditOp::Match { hyp: 0, reference: 0 })) {
            if !op.is_match() {
                run.push(op);
                continue;
            }
            if run.is_empty() {
                continue;
            }
            let mut r = Replacement {
                time_ms,
                span: (usize::MAX, 0),
                old: Vec::new(),
                new: Vec::new(),
            };
            for op in run.drain(..) {
                match op {
                    EditOp::Substitute { hyp, reference } => {
                        r.old.push(self.pass1_done + reference);
                        r.new.push(self.pass2_done + hyp);
                    }
                    EditOp::Delete { reference } => r.old.push(self.pass1_done + reference),
                    EditOp::Insert { hyp } => r.new.push(self.pass2_done + hyp),
                    EditOp::Match { .. } => unreachable!(),
                }
            }
            for w in r.old.iter().map(|&k| &p1[k]).chain(r.new.iter().map(|&k| &p2[k])) {
                r.span = (r.span.0.min(w.start), r.span.1.max(w.end));
            }
            self.replacements.push(r);
        }
        self.pass1_done = p1_end;
        self.pass2_done = p2.len();
    }
}

/// Simulates both passes over precomputed acoustic scores. Row `t` of each
/// matrix is the score vector its pass sees for frame `t`.
pub fn simulate_two_pass(
    pass1: &Matrix,
    pass2: &Matrix,
    lookahead: usize,
    setup: &DecodeSetup,
    cost: Option<ComputeCost>,
) -> Result<DecodeTimeline> {
    let t_len = pass1.rows();
    if t_len == 0 {
        return Err(Error::Empty("frame stream"));
    }
    if pass2.rows() != t_len || pass2.cols() != pass1.cols() {
        return Err(Error::Shape {
            operand: "second-pass scores",
            expected: vec![t_len, pass1.cols()],
            actual: vec![pass2.rows(), pass2.cols()],
        });
    }
    let cost = |pass: u8, t: usize| cost.map_or(0.0, |c| c(pass, t));
    let clock = setup.clock;
    let mut dec1 = Some(StreamingDecoder::new(setup.lm, setup.lexicon, setup.search.clone())?);
    let mut dec2 = StreamingDecoder::new(setup.lm, setup.lexicon, setup.search.clone())?;
    let mut p1: Vec<TimedWord> = Vec::new();
    let mut p2: Vec<TimedWord> = Vec::new();
    let timed = |ws: Vec<DecodedWord>, frame: usize, time_ms: f64| {
        ws.into_iter().map(move |w| TimedWord {
            word: w.word,
            start: w.start,
            end: w.end,
            frame,
            time_ms,
        })
    };
    let mut rec = Reconciler {
        pass1_done: 0,
        pass2_done: 0,
        replacements: Vec::new(),
    };
    let mut done1 = vec![0.0; t_len];
    let mut next1 = 0;
    let mut done2 = 0.0f64;
    for t in 0..t_len {
        let need = (t + lookahead).min(t_len - 1);
        while next1 <= need {
            let u = next1;
            let prev = if u == 0 { 0.0 } else { done1[u - 1] };
            done1[u] = clock.arrival_ms(u).max(prev) + cost(1, u);
            let d = dec1.as_mut().expect("pass 1 still running");
            p1.extend(timed(d.push(pass1.row(u))?, u, done1[u]));
            next1 += 1;
        }
        if next1 == t_len {
            if let Some(d) = dec1.take() {
                p1.extend(timed(d.finish()?, t_len - 1, done1[t_len - 1]));
            }
        }
        done2 = done1[need].max(done2) + cost(2, t);
        let fresh = dec2.push(pass2.row(t))?;
        if !fresh.is_empty() {
            p2.extend(timed(fresh, t, done2));
            rec.settle(&p1, &p2, done2, false);
        }
    }
    p2.extend(timed(dec2.finish()?, t_len - 1, done2));
    rec.settle(&p1, &p2, done2, true);
    Ok(DecodeTimeline {
        clock,
        lookahead,
        num_frames: t_len,
        pass1: p1,
        pass2: p2,
        replacements: rec.replacements,
        time_lstm_steps: 0,
    })
}

/// Logits of both heads from a single time-LSTM pass. The look-ahead head
/// reads only the stored time-LSTM outputs. Returns the step count.
pub fn two_head_logits(model: &TwoHeadModel, frames: &[Tensor]) -> Result<(Matrix, Matrix, usize)> {
    if frames.is_empty() {
        return Err(Error::Empty("frame stream"));
    }
    let mut g = Eval::new();
    let mut time = TimeStream::new(&mut g, &model.shared);
    let mut lt = HeadStream::new(&mut g, &model.head_lt);
    let mut stored = Vec::with_capacity(frames.len());
    let mut lt_rows = Vec::with_capacity(frames.len());
    for f in frames {
        let x = g.constant(f.clone());
        let hs = time.step(&mut g, &x)?;
        lt_rows.extend(lt.push(&mut g, &hs)?.into_iter().map(|(_, v)| v.into_owned().into_data()));
        stored.push(hs);
    }
    lt_rows.extend(lt.flush(&mut g)?.into_iter().map(|(_, v)| v.into_owned().into_data()));
    let steps = time.steps();
    let mut clt = HeadStream::new(&mut g, &model.head_clt);
    let mut clt_rows = Vec::with_capacity(frames.len());
    for hs in &stored {
        clt_rows.extend(clt.push(&mut g, hs)?.into_iter().map(|(_, v)| v.into_owned().into_data()));
    }
    clt_rows.extend(clt.flush(&mut g)?.into_iter().map(|(_, v)| v.into_owned().into_data()));
    Ok((Matrix::from_rows(&lt_rows)?, Matrix::from_rows(&clt_rows)?, steps))
}

/// Two-pass decode of one utterance with a two-head model. `lookahead`
/// defaults to the model's own `L × τ` and may not be smaller.
pub fn two_pass_decode(
    model: &TwoHeadModel,
    frames: &[Tensor],
    scale: &AcousticScale,
    setup: &DecodeSetup,
    lookahead: Option<usize>,
    cost: Option<ComputeCost>,
) -> Result<DecodeTimeline> {
    let n = lookahead.unwrap_or_else(|| model.lookahead());
    if n < model.lookahead() {
        return Err(Error::Config(format!(
            "pass 2 cannot start {n} frames behind a head that looks {} frames ahead",
            model.lookahead()
        )));
    }
    let (lt, clt, steps) = two_head_logits(model, frames)?;
    let s1 = scale.from_log_posteriors(&log_posteriors(&lt)?)?;
    let s2 = scale.from_log_posteriors(&log_posteriors(&clt)?)?;
    let mut timeline = simulate_two_pass(&s1, &s2, n, setup, cost)?;
    timeline.time_lstm_steps = steps;
    Ok(timeline)
}
