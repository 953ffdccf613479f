//! Token-passing search over the lexicon/LM graph.
//!
//! The search graph is a left-to-right HMM per word (one state per senone,
//! each with a self-loop), optionally preceded and followed by one silence
//! state. Word transitions are weighted by the n-gram LM. Two searches share
//! it: [`generate_lattice`] keeps every surviving word arc, and
//! [`StreamingDecoder`] keeps only Viterbi back-pointers and emits words as
//! soon as every active token agrees on them.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{trim, Lattice, LatticeArc, LatticeNode, SenoneId, WordId};
use crate::lm::{Lexicon, NGramLm};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Tokens scoring below `best - beam` are dropped.
    pub beam: f64,
    /// Histogram cap on active tokens per frame.
    pub max_active: usize,
    pub lm_weight: f64,
    /// Lattice size cap applied after search.
    pub max_arcs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam: 20.0,
            max_active: 3000,
            lm_weight: 1.0,
            max_arcs: 3000,
        }
    }
}

impl SearchConfig {
    fn validate(&self) -> Result<()> {
        if !(self.beam > 0.0) || self.max_active == 0 || self.max_arcs == 0 || !self.lm_weight.is_finite() {
            return Err(Error::Config(format!("invalid search config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Unit {
    LeadSil,
    Word(WordId),
    TrailSil,
}

/// Interned LM contexts with cached successor log-probabilities.
struct LmCache<'a> {
    lm: &'a NGramLm,
    weight: f64,
    ctxs: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
    rows: Vec<Vec<f64>>,
}

impl<'a> LmCache<'a> {
    fn new(lm: &'a NGramLm, weight: f64) -> Self {
        let mut c = Self {
            lm,
            weight,
            ctxs: Vec::new(),
            index: HashMap::new(),
            rows: Vec::new(),
        };
        c.intern(lm.start_context());
        c
    }

    fn intern(&mut self, ctx: Vec<u32>) -> usize {
        if let Some(&i) = self.index.get(&ctx) {
            return i;
        }
        let row = (0..=self.lm.eos()).map(|w| self.weight * self.lm.log_prob(&ctx, w)).collect();
        self.index.insert(ctx.clone(), self.ctxs.len());
        self.ctxs.push(ctx);
        self.rows.push(row);
        self.ctxs.len() - 1
    }

    fn score(&self, ctx: usize, word: u32) -> f64 {
        self.rows[ctx][word as usize]
    }

    fn end_score(&self, ctx: usize) -> f64 {
        self.rows[ctx][self.lm.eos() as usize]
    }

    fn advance(&mut self, ctx: usize, word: u32) -> usize {
        let next = self.lm.advance(&self.ctxs[ctx], word);
        self.intern(next)
    }
}

fn check_inputs(lm: &NGramLm, lex: &Lexicon) -> Result<()> {
    if lex.vocab_size() != lm.vocab_size() {
        return Err(Error::Config(format!(
            "lexicon has {} words, LM has {}",
            lex.vocab_size(),
            lm.vocab_size()
        )));
    }
    if lex.words.iter().any(|p| p.is_empty()) {
        return Err(Error::Config("lexicon entry with no senones".into()));
    }
    Ok(())
}

fn unit_senone(lex: &Lexicon, u: Unit, pos: usize) -> SenoneId {
    match u {
        Unit::Word(w) => lex.words[w as usize][pos],
        _ => lex.silence,
    }
}

fn unit_len(lex: &Lexicon, u: Unit) -> usize {
    match u {
        Unit::Word(w) => lex.words[w as usize].len(),
        _ => 1,
    }
}

fn frame_score(scores: &[f64], s: SenoneId) -> Result<f64> {
    scores.get(s as usize).copied().ok_or(Error::Shape {
        operand: "frame scores",
        expected: vec![s as usize + 1],
        actual: vec![scores.len()],
    })
}

/// Keeps tokens within `beam` of the best and at most `max_active` of them.
fn prune<K: Ord + Clone, T>(tokens: &mut BTreeMap<K, T>, score: impl Fn(&T) -> f64, cfg: &SearchConfig) {
    let best = tokens.values().map(&score).fold(f64::NEG_INFINITY, f64::max);
    tokens.retain(|_, t| score(t) >= best - cfg.beam);
    if tokens.len() > cfg.max_active {
        let mut ranked: Vec<(f64, K)> = tokens.iter().map(|(k, t)| (score(t), k.clone())).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        for (_, k) in ranked.drain(cfg.max_active..) {
            tokens.remove(&k);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum NodeKind {
    Start,
    AfterSil,
    Boundary,
    Final,
    End,
}

#[derive(Clone)]
struct ArcToken {
    score: f64,
    acoustic: f64,
    lm: f64,
    senones: Vec<SenoneId>,
}

/// Beam search producing a lattice of the surviving word hypotheses.
///
/// `scores` holds per-frame senone log-scores (`frames × senones`), usually
/// from [`crate::criteria::acoustic_score`].
pub fn generate_lattice(scores: &Matrix, lm: &NGramLm, lex: &Lexicon, cfg: &SearchConfig) -> Result<Lattice> {
    cfg.validate()?;
    check_inputs(lm, lex)?;
    let frames = scores.rows();
    if frames == 0 {
        return Err(Error::Empty("frame scores"));
    }
    let mut cache = LmCache::new(lm, cfg.lm_weight);
    let mut nodes: Vec<(usize, usize, NodeKind)> = Vec::new();
    let mut node_index: HashMap<(usize, usize, NodeKind), usize> = HashMap::new();
    let mut node_score: Vec<f64> = Vec::new();
    let mut arcs: Vec<LatticeArc> = Vec::new();
    let mut get_node = |key: (usize, usize, NodeKind), nodes: &mut Vec<_>, node_score: &mut Vec<f64>| -> (usize, bool) {
        if let Some(&i) = node_index.get(&key) {
            return (i, false);
        }
        nodes.push(key);
        node_score.push(f64::NEG_INFINITY);
        node_index.insert(key, nodes.len() - 1);
        (nodes.len() - 1, true)
    };
    let (start, _) = get_node((0, 0, NodeKind::Start), &mut nodes, &mut node_score);
    node_score[start] = 0.0;
    let mut pending: Vec<usize> = vec![start];
    let mut tokens: BTreeMap<(usize, Unit, usize), ArcToken> = BTreeMap::new();

    for t in 0..frames {
        let row = scores.row(t);
        let mut next: BTreeMap<(usize, Unit, usize), ArcToken> = BTreeMap::new();
        let mut relax = |key: (usize, Unit, usize), tok: &ArcToken, ac: f64, sen: SenoneId, lm: f64| {
            let score = tok.score + ac + lm;
            match next.get(&key) {
                Some(old) if old.score >= score => {}
                _ => {
                    let mut senones = tok.senones.clone();
                    senones.push(sen);
                    next.insert(
                        key,
                        ArcToken {
                            score,
                            acoustic: tok.acoustic + ac,
                            lm: tok.lm + lm,
                            senones,
                        },
                    );
                }
            }
        };
        for (&(n, u, p), tok) in &tokens {
            for q in [p, p + 1] {
                if q < unit_len(lex, u) {
                    let s = unit_senone(lex, u, q);
                    relax((n, u, q), tok, frame_score(row, s)?, s, 0.0);
                }
            }
        }
        for n in pending.drain(..) {
            let (_, ctx, kind) = nodes[n];
            let seed = ArcToken {
                score: node_score[n],
                acoustic: 0.0,
                lm: 0.0,
                senones: Vec::new(),
            };
            let mut units: Vec<(Unit, f64)> = Vec::new();
            if kind == NodeKind::Start {
                units.push((Unit::LeadSil, 0.0));
            }
            units.extend((0..lex.vocab_size() as u32).map(|w| (Unit::Word(w), cache.score(ctx, w))));
            if kind == NodeKind::Boundary {
                units.push((Unit::TrailSil, 0.0));
            }
            for (u, lm_score) in units {
                let s = unit_senone(lex, u, 0);
                relax((n, u, 0), &seed, frame_score(row, s)?, s, lm_score);
            }
        }
        prune(&mut next, |t: &ArcToken| t.score, cfg);
        if next.is_empty() {
            return Err(Error::PruningEmptied { frame: t });
        }
        tokens = next;

        let boundary = t + 1;
        for (&(n, u, p), tok) in &tokens {
            if p + 1 != unit_len(lex, u) {
                continue;
            }
            let (_, ctx, _) = nodes[n];
            let (target_key, word) = match u {
                Unit::Word(w) => {
                    let next_ctx = cache.advance(ctx, w);
                    let kind = if boundary == frames { NodeKind::Final } else { NodeKind::Boundary };
                    ((boundary, next_ctx, kind), Some(w))
                }
                Unit::LeadSil if boundary < frames => ((boundary, ctx, NodeKind::AfterSil), None),
                Unit::TrailSil if boundary == frames => ((boundary, ctx, NodeKind::Final), None),
                _ => continue,
            };
            let (target, is_new) = get_node(target_key, &mut nodes, &mut node_score);
            if is_new && boundary < frames {
                pending.push(target);
            }
            node_score[target] = node_score[target].max(tok.score);
            arcs.push(LatticeArc {
                from: n,
                to: target,
                word,
                senones: tok.senones.clone(),
                acoustic: tok.acoustic,
                lm: tok.lm,
            });
        }
        pending.sort_unstable();
    }

    let finals: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].2 == NodeKind::Final).collect();
    if finals.is_empty() {
        return Err(Error::PruningEmptied { frame: frames - 1 });
    }
    let (end, _) = get_node((frames, 0, NodeKind::End), &mut nodes, &mut node_score);
    for f in finals {
        arcs.push(LatticeArc {
            from: f,
            to: end,
            word: None,
            senones: Vec::new(),
            acoustic: 0.0,
            lm: cache.end_score(nodes[f].1),
        });
    }
    let lat_nodes = nodes.iter().map(|&(time, _, _)| LatticeNode { time }).collect();
    trim(frames, lat_nodes, arcs, start, end)?.pruned(cfg.max_arcs)
}

/// A recognized word with its frame span `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedWord {
    pub word: WordId,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug)]
struct Link {
    word: DecodedWord,
    depth: usize,
    prev: Option<Arc<Link>>,
}

type History = Option<Arc<Link>>;

fn chain(h: &History) -> Vec<&Arc<Link>> {
    let mut out = Vec::new();
    let mut cur = h.as_ref();
    while let Some(l) = cur {
        out.push(l);
        cur = l.prev.as_ref();
    }
    out.reverse();
    out
}

#[derive(Clone)]
struct VTok {
    score: f64,
    start: usize,
    hist: History,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Entry {
    Start,
    AfterSil,
    AfterWord,
}

/// Frame-synchronous Viterbi decoder with agreement-based partial traceback.
pub struct StreamingDecoder<'a> {
    lex: &'a Lexicon,
    cfg: SearchConfig,
    cache: LmCache<'a>,
    frame: usize,
    tokens: BTreeMap<(usize, Unit, usize), VTok>,
    entries: BTreeMap<(usize, Entry), VTok>,
    committed: usize,
}

impl<'a> StreamingDecoder<'a> {
    pub fn new(lm: &'a NGramLm, lex: &'a Lexicon, cfg: SearchConfig) -> Result<Self> {
        cfg.validate()?;
        check_inputs(lm, lex)?;
        let cache = LmCache::new(lm, cfg.lm_weight);
        let entries = BTreeMap::from([(
            (0, Entry::Start),
            VTok {
                score: 0.0,
                start: 0,
                hist: None,
            },
        )]);
        Ok(Self {
            lex,
            cfg,
            cache,
            frame: 0,
            tokens: BTreeMap::new(),
            entries,
            committed: 0,
        })
    }

    /// Frames consumed so far.
    pub fn frames(&self) -> usize {
        self.frame
    }

    /// Consumes one frame of senone log-scores and returns the words that
    /// became unambiguous.
    pub fn push(&mut self, row: &[f64]) -> Result<Vec<DecodedWord>> {
        let t = self.frame;
        let lex = self.lex;
        let mut next: BTreeMap<(usize, Unit, usize), VTok> = BTreeMap::new();
        let mut relax = |key, score: f64, start: usize, hist: &History| match next.get(&key) {
            Some(old) if old.score >= score => {}
            _ => {
                next.insert(
                    key,
                    VTok {
                        score,
                        start,
                        hist: hist.clone(),
                    },
                );
            }
        };
        for (&(c, u, p), tok) in &self.tokens {
            for q in [p, p + 1] {
                if q < unit_len(lex, u) {
                    let ac = frame_score(row, unit_senone(lex, u, q))?;
                    relax((c, u, q), tok.score + ac, tok.start, &tok.hist);
                }
            }
        }
        for (&(c, kind), tok) in &self.entries {
            let mut units: Vec<(Unit, f64)> = Vec::new();
            if kind == Entry::Start {
                units.push((Unit::LeadSil, 0.0));
            }
            units.extend((0..lex.vocab_size() as u32).map(|w| (Unit::Word(w), self.cache.score(c, w))));
            if kind == Entry::AfterWord {
                units.push((Unit::TrailSil, 0.0));
            }
            for (u, lm) in units {
                let ac = frame_score(row, unit_senone(lex, u, 0))?;
                relax((c, u, 0), tok.score + lm + ac, t, &tok.hist);
            }
        }
        prune(&mut next, |v: &VTok| v.score, &self.cfg);
        if next.is_empty() {
            return Err(Error::PruningEmptied { frame: t });
        }
        self.tokens = next;
        self.frame += 1;

        let mut entries: BTreeMap<(usize, Entry), VTok> = BTreeMap::new();
        for (&(c, u, p), tok) in &self.tokens {
            if p + 1 != unit_len(lex, u) {
                continue;
            }
            let (key, hist) = match u {
                Unit::Word(w) => {
                    let depth = tok.hist.as_ref().map_or(0, |l| l.depth) + 1;
                    let link = Link {
                        word: DecodedWord {
                            word: w,
                            start: tok.start,
                            end: self.frame,
                        },
                        depth,
                        prev: tok.hist.clone(),
                    };
                    ((self.cache.advance(c, w), Entry::AfterWord), Some(Arc::new(link)))
                }
                Unit::LeadSil => ((c, Entry::AfterSil), None),
                Unit::TrailSil => continue,
            };
            match entries.get(&key) {
                Some(old) if old.score >= tok.score => {}
                _ => {
                    entries.insert(
                        key,
                        VTok {
                            score: tok.score,
                            start: self.frame,
                            hist,
                        },
                    );
                }
            }
        }
        self.entries = entries;
        Ok(self.emit_agreed())
    }

    fn emit_agreed(&mut self) -> Vec<DecodedWord> {
        let mut hists = self.tokens.values().map(|t| &t.hist).chain(self.entries.values().map(|t| &t.hist));
        let Some(first) = hists.next() else {
            return Vec::new();
        };
        let reference = chain(first);
        let mut common = reference.len();
        for h in hists {
            let other = chain(h);
            common = common.min(
                reference
                    .iter()
                    .zip(&other)
                    .take_while(|(a, b)| Arc::ptr_eq(a, b))
                    .count(),
            );
            if common <= self.committed {
                return Vec::new();
            }
        }
        let out: Vec<DecodedWord> = reference[self.committed..common].iter().map(|l| l.word).collect();
        self.committed = common;
        out
    }

    /// Words of the current best hypothesis, including uncommitted ones.
    pub fn partial(&self) -> Vec<DecodedWord> {
        let best = self
            .entries
            .values()
            .chain(self.tokens.values())
            .max_by(|a, b| a.score.total_cmp(&b.score));
        best.map(|t| chain(&t.hist).iter().map(|l| l.word).collect()).unwrap_or_default()
    }

    /// Ends the utterance and returns the remaining words of the best
    /// complete hypothesis.
    ///
    /// A complete hypothesis ends in a word or trailing silence and includes
    /// the sentence-end LM score. If the beam kept none, the best active
    /// token's finished words are used.
    pub fn finish(self) -> Result<Vec<DecodedWord>> {
        if self.frame == 0 {
            return Err(Error::Empty("decoder input"));
        }
        let mut finals: Vec<(f64, &History)> = Vec::new();
        for (&(c, kind), tok) in &self.entries {
            if kind == Entry::AfterWord {
                finals.push((tok.score + self.cache.end_score(c), &tok.hist));
            }
        }
        for (&(c, u, _), tok) in &self.tokens {
            if u == Unit::TrailSil {
                finals.push((tok.score + self.cache.end_score(c), &tok.hist));
            }
        }
        if finals.is_empty() {
            for tok in self.tokens.values() {
                finals.push((tok.score, &tok.hist));
            }
        }
        let mut best = finals[0];
        for f in finals {
            if f.0 > best.0 {
                best = f;
            }
        }
        let hist = best.1;
        let words: Vec<DecodedWord> = chain(hist).iter().map(|l| l.word).collect();
        Ok(words[self.committed.min(words.len())..].to_vec())
    }
}

/// Decodes a whole utterance; returns the best word sequence with spans.
pub fn decode(scores: &Matrix, lm: &NGramLm, lex: &Lexicon, cfg: &SearchConfig) -> Result<Vec<DecodedWord>> {
    let mut dec = StreamingDecoder::new(lm, lex, cfg.clone())?;
    let mut words = Vec::new();
    for row in scores.iter_rows() {
        words.extend(dec.push(row)?);
    }
    words.extend(dec.finish()?);
    Ok(words)
}

/// Word ids of [`decode`].
pub fn decode_words(scores: &Matrix, lm: &NGramLm, lex: &Lexicon, cfg: &SearchConfig) -> Result<Vec<WordId>> {
    Ok(decode(scores, lm, lex, cfg)?.into_iter().map(|w| w.word).collect())
}

/// The search-graph path that realizes a frame alignment: optional leading
/// silence, one arc per word, optional trailing silence and the sentence-end
/// arc, with LM scores exactly as [`generate_lattice`] assigns them and
/// acoustic scores read from `scores`. Returns the arcs and the word
/// sequence; arc endpoints are left at 0 (see [`Lattice::with_path`]).
/// Adjacent senones within a pronunciation must differ.
pub fn forced_path(
    align: &[SenoneId],
    scores: &Matrix,
    lm: &NGramLm,
    lex: &Lexicon,
    lm_weight: f64,
) -> Result<(Vec<LatticeArc>, Vec<WordId>)> {
    check_inputs(lm, lex)?;
    if align.len() != scores.rows() {
        return Err(Error::Shape {
            operand: "alignment",
            expected: vec![scores.rows()],
            actual: vec![align.len()],
        });
    }
    let mut owner: HashMap<SenoneId, (WordId, usize)> = HashMap::new();
    for (w, pron) in lex.words.iter().enumerate() {
        for (k, &s) in pron.iter().enumerate() {
            owner.insert(s, (w as WordId, k));
        }
    }
    let bad = |t: usize| Error::InvalidValue(format!("alignment is not a path of the search graph at frame {t}"));
    let mut cache = LmCache::new(lm, lm_weight);
    let mut ctx = 0;
    let mut arcs: Vec<LatticeArc> = Vec::new();
    let mut words = Vec::new();
    let mut t = 0;
    let mut seen_word = false;
    let ac = |from: usize, sen: &[SenoneId]| -> Result<f64> {
        sen.iter().enumerate().map(|(k, &s)| frame_score(scores.row(from + k), s)).sum()
    };
    while t < align.len() {
        let s = align[t];
        if s == lex.silence {
            let mut end = t;
            while end < align.len() && align[end] == lex.silence {
                end += 1;
            }
            // silence is only allowed before the first and after the last word
            if (seen_word && end != align.len()) || (!seen_word && end == align.len()) {
                return Err(bad(t));
            }
            let sen = align[t..end].to_vec();
            arcs.push(LatticeArc {
                from: 0,
                to: 0,
                word: None,
                acoustic: ac(t, &sen)?,
                senones: sen,
                lm: 0.0,
            });
            t = end;
            continue;
        }
        let &(w, k) = owner.get(&s).ok_or_else(|| bad(t))?;
        if k != 0 {
            return Err(bad(t));
        }
        let pron = lex.pron(w);
        let begin = t;
        for &ps in pron {
            if align.get(t) != Some(&ps) {
                return Err(bad(t));
            }
            while align.get(t) == Some(&ps) {
                t += 1;
            }
        }
        let sen = align[begin..t].to_vec();
        arcs.push(LatticeArc {
            from: 0,
            to: 0,
            word: Some(w),
            acoustic: ac(begin, &sen)?,
            senones: sen,
            lm: cache.score(ctx, w),
        });
        ctx = cache.advance(ctx, w);
        words.push(w);
        seen_word = true;
    }
    if !seen_word {
        return Err(Error::InvalidValue("alignment contains no word".into()));
    }
    arcs.push(LatticeArc {
        from: 0,
        to: 0,
        word: None,
        senones: Vec::new(),
        acoustic: 0.0,
        lm: cache.end_score(ctx),
    });
    Ok((arcs, words))
}
