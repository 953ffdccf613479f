//! Backoff n-gram language models and the toy lexicon.
//!
//! Training uses add-k smoothing with interpolated backoff: every order is a
//! Dirichlet-smoothed estimate centred on the next lower order,
//!
//! ```text
//! P_m(w | h) = (c(h, w) + β · P_{m-1}(w | h')) / (c(h) + β),   β = k · |V|
//! ```
//!
//! with `P_0` uniform over the predicted vocabulary (words plus `</s>`). This
//! is exactly representable in backoff form: seen n-grams store their log
//! probability, seen histories store `log(β / (c(h) + β))`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{SenoneId, WordId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramLm {
    order: usize,
    vocab_size: usize,
    probs: HashMap<Vec<u32>, f64>,
    backoff: HashMap<Vec<u32>, f64>,
}

impl NGramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of ordinary words; `</s>` is `vocab_size`, `<s>` is `vocab_size + 1`.
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn eos(&self) -> u32 {
        self.vocab_size as u32
    }

    pub fn bos(&self) -> u32 {
        self.vocab_size as u32 + 1
    }

    /// History at sentence start, already truncated to `order - 1` tokens.
    pub fn start_context(&self) -> Vec<u32> {
        vec![self.bos(); self.order - 1]
    }

    /// Context after appending `word` to `ctx`.
    pub fn advance(&self, ctx: &[u32], word: u32) -> Vec<u32> {
        if self.order == 1 {
            return Vec::new();
        }
        let mut next: Vec<u32> = ctx.to_vec();
        next.push(word);
        let drop = next.len().saturating_sub(self.order - 1);
        next.drain(..drop);
        next
    }

    /// `ln P(word | history)`; only the last `order - 1` history tokens count.
    pub fn log_prob(&self, history: &[u32], word: u32) -> f64 {
        let keep = history.len().min(self.order - 1);
        let mut h = &history[history.len() - keep..];
        let mut acc = 0.0;
        loop {
            let mut key = h.to_vec();
            key.push(word);
            if let Some(&p) = self.probs.get(&key) {
                return acc + p;
            }
            if h.is_empty() {
                // unknown token
                return f64::NEG_INFINITY;
            }
            acc += self.backoff.get(h).copied().unwrap_or(0.0);
            h = &h[1..];
        }
    }

    /// Log probability of a sentence including `</s>`.
    pub fn sentence_log_prob(&self, words: &[u32]) -> f64 {
        let mut ctx = self.start_context();
        let mut total = 0.0;
        for &w in words {
            total += self.log_prob(&ctx, w);
            ctx = self.advance(&ctx, w);
        }
        total + self.log_prob(&ctx, self.eos())
    }

    /// Per-token perplexity over a corpus, counting `</s>`.
    pub fn perplexity(&self, corpus: &[Vec<u32>]) -> f64 {
        let tokens: usize = corpus.iter().map(|s| s.len() + 1).sum();
        let ll: f64 = corpus.iter().map(|s| self.sentence_log_prob(s)).sum();
        (-ll / tokens as f64).exp()
    }

    fn token_name(&self, t: u32) -> String {
        if t == self.eos() {
            "</s>".into()
        } else if t == self.bos() {
            "<s>".into()
        } else {
            t.to_string()
        }
    }

    fn parse_token(&self, s: &str) -> Result<u32> {
        match s {
            "</s>" => Ok(self.eos()),
            "<s>" => Ok(self.bos()),
            _ => s
                .parse()
                .map_err(|_| Error::Format(format!("lm: bad token {s:?}"))),
        }
    }

    /// Text form: a header line `order <n> vocab <V>`, then one line per
    /// n-gram `history<TAB>word<TAB>log-prob<TAB>backoff`, history tokens
    /// comma-separated (`-` when empty). Histories that are never predicted
    /// (such as `<s>`) carry log-prob `-inf`.
    pub fn to_text(&self) -> String {
        let mut keys: BTreeSet<&Vec<u32>> = self.probs.keys().collect();
        keys.extend(self.backoff.keys().filter(|k| !k.is_empty()));
        let mut s = format!("order {} vocab {}\n", self.order, self.vocab_size);
        for key in keys {
            let (word, hist) = key.split_last().expect("non-empty n-gram");
            let hist = if hist.is_empty() {
                "-".to_string()
            } else {
                hist.iter().map(|&t| self.token_name(t)).collect::<Vec<_>>().join(",")
            };
            let lp = self.probs.get(key).copied().unwrap_or(f64::NEG_INFINITY);
            let bo = self.backoff.get(key).copied().unwrap_or(0.0);
            let _ = writeln!(s, "{hist}\t{}\t{lp:?}\t{bo:?}", self.token_name(*word));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Format("lm: empty".into()))?
            .split_whitespace()
            .collect();
        let (order, vocab_size) = match header[..] {
            ["order", o, "vocab", v] => (
                o.parse().map_err(|_| Error::Format("lm: bad order".into()))?,
                v.parse().map_err(|_| Error::Format("lm: bad vocab".into()))?,
            ),
            _ => return Err(Error::Format("lm: bad header".into())),
        };
        if order == 0 {
            return Err(Error::Format("lm: order must be >= 1".into()));
        }
        let mut lm = NGramLm {
            order,
            vocab_size,
            probs: HashMap::new(),
            backoff: HashMap::new(),
        };
        for l in lines {
            let f: Vec<&str> = l.split('\t').collect();
            let [hist, word, lp, bo] = f[..] else {
                return Err(Error::Format(format!("lm: bad line {l:?}")));
            };
            let mut key: Vec<u32> = if hist == "-" {
                Vec::new()
            } else {
                hist.split(',').map(|t| lm.parse_token(t)).collect::<Result<_>>()?
            };
            key.push(lm.parse_token(word)?);
            let lp: f64 = lp.parse().map_err(|_| Error::Format(format!("lm: bad log-prob {lp:?}")))?;
            let bo: f64 = bo.parse().map_err(|_| Error::Format(format!("lm: bad backoff {bo:?}")))?;
            if lp.is_finite() {
                lm.probs.insert(key.clone(), lp);
            }
            if bo != 0.0 {
                lm.backoff.insert(key, bo);
            }
        }
        Ok(lm)
    }
}

/// Trains an order-`order` model on word sequences over `0..vocab_size`.
pub fn train_ngram(corpus: &[Vec<u32>], vocab_size: usize, order: usize, k: f64) -> Result<NGramLm> {
    if corpus.is_empty() {
        return Err(Error::Empty("lm training corpus"));
    }
    if order == 0 {
        return Err(Error::Config("lm order must be >= 1".into()));
    }
    if !(k > 0.0) {
        return Err(Error::Config(format!("add-k constant must be positive, got {k}")));
    }
    let eos = vocab_size as u32;
    let bos = eos + 1;
    if let Some(w) = corpus.iter().flatten().find(|&&w| w >= eos) {
        return Err(Error::InvalidValue(format!("word id {w} outside vocabulary of {vocab_size}")));
    }
    let predicted = vocab_size + 1;
    let beta = k * predicted as f64;

    // counts[m][h] = (c(h), c(h, w) per w) for histories of length m
    let mut counts: Vec<BTreeMap<Vec<u32>, (f64, BTreeMap<u32, f64>)>> = vec![BTreeMap::new(); order];
    for sent in corpus {
        let mut padded = vec![bos; order - 1];
        padded.extend_from_slice(sent);
        padded.push(eos);
        for i in order - 1..padded.len() {
            let w = padded[i];
            for (m, table) in counts.iter_mut().enumerate() {
                let h = padded[i - m..i].to_vec();
                let e = table.entry(h).or_insert((0.0, BTreeMap::new()));
                e.0 += 1.0;
                *e.1.entry(w).or_insert(0.0) += 1.0;
            }
        }
    }

    let mut lm = NGramLm {
        order,
        vocab_size,
        probs: HashMap::new(),
        backoff: HashMap::new(),
    };
    let uniform = 1.0 / predicted as f64;
    // unigrams: stored for every predicted token
    let (total, uni) = &counts[0][&Vec::new()];
    for w in 0..predicted as u32 {
        let c = uni.get(&w).copied().unwrap_or(0.0);
        lm.probs.insert(vec![w], ((c + beta * uniform) / (total + beta)).ln());
    }
    for (m, table) in counts.iter().enumerate().skip(1) {
        for (h, (ch, ws)) in table {
            lm.backoff.insert(h.clone(), (beta / (ch + beta)).ln());
            for (&w, &c) in ws {
                let lower = lm.log_prob(&h[1..], w).exp();
                let mut key = h.clone();
                key.push(w);
                lm.probs.insert(key, ((c + beta * lower) / (ch + beta)).ln());
            }
            debug_assert_eq!(h.len(), m);
        }
    }
    Ok(lm)
}

/// Maps each word to a fixed senone string; senone 0 is silence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub words: Vec<Vec<SenoneId>>,
    pub silence: SenoneId,
}

impl Lexicon {
    /// Word `w` ↦ senones `1 + w·n .. 1 + (w+1)·n`.
    pub fn toy(vocab_size: usize, senones_per_word: usize) -> Self {
        let words = (0..vocab_size)
            .map(|w| (0..senones_per_word).map(|k| (1 + w * senones_per_word + k) as SenoneId).collect())
            .collect();
        Self { words, silence: 0 }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn num_senones(&self) -> usize {
        self.words
            .iter()
            .flatten()
            .chain(std::iter::once(&self.silence))
            .map(|&s| s as usize + 1)
            .max()
            .unwrap_or(1)
    }

    pub fn pron(&self, w: WordId) -> &[SenoneId] {
        &self.words[w as usize]
    }
}
