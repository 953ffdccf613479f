//! Synthetic senone task.
//!
//! Word sequences come from a seeded Markov chain. Each word expands to its
//! lexicon senones, each senone to a few raw 10 ms frames, and every frame is
//! its senone's Gaussian class mean plus noise. Utterances start and end with
//! silence. Targets are delayed by `label_delay_ms` in the raw frame domain,
//! then features and targets are decimated by `skip_factor`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::lattice::{SenoneId, WordId};
use crate::lm::Lexicon;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTaskSpec {
    pub vocab_size: usize,
    pub senones_per_word: usize,
    pub feature_dim: usize,
    /// Mean raw frames per senone; each senone lasts `frames_per_senone ± jitter`.
    pub frames_per_senone: usize,
    pub frame_jitter: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub noise_sigma: f64,
    /// Spread of the class means around the origin.
    pub mean_scale: f64,
    /// Likely successors per word in the Markov chain.
    pub branching: usize,
    /// Probability mass spread uniformly over all successors.
    pub transition_floor: f64,
    pub lead_silence: (usize, usize),
    pub trail_silence: (usize, usize),
    pub frame_ms: f64,
    pub skip_factor: usize,
    pub label_delay_ms: f64,
    pub seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            senones_per_word: 3,
            feature_dim: 8,
            frames_per_senone: 4,
            frame_jitter: 1,
            min_words: 3,
            max_words: 8,
            noise_sigma: 1.0,
            mean_scale: 1.0,
            branching: 3,
            transition_floor: 0.1,
            lead_silence: (6, 10),
            trail_silence: (8, 12),
            frame_ms: 10.0,
            skip_factor: 2,
            label_delay_ms: 50.0,
            seed: 1,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("toy task: {m}")));
        if self.vocab_size == 0 || self.senones_per_word == 0 || self.feature_dim == 0 {
            return bad("sizes must be positive");
        }
        if self.frame_jitter >= self.frames_per_senone {
            return bad("jitter must be below frames_per_senone");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("need 1 <= min_words <= max_words");
        }
        if !(self.noise_sigma >= 0.0) || !(self.mean_scale > 0.0) {
            return bad("noise must be >= 0 and mean scale > 0");
        }
        if self.branching == 0 || self.branching > self.vocab_size || !(0.0..=1.0).contains(&self.transition_floor) {
            return bad("branching must be in 1..=vocab and floor in [0, 1]");
        }
        if self.lead_silence.0 > self.lead_silence.1 || self.trail_silence.0 > self.trail_silence.1 {
            return bad("silence ranges must be ordered");
        }
        if self.skip_factor == 0 || !(self.frame_ms > 0.0) || !(self.label_delay_ms >= 0.0) {
            return bad("frame_ms and skip_factor must be positive, delay >= 0");
        }
        // the delayed trailing silence must survive decimation
        if self.trail_silence.0 < self.delay_frames() + self.skip_factor {
            return bad("trailing silence too short for the label delay");
        }
        Ok(())
    }

    pub fn lexicon(&self) -> Lexicon {
        Lexicon::toy(self.vocab_size, self.senones_per_word)
    }

    pub fn num_senones(&self) -> usize {
        1 + self.vocab_size * self.senones_per_word
    }

    /// Label delay in raw frames.
    pub fn delay_frames(&self) -> usize {
        (self.label_delay_ms / self.frame_ms).round() as usize
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }

    /// Row-stochastic word transition matrix.
    pub fn transition_matrix(&self) -> Vec<Vec<f64>> {
        let mut rng = self.rng(1);
        let v = self.vocab_size;
        (0..v)
            .map(|_| {
                let mut row = vec![self.transition_floor / v as f64; v];
                let mut picks: Vec<usize> = (0..v).collect();
                let mut weights = Vec::with_capacity(self.branching);
                for k in 0..self.branching {
                    let j = rng.gen_range(k..v);
                    picks.swap(k, j);
                    weights.push(rng.gen_range(0.5..1.5));
                }
                let total: f64 = weights.iter().sum();
                for (k, w) in weights.iter().enumerate() {
                    row[picks[k]] += (1.0 - self.transition_floor) * w / total;
                }
                row
            })
            .collect()
    }

    /// Class mean per senone, `num_senones × feature_dim`.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = self.rng(2);
        (0..self.num_senones())
            .map(|_| {
                (0..self.feature_dim)
                    .map(|_| self.mean_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub words: Vec<WordId>,
    /// Post-skip feature frames.
    pub features: Vec<Tensor>,
    /// Post-skip training targets (delayed labels).
    pub align: Vec<SenoneId>,
    /// Raw-rate senone of every raw frame, before the delay.
    pub raw_align: Vec<SenoneId>,
    /// Undelayed senone of every kept feature frame.
    pub feature_align: Vec<SenoneId>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub spec: ToyTaskSpec,
    pub utterances: Vec<Utterance>,
}

/// Shifts labels `delay` frames later, repeating the first label in front.
pub fn delay_labels(labels: &[SenoneId], delay: usize) -> Vec<SenoneId> {
    let Some(&first) = labels.first() else {
        return Vec::new();
    };
    (0..labels.len())
        .map(|i| if i < delay { first } else { labels[i - delay] })
        .collect()
}

/// Keeps every `skip`-th element starting with the first.
pub fn decimate<T: Clone>(xs: &[T], skip: usize) -> Vec<T> {
    xs.iter().step_by(skip).cloned().collect()
}

pub fn generate_corpus(spec: &ToyTaskSpec, num_utterances: usize) -> Result<Corpus> {
    spec.validate()?;
    let trans = spec.transition_matrix();
    let means = spec.class_means();
    let lex = spec.lexicon();
    let mut rng = spec.rng(3);
    let pick = |rng: &mut ChaCha8Rng, row: &[f64]| -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        row.len() - 1
    };
    let uniform = vec![1.0 / spec.vocab_size as f64; spec.vocab_size];
    let mut utterances = Vec::with_capacity(num_utterances);
    for u in 0..num_utterances {
        let len = rng.gen_range(spec.min_words..=spec.max_words);
        let mut words = Vec::with_capacity(len);
        for i in 0..len {
            let row = if i == 0 { &uniform } else { &trans[words[i - 1] as usize] };
            words.push(pick(&mut rng, row) as WordId);
        }
        let mut raw_align: Vec<SenoneId> = Vec::new();
        let lead = rng.gen_range(spec.lead_silence.0..=spec.lead_silence.1);
        raw_align.extend(std::iter::repeat_n(lex.silence, lead));
        for &w in &words {
            for &s in lex.pron(w) {
                let d = rng.gen_range(
                    spec.frames_per_senone - spec.frame_jitter..=spec.frames_per_senone + spec.frame_jitter,
                );
                raw_align.extend(std::iter::repeat_n(s, d));
            }
        }
        let trail = rng.gen_range(spec.trail_silence.0..=spec.trail_silence.1);
        raw_align.extend(std::iter::repeat_n(lex.silence, trail));
        let raw_features: Vec<Tensor> = raw_align
            .iter()
            .map(|&s| {
                let v = means[s as usize]
                    .iter()
                    .map(|m| m + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Tensor::vector(v)
            })
            .collect::<Result<_>>()?;
        let delayed = delay_labels(&raw_align, spec.delay_frames());
        utterances.push(Utterance {
            id: format!("utt{u:05}"),
            words,
            features: decimate(&raw_features, spec.skip_factor),
            align: decimate(&delayed, spec.skip_factor),
            feature_align: decimate(&raw_align, spec.skip_factor),
            raw_align,
        });
    }
    Ok(Corpus {
        spec: spec.clone(),
        utterances,
    })
}

/// Whether an utterance id falls in the 10% validation split.
pub fn is_validation(id: &str) -> bool {
    let h = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) % 10 == 0
}

impl Corpus {
    /// `(train, validation)` by hash of utterance id.
    pub fn split(&self) -> (Vec<&Utterance>, Vec<&Utterance>) {
        self.utterances.iter().partition(|u| !is_validation(&u.id))
    }

    /// Senone priors from target frequencies with add-one smoothing.
    pub fn priors<'a>(utts: impl IntoIterator<Item = &'a Utterance>, num_senones: usize) -> Vec<f64> {
        let mut counts = vec![1.0; num_senones];
        for u in utts {
            for &s in &u.align {
                counts[s as usize] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        counts.into_iter().map(|c| c / total).collect()
    }

    /// Word sequences for LM training.
    pub fn transcripts<'a>(utts: impl IntoIterator<Item = &'a Utterance>) -> Vec<Vec<WordId>> {
        utts.into_iter().map(|u| u.words.clone()).collect()
    }

    /// Features in the tensor container, one `frames × dim` tensor per
    /// utterance named by its id; the spec rides in the header.
    pub fn features_container(&self) -> Result<Container> {
        let tensors = self
            .utterances
            .iter()
            .map(|u| {
                let dim = self.spec.feature_dim;
                let data = u.features.iter().flat_map(|f| f.data().iter().copied()).collect();
                Ok((u.id.clone(), Tensor::new(vec![u.features.len(), dim], data)?))
            })
            .collect::<Result<_>>()?;
        Ok(Container {
            kind: "features".into(),
            meta: serde_json::to_value(&self.spec)?,
            tensors,
        })
    }

    /// `id w1 w2 ...` per line.
    pub fn transcripts_text(&self) -> String {
        lines(self.utterances.iter().map(|u| (&u.id, &u.words)))
    }

    /// `id s1 s2 ...` per line; `field` selects which alignment.
    pub fn alignments_text(&self, field: AlignmentField) -> String {
        lines(self.utterances.iter().map(|u| (&u.id, field.of(u))))
    }

    /// Rebuilds a corpus from its three files.
    pub fn from_files(features: &Container, transcripts: &str, targets: &str, raw: &str) -> Result<Self> {
        features.expect_kind("features")?;
        let spec: ToyTaskSpec = serde_json::from_value(features.meta.clone())?;
        let words = parse_lines(transcripts)?;
        let targets = parse_lines(targets)?;
        let raws = parse_lines(raw)?;
        let mut utterances = Vec::with_capacity(features.tensors.len());
        for (id, t) in &features.tensors {
            let get = |m: &BTreeMap<String, Vec<u32>>, what: &str| {
                m.get(id).cloned().ok_or_else(|| Error::Format(format!("{what} missing for {id}")))
            };
            let frames: Vec<Tensor> = t
                .data()
                .chunks(t.cols())
                .map(|c| Tensor::vector(c.to_vec()))
                .collect::<Result<_>>()?;
            let align = get(&targets, "alignment")?;
            if align.len() != frames.len() {
                return Err(Error::Format(format!("{id}: {} targets for {} frames", align.len(), frames.len())));
            }
            let raw_align = get(&raws, "raw alignment")?;
            utterances.push(Utterance {
                id: id.clone(),
                words: get(&words, "transcript")?,
                feature_align: decimate(&raw_align, spec.skip_factor),
                raw_align,
                features: frames,
                align,
            });
        }
        Ok(Self { spec, utterances })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentField {
    Targets,
    Raw,
}

impl AlignmentField {
    fn of(self, u: &Utterance) -> &Vec<SenoneId> {
        match self {
            Self::Targets => &u.align,
            Self::Raw => &u.raw_align,
        }
    }
}

fn lines<'a>(rows: impl Iterator<Item = (&'a String, &'a Vec<u32>)>) -> String {
    let mut s = String::new();
    for (id, xs) in rows {
        s.push_str(id);
        for x in xs {
            let _ = write!(s, " {x}");
        }
        s.push('\n');
    }
    s
}

fn parse_lines(text: &str) -> Result<BTreeMap<String, Vec<u32>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace();
            let id = it.next().expect("non-empty line").to_string();
            let xs = it
                .map(|x| x.parse().map_err(|_| Error::Format(format!("bad integer {x:?} in line for {id}"))))
                .collect::<Result<_>>()?;
            Ok((id, xs))
        })
        .collect()
}
