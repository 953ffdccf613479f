//! Staged training recipes.
//!
//! A recipe is an ordered list of stages. Each stage trains one model with
//! one criterion, starting from a fresh initialization or from an earlier
//! stage's checkpoint. Sequence stages build their lattices (or n-best lists)
//! once, from the stage's seed model, and keep them fixed for the stage.
//! Updates are plain SGD with global gradient-norm clipping and a step decay.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::corpus::{generate_corpus, Corpus, ToyTaskSpec, Utterance};
use crate::criteria::{
    criterion_grad, criterion_value, frame_combine, log_posteriors, posteriors, AcousticScale, Ce, CriterionKind,
    Embr, EnsembleSpec, Hypothesis, Mmi, SeqTs,
};
use crate::decoder::{decode_words, forced_path, generate_lattice, SearchConfig};
use crate::error::{Error, Result};
use crate::graph::Parameterized;
use crate::lattice::{kbest_paths, Lattice};
use crate::lm::{train_ngram, Lexicon, NGramLm};
use crate::models::{build_second_head, checksum, rescale_init, LayerTrajectoryModel, ModelConfig, TwoHeadModel, Variant};
use crate::scoring::{score_wer, ScoredResult};
use crate::tensor::{Matrix, Tensor};

pub const CONFIG_VERSION: u32 = 1;
/// Stage tag of a freshly initialized model.
pub const INIT_TAG: &str = "INIT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "one")]
    pub kappa: f64,
    /// Add-k constant of every n-gram LM.
    #[serde(default = "half")]
    pub lm_k: f64,
    /// Highest LM order trained on the corpus.
    #[serde(default = "five")]
    pub max_lm_order: usize,
    /// LM used when measuring WER.
    #[serde(default = "three")]
    pub runtime_lm_order: usize,
    /// Default LM order for MMI/EMBR lattices.
    #[serde(default = "two")]
    pub lattice_lm_order: usize,
    #[serde(default = "sixteen")]
    pub nbest: usize,
    #[serde(default = "eight")]
    pub batch_size: usize,
    #[serde(default = "one")]
    pub clip_norm: f64,
    /// Fresh weights are uniform in `±init_range`.
    #[serde(default = "default_init_range")]
    pub init_range: f64,
}

fn default_init_range() -> f64 {
    crate::lstmp::INIT_RANGE
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn two() -> usize {
    2
}
fn three() -> usize {
    3
}
fn five() -> usize {
    5
}
fn eight() -> usize {
    8
}
fn sixteen() -> usize {
    16
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            lm_k: 0.5,
            max_lm_order: 5,
            runtime_lm_order: 3,
            lattice_lm_order: 2,
            nbest: 16,
            batch_size: 8,
            clip_norm: 1.0,
            init_range: crate::lstmp::INIT_RANGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Names of the teacher stages.
    pub teachers: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub criterion: CriterionKind,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` epochs (0 disables decay).
    #[serde(default = "one")]
    pub lr_decay: f64,
    #[serde(default)]
    pub decay_every: usize,
    /// Stage whose checkpoint seeds this one; a fresh model when absent.
    #[serde(default)]
    pub from: Option<String>,
    /// Initializer seed for a fresh model; defaults to the recipe seed.
    #[serde(default)]
    pub init_seed: Option<u64>,
    #[serde(default)]
    pub lattice_lm_order: Option<usize>,
    #[serde(default)]
    pub freeze: Vec<String>,
    #[serde(default)]
    pub ensemble: Option<EnsembleConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoHeadConfig {
    /// Stage holding the fully trained cltLSTM.
    pub from: String,
    pub head_seed: u64,
    pub freeze: Vec<String>,
    /// Head stages; `from` refers to earlier head stages, absent for the
    /// freshly built head.
    pub stages: Vec<StageConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeConfig {
    pub version: u32,
    pub seed: u64,
    pub num_utterances: usize,
    /// Extra utterances drawn after the training corpus, used only to
    /// measure WER after each stage.
    #[serde(default)]
    pub num_test_utterances: usize,
    #[serde(default)]
    pub task: ToyTaskSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub two_head: Option<TwoHeadConfig>,
}

fn config_err<T>(msg: String) -> Result<T> {
    Err(Error::Config(msg))
}

impl RecipeConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return config_err(format!("unsupported recipe version {}", self.version));
        }
        if self.num_utterances < 10 {
            return config_err("need at least 10 utterances".into());
        }
        self.task.validate()?;
        self.model.validate()?;
        if self.model.num_senones != self.task.num_senones() || self.model.input_dim != self.task.feature_dim {
            return config_err(format!(
                "model expects {} inputs / {} senones, task provides {} / {}",
                self.model.input_dim,
                self.model.num_senones,
                self.task.feature_dim,
                self.task.num_senones()
            ));
        }
        let t = &self.training;
        if t.max_lm_order == 0 || t.runtime_lm_order > t.max_lm_order || t.lattice_lm_order > t.max_lm_order {
            return config_err("LM orders must be within 1..=max_lm_order".into());
        }
        if t.nbest == 0 || t.batch_size == 0 || !(t.clip_norm > 0.0) || !(t.kappa > 0.0) || !(t.lm_k > 0.0)
            || !(t.init_range > 0.0)
        {
            return config_err("nbest, batch_size, clip_norm, kappa, lm_k and init_range must be positive".into());
        }
        let mut seen: BTreeMap<&str, CriterionKind> = BTreeMap::new();
        for s in &self.stages {
            validate_stage(s, &seen, &seen, t, LayerTrajectoryModel::param_groups())?;
            if seen.insert(&s.name, s.criterion).is_some() {
                return config_err(format!("duplicate stage name {:?}", s.name));
            }
        }
        if let Some(th) = &self.two_head {
            match seen.get(th.from.as_str()) {
                None => return config_err(format!("two_head.from: unknown stage {:?}", th.from)),
                Some(k) if *k != CriterionKind::SeqTs => {
                    return config_err(format!("two_head.from must name a SEQ_TS stage, {:?} is {k}", th.from))
                }
                _ => {}
            }
            if self.model.variant != Variant::Cltlstm {
                return config_err("two_head requires a cltlstm model".into());
            }
            for f in &th.freeze {
                if !TwoHeadModel::param_groups().contains(&f.as_str()) {
                    return config_err(format!("two_head.freeze: unknown parameter group {f:?}"));
                }
            }
            if !th.freeze.iter().any(|f| f == "shared") {
                return config_err("two_head.freeze must contain \"shared\"".into());
            }
            let mut local: BTreeMap<&str, CriterionKind> = BTreeMap::new();
            for s in &th.stages {
                validate_stage(s, &local, &seen, t, LayerTrajectoryModel::param_groups())?;
                if local.insert(&s.name, s.criterion).is_some() {
                    return config_err(format!("duplicate two_head stage name {:?}", s.name));
                }
            }
        }
        Ok(())
    }
}

fn validate_stage(
    s: &StageConfig,
    earlier: &BTreeMap<&str, CriterionKind>,
    teachers: &BTreeMap<&str, CriterionKind>,
    t: &TrainingConfig,
    groups: &[&str],
) -> Result<()> {
    let name = &s.name;
    if !(s.learning_rate > 0.0) || !(s.lr_decay > 0.0) {
        return config_err(format!("stage {name}: learning_rate and lr_decay must be positive"));
    }
    if let Some(o) = s.lattice_lm_order {
        if o == 0 || o > t.max_lm_order {
            return config_err(format!("stage {name}: lattice_lm_order must be in 1..={}", t.max_lm_order));
        }
    }
    for f in &s.freeze {
        if !groups.contains(&f.as_str()) {
            return config_err(format!("stage {name}: unknown parameter group {f:?}"));
        }
    }
    let seed_kind = match &s.from {
        Some(f) => Some(
            *earlier
                .get(f.as_str())
                .ok_or_else(|| Error::Config(format!("stage {name}: `from` names unknown or later stage {f:?}")))?,
        ),
        None => None,
    };
    if s.criterion == CriterionKind::SeqTs {
        let Some(e) = &s.ensemble else {
            return config_err(format!("stage {name}: SEQ_TS requires an ensemble"));
        };
        if seed_kind != Some(CriterionKind::Mmi) {
            return config_err(format!("stage {name}: SEQ_TS requires a seed checkpoint tagged MMI"));
        }
        if e.teachers.len() != e.weights.len() {
            return config_err(format!("stage {name}: ensemble teachers and weights differ in length"));
        }
        EnsembleSpec::new(e.weights.clone())?;
        for tname in &e.teachers {
            if !teachers.contains_key(tname.as_str()) {
                return config_err(format!("stage {name}: unknown teacher stage {tname:?}"));
            }
        }
    } else if s.ensemble.is_some() {
        return config_err(format!("stage {name}: only SEQ_TS stages take an ensemble"));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub name: String,
    pub seed: u64,
    pub epochs: usize,
    /// Training criterion before training and after each epoch.
    pub loss_history: Vec<f64>,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LayerTrajectoryModel,
    /// Criterion of the stage that produced it, or [`INIT_TAG`].
    pub stage: String,
    pub metadata: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader<C> {
    config: C,
    stage: String,
    metadata: CheckpointMeta,
    #[serde(default)]
    frozen_shared: bool,
}

fn fill_named(target: Vec<(String, &mut Tensor)>, c: &Container) -> Result<()> {
    if target.len() != c.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model expects {}",
            c.tensors.len(),
            target.len()
        )));
    }
    for (name, t) in target {
        let src = c.get(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        src.expect_shape("checkpoint tensor", t.shape())?;
        *t = src.clone();
    }
    Ok(())
}

impl Checkpoint {
    pub fn fresh(config: &ModelConfig, seed: u64, init_range: f64, name: &str) -> Result<Self> {
        Ok(Self {
            model: LayerTrajectoryModel::init_with_range(config, seed, init_range)?,
            stage: INIT_TAG.into(),
            metadata: CheckpointMeta {
                name: name.into(),
                seed,
                epochs: 0,
                loss_history: Vec::new(),
                validation_loss: f64::NAN,
            },
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let header = CheckpointHeader {
            config: self.model.config.clone(),
            stage: self.stage.clone(),
            metadata: self.metadata.clone(),
            frozen_shared: false,
        };
        Ok(Container {
            kind: "checkpoint".into(),
            meta: serde_json::to_value(header)?,
            tensors: self.model.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("checkpoint")?;
        let h: CheckpointHeader<ModelConfig> = serde_json::from_value(c.meta.clone())?;
        let mut model = LayerTrajectoryModel::init(&h.config, 0)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        fill_named(names.into_iter().zip(model.params_mut()).collect(), c)?;
        Ok(Self {
            model,
            stage: h.stage,
            metadata: h.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoHeadCheckpoint {
    pub model: TwoHeadModel,
    pub stage: String,
    pub metadata: CheckpointMeta,
}

impl TwoHeadCheckpoint {
    pub fn to_container(&self) -> Result<Container> {
        let header = CheckpointHeader {
            config: self.model.config.clone(),
            stage: self.stage.clone(),
            metadata: self.metadata.clone(),
            frozen_shared: self.model.frozen_shared,
        };
        Ok(Container {
            kind: "two_head_checkpoint".into(),
            meta: serde_json::to_value(header)?,
            tensors: self.model.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("two_head_checkpoint")?;
        let h: CheckpointHeader<ModelConfig> = serde_json::from_value(c.meta.clone())?;
        let mut model = build_second_head(&LayerTrajectoryModel::init(&h.config, 0)?, 0)?;
        model.frozen_shared = h.frozen_shared;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        fill_named(names.into_iter().zip(model.params_mut()).collect(), c)?;
        Ok(Self {
            model,
            stage: h.stage,
            metadata: h.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Corpus plus everything derived from it once: split, lexicon, priors and
/// n-gram LMs trained on the training transcripts.
pub struct TaskData {
    pub corpus: Corpus,
    pub lexicon: Lexicon,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub priors: Vec<f64>,
    /// Held-out utterances outside the corpus, possibly empty.
    pub test: Vec<Utterance>,
    lms: BTreeMap<usize, NGramLm>,
}

impl TaskData {
    pub fn new(corpus: Corpus, training: &TrainingConfig) -> Result<Self> {
        let (train, val): (Vec<usize>, Vec<usize>) =
            (0..corpus.utterances.len()).partition(|&i| !crate::corpus::is_validation(&corpus.utterances[i].id));
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("corpus too small for a train/validation split".into()));
        }
        let spec = &corpus.spec;
        let train_utts: Vec<&Utterance> = train.iter().map(|&i| &corpus.utterances[i]).collect();
        let priors = Corpus::priors(train_utts.iter().copied(), spec.num_senones());
        let text = Corpus::transcripts(train_utts.iter().copied());
        let lms = (1..=training.max_lm_order)
            .map(|n| Ok((n, train_ngram(&text, spec.vocab_size, n, training.lm_k)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            lexicon: spec.lexicon(),
            corpus,
            train,
            val,
            priors,
            test: Vec::new(),
            lms,
        })
    }

    pub fn with_test(mut self, test: Vec<Utterance>) -> Self {
        self.test = test;
        self
    }

    pub fn lm(&self, order: usize) -> Result<&NGramLm> {
        self.lms
            .get(&order)
            .ok_or_else(|| Error::Config(format!("no LM of order {order} was trained")))
    }

    pub fn utt(&self, i: usize) -> &Utterance {
        &self.corpus.utterances[i]
    }
}

/// Combined teacher posteriors per corpus utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleCache {
    pub posteriors: Vec<Matrix>,
}

impl EnsembleCache {
    pub fn to_container(&self, corpus: &Corpus) -> Result<Container> {
        let tensors = self
            .posteriors
            .iter()
            .zip(&corpus.utterances)
            .map(|(m, u)| Ok((u.id.clone(), Tensor::new(vec![m.rows(), m.cols()], m.data().to_vec())?)))
            .collect::<Result<_>>()?;
        Ok(Container {
            kind: "ensemble_cache".into(),
            meta: serde_json::Value::Null,
            tensors,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("ensemble_cache")?;
        let posteriors = c
            .tensors
            .iter()
            .map(|(_, t)| {
                let rows: Vec<Vec<f64>> = t.data().chunks(t.cols()).map(|r| r.to_vec()).collect();
                Matrix::from_rows(&rows)
            })
            .collect::<Result<_>>()?;
        Ok(Self { posteriors })
    }
}

/// Frame posteriors of a model on one utterance.
pub fn model_posteriors(model: &LayerTrajectoryModel, utt: &Utterance) -> Result<Matrix> {
    posteriors(&logit_matrix(model, &utt.features)?)
}

fn logit_matrix(model: &LayerTrajectoryModel, frames: &[Tensor]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = model.forward(frames)?.into_iter().map(|t| t.into_data()).collect();
    Matrix::from_rows(&rows)
}

/// Per-frame acoustic scores of a model on one utterance.
pub fn model_scores(model: &LayerTrajectoryModel, utt: &Utterance, scale: &AcousticScale) -> Result<Matrix> {
    scale.from_log_posteriors(&log_posteriors(&logit_matrix(model, &utt.features)?)?)
}

/// Frame-combined posteriors of `teachers` for every corpus utterance.
pub fn build_ensemble(teachers: &[&LayerTrajectoryModel], spec: &EnsembleSpec, corpus: &Corpus) -> Result<EnsembleCache> {
    spec.validate()?;
    if teachers.len() != spec.weights.len() {
        return Err(Error::Config(format!(
            "{} teachers for {} weights",
            teachers.len(),
            spec.weights.len()
        )));
    }
    if let Some(t) = teachers.iter().find(|t| t.config.num_senones != teachers[0].config.num_senones) {
        return Err(Error::Config(format!(
            "teachers disagree on the senone set ({} vs {})",
            t.config.num_senones, teachers[0].config.num_senones
        )));
    }
    let posteriors = corpus
        .utterances
        .par_iter()
        .map(|u| {
            let each: Vec<Matrix> = teachers.iter().map(|t| model_posteriors(t, u)).collect::<Result<_>>()?;
            frame_combine(&each, spec)
        })
        .collect::<Result<_>>()?;
    Ok(EnsembleCache { posteriors })
}

/// Fixed per-utterance targets of one stage.
#[derive(Debug, Clone)]
pub enum Supervision {
    Ce {
        align: Vec<u32>,
    },
    Mmi {
        align: Vec<u32>,
        numerator_lm: f64,
        den: Lattice,
    },
    Embr {
        nbest: Vec<Hypothesis>,
        reference: Vec<u32>,
    },
    SeqTs {
        lat: Lattice,
        teacher_scores: Matrix,
    },
}

impl Supervision {
    pub fn lattice(&self) -> Option<&Lattice> {
        match self {
            Self::Mmi { den, .. } => Some(den),
            Self::SeqTs { lat, .. } => Some(lat),
            _ => None,
        }
    }
}

/// Shared, read-only inputs of every stage.
pub struct StageEnv<'a> {
    pub data: &'a TaskData,
    pub training: &'a TrainingConfig,
    pub search: &'a SearchConfig,
}

impl StageEnv<'_> {
    pub fn scale(&self) -> Result<AcousticScale> {
        AcousticScale::new(&self.data.priors, self.training.kappa)
    }
}

/// Builds the stage's fixed targets for one utterance from the seed model.
pub fn prepare_supervision(
    env: &StageEnv,
    kind: CriterionKind,
    lattice_lm_order: usize,
    seed: &LayerTrajectoryModel,
    utt_index: usize,
    teachers: Option<&EnsembleCache>,
) -> Result<Supervision> {
    let utt = env.data.utt(utt_index);
    if kind == CriterionKind::Ce {
        return Ok(Supervision::Ce { align: utt.align.clone() });
    }
    let scale = env.scale()?;
    let scores = model_scores(seed, utt, &scale)?;
    let lm = env.data.lm(lattice_lm_order)?;
    let lat = generate_lattice(&scores, lm, &env.data.lexicon, env.search)?;
    Ok(match kind {
        CriterionKind::Ce => unreachable!(),
        CriterionKind::Mmi => {
            let (arcs, _) = forced_path(&utt.align, &scores, lm, &env.data.lexicon, env.search.lm_weight)?;
            Supervision::Mmi {
                align: utt.align.clone(),
                numerator_lm: arcs.iter().map(|a| a.lm).sum(),
                den: lat.with_path(&arcs)?,
            }
        }
        CriterionKind::Embr => Supervision::Embr {
            nbest: kbest_paths(&lat, env.training.nbest)?
                .iter()
                .map(|p| Hypothesis::from_path(&lat, p))
                .collect(),
            reference: utt.words.clone(),
        },
        CriterionKind::SeqTs => {
            let cache = teachers.ok_or_else(|| Error::Config("SEQ_TS requires teacher posteriors".into()))?;
            let post = &cache.posteriors[utt_index];
            let mut logp = Matrix::zeros(post.rows(), post.cols());
            for t in 0..post.rows() {
                for (o, p) in logp.row_mut(t).iter_mut().zip(post.row(t)) {
                    *o = p.ln();
                }
            }
            Supervision::SeqTs {
                lat,
                teacher_scores: scale.from_log_posteriors(&logp)?,
            }
        }
    })
}

/// Utterance objective: CE is summed over frames, sequence criteria are
/// per utterance. Stage losses divide the total by the frame count.
fn utterance_objective(
    model: &LayerTrajectoryModel,
    utt: &Utterance,
    sup: &Supervision,
    scale: &AcousticScale,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let frames = &utt.features;
    macro_rules! run {
        ($c:expr, $w:expr) => {{
            let c = $c;
            let w: f64 = $w;
            if with_grad {
                let (v, mut g) = criterion_grad(model, frames, &c)?;
                if w != 1.0 {
                    for t in &mut g {
                        t.data_mut().iter_mut().for_each(|x| *x *= w);
                    }
                }
                (w * v, Some(g))
            } else {
                (w * criterion_value(model, frames, &c)?, None)
            }
        }};
    }
    Ok(match sup {
        Supervision::Ce { align } => run!(Ce { align }, frames.len() as f64),
        Supervision::Mmi {
            align,
            numerator_lm,
            den,
        } => run!(
            Mmi {
                align,
                numerator_lm: *numerator_lm,
                den,
                scale
            },
            1.0
        ),
        Supervision::Embr { nbest, reference } => run!(Embr { nbest, reference, scale }, 1.0),
        Supervision::SeqTs { lat, teacher_scores } => run!(
            SeqTs {
                lat,
                teacher_scores,
                scale
            },
            1.0
        ),
    })
}

/// Stage loss over a set of utterances: total objective per frame.
pub fn stage_loss(env: &StageEnv, model: &LayerTrajectoryModel, utts: &[usize], sups: &[Supervision]) -> Result<f64> {
    let scale = env.scale()?;
    let values: Vec<f64> = utts
        .par_iter()
        .zip(sups)
        .map(|(&i, s)| Ok(utterance_objective(model, env.data.utt(i), s, &scale, false)?.0))
        .collect::<Result<_>>()?;
    let frames: usize = utts.iter().map(|&i| env.data.utt(i).num_frames()).sum();
    Ok(values.iter().sum::<f64>() / frames as f64)
}

/// Pooled WER of a model on utterances, decoded with the runtime LM.
pub fn evaluate_wer(env: &StageEnv, model: &LayerTrajectoryModel, utts: &[usize]) -> Result<ScoredResult> {
    let utts: Vec<&Utterance> = utts.iter().map(|&i| env.data.utt(i)).collect();
    evaluate_wer_on(env, model, &utts)
}

pub fn evaluate_wer_on(env: &StageEnv, model: &LayerTrajectoryModel, utts: &[&Utterance]) -> Result<ScoredResult> {
    let scale = env.scale()?;
    let lm = env.data.lm(env.training.runtime_lm_order)?;
    let results: Vec<ScoredResult> = utts
        .par_iter()
        .map(|u| {
            let hyp = decode_words(&model_scores(model, u, &scale)?, lm, &env.data.lexicon, env.search)?;
            Ok(score_wer(&hyp, &u.words))
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().sum())
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub epoch: usize,
    pub criterion: CriterionKind,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub validation_loss: f64,
    /// Validation WER, measured before training and after the last epoch.
    pub wer: Option<f64>,
}

pub fn metrics_jsonl(records: &[MetricRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    pub train_supervision: Vec<Supervision>,
    pub val_supervision: Vec<Supervision>,
    /// Validation WER before and after the stage.
    pub wer_before: ScoredResult,
    pub wer_after: ScoredResult,
}

fn derive_seed(base: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn required_seed_tag(kind: CriterionKind) -> Option<&'static [&'static str]> {
    match kind {
        CriterionKind::Ce => None,
        CriterionKind::Mmi => Some(&["CE"]),
        CriterionKind::Embr => Some(&["CE", "MMI"]),
        CriterionKind::SeqTs => Some(&["MMI"]),
    }
}

fn group_checksum(model: &LayerTrajectoryModel, groups: &[String]) -> String {
    checksum(
        model
            .named_params()
            .into_iter()
            .filter(|(n, _)| groups.iter().any(|g| g == LayerTrajectoryModel::group_of(n)))
            .map(|(_, t)| t),
    )
}

/// Trains one stage. `seed` is the starting checkpoint (required by every
/// criterion but CE); `teachers` supplies SEQ_TS targets.
pub fn run_stage(
    env: &StageEnv,
    stage: &StageConfig,
    seed: &Checkpoint,
    teachers: Option<&EnsembleCache>,
    rng_seed: u64,
) -> Result<StageOutcome> {
    if let Some(tags) = required_seed_tag(stage.criterion) {
        if !tags.contains(&seed.stage.as_str()) {
            return Err(Error::MissingDependency {
                stage: stage.name.clone(),
                required: tags.join(" or "),
            });
        }
    }
    if stage.criterion == CriterionKind::SeqTs && teachers.is_none() {
        return Err(Error::Config(format!("stage {}: SEQ_TS requires an ensemble", stage.name)));
    }
    for f in &stage.freeze {
        if !LayerTrajectoryModel::param_groups().contains(&f.as_str()) {
            return Err(Error::Config(format!("stage {}: unknown parameter group {f:?}", stage.name)));
        }
    }
    let data = env.data;
    let lattice_order = stage.lattice_lm_order.unwrap_or(match stage.criterion {
        CriterionKind::SeqTs => env.training.runtime_lm_order,
        _ => env.training.lattice_lm_order,
    });
    let prepare = |idx: &[usize]| -> Result<Vec<Supervision>> {
        idx.par_iter()
            .map(|&i| prepare_supervision(env, stage.criterion, lattice_order, &seed.model, i, teachers))
            .collect()
    };
    let train_sup = prepare(&data.train)?;
    let val_sup = prepare(&data.val)?;
    let scale = env.scale()?;

    let mut model = seed.model.clone();
    let frozen: Vec<bool> = model
        .named_params()
        .iter()
        .map(|(n, _)| stage.freeze.iter().any(|g| g == LayerTrajectoryModel::group_of(n)))
        .collect();
    let frozen_before = group_checksum(&model, &stage.freeze);

    let mut metrics = Vec::with_capacity(stage.epochs + 1);
    let mut history = Vec::with_capacity(stage.epochs + 1);
    let record = |model: &LayerTrajectoryModel, epoch: usize, lr: f64, wer: Option<f64>| -> Result<MetricRecord> {
        Ok(MetricRecord {
            stage: stage.name.clone(),
            epoch,
            criterion: stage.criterion,
            learning_rate: lr,
            train_loss: stage_loss(env, model, &data.train, &train_sup)?,
            validation_loss: stage_loss(env, model, &data.val, &val_sup)?,
            wer,
        })
    };
    let wer_before = evaluate_wer(env, &model, &data.val)?;
    let r0 = record(&model, 0, stage.learning_rate, Some(wer_before.wer()))?;
    history.push(r0.train_loss);
    metrics.push(r0);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, &stage.name));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut wer_after = wer_before;
    for epoch in 1..=stage.epochs {
        let lr = if stage.decay_every == 0 {
            stage.learning_rate
        } else {
            stage.learning_rate * stage.lr_decay.powi(((epoch - 1) / stage.decay_every) as i32)
        };
        order.shuffle(&mut rng);
        for batch in order.chunks(env.training.batch_size) {
            let grads: Vec<Vec<Tensor>> = batch
                .par_iter()
                .map(|&k| {
                    let (_, g) = utterance_objective(&model, data.utt(data.train[k]), &train_sup[k], &scale, true)?;
                    Ok(g.expect("gradient requested"))
                })
                .collect::<Result<_>>()?;
            let frames: usize = batch.iter().map(|&k| data.utt(data.train[k]).num_frames()).sum();
            let mut total: Vec<Tensor> = grads[0].clone();
            for g in &grads[1..] {
                for (acc, x) in total.iter_mut().zip(g) {
                    acc.data_mut().iter_mut().zip(x.data()).for_each(|(a, b)| *a += b);
                }
            }
            let inv = 1.0 / frames as f64;
            let mut norm_sq = 0.0;
            for (g, &fz) in total.iter_mut().zip(&frozen) {
                for v in g.data_mut() {
                    *v = if fz { 0.0 } else { *v * inv };
                    norm_sq += *v * *v;
                }
            }
            let norm = norm_sq.sqrt();
            let clip = if norm > env.training.clip_norm { env.training.clip_norm / norm } else { 1.0 };
            for (p, g) in model.params_mut().into_iter().zip(&total) {
                p.data_mut().iter_mut().zip(g.data()).for_each(|(w, d)| *w -= lr * clip * d);
            }
        }
        let last = epoch == stage.epochs;
        let wer = if last {
            wer_after = evaluate_wer(env, &model, &data.val)?;
            Some(wer_after.wer())
        } else {
            None
        };
        let r = record(&model, epoch, lr, wer)?;
        history.push(r.train_loss);
        metrics.push(r);
    }
    let frozen_after = group_checksum(&model, &stage.freeze);
    if frozen_after != frozen_before {
        return Err(Error::FreezeViolation {
            before: frozen_before,
            after: frozen_after,
        });
    }
    let validation_loss = metrics.last().expect("epoch 0 recorded").validation_loss;
    Ok(StageOutcome {
        checkpoint: Checkpoint {
            model,
            stage: stage.criterion.name().into(),
            metadata: CheckpointMeta {
                name: stage.name.clone(),
                seed: rng_seed,
                epochs: stage.epochs,
                loss_history: history,
                validation_loss,
            },
        },
        metrics,
        train_supervision: train_sup,
        val_supervision: val_sup,
        wer_before,
        wer_after,
    })
}

fn resolve_ensemble(
    e: &EnsembleConfig,
    done: &BTreeMap<String, Checkpoint>,
    corpus: &Corpus,
    cache: &mut BTreeMap<String, EnsembleCache>,
) -> Result<String> {
    let key = format!("{:?}/{:?}", e.teachers, e.weights);
    if !cache.contains_key(&key) {
        let models: Vec<&LayerTrajectoryModel> = e
            .teachers
            .iter()
            .map(|t| {
                done.get(t)
                    .map(|c| &c.model)
                    .ok_or_else(|| Error::MissingDependency {
                        stage: "ensemble".into(),
                        required: t.clone(),
                    })
            })
            .collect::<Result<_>>()?;
        let built = build_ensemble(&models, &EnsembleSpec::new(e.weights.clone())?, corpus)?;
        cache.insert(key.clone(), built);
    }
    Ok(key)
}

/// Builds the second head on a trained cltLSTM and trains it through the
/// configured stages with the shared time stack frozen.
pub fn run_two_head_recipe(
    env: &StageEnv,
    clt: &Checkpoint,
    cfg: &TwoHeadConfig,
    teachers: &BTreeMap<String, Checkpoint>,
    rng_seed: u64,
) -> Result<(TwoHeadCheckpoint, Vec<MetricRecord>)> {
    if clt.stage != CriterionKind::SeqTs.name() {
        return Err(Error::MissingDependency {
            stage: "two_head".into(),
            required: CriterionKind::SeqTs.name().into(),
        });
    }
    if !cfg.freeze.iter().any(|f| f == "shared") {
        return Err(Error::Config("two_head.freeze must contain \"shared\"".into()));
    }
    let mut tw = build_second_head(&clt.model, cfg.head_seed)?;
    {
        let mut lt = tw.lt_model();
        let names: Vec<String> = lt.named_params().into_iter().map(|(n, _)| n).collect();
        let head = names.into_iter().zip(lt.params_mut()).filter(|(n, _)| n.starts_with("head."));
        rescale_init(head, env.training.init_range)?;
        tw.head_lt = lt.head;
    }
    let shared_before = tw.shared_checksum();
    let clt_before = checksum(tw.clt_model().named_params().into_iter().map(|(_, t)| t));
    // the head is trained as a standalone ltLSTM whose "time" group is the shared stack
    let map_group = |g: &str| match g {
        "shared" => Some("time".to_string()),
        "head_lt" => Some("head".to_string()),
        _ => None,
    };
    let head_freeze: Vec<String> = cfg.freeze.iter().filter_map(|g| map_group(g)).collect();
    let initial = Checkpoint {
        model: tw.lt_model(),
        stage: INIT_TAG.into(),
        metadata: CheckpointMeta {
            name: "two_head/init".into(),
            seed: cfg.head_seed,
            epochs: 0,
            loss_history: Vec::new(),
            validation_loss: f64::NAN,
        },
    };
    let mut done: BTreeMap<String, Checkpoint> = BTreeMap::new();
    let mut caches: BTreeMap<String, EnsembleCache> = BTreeMap::new();
    let mut metrics = Vec::new();
    let mut last = initial.clone();
    for s in &cfg.stages {
        let mut stage = s.clone();
        stage.name = format!("two_head/{}", s.name);
        stage.freeze = head_freeze.iter().chain(&s.freeze).cloned().collect();
        stage.freeze.sort();
        stage.freeze.dedup();
        let seed = match &s.from {
            Some(f) => done
                .get(f)
                .ok_or_else(|| Error::MissingDependency {
                    stage: stage.name.clone(),
                    required: f.clone(),
                })?
                .clone(),
            None => initial.clone(),
        };
        let cache = match &s.ensemble {
            Some(e) => Some(resolve_ensemble(e, teachers, &env.data.corpus, &mut caches)?),
            None => None,
        };
        let out = run_stage(env, &stage, &seed, cache.as_ref().map(|k| &caches[k]), rng_seed)?;
        let after = crate::models::stack_checksum(&out.checkpoint.model.time);
        if after != shared_before {
            return Err(Error::FreezeViolation {
                before: shared_before,
                after,
            });
        }
        metrics.extend(out.metrics);
        last = out.checkpoint.clone();
        done.insert(s.name.clone(), out.checkpoint);
    }
    tw.head_lt = last.model.head.clone();
    let clt_after = checksum(tw.clt_model().named_params().into_iter().map(|(_, t)| t));
    if tw.shared_checksum() != shared_before || clt_after != clt_before {
        return Err(Error::FreezeViolation {
            before: format!("{shared_before}/{clt_before}"),
            after: format!("{}/{clt_after}", tw.shared_checksum()),
        });
    }
    Ok((
        TwoHeadCheckpoint {
            model: tw,
            stage: last.stage,
            metadata: last.metadata,
        },
        metrics,
    ))
}

/// WER of one stage's final checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageWer {
    pub stage: String,
    pub criterion: CriterionKind,
    pub validation: ScoredResult,
    /// On the held-out test utterances, when the recipe asks for them.
    pub test: Option<ScoredResult>,
}

/// Everything a recipe run produces.
pub struct RecipeOutput {
    pub checkpoints: BTreeMap<String, Checkpoint>,
    /// WER after each stage, in stage order.
    pub stage_wer: Vec<StageWer>,
    pub metrics: Vec<MetricRecord>,
    pub two_head: Option<TwoHeadCheckpoint>,
    pub data: TaskData,
}

/// Run-directory layout.
pub mod layout {
    pub const CONFIGS: &str = "configs";
    pub const CHECKPOINTS: &str = "checkpoints";
    pub const LATTICES: &str = "lattices";
    pub const LOGS: &str = "logs";
    pub const REPORTS: &str = "reports";
    pub const METRICS: &str = "logs/metrics.jsonl";
}

fn file_name(stage: &str) -> String {
    stage.replace('/', "__")
}

/// Runs every stage of a recipe, then the optional two-head procedure.
/// With a run directory, writes the config, checkpoints, lattices, metrics
/// log and a summary report into it.
pub fn run_recipe(config: &RecipeConfig, run_dir: Option<&Path>) -> Result<RecipeOutput> {
    config.validate()?;
    let mut corpus = generate_corpus(&config.task, config.num_utterances + config.num_test_utterances)?;
    let test = corpus.utterances.split_off(config.num_utterances);
    run_recipe_on(config, corpus, test, run_dir)
}

/// Runs a recipe on an existing corpus and held-out test set.
pub fn run_recipe_on(
    config: &RecipeConfig,
    corpus: Corpus,
    test: Vec<Utterance>,
    run_dir: Option<&Path>,
) -> Result<RecipeOutput> {
    config.validate()?;
    let data = TaskData::new(corpus, &config.training)?.with_test(test);
    if let Some(dir) = run_dir {
        for d in [layout::CONFIGS, layout::CHECKPOINTS, layout::LATTICES, layout::LOGS, layout::REPORTS] {
            std::fs::create_dir_all(dir.join(d))?;
        }
        std::fs::write(dir.join(layout::CONFIGS).join("recipe.toml"), config.to_toml()?)?;
    }
    let env = StageEnv {
        data: &data,
        training: &config.training,
        search: &config.search,
    };
    let mut done: BTreeMap<String, Checkpoint> = BTreeMap::new();
    let mut caches: BTreeMap<String, EnsembleCache> = BTreeMap::new();
    let mut metrics = Vec::new();
    let mut stage_wer = Vec::new();
    for stage in &config.stages {
        let seed = match &stage.from {
            Some(f) => done[f].clone(),
            None => Checkpoint::fresh(
                &config.model,
                stage.init_seed.unwrap_or(config.seed),
                config.training.init_range,
                &stage.name,
            )?,
        };
        let cache = match &stage.ensemble {
            Some(e) => Some(resolve_ensemble(e, &done, &data.corpus, &mut caches)?),
            None => None,
        };
        if let (Some(dir), Some(key)) = (run_dir, &cache) {
            caches[key]
                .to_container(&data.corpus)?
                .save(&dir.join(layout::CHECKPOINTS).join(format!("{}.ensemble", file_name(&stage.name))))?;
        }
        let out = run_stage(&env, stage, &seed, cache.as_ref().map(|k| &caches[k]), config.seed)?;
        if let Some(dir) = run_dir {
            persist_stage(dir, &data, &stage.name, &out)?;
        }
        let test = if data.test.is_empty() {
            None
        } else {
            let utts: Vec<&Utterance> = data.test.iter().collect();
            Some(evaluate_wer_on(&env, &out.checkpoint.model, &utts)?)
        };
        stage_wer.push(StageWer {
            stage: stage.name.clone(),
            criterion: stage.criterion,
            validation: out.wer_after,
            test,
        });
        metrics.extend(out.metrics);
        done.insert(stage.name.clone(), out.checkpoint);
    }
    let two_head = match &config.two_head {
        Some(th) => {
            let (ck, m) = run_two_head_recipe(&env, &done[&th.from], th, &done, config.seed)?;
            if let Some(dir) = run_dir {
                ck.save(&dir.join(layout::CHECKPOINTS).join("two_head.ckpt"))?;
            }
            metrics.extend(m);
            Some(ck)
        }
        None => None,
    };
    if let Some(dir) = run_dir {
        std::fs::write(dir.join(layout::METRICS), metrics_jsonl(&metrics)?)?;
        std::fs::write(
            dir.join(layout::REPORTS).join("summary.json"),
            serde_json::to_string_pretty(&stage_wer)?,
        )?;
    }
    Ok(RecipeOutput {
        checkpoints: done,
        stage_wer,
        metrics,
        two_head,
        data,
    })
}

fn persist_stage(dir: &Path, data: &TaskData, name: &str, out: &StageOutcome) -> Result<()> {
    out.checkpoint
        .save(&dir.join(layout::CHECKPOINTS).join(format!("{}.ckpt", file_name(name))))?;
    let idx = data.train.iter().chain(&data.val);
    let sups = out.train_supervision.iter().chain(&out.val_supervision);
    let mut text = String::new();
    for (&i, s) in idx.zip(sups) {
        if let Some(lat) = s.lattice() {
            let _ = writeln!(text, "# {}", data.utt(i).id);
            text.push_str(&lat.to_text());
        }
    }
    if !text.is_empty() {
        std::fs::write(dir.join(layout::LATTICES).join(format!("{}.lat", file_name(name))), text)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmComparisonRow {
    pub order: usize,
    pub wer: f64,
    pub errors: usize,
    pub ref_len: usize,
    pub validation_loss: f64,
    /// WER on the held-out test utterances, when there are any.
    pub test_wer: Option<f64>,
}

/// Runs the SEQ_TS `template` once per lattice LM order from the same
/// student seed and teacher cache, reporting validation (and held-out test)
/// WER under the runtime LM.
pub fn compare_lm_strength(
    env: &StageEnv,
    student_seed: &Checkpoint,
    teachers: &EnsembleCache,
    template: &StageConfig,
    orders: &[usize],
    rng_seed: u64,
) -> Result<Vec<LmComparisonRow>> {
    if template.criterion != CriterionKind::SeqTs {
        return Err(Error::Config("LM comparison runs SEQ_TS stages".into()));
    }
    orders
        .iter()
        .map(|&order| {
            let stage = StageConfig {
                name: format!("{}_lm{order}", template.name),
                lattice_lm_order: Some(order),
                ..template.clone()
            };
            let out = run_stage(env, &stage, student_seed, Some(teachers), rng_seed)?;
            let test: Vec<&Utterance> = env.data.test.iter().collect();
            let test_wer = if test.is_empty() {
                None
            } else {
                Some(evaluate_wer_on(env, &out.checkpoint.model, &test)?.wer())
            };
            Ok(LmComparisonRow {
                order,
                wer: out.wer_after.wer(),
                errors: out.wer_after.errors(),
                ref_len: out.wer_after.ref_len,
                validation_loss: out.checkpoint.metadata.validation_loss,
                test_wer,
            })
        })
        .collect()
}
