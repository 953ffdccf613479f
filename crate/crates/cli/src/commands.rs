use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use ltstream::container::Container;
use ltstream::corpus::{generate_corpus, AlignmentField, Corpus, ToyTaskSpec, Utterance};
use ltstream::criteria::AcousticScale;
use ltstream::decoder::decode_words;
use ltstream::gradcheck::{gradcheck_suite, FD_TOL};
use ltstream::graph::GRAD_ABS_FLOOR;
use ltstream::models::{
    build_second_head, lookahead_frames, param_count, production_param_table, LayerTrajectoryModel, ModelConfig,
    Variant,
};
use ltstream::recipe::{
    layout, model_scores, run_recipe, Checkpoint, RecipeConfig, StageEnv, StageWer, TaskData, TrainingConfig,
    TwoHeadCheckpoint,
};
use ltstream::scoring::{relative_wer_reduction, score_wer, ScoredResult};
use ltstream::twopass::{latency_ms, latency_report, two_pass_decode, DecodeSetup, FrameClock, LatencyReport};

use crate::Failure;

const DATA_DIR: &str = "data";
const FEATURES: &str = "features.ltc";
const TRANSCRIPTS: &str = "transcripts.txt";
const TARGETS: &str = "targets.txt";
const RAW_ALIGNMENTS: &str = "raw_alignments.txt";

fn fail(kind: &'static str, message: impl Into<String>) -> anyhow::Error {
    Failure {
        kind,
        message: message.into(),
    }
    .into()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_recipe(path: &Path) -> Result<RecipeConfig> {
    let cfg = RecipeConfig::from_toml(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Recipe whose task spec and corpus size to use; defaults apply otherwise.
    #[arg(long)]
    recipe: Option<PathBuf>,
    /// Number of utterances (overrides the recipe).
    #[arg(long)]
    num_utterances: Option<usize>,
    /// Task seed (overrides the recipe).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_dir: PathBuf,
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let (mut spec, mut num) = match &a.recipe {
        Some(p) => {
            let r = load_recipe(p)?;
            (r.task, r.num_utterances)
        }
        None => (ToyTaskSpec::default(), 200),
    };
    if let Some(n) = a.num_utterances {
        num = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let corpus = generate_corpus(&spec, num)?;
    write_corpus(&corpus, &a.run_dir.join(DATA_DIR))?;
    write(&a.run_dir.join(layout::CONFIGS).join("task.toml"), toml_of(&spec)?)?;
    let frames: usize = corpus.utterances.iter().map(Utterance::num_frames).sum();
    println!(
        "wrote {} utterances ({} frames, {} senones) to {}",
        corpus.utterances.len(),
        frames,
        spec.num_senones(),
        a.run_dir.join(DATA_DIR).display()
    );
    Ok(())
}

fn toml_of(spec: &ToyTaskSpec) -> Result<String> {
    #[derive(Serialize)]
    struct Doc<'a> {
        task: &'a ToyTaskSpec,
    }
    Ok(toml::to_string(&Doc { task: spec })?)
}

fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    corpus.features_container()?.save(&dir.join(FEATURES))?;
    write(&dir.join(TRANSCRIPTS), corpus.transcripts_text())?;
    write(&dir.join(TARGETS), corpus.alignments_text(AlignmentField::Targets))?;
    write(&dir.join(RAW_ALIGNMENTS), corpus.alignments_text(AlignmentField::Raw))?;
    Ok(())
}

fn read_corpus(dir: &Path) -> Result<Corpus> {
    let features = Container::load(&dir.join(FEATURES)).with_context(|| format!("loading {}", dir.join(FEATURES).display()))?;
    Ok(Corpus::from_files(
        &features,
        &read(&dir.join(TRANSCRIPTS))?,
        &read(&dir.join(TARGETS))?,
        &read(&dir.join(RAW_ALIGNMENTS))?,
    )?)
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    recipe: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_recipe(&a.recipe)?;
    let out = run_recipe(&cfg, Some(&a.run_dir))?;
    print!("{}", wer_table(&out.stage_wer, &cfg));
    if let Some(th) = &out.two_head {
        println!("two-head checkpoint: stage {}", th.stage);
    }
    println!("run directory: {}", a.run_dir.display());
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
    All,
}

/// Task data for decoding: from generated files when given, else
/// regenerated from the recipe.
fn task_data(recipe: &RecipeConfig, data_dir: Option<&Path>) -> Result<TaskData> {
    match data_dir {
        Some(d) => Ok(TaskData::new(read_corpus(d)?, &recipe.training)?),
        None => {
            let mut corpus = generate_corpus(&recipe.task, recipe.num_utterances + recipe.num_test_utterances)?;
            let test = corpus.utterances.split_off(recipe.num_utterances);
            Ok(TaskData::new(corpus, &recipe.training)?.with_test(test))
        }
    }
}

fn select(data: &TaskData, split: Split) -> Result<Vec<&Utterance>> {
    let pick = |idx: &[usize]| idx.iter().map(|&i| data.utt(i)).collect::<Vec<_>>();
    let utts = match split {
        Split::Train => pick(&data.train),
        Split::Val => pick(&data.val),
        Split::Test => data.test.iter().collect(),
        Split::All => data.corpus.utterances.iter().collect(),
    };
    if utts.is_empty() {
        return Err(fail("empty", "the selected split has no utterances"));
    }
    Ok(utts)
}

#[derive(Args)]
pub struct DecodeArgs {
    /// Recipe providing task, search and LM settings.
    #[arg(long)]
    recipe: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory written by gen-data; regenerated from the recipe otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
    /// LM order (defaults to the recipe's runtime order).
    #[arg(long)]
    lm_order: Option<usize>,
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Serialize)]
struct DecodeSummary {
    checkpoint: String,
    utterances: usize,
    lm_order: usize,
    result: ScoredResult,
    wer: f64,
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    let cfg = load_recipe(&a.recipe)?;
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let data = task_data(&cfg, a.data.as_deref())?;
    let order = a.lm_order.unwrap_or(cfg.training.runtime_lm_order);
    let lm = data.lm(order)?;
    let env = StageEnv {
        data: &data,
        training: &cfg.training,
        search: &cfg.search,
    };
    let scale = env.scale()?;
    let mut hyps = String::new();
    let mut total = ScoredResult::default();
    let utts = select(&data, a.split)?;
    for u in &utts {
        let hyp = decode_words(&model_scores(&ck.model, u, &scale)?, lm, &data.lexicon, &cfg.search)?;
        total = total + score_wer(&hyp, &u.words);
        let words: Vec<String> = hyp.iter().map(u32::to_string).collect();
        let _ = writeln!(hyps, "{} {}", u.id, words.join(" "));
    }
    let name = a
        .checkpoint
        .file_stem()
        .map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned());
    write(&a.run_dir.join(layout::LOGS).join(format!("decode_{name}.txt")), hyps)?;
    let summary = DecodeSummary {
        checkpoint: format!("{} ({})", ck.metadata.name, ck.stage),
        utterances: utts.len(),
        lm_order: order,
        result: total,
        wer: total.wer(),
    };
    write_json(&a.run_dir.join(layout::REPORTS).join(format!("decode_{name}.json")), &summary)?;
    println!(
        "{}: WER {:.4} ({} errors / {} words, S {} D {} I {})",
        summary.checkpoint,
        total.wer(),
        total.errors(),
        total.ref_len,
        total.substitutions,
        total.deletions,
        total.insertions
    );
    Ok(())
}

#[derive(Args)]
pub struct TwopassArgs {
    /// Use the built-in deterministic fixture instead of a trained model.
    #[arg(long, conflicts_with_all = ["recipe", "checkpoint", "data"])]
    fixture: bool,
    #[arg(long, required_unless_present = "fixture")]
    recipe: Option<PathBuf>,
    /// Two-head checkpoint.
    #[arg(long, required_unless_present = "fixture")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Utterances to decode; the fixture always decodes all of them.
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
    /// Pass-2 delay in frames; defaults to the second head's look-ahead.
    #[arg(long)]
    lookahead: Option<usize>,
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Serialize)]
struct UtteranceHeader<'a> {
    utterance: &'a str,
    frames: usize,
    lookahead: usize,
    time_lstm_steps: usize,
}

#[derive(Serialize)]
struct TwopassSummary {
    utterances: usize,
    lookahead_frames: usize,
    pass1_wer: f64,
    pass2_wer: f64,
    replacements: usize,
    pass1_words: usize,
    mean_replacement_rate: f64,
    mean_perceived_latency_ms: f64,
    max_decoding_lag_ms: f64,
    timeline_sha256: String,
    per_utterance: Vec<LatencyReport>,
}

/// A small seeded two-head model, LM and corpus.
fn fixture() -> Result<(TwoHeadCheckpoint, TaskData, RecipeConfig)> {
    let task = ToyTaskSpec::default();
    let model = ModelConfig {
        num_layers: 2,
        hidden_dim: 16,
        proj_dim: 8,
        input_dim: task.feature_dim,
        num_senones: task.num_senones(),
        tau: 1,
        variant: Variant::Cltlstm,
    };
    let recipe = RecipeConfig {
        version: ltstream::recipe::CONFIG_VERSION,
        seed: 1,
        num_utterances: 40,
        num_test_utterances: 0,
        task,
        model,
        search: Default::default(),
        training: TrainingConfig {
            max_lm_order: 2,
            runtime_lm_order: 2,
            ..Default::default()
        },
        stages: Vec::new(),
        two_head: None,
    };
    let clt = LayerTrajectoryModel::init_with_range(&recipe.model, 3, 0.6)?;
    let model = build_second_head(&clt, 4)?;
    let data = TaskData::new(generate_corpus(&recipe.task, recipe.num_utterances)?, &recipe.training)?;
    let ck = TwoHeadCheckpoint {
        model,
        stage: "fixture".into(),
        metadata: Default::default(),
    };
    Ok((ck, data, recipe))
}

pub fn simulate_twopass(a: TwopassArgs) -> Result<()> {
    let (ck, data, cfg) = if a.fixture {
        fixture()?
    } else {
        let cfg = load_recipe(a.recipe.as_deref().expect("clap enforces --recipe"))?;
        let path = a.checkpoint.as_deref().expect("clap enforces --checkpoint");
        let ck = TwoHeadCheckpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        let data = task_data(&cfg, a.data.as_deref())?;
        (ck, data, cfg)
    };
    let setup = DecodeSetup {
        lm: data.lm(cfg.training.runtime_lm_order)?,
        lexicon: &data.lexicon,
        search: cfg.search.clone(),
        clock: FrameClock::default(),
    };
    let scale = if a.fixture {
        AcousticScale::uniform(data.corpus.spec.num_senones(), cfg.training.kappa)
    } else {
        AcousticScale::new(&data.priors, cfg.training.kappa)?
    };
    let mut jsonl = String::new();
    let (mut p1, mut p2, mut replacements, mut p1_words) = (ScoredResult::default(), ScoredResult::default(), 0, 0);
    let mut per_utterance = Vec::new();
    let mut n_used = 0;
    let utts = select(&data, if a.fixture { Split::All } else { a.split })?;
    for u in &utts {
        let tl = two_pass_decode(&ck.model, &u.features, &scale, &setup, a.lookahead, None)?;
        tl.check_timing()?;
        n_used = tl.lookahead;
        jsonl.push_str(&serde_json::to_string(&UtteranceHeader {
            utterance: &u.id,
            frames: tl.num_frames,
            lookahead: tl.lookahead,
            time_lstm_steps: tl.time_lstm_steps,
        })?);
        jsonl.push('\n');
        jsonl.push_str(&tl.to_jsonl()?);
        p1 = p1 + score_wer(&tl.pass1_words(), &u.words);
        p2 = p2 + score_wer(&tl.final_words(), &u.words);
        replacements += tl.replacements.len();
        p1_words += tl.pass1.len();
        per_utterance.push(latency_report(&tl));
    }
    let digest = sha256_hex(jsonl.as_bytes());
    let timeline_path = a.run_dir.join(layout::LOGS).join("twopass_timeline.jsonl");
    write(&timeline_path, &jsonl)?;
    let n = per_utterance.len() as f64;
    let summary = TwopassSummary {
        utterances: utts.len(),
        lookahead_frames: n_used,
        pass1_wer: p1.wer(),
        pass2_wer: p2.wer(),
        replacements,
        pass1_words: p1_words,
        mean_replacement_rate: per_utterance.iter().map(|r| r.replacement_rate).sum::<f64>() / n,
        mean_perceived_latency_ms: per_utterance.iter().map(|r| r.perceived.mean_ms).sum::<f64>() / n,
        max_decoding_lag_ms: per_utterance.iter().map(|r| r.max_decoding_lag_ms).fold(0.0, f64::max),
        timeline_sha256: digest.clone(),
        per_utterance,
    };
    write_json(&a.run_dir.join(layout::REPORTS).join("twopass.json"), &summary)?;
    println!(
        "{} utterances, N = {} frames ({} ms): pass-1 WER {:.4}, final WER {:.4}",
        summary.utterances,
        n_used,
        latency_ms(n_used, &FrameClock::default()),
        summary.pass1_wer,
        summary.pass2_wer
    );
    println!(
        "replacements {} over {} pass-1 words, mean perceived latency {:.1} ms, max decoding lag {:.1} ms",
        replacements, p1_words, summary.mean_perceived_latency_ms, summary.max_decoding_lag_ms
    );
    println!("timeline {} sha256 {digest}", timeline_path.display());
    Ok(())
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Random instances per variant × criterion pair.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.instances == 0 {
        return Err(fail("invalid_value", "--instances must be positive"));
    }
    let rows = gradcheck_suite(a.instances, a.seed)?;
    // per variant: (worst relative deviation, largest absolute difference)
    let mut worst: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    println!(
        "{:<14} {:<8} {:>9} {:>10} {:>10} status",
        "variant", "criterion", "instances", "worst rel", "max abs"
    );
    for r in &rows {
        println!(
            "{:<14} {:<8} {:>9} {:>10.2e} {:>10.2e} {}",
            r.variant,
            r.criterion.to_string(),
            r.instances,
            r.worst,
            r.max_abs,
            if r.passed { "ok" } else { "FAIL" }
        );
        let w = worst.entry(r.variant.clone()).or_insert((0.0, 0.0));
        *w = (w.0.max(r.worst), w.1.max(r.max_abs));
    }
    println!("relative deviations count coordinates whose absolute difference exceeds {GRAD_ABS_FLOOR:e}");
    for (v, (rel, abs)) in &worst {
        println!("worst relative deviation {v}: {rel:.2e} (max abs {abs:.2e}, tolerance {FD_TOL:e})");
    }
    if let Some(dir) = &a.run_dir {
        write_json(&dir.join(layout::REPORTS).join("gradcheck.json"), &rows)?;
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(fail("gradcheck_failed", format!("{failed} variant/criterion pairs failed")));
    }
    Ok(())
}

#[derive(Args)]
pub struct ParamcountArgs {
    /// Also count a model given as a TOML `ModelConfig`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

pub fn paramcount(a: ParamcountArgs) -> Result<()> {
    let table = production_param_table();
    println!("{:<18} {:>12} {:>10} {:>10}", "model", "params", "published", "deviation");
    for r in &table {
        println!(
            "{:<18} {:>12} {:>9.0}M {:>+9.1}%",
            r.model,
            r.count,
            r.published_millions,
            100.0 * r.deviation
        );
    }
    if let Some(p) = &a.model {
        let cfg: ModelConfig = toml::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?;
        cfg.validate()?;
        println!(
            "{}: {} parameters, look-ahead {} frames ({} ms)",
            p.display(),
            param_count(&cfg),
            lookahead_frames(&cfg),
            latency_ms(lookahead_frames(&cfg), &FrameClock::default())
        );
    }
    if let Some(dir) = &a.run_dir {
        write_json(&dir.join(layout::REPORTS).join("paramcount.json"), &table)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    run_dir: PathBuf,
}

/// Stage WER table with the relative reduction of each stage over the stage
/// it started from.
fn wer_table(rows: &[StageWer], cfg: &RecipeConfig) -> String {
    let by_name: BTreeMap<&str, &StageWer> = rows.iter().map(|r| (r.stage.as_str(), r)).collect();
    let from: BTreeMap<&str, &str> = cfg
        .stages
        .iter()
        .filter_map(|s| s.from.as_deref().map(|f| (s.name.as_str(), f)))
        .collect();
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:<8} {:>8} {:>8} {:>16}", "stage", "criterion", "val WER", "test WER", "test WER change");
    for r in rows {
        let test = r.test.map(|t| t.wer());
        let rel = from
            .get(r.stage.as_str())
            .and_then(|f| by_name.get(f))
            .and_then(|seed| Some((seed.stage.as_str(), seed.test?.wer(), test?)))
            .and_then(|(name, base, new)| Some(format!("{:+.1}% vs {name}", 100.0 * (0.0 - relative_wer_reduction(base, new).ok()?))));
        let _ = writeln!(
            out,
            "{:<10} {:<8} {:>8.4} {:>8} {:>16}",
            r.stage,
            r.criterion.to_string(),
            r.validation.wer(),
            test.map_or("-".into(), |t| format!("{t:.4}")),
            rel.unwrap_or_default()
        );
    }
    out
}

pub fn report(a: ReportArgs) -> Result<()> {
    let cfg = load_recipe(&a.run_dir.join(layout::CONFIGS).join("recipe.toml"))?;
    let summary_path = a.run_dir.join(layout::REPORTS).join("summary.json");
    let rows: Vec<StageWer> =
        serde_json::from_str(&read(&summary_path)?).with_context(|| format!("parsing {}", summary_path.display()))?;
    let metrics = read(&a.run_dir.join(layout::METRICS))?;
    let mut text = wer_table(&rows, &cfg);
    let _ = writeln!(
        text,
        "metrics log: {} records, sha256 {}",
        metrics.lines().count(),
        sha256_hex(metrics.as_bytes())
    );
    print!("{text}");
    write(&a.run_dir.join(layout::REPORTS).join("report.txt"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_hex_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn fixture_is_deterministic() {
        let (a, da, _) = fixture().unwrap();
        let (b, db, _) = fixture().unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(da.corpus, db.corpus);
    }
}
