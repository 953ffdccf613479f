use std::path::Path;
use std::process::{Command, Output};

use ltstream::container::Container;
use ltstream::corpus::{generate_corpus, Corpus, ToyTaskSpec};

const TINY_RECIPE: &str = r#"
version = 1
seed = 5
num_utterances = 60
num_test_utterances = 10

[task]
seed = 3

[model]
num_layers = 2
hidden_dim = 8
proj_dim = 4
input_dim = 8
num_senones = 61
tau = 1
variant = "cltlstm"

[search]
beam = 10.0
max_active = 200
lm_weight = 1.0
max_arcs = 200

[training]
max_lm_order = 2
runtime_lm_order = 2
lattice_lm_order = 1
nbest = 4
init_range = 0.6

[[stages]]
name = "ce"
criterion = "CE"
epochs = 2
learning_rate = 2.0

[[stages]]
name = "mmi"
criterion = "MMI"
epochs = 1
learning_rate = 0.1
from = "ce"

[[stages]]
name = "ts"
criterion = "SEQ_TS"
epochs = 1
learning_rate = 0.5
from = "mmi"

[stages.ensemble]
teachers = ["ce"]
weights = [1.0]

[two_head]
from = "ts"
head_seed = 2
freeze = ["shared"]

[[two_head.stages]]
name = "ce"
criterion = "CE"
epochs = 1
learning_rate = 2.0
"#;

/// Timeline digest of the built-in fixture, recorded on this platform.
const FIXTURE_DIGEST: &str = "ae8c04f95d2839052933fb596d774cc09f5f2ddc02766430f4ff9f009b897e67";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltstream"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_record(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().expect("an error record");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not a JSON record ({e}): {err}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn paramcount_prints_published_comparison() {
    let o = run(&["paramcount"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for (model, published) in [("lstm", "31M"), ("ltlstm", "57M"), ("cltlstm_tau4", "63M"), ("second_head_tau2", "34M")] {
        let line = out
            .lines()
            .find(|l| l.split_whitespace().next() == Some(model))
            .unwrap_or_else(|| panic!("no row for {model}:\n{out}"));
        assert!(line.contains(published), "{line}");
        let dev: f64 = line.split_whitespace().last().unwrap().trim_end_matches('%').parse().unwrap();
        assert!(dev.abs() <= 10.0, "{line}");
    }
}

#[test]
fn paramcount_reads_a_model_file() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.toml");
    std::fs::write(
        &model,
        "num_layers = 6\nhidden_dim = 1024\nproj_dim = 512\ninput_dim = 80\nnum_senones = 9404\ntau = 4\nvariant = \"cltlstm\"\n",
    )
    .unwrap();
    let o = run(&["paramcount", "--model", p(&model), "--run-dir", p(dir.path())]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("65494204 parameters, look-ahead 24 frames (480 ms)"), "{}", stdout(&o));
    assert!(dir.path().join("reports/paramcount.json").exists());
}

#[test]
fn gradcheck_reports_each_variant() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--instances", "1", "--run-dir", p(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    for v in ["plain_lstm", "ltlstm", "cltlstm(tau=1)", "cltlstm(tau=2)"] {
        assert!(out.contains(&format!("worst relative deviation {v}:")), "{out}");
    }
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("reports/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 16);
}

#[test]
fn fixture_timeline_digest_is_recorded() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = run(&["simulate-twopass", "--fixture", "--run-dir", p(a.path())]);
    let ob = run(&["simulate-twopass", "--fixture", "--run-dir", p(b.path())]);
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    let ta = std::fs::read(a.path().join("logs/twopass_timeline.jsonl")).unwrap();
    let tb = std::fs::read(b.path().join("logs/twopass_timeline.jsonl")).unwrap();
    assert_eq!(ta, tb);
    assert!(stdout(&oa).contains(FIXTURE_DIGEST), "{}", stdout(&oa));
    assert!(stdout(&ob).contains(FIXTURE_DIGEST));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["paramcount", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_record(&o)["kind"], "usage");
    let o = run(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--recipe", p(&dir.path().join("absent.toml")), "--run-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let rec = error_record(&o);
    assert_eq!(rec["kind"], "io");
    assert!(rec["message"].as_str().unwrap().contains("absent.toml"));
}

#[test]
fn schema_violations_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, TINY_RECIPE.replace("version = 1", "version = 1\nextra_field = 2")).unwrap();
    let o = run(&["train", "--recipe", p(&bad), "--run-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_record(&o)["kind"], "config");
    std::fs::write(&bad, TINY_RECIPE.replace("from = \"ce\"\n\n[[stages]]\nname = \"ts\"", "from = \"nope\"\n\n[[stages]]\nname = \"ts\"")).unwrap();
    let o = run(&["train", "--recipe", p(&bad), "--run-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_record(&o)["kind"].is_string());
}

#[test]
fn gen_data_writes_round_trippable_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--num-utterances", "15", "--seed", "4", "--run-dir", p(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d = dir.path().join("data");
    let read = |f: &str| std::fs::read_to_string(d.join(f)).unwrap();
    let corpus = Corpus::from_files(
        &Container::load(&d.join("features.ltc")).unwrap(),
        &read("transcripts.txt"),
        &read("targets.txt"),
        &read("raw_alignments.txt"),
    )
    .unwrap();
    let expected = generate_corpus(&ToyTaskSpec { seed: 4, ..Default::default() }, 15).unwrap();
    assert_eq!(corpus, expected);
    assert!(dir.path().join("configs/task.toml").exists());
}

#[test]
fn train_decode_simulate_report_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = dir.path().join("tiny.toml");
    std::fs::write(&recipe, TINY_RECIPE).unwrap();
    let run_dir = dir.path().join("run");

    let o = run(&["train", "--recipe", p(&recipe), "--run-dir", p(&run_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "configs/recipe.toml",
        "checkpoints/ce.ckpt",
        "checkpoints/mmi.ckpt",
        "checkpoints/ts.ckpt",
        "checkpoints/two_head.ckpt",
        "logs/metrics.jsonl",
        "reports/summary.json",
    ] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }

    let o = run(&[
        "decode",
        "--recipe",
        p(&recipe),
        "--checkpoint",
        p(&run_dir.join("checkpoints/ts.ckpt")),
        "--split",
        "test",
        "--run-dir",
        p(&run_dir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let hyps = std::fs::read_to_string(run_dir.join("logs/decode_ts.txt")).unwrap();
    assert_eq!(hyps.lines().count(), 10);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("reports/decode_ts.json")).unwrap()).unwrap();
    // the decode WER on the test split equals the recipe's own measurement
    let stages: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("reports/summary.json")).unwrap()).unwrap();
    let ts = stages.as_array().unwrap().iter().find(|s| s["stage"] == "ts").unwrap();
    assert_eq!(summary["result"], ts["test"]);

    let o = run(&[
        "simulate-twopass",
        "--recipe",
        p(&recipe),
        "--checkpoint",
        p(&run_dir.join("checkpoints/two_head.ckpt")),
        "--split",
        "test",
        "--lookahead",
        "4",
        "--run-dir",
        p(&run_dir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("reports/twopass.json")).unwrap()).unwrap();
    assert_eq!(report["utterances"], 10);
    assert_eq!(report["lookahead_frames"], 4);

    let o = run(&[
        "simulate-twopass",
        "--recipe",
        p(&recipe),
        "--checkpoint",
        p(&run_dir.join("checkpoints/two_head.ckpt")),
        "--lookahead",
        "1",
        "--run-dir",
        p(&run_dir),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_record(&o)["kind"], "config");

    let o = run(&["report", "--run-dir", p(&run_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("vs ce") && out.contains("vs mmi"), "{out}");
    assert!(run_dir.join("reports/report.txt").exists());
}

#[test]
fn decode_reads_gen_data_output() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = dir.path().join("tiny.toml");
    let ce_only = TINY_RECIPE.split("[[stages]]\nname = \"mmi\"").next().unwrap();
    std::fs::write(&recipe, ce_only).unwrap();
    let run_dir = dir.path().join("run");
    assert!(run(&["gen-data", "--recipe", p(&recipe), "--run-dir", p(&run_dir)]).status.success());
    assert!(run(&["train", "--recipe", p(&recipe), "--run-dir", p(&run_dir)]).status.success());
    let o = run(&[
        "decode",
        "--recipe",
        p(&recipe),
        "--checkpoint",
        p(&run_dir.join("checkpoints/ce.ckpt")),
        "--data",
        p(&run_dir.join("data")),
        "--run-dir",
        p(&run_dir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // files and regeneration give the same validation WER
    let from_files = std::fs::read_to_string(run_dir.join("reports/decode_ce.json")).unwrap();
    let o = run(&[
        "decode",
        "--recipe",
        p(&recipe),
        "--checkpoint",
        p(&run_dir.join("checkpoints/ce.ckpt")),
        "--run-dir",
        p(&run_dir),
    ]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(run_dir.join("reports/decode_ce.json")).unwrap(), from_files);
}
