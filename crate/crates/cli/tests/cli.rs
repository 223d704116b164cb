use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use elegant::metrics::EvalReport;
use elegant_cli::run::{self, Overrides, MANIFEST_FILE};
use elegant_cli::{ExperimentConfig, RunManifest};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_elegant"))
}

fn run_bin(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const PRETRAINED: &str = r#"
schema_version = 1
seed = 11

[reward]
kind = "linear"
b = [1.0]

[method]
kind = "pretrained"

[evaluation]
n = 400
"#;

/// A small ELEGANT run that finishes in seconds.
const SMALL_ELEGANT: &str = r#"
schema_version = 1
seed = 3
alpha = 1.0

[reward]
kind = "linear"
b = [1.0]

[method]
kind = "elegant"

[value.soft]
probes = 64
rollouts = 16

[value.soft.fit]
epochs = 20

[stage1]
epochs = 2
batch = 16
lr = 0.01

[stage2]
epochs = 2
batch = 16
lr = 0.01

[evaluation]
n = 300
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn report(dir: &Path) -> EvalReport {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn assert_complete(dir: &Path) {
    let (m, d) = RunManifest::load(dir).unwrap();
    assert!(m.missing(&d).is_empty(), "missing artifacts {:?}", m.missing(&d));
}

#[test]
fn config_round_trips() {
    for text in [PRETRAINED, SMALL_ELEGANT] {
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
    }
    let guidance = PRETRAINED.replace("kind = \"pretrained\"", "kind = \"guidance\"\ny_con = 3.0");
    let cfg = ExperimentConfig::from_toml(&guidance).unwrap();
    assert_eq!(cfg, ExperimentConfig::from_toml(&cfg.to_toml()).unwrap());
}

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let typo = PRETRAINED.replace("n = 400", "n = 400\nbinz = 3");
    let err = ExperimentConfig::from_toml(&typo).unwrap_err();
    assert!(err.0.contains("binz"), "{err}");

    let path = write_config(tmp.path(), "typo.toml", &typo);
    let out = run_bin(&["finetune", "--config", path.to_str().unwrap(), "--out-dir", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let negative = PRETRAINED.replace("seed = 11", "seed = 11\nalpha = -1.0");
    let err = ExperimentConfig::from_toml(&negative).and_then(|c| c.validate()).unwrap_err();
    assert!(err.0.starts_with("alpha"), "{err}");

    let version = PRETRAINED.replace("schema_version = 1", "schema_version = 9");
    let err = ExperimentConfig::from_toml(&version).and_then(|c| c.validate()).unwrap_err();
    assert!(err.0.contains("schema_version"), "{err}");
}

#[test]
fn pretrained_run_has_zero_kl_and_respects_n_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(PRETRAINED).unwrap();
    let dir = tmp.path().join("pre");
    let m = run::finetune(&cfg, &dir).unwrap();
    assert_eq!(m.method, "pretrained");
    assert_eq!(m.artifacts.keys().collect::<Vec<_>>(), vec!["config"]);

    let (rep, set) = run::evaluate(&dir.join(MANIFEST_FILE), Overrides { n: Some(123), seed: None }).unwrap();
    assert_eq!(rep.n, 123);
    assert_eq!(set.terminal.rows, 123);
    assert_eq!(rep.kl_total.mean, 0.0);
    assert!(rep.kl_stage1_bound.is_none());
    assert!(rep.w1_target.is_some());
    assert_eq!(report(&dir), rep);
    assert!(dir.join("samples_hist.svg").exists());
    assert_complete(&dir);
}

#[test]
fn reruns_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "e.toml", SMALL_ELEGANT);
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let out = run_bin(&["finetune", "--config", path.to_str().unwrap(), "--out-dir", dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = run_bin(&["evaluate", dir.join(MANIFEST_FILE).to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert_complete(&dir);
        reports.push(std::fs::read(dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    for file in ["samples_hist.csv", "checkpoints/stage2_u.json", "config.toml"] {
        let a = std::fs::read(tmp.path().join("a").join(file));
        let b = std::fs::read(tmp.path().join("b").join(file));
        assert_eq!(a.ok(), b.ok(), "{file}");
    }
    let (m, _) = RunManifest::load(&tmp.path().join("a")).unwrap();
    for role in ["value", "stage1_q", "stage2_u"] {
        assert!(m.artifacts.contains_key(role), "{role}");
    }

    let other = run_bin(&[
        "finetune",
        "--config",
        path.to_str().unwrap(),
        "--out-dir",
        tmp.path().join("c").to_str().unwrap(),
        "--seed-override",
        "99",
    ]);
    assert_eq!(code(&other), 0);
    let (mc, _) = RunManifest::load(&tmp.path().join("c")).unwrap();
    assert_ne!(mc.config_hash, m.config_hash);
}

#[test]
fn comparison_table_has_the_reward_kl_div_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let base = ExperimentConfig::from_toml(PRETRAINED).unwrap();
    let naive = ExperimentConfig::from_toml(&PRETRAINED.replace("\"pretrained\"", "\"naive\"")).unwrap();
    run::finetune(&base, &tmp.path().join("pre")).unwrap();
    run::finetune(&naive, &tmp.path().join("naive")).unwrap();
    let out = tmp.path().join("cmp");
    let reports = run::evaluate_many(
        &[tmp.path().join("pre"), tmp.path().join("naive")],
        Some(&out),
        Overrides { n: Some(200), seed: None },
    )
    .unwrap();
    assert_eq!(reports.len(), 2);
    let csv = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    for col in ["reward_r", "reward_r_star", "kl_div", "div"] {
        assert!(header.split(',').any(|c| c == col), "{header}");
    }
    assert!(lines.next().unwrap().starts_with("pretrained,"));
    assert!(lines.next().unwrap().starts_with("naive,"));
    assert!(reports[1].kl_total.mean > reports[0].kl_total.mean);
    assert_complete(&out);
}

#[test]
fn nominal_fit_emits_reward_histograms() {
    let tmp = tempfile::tempdir().unwrap();
    let text = r#"
schema_version = 1
seed = 5

[reward]
kind = "default_genuine"

[nominal]
component = 0
n = 300

[nominal.fit]
epochs = 30

[method]
kind = "pretrained"

[evaluation]
n = 200
target = false
"#;
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    let dir = tmp.path().join("run");
    run::finetune(&cfg, &dir).unwrap();
    let (rep, _) = run::evaluate(&dir, Overrides::default()).unwrap();
    assert!(rep.reward_genuine.is_some());
    assert!(rep.w1_target.is_none());
    let csv = std::fs::read_to_string(dir.join("reward_hist.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("nominal r,")));
    assert!(csv.lines().any(|l| l.starts_with("genuine r*,")));
    assert!(std::fs::read_to_string(dir.join("reward_hist.svg")).unwrap().starts_with("<svg"));
    assert_complete(&dir);
}

#[test]
fn missing_artifact_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(SMALL_ELEGANT).unwrap();
    let dir = tmp.path().join("e");
    run::finetune(&cfg, &dir).unwrap();
    std::fs::remove_file(dir.join("checkpoints/stage2_u.json")).unwrap();
    let out = run_bin(&["evaluate", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    let err = stderr(&out);
    assert!(err.contains("stage2_u"), "{err}");

    let out = run_bin(&["evaluate", tmp.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(code(&out), 3);
}

#[test]
fn sample_writes_exactly_n_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(PRETRAINED).unwrap();
    let dir = tmp.path().join("pre");
    run::finetune(&cfg, &dir).unwrap();
    let out = run_bin(&["sample", dir.join(MANIFEST_FILE).to_str().unwrap(), "--n-override", "57"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.join("samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 58);
    assert_eq!(csv.lines().next(), Some("x0"));
    assert_complete(&dir);
}

#[test]
fn sweep_records_failures_and_trends() {
    let tmp = tempfile::tempdir().unwrap();
    let text = PRETRAINED.replace("\"pretrained\"", "\"naive\"") + "\n[sweep]\nalphas = [4.0, 1.0, -1.0]\n";
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    let dir = tmp.path().join("sweep");
    let summary = run::sweep(&cfg, &dir, Overrides::default()).unwrap();
    assert_eq!(summary.rows.len(), 3);
    assert!(summary.rows[0].report.is_some() && summary.rows[1].report.is_some());
    assert!(summary.rows[2].error.as_deref().unwrap().contains("alpha"));
    // A stronger push towards large x raises the reward.
    assert_eq!(summary.reward_nonincreasing_in_alpha, Some(true));
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().last().unwrap().starts_with("-1,failed"));
    assert!(dir.join("sweep_hist.svg").exists());
    assert_complete(&dir);
    assert_complete(&dir.join("alpha_4"));
}

#[test]
fn single_alpha_sweep_matches_finetune_then_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let text = PRETRAINED.replace("\"pretrained\"", "\"naive\"");
    let cfg = ExperimentConfig::from_toml(&(text.clone() + "\n[sweep]\nalphas = [2.0]\n")).unwrap();
    let summary = run::sweep(&cfg, &tmp.path().join("s"), Overrides::default()).unwrap();
    let single = ExperimentConfig::from_toml(&text).unwrap().with_alpha(2.0);
    run::finetune(&single, &tmp.path().join("f")).unwrap();
    let (rep, _) = run::evaluate(&tmp.path().join("f"), Overrides::default()).unwrap();
    assert_eq!(summary.rows[0].report.as_ref(), Some(&rep));
}

#[test]
fn oracle_check_passes_and_detects_a_corrupted_tilt() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("oracle");
    let out = run_bin(&["oracle-check", "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: elegant::oracle::SuiteReport =
        serde_json::from_str(&std::fs::read_to_string(dir.join("oracle_report.json")).unwrap()).unwrap();
    assert!(report.checks.len() >= 6);
    assert!(report.passed());

    let out = run_bin(&["oracle-check", "--out-dir", dir.to_str().unwrap(), "--inject-tilt-error", "1e-6"]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("chain."), "{}", stderr(&out));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
