//! The subcommands: fine-tune, evaluate, sweep, oracle check and sampling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use elegant::control::{
    elegant_finetune, fit_time_reward_model, train_no_kl, Control, DriftNet, FineTunedModel, GuidanceField, NaiveField,
    SampleSet, Sampler, TimeRewardModel,
};
use elegant::fit::Regressor;
use elegant::metrics::{evaluate as score, EvalReport, Histogram};
use elegant::oracle::{run_suite_with, SuiteConfig, SuiteReport};
use elegant::rewards::{fit_nominal_reward, single_mode, truncated_dataset, Reward, TiltedTarget};

use crate::config::{ConfigError, ExperimentConfig, Method};
use crate::svg;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "elegant-run";
const MANIFEST_VERSION: u32 = 1;

/// One or more oracle identities exceeded their thresholds (exit code 4).
#[derive(Debug)]
pub struct OracleBreach(pub Vec<String>);

impl std::fmt::Display for OracleBreach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "oracle identities failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for OracleBreach {}

/// Index of everything a run wrote. Paths are relative to the run
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub library_version: String,
    pub method: String,
    pub config_hash: String,
    pub artifacts: BTreeMap<String, PathBuf>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(method: &str, config_hash: String) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            library_version: env!("CARGO_PKG_VERSION").into(),
            method: method.into(),
            config_hash,
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Loads `path`, or `path/manifest.json` when `path` is a directory.
    /// Returns the manifest and its run directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).with_context(|| format!("reading manifest {}", file.display()))?;
        let m: Self = serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", file.display()))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            bail!("{}: expected {MANIFEST_FORMAT} v{MANIFEST_VERSION}, found {} v{}", file.display(), m.format, m.version);
        }
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, dir))
    }

    /// Absolute path of an artifact, which must exist.
    pub fn artifact(&self, dir: &Path, role: &str) -> Result<PathBuf> {
        let rel = self
            .artifacts
            .get(role)
            .ok_or_else(|| anyhow!("manifest lists no `{role}` artifact"))?;
        let path = dir.join(rel);
        if !path.exists() {
            bail!("missing artifact `{role}`: {}", path.display());
        }
        Ok(path)
    }

    fn record(&mut self, dir: &Path, role: &str, path: &Path) {
        let rel = path.strip_prefix(dir).unwrap_or(path).to_path_buf();
        self.artifacts.insert(role.into(), rel);
    }

    /// Every artifact path, for checking completeness.
    pub fn missing(&self, dir: &Path) -> Vec<PathBuf> {
        self.artifacts.values().map(|p| dir.join(p)).filter(|p| !p.exists()).collect()
    }
}

fn timed<T>(m: &mut RunManifest, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f()?;
    m.timings.insert(name.into(), t.elapsed().as_secs_f64());
    Ok(out)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// The run directory: the override, then the config's `out_dir`, then
/// `runs/<method>`.
pub fn resolve_out_dir(cfg: &ExperimentConfig, over: Option<&Path>) -> PathBuf {
    over.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(cfg.method.name()))
}

const CONFIG_FILE: &str = "config.toml";

/// Trains the configured method and writes its checkpoints and manifest.
pub fn finetune(cfg: &ExperimentConfig, dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut m = RunManifest::new(cfg.method.name(), cfg.hash());
    let cfg_path = dir.join(CONFIG_FILE);
    write(&cfg_path, cfg.to_toml())?;
    m.record(dir, "config", &cfg_path);

    let model = cfg.model()?;
    let genuine = cfg.reward.build()?;
    let nominal = match &cfg.nominal {
        None => genuine.clone(),
        Some(spec) => {
            let reg = timed(&mut m, "nominal_fit", || {
                let data = match spec.component {
                    Some(c) => single_mode(&model.data.components()[c]),
                    None => model.data.clone(),
                };
                let (x, y) = truncated_dataset(&data, &genuine, spec.n, cfg.seed_for(spec.seed), |_| true);
                let fit = fit_nominal_reward(&x, &y, &spec.fit).context("fitting the nominal reward")?;
                match fit.reward {
                    Reward::Net(r) => Ok(*r),
                    _ => unreachable!("nominal fits are networks"),
                }
            })?;
            let path = dir.join("nominal_reward.json");
            reg.save(&path)?;
            m.record(dir, "nominal_reward", &path);
            Reward::Net(Box::new(reg))
        }
    };

    match &cfg.method {
        Method::Pretrained | Method::Naive => {}
        Method::Elegant => {
            let ft = timed(&mut m, "elegant", || Ok(elegant_finetune(&model, &nominal, &cfg.elegant())?))?;
            let ckpt = dir.join("checkpoints");
            let paths = ft.save(&ckpt)?;
            for (role, p) in ["value", "stage1_q", "stage2_u", "finetuned"].iter().zip(&paths) {
                m.record(dir, role, p);
            }
        }
        method @ (Method::NoKl | Method::Truncation { .. } | Method::RandomK) => {
            let interval = method.interval(model.horizon).expect("training baseline");
            let (u, log) = timed(&mut m, "train", || Ok(train_no_kl(&model, &nominal, &cfg.baseline_stage(), interval)?))?;
            let path = dir.join("drift.json");
            u.save(&path)?;
            m.record(dir, "drift", &path);
            let log_path = dir.join("train_log.json");
            write(&log_path, serde_json::to_string_pretty(&log)?)?;
            m.record(dir, "train_log", &log_path);
        }
        Method::Guidance { .. } => {
            let g = &cfg.guidance_model;
            let mu = timed(&mut m, "time_reward_model", || {
                Ok(fit_time_reward_model(
                    &model,
                    &nominal,
                    &cfg.guidance_times(),
                    g.rollouts,
                    &g.fit,
                    cfg.seed_for(g.seed),
                )?)
            })?;
            let path = dir.join("time_reward_model.json");
            write(&path, serde_json::to_string(&mu)?)?;
            m.record(dir, "time_reward_model", &path);
        }
    }
    m.save(dir)?;
    Ok(m)
}

/// A run rebuilt from its directory.
pub struct LoadedRun {
    pub manifest: RunManifest,
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub sampler: Sampler,
    pub nominal: Reward,
    /// Present when a nominal reward was fitted.
    pub genuine: Option<Reward>,
}

pub fn load_run(manifest_path: &Path) -> Result<LoadedRun> {
    let (manifest, dir) = RunManifest::load(manifest_path)?;
    let config = ExperimentConfig::load(&manifest.artifact(&dir, "config")?)?;
    let model = config.model()?;
    let genuine = config.reward.build()?;
    let (nominal, genuine) = if config.nominal.is_some() {
        let reg = Regressor::load(manifest.artifact(&dir, "nominal_reward")?)?;
        (Reward::Net(Box::new(reg)), Some(genuine))
    } else {
        (genuine, None)
    };
    let sampler = match &config.method {
        Method::Pretrained => Sampler::pretrained(&model),
        Method::Elegant => {
            for role in ["value", "stage1_q", "stage2_u", "finetuned"] {
                manifest.artifact(&dir, role)?;
            }
            FineTunedModel::load(dir.join("checkpoints"))?.sampler()
        }
        Method::NoKl | Method::Truncation { .. } | Method::RandomK => {
            let u = DriftNet::load(manifest.artifact(&dir, "drift")?)?;
            Sampler::with_control(&model, Control::Net(u))
        }
        Method::Naive => Sampler::with_control(&model, Control::Naive(NaiveField::new(&nominal, config.alpha)?)),
        Method::Guidance { gamma, y_con, sigma_g } => {
            let text = std::fs::read_to_string(manifest.artifact(&dir, "time_reward_model")?)?;
            let mu: TimeRewardModel = serde_json::from_str(&text)?;
            Sampler::with_control(&model, Control::Guidance(GuidanceField::new(mu, *gamma, *y_con, *sigma_g)?))
        }
    }
    .with_steps(config.model.n_steps);
    Ok(LoadedRun {
        manifest,
        dir,
        config,
        sampler,
        nominal,
        genuine,
    })
}

/// Sample count and seed overrides for evaluation and sampling.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub n: Option<usize>,
    pub seed: Option<u64>,
}

fn histogram_files(
    dir: &Path,
    stem: &str,
    title: &str,
    series: &[(&str, &[f64])],
    bins: usize,
    m: &mut RunManifest,
) -> Result<()> {
    let (lo, hi) = Histogram::range(&series.iter().map(|(_, v)| *v).collect::<Vec<_>>())?;
    let hists = series
        .iter()
        .map(|(_, v)| Histogram::new(v, lo, hi, bins))
        .collect::<elegant::Result<Vec<_>>>()?;
    let mut csv = String::from("series,lo,hi,count\n");
    for ((name, _), h) in series.iter().zip(&hists) {
        for line in h.to_csv().lines().skip(1) {
            let _ = writeln!(csv, "{name},{line}");
        }
    }
    let csv_path = dir.join(format!("{stem}.csv"));
    write(&csv_path, csv)?;
    m.record(dir, &format!("{stem}_csv"), &csv_path);
    let labelled: Vec<(&str, &Histogram)> = series.iter().map(|(n, _)| *n).zip(&hists).collect();
    let svg_path = dir.join(format!("{stem}.svg"));
    write(&svg_path, svg::histograms(title, &labelled))?;
    m.record(dir, &format!("{stem}_svg"), &svg_path);
    Ok(())
}

/// Scores a run, writes its report and histograms into the run directory
/// and lists them in its manifest.
pub fn evaluate(manifest_path: &Path, over: Overrides) -> Result<(EvalReport, SampleSet)> {
    let mut run = load_run(manifest_path)?;
    let cfg = match over.seed {
        Some(s) => run.config.clone().with_seed(s),
        None => run.config.clone(),
    };
    let n = over.n.unwrap_or(cfg.evaluation.n);
    let seed = cfg.seed_for(cfg.evaluation.seed.wrapping_add(0xe7a1));
    let target = if cfg.evaluation.target {
        match TiltedTarget::new(&run.sampler.model.data, &run.nominal, cfg.alpha) {
            Ok(t) => Some(t),
            Err(e) => {
                eprintln!("warning: no analytic target for W1 ({e})");
                None
            }
        }
    } else {
        None
    };
    let t = Instant::now();
    let (mut report, set) = score(&run.sampler, &run.nominal, run.genuine.as_ref(), target.as_ref(), n, seed)?;
    report.config_hash = Some(run.manifest.config_hash.clone());
    let dir = run.dir.clone();
    let m = &mut run.manifest;
    m.timings.insert("evaluate".into(), t.elapsed().as_secs_f64());
    let report_path = dir.join("report.json");
    write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    m.record(&dir, "report", &report_path);
    let bins = cfg.evaluation.bins;
    if set.terminal.cols == 1 {
        let method = m.method.clone();
        histogram_files(&dir, "samples_hist", "terminal samples", &[(method.as_str(), &set.terminal.data)], bins, m)?;
    }
    if let Some(g) = &run.genuine {
        let r = run.nominal.values(&set.terminal);
        let rs = g.values(&set.terminal);
        histogram_files(&dir, "reward_hist", "rewards of terminal samples", &[("nominal r", &r), ("genuine r*", &rs)], bins, m)?;
    }
    m.save(&dir)?;
    Ok((report, set))
}

/// The comparison table: one row per labelled report.
pub fn comparison_csv(rows: &[(String, EvalReport)]) -> String {
    let mut s = String::from("method,reward_r,reward_r_se,reward_r_star,reward_r_star_se,kl_div,kl_div_se,div,div_se,w1_target\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for (label, r) in rows {
        let _ = writeln!(
            s,
            "{label},{},{},{},{},{},{},{},{},{}",
            r.reward.mean,
            r.reward.se,
            opt(r.reward_genuine.map(|e| e.mean)),
            opt(r.reward_genuine.map(|e| e.se)),
            r.kl_total.mean,
            r.kl_total.se,
            r.diversity.mean,
            r.diversity.se,
            opt(r.w1_target),
        );
    }
    s
}

/// Evaluates every manifest; with more than one, also writes a comparison
/// table and its own manifest into `out_dir`.
pub fn evaluate_many(manifests: &[PathBuf], out_dir: Option<&Path>, over: Overrides) -> Result<Vec<EvalReport>> {
    let mut rows = Vec::new();
    for path in manifests {
        let (report, _) = evaluate(path, over)?;
        let (m, _) = RunManifest::load(path)?;
        rows.push((m.method, report));
    }
    if rows.len() > 1 {
        let dir = out_dir.ok_or_else(|| ConfigError("--out-dir is required when comparing runs".into()))?;
        std::fs::create_dir_all(dir)?;
        let hashes: String = rows.iter().filter_map(|(_, r)| r.config_hash.clone()).collect::<Vec<_>>().join("+");
        let mut m = RunManifest::new("comparison", hashes);
        let path = dir.join("comparison.csv");
        write(&path, comparison_csv(&rows))?;
        m.record(dir, "comparison", &path);
        m.save(dir)?;
    }
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// One row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub dir: PathBuf,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    /// Mean reward does not increase with α.
    pub reward_nonincreasing_in_alpha: Option<bool>,
    /// Diversity does not decrease with α.
    pub div_nondecreasing_in_alpha: Option<bool>,
}

fn alpha_label(alpha: f64) -> String {
    format!("alpha_{alpha}")
}

/// Fine-tunes and evaluates once per α; failures are recorded and the sweep
/// continues.
pub fn sweep(cfg: &ExperimentConfig, dir: &Path, over: Overrides) -> Result<SweepSummary> {
    cfg.validate()?;
    let alphas = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| ConfigError("sweep: section missing".into()))?
        .alphas
        .clone();
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::new();
    let mut samples: Vec<(String, Vec<f64>)> = Vec::new();
    for &alpha in &alphas {
        let sub = dir.join(alpha_label(alpha));
        let mut one = cfg.clone().with_alpha(alpha);
        one.sweep = None;
        one.out_dir = None;
        let outcome = finetune(&one, &sub).and_then(|_| evaluate(&sub.join(MANIFEST_FILE), over));
        match outcome {
            Ok((report, set)) => {
                if set.terminal.cols == 1 {
                    samples.push((format!("α = {alpha}"), set.terminal.data));
                }
                rows.push(SweepRow { alpha, dir: sub, report: Some(report), error: None });
            }
            Err(e) => rows.push(SweepRow { alpha, dir: sub, report: None, error: Some(format!("{e:#}")) }),
        }
    }
    let mut ok: Vec<(f64, &EvalReport)> = rows.iter().filter_map(|r| r.report.as_ref().map(|p| (r.alpha, p))).collect();
    ok.sort_by(|a, b| a.0.total_cmp(&b.0));
    let trend = |f: &dyn Fn(&EvalReport) -> f64, up: bool| {
        (ok.len() >= 2).then(|| ok.windows(2).all(|w| if up { f(w[1].1) >= f(w[0].1) } else { f(w[1].1) <= f(w[0].1) }))
    };
    let summary = SweepSummary {
        reward_nonincreasing_in_alpha: trend(&|r| r.reward.mean, false),
        div_nondecreasing_in_alpha: trend(&|r| r.diversity.mean, true),
        rows,
    };

    let mut m = RunManifest::new("sweep", cfg.hash());
    let mut csv = String::from("alpha,status,reward_r,reward_r_se,reward_r_star,kl_div,div,w1_target\n");
    for row in &summary.rows {
        let sub_manifest = row.dir.join(MANIFEST_FILE);
        if sub_manifest.exists() {
            m.record(dir, &format!("{}_manifest", alpha_label(row.alpha)), &sub_manifest);
        }
        match &row.report {
            Some(r) => {
                let _ = writeln!(
                    csv,
                    "{},ok,{},{},{},{},{},{}",
                    row.alpha,
                    r.reward.mean,
                    r.reward.se,
                    r.reward_genuine.map_or(String::new(), |e| e.mean.to_string()),
                    r.kl_total.mean,
                    r.diversity.mean,
                    r.w1_target.map_or(String::new(), |w| w.to_string()),
                );
            }
            None => {
                let msg = row.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
                let _ = writeln!(csv, "{},failed: {msg},,,,,,", row.alpha);
            }
        }
    }
    let csv_path = dir.join("sweep.csv");
    write(&csv_path, csv)?;
    m.record(dir, "sweep_csv", &csv_path);
    let json_path = dir.join("sweep.json");
    write(&json_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    m.record(dir, "sweep_json", &json_path);
    if !samples.is_empty() {
        let series: Vec<(&str, &[f64])> = samples.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
        histogram_files(dir, "sweep_hist", "terminal samples across α", &series, cfg.evaluation.bins, &mut m)?;
    }
    m.save(dir)?;
    Ok(summary)
}

/// Runs the oracle suite; writes `oracle_report.json` when `dir` is given.
/// Fails with [`OracleBreach`] naming every failing identity.
pub fn oracle_check(cfg: &SuiteConfig, dir: Option<&Path>, corrupt: Option<f64>) -> Result<SuiteReport> {
    let report = run_suite_with(cfg, corrupt)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            let mut m = RunManifest::new("oracle_check", String::new());
            let path = d.join("oracle_report.json");
            write(&path, &json)?;
            m.record(d, "oracle_report", &path);
            m.save(d)?;
        }
        None => print!("{json}"),
    }
    if !report.passed() {
        return Err(OracleBreach(report.failures().iter().map(|c| c.name.clone()).collect()).into());
    }
    Ok(report)
}

/// Draws terminal samples from a run into `samples.csv`.
pub fn sample(manifest_path: &Path, over: Overrides) -> Result<PathBuf> {
    let mut run = load_run(manifest_path)?;
    let cfg = match over.seed {
        Some(s) => run.config.clone().with_seed(s),
        None => run.config.clone(),
    };
    let n = over.n.unwrap_or(cfg.evaluation.n);
    let x = run.sampler.sample_terminal(n, cfg.seed_for(0x5a3e))?;
    let mut csv = (0..x.cols).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",") + "\n";
    for row in x.rows_iter() {
        csv.push_str(&row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        csv.push('\n');
    }
    let path = run.dir.join("samples.csv");
    write(&path, csv)?;
    run.manifest.record(&run.dir, "samples", &path);
    run.manifest.save(&run.dir)?;
    Ok(path)
}
