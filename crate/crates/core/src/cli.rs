//! Batch command-line driver: JSON config with flag overrides, and the
//! `simulate`, `fit` and `report` commands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bootstrap::{run_bootstrap, BootstrapDraws, MultiplierLaw, MIN_DRAWS};
use crate::data_model::{read_trajectories_csv, Dataset, DictionaryPlan, Stage};
use crate::error::{Error, Result};
use crate::inference::{stage_inference, NullTestOutcome, StageInference};
use crate::rng;
use crate::selection::SelectorConfig;
use crate::simulation::{
    run_replications, write_aggregated_csv, write_rep_csv, LearnerPlan, Metrics, PipelineSettings, ScenarioLabel,
    ScenarioSpec, StudyConfig,
};
use crate::stage_engine::{fit_two_stage, FitReport, TwoStageFit};
use crate::VERSION;

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "RQ_UPOSI_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Simulate,
    Fit,
    Report,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

fn default_reps() -> usize {
    100
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_b() -> usize {
    1000
}
fn default_folds() -> usize {
    5
}
fn default_alpha() -> f64 {
    0.05
}
fn default_caps() -> [usize; 2] {
    [6, 6]
}
fn default_true() -> bool {
    true
}
fn default_eps() -> f64 {
    crate::nuisance::DEFAULT_PROPENSITY_EPS
}
fn default_p1() -> usize {
    10
}
fn default_mc() -> usize {
    1_000_000
}

/// Run configuration; every field except `mode` and `seed` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<OneOrMany<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<OneOrMany<usize>>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    /// Trajectory CSV for `fit`; metrics JSON for `report`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_b")]
    pub bootstrap_draws: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub selector: SelectorConfig,
    #[serde(default = "default_caps")]
    pub caps: [usize; 2],
    #[serde(default)]
    pub hierarchy: bool,
    #[serde(default = "default_true")]
    pub force_intercept: bool,
    #[serde(default)]
    pub learners: LearnerPlan,
    #[serde(default)]
    pub multiplier: MultiplierLaw,
    #[serde(default = "default_eps")]
    pub propensity_eps: f64,
    #[serde(default = "default_p1")]
    pub p1: usize,
    #[serde(default = "default_mc")]
    pub mc_draws: usize,
    #[serde(default)]
    pub dictionary: DictionaryPlan,
}

fn field_error(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::config(format!("{field}: {msg}"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(field_error("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        if self.folds < 2 {
            return Err(field_error("folds", format!("must be at least 2, got {}", self.folds)));
        }
        if self.bootstrap_draws < MIN_DRAWS {
            return Err(field_error(
                "bootstrap_draws",
                format!("must be at least {MIN_DRAWS}, got {}", self.bootstrap_draws),
            ));
        }
        if !(self.propensity_eps > 0.0 && self.propensity_eps < 0.5) {
            return Err(field_error("propensity_eps", format!("must lie in (0, 0.5), got {}", self.propensity_eps)));
        }
        if self.caps.contains(&0) {
            return Err(field_error("caps", "must be positive"));
        }
        match self.mode {
            Mode::Simulate => {
                let scenarios = self.scenarios()?;
                if scenarios.is_empty() {
                    return Err(field_error("scenario", "required for simulate"));
                }
                let ns = self.sizes();
                if ns.is_empty() {
                    return Err(field_error("n", "required for simulate"));
                }
                if let Some(bad) = ns.iter().find(|&&n| n < self.folds.max(2)) {
                    return Err(field_error("n", format!("{bad} is smaller than the number of folds {}", self.folds)));
                }
                if self.reps == 0 {
                    return Err(field_error("reps", "must be at least 1"));
                }
                if self.p1 < 5 {
                    return Err(field_error("p1", format!("must be at least 5, got {}", self.p1)));
                }
                if self.mc_draws < crate::simulation::MIN_MC_DRAWS {
                    return Err(field_error(
                        "mc_draws",
                        format!("must be at least {}, got {}", crate::simulation::MIN_MC_DRAWS, self.mc_draws),
                    ));
                }
            }
            Mode::Fit => {
                if self.input.is_none() {
                    return Err(field_error("input", "trajectory CSV required for fit"));
                }
            }
            Mode::Report => {}
        }
        Ok(())
    }

    pub fn scenarios(&self) -> Result<Vec<ScenarioLabel>> {
        self.scenario
            .as_ref()
            .map_or(Ok(Vec::new()), |s| s.to_vec().iter().map(|l| ScenarioLabel::parse(l)).collect())
            .map_err(|e| field_error("scenario", e.root()))
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.n.as_ref().map_or(Vec::new(), OneOrMany::to_vec)
    }

    pub fn settings(&self) -> PipelineSettings {
        PipelineSettings {
            folds: self.folds,
            bootstrap_draws: self.bootstrap_draws,
            alpha: self.alpha,
            selector: self.selector.clone(),
            caps: self.caps,
            hierarchy: self.hierarchy,
            force_intercept: self.force_intercept,
            learners: self.learners,
            multiplier: self.multiplier,
            propensity_eps: self.propensity_eps,
            dictionary: self.dictionary,
        }
    }

    /// Canonical JSON rendering used for hashing and echoing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical config together with the library version.
    /// The output directory is left out so reruns elsewhere compare equal.
    pub fn hash(&self) -> String {
        let mut keyed = self.clone();
        keyed.output_dir = PathBuf::new();
        let mut h = Sha256::new();
        h.update(VERSION.as_bytes());
        h.update(b"\n");
        h.update(keyed.canonical_json().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Command-line flags. Every flag overrides the matching config-file key.
#[derive(Debug, Clone, Default, Parser)]
#[command(name = "rq-uposi", version, about = "Robust Q-learning with post-selection confidence intervals")]
pub struct Cli {
    /// JSON config file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scenario labels, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub scenario: Vec<String>,
    /// Sample sizes, comma separated.
    #[arg(short, long, value_delimiter = ',')]
    pub n: Vec<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(short, long)]
    pub input: Option<PathBuf>,
    #[arg(short, long)]
    pub output_dir: Option<PathBuf>,
    #[arg(short = 'B', long)]
    pub bootstrap_draws: Option<usize>,
    #[arg(short = 'K', long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub multiplier: Option<String>,
    #[arg(long)]
    pub p1: Option<usize>,
    #[arg(long)]
    pub mc_draws: Option<usize>,
    /// Arbitrary override `key=json`, e.g. `selector={"kind":"lasso-path","size":3}`.
    #[arg(long = "set", value_name = "KEY=JSON")]
    pub set: Vec<String>,
}

fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| Error::config(format!("--set expects KEY=JSON, got '{raw}'")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl Cli {
    fn overrides(&self) -> Result<Vec<(String, Value)>> {
        let mut out: Vec<(String, Value)> = Vec::new();
        let mut put = |k: &str, v: Value| out.push((k.to_string(), v));
        if let Some(m) = self.mode {
            put("mode", serde_json::to_value(m)?);
        }
        if let Some(s) = self.seed {
            put("seed", s.into());
        }
        if !self.scenario.is_empty() {
            put("scenario", serde_json::to_value(&self.scenario)?);
        }
        if !self.n.is_empty() {
            put("n", serde_json::to_value(&self.n)?);
        }
        if let Some(v) = self.reps {
            put("reps", v.into());
        }
        if let Some(v) = &self.input {
            put("input", serde_json::to_value(v)?);
        }
        if let Some(v) = &self.output_dir {
            put("output_dir", serde_json::to_value(v)?);
        }
        if let Some(v) = self.bootstrap_draws {
            put("bootstrap_draws", v.into());
        }
        if let Some(v) = self.folds {
            put("folds", v.into());
        }
        if let Some(v) = self.alpha {
            put("alpha", v.into());
        }
        if let Some(v) = &self.multiplier {
            put("multiplier", Value::String(v.clone()));
        }
        if let Some(v) = self.p1 {
            put("p1", v.into());
        }
        if let Some(v) = self.mc_draws {
            put("mc_draws", v.into());
        }
        for raw in &self.set {
            out.push(parse_override(raw)?);
        }
        Ok(out)
    }

    /// Merges file and flags (flags win), deserializes and validates.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut value = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| Error::config(format!("config {}: {e}", path.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::config("config must be a JSON object"))?;
        for (k, v) in self.overrides()? {
            obj.insert(k, v);
        }
        parse_config_value(value)
    }
}

pub fn parse_config_value(value: Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    parse_config_value(serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?)
}

/// Provenance stamped into every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            tool: "rq-uposi".into(),
            version: VERSION.into(),
            config_hash: cfg.hash(),
        }
    }

    fn csv_header(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "# {} {} config {}", self.tool, self.version, self.config_hash)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    provenance: Provenance,
    #[serde(flatten)]
    body: T,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| Error::config(format!("cannot create {}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, prov: &Provenance, body: T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(
        &mut w,
        &Stamped {
            provenance: prov.clone(),
            body,
        },
    )?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_csv_with(dir: &Path, name: &str, prov: &Provenance, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(dir, name)?;
    prov.csv_header(&mut w)?;
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ConfigBody {
    config: RunConfig,
}

#[derive(Serialize, Deserialize)]
pub struct MetricsBody {
    pub metrics: Vec<Metrics>,
}

/// Dispatches on `mode`; returns the list of files written.
pub fn run(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::config(format!("cannot create {}: {e}", cfg.output_dir.display())))?;
    let prov = Provenance::new(cfg);
    log::info!("config hash {}", prov.config_hash);
    write_json(&cfg.output_dir, "config.json", &prov, ConfigBody { config: cfg.clone() })?;
    let mut files = vec![cfg.output_dir.join("config.json")];
    files.extend(match cfg.mode {
        Mode::Simulate => cmd_simulate(cfg, &prov)?,
        Mode::Fit => cmd_fit(cfg, &prov)?,
        Mode::Report => cmd_report(cfg, &prov)?,
    });
    Ok(files)
}

pub fn cmd_simulate(cfg: &RunConfig, prov: &Provenance) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    let mut files = Vec::new();
    let mut all = Vec::new();
    for label in cfg.scenarios()? {
        for n in cfg.sizes() {
            let study = StudyConfig {
                spec: ScenarioSpec::new(label, cfg.p1, n)?,
                reps: cfg.reps,
                seed: cfg.seed,
                mc_draws: cfg.mc_draws,
                settings: cfg.settings(),
            };
            log::info!("scenario {label} n={n}: {} replications", cfg.reps);
            let (metrics, records) = run_replications(&study)?;
            let name = format!("reps_{label}_n{n}.csv");
            write_csv_with(dir, &name, prov, |w| write_rep_csv(w, &records))?;
            files.push(dir.join(name));
            all.push(metrics);
        }
    }
    write_json(dir, "metrics.json", prov, MetricsBody { metrics: all.clone() })?;
    write_csv_with(dir, "aggregated.csv", prov, |w| write_aggregated_csv(w, &all))?;
    print_table(&all);
    files.push(dir.join("metrics.json"));
    files.push(dir.join("aggregated.csv"));
    Ok(files)
}

/// Reads a trajectory CSV and builds the dataset with the configured dictionaries.
pub fn load_dataset(path: &Path, plan: &DictionaryPlan) -> Result<Dataset> {
    let trajectories = read_trajectories_csv(path)?;
    let first = trajectories.first().ok_or_else(|| Error::config("input CSV has no rows"))?;
    let (d1, d2) = plan.build(first.x1.len(), first.x2.len())?;
    Dataset::new(trajectories, d1, d2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOutput {
    pub fit: FitReport,
    pub inference: Vec<InferenceSummary>,
    pub rejected_draws: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceSummary {
    pub stage: Stage,
    pub combined_radius: f64,
    pub conditional_radius: f64,
    pub null_test: NullTestOutcome,
}

pub type FitArtifacts = (TwoStageFit, BootstrapDraws, [StageInference; 2]);

/// Fits the pipeline, runs the bootstrap and builds both stages' intervals.
pub fn fit_and_infer(settings: &PipelineSettings, seed: u64, dataset: &Dataset) -> Result<FitArtifacts> {
    if settings.folds > dataset.n() {
        return Err(field_error("folds", format!("K = {} exceeds n = {}", settings.folds, dataset.n())));
    }
    let fit = fit_two_stage(dataset, &settings.fit_config(seed, None)?)?;
    let draws = run_bootstrap(
        &fit,
        dataset,
        settings.bootstrap_draws,
        settings.multiplier,
        rng::derive_seed(seed, rng::DOMAIN_BOOTSTRAP, 0),
    )?;
    let inf = [
        stage_inference(&fit.stage1, &draws, settings.alpha)?,
        stage_inference(&fit.stage2, &draws, settings.alpha)?,
    ];
    Ok((fit, draws, inf))
}

/// What `fit` mode computes for a loaded dataset.
pub fn fit_dataset(cfg: &RunConfig, dataset: &Dataset) -> Result<FitArtifacts> {
    fit_and_infer(&cfg.settings(), cfg.seed, dataset)
}

pub fn cmd_fit(cfg: &RunConfig, prov: &Provenance) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    let input = cfg.input.as_ref().expect("validated");
    let dataset = load_dataset(input, &cfg.dictionary)?;
    let (fit, draws, inf) = fit_dataset(cfg, &dataset)?;
    let out = FitOutput {
        fit: fit.report(&dataset),
        inference: inf
            .iter()
            .map(|s| InferenceSummary {
                stage: s.stage,
                combined_radius: s.combined_radius,
                conditional_radius: s.conditional_radius,
                null_test: s.null_test,
            })
            .collect(),
        rejected_draws: draws.rejected,
    };
    write_json(dir, "fit.json", prov, &out)?;
    write_csv_with(dir, "intervals.csv", prov, |w| {
        writeln!(w, "stage,flavor,coordinate,term,center,lower,upper,half_length,null_test_reject")?;
        for s in &inf {
            let sf = fit.stage(s.stage);
            let dict = dataset.dictionary(s.stage);
            let reject = u8::from(s.null_test == NullTestOutcome::Reject);
            for set in s.intervals() {
                for (j, &idx) in sf.model.indices().iter().enumerate() {
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{},{},{}",
                        s.stage,
                        set.flavor,
                        idx + 1,
                        dict.terms()[idx],
                        set.centers[j],
                        set.lower(j),
                        set.upper(j),
                        set.half_lengths[j],
                        reject
                    )?;
                }
            }
        }
        Ok(())
    })?;
    write_csv_with(dir, "bootstrap.csv", prov, |w| draws.write_csv(w))?;
    for s in &inf {
        println!(
            "stage {}: model {} null test {:?} (combined radius {:.4e}, conditional radius {:.4e})",
            s.stage,
            fit.stage(s.stage).model,
            s.null_test,
            s.combined_radius,
            s.conditional_radius
        );
    }
    Ok(["fit.json", "intervals.csv", "bootstrap.csv"].iter().map(|f| dir.join(f)).collect())
}

/// Re-aggregates a metrics file into `aggregated.csv` and prints a summary.
pub fn cmd_report(cfg: &RunConfig, prov: &Provenance) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    let src = cfg.input.clone().unwrap_or_else(|| dir.join("metrics.json"));
    let text = fs::read_to_string(&src).map_err(|e| Error::config(format!("cannot read {}: {e}", src.display())))?;
    let stamped: Stamped<MetricsBody> =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", src.display())))?;
    let metrics = stamped.body.metrics;
    write_csv_with(dir, "aggregated.csv", prov, |w| write_aggregated_csv(w, &metrics))?;
    print_table(&metrics);
    Ok(vec![dir.join("aggregated.csv")])
}

fn print_table(metrics: &[Metrics]) {
    println!("{:<9}{:>7}  {:<24}{:>6}{:>9}{:>12}{:>9}", "scenario", "n", "method", "stage", "fcr", "median_len", "reject");
    for m in metrics {
        for s in &m.stages {
            for f in &s.flavors {
                let fcr = f.fcr.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "{:<9}{:>7}  {:<24}{:>6}{:>9}{:>12.4}{:>9.3}",
                    m.scenario.to_string(),
                    m.n,
                    f.flavor.as_str(),
                    s.stage.to_string(),
                    fcr,
                    f.median_length,
                    s.rejection_rate
                );
            }
        }
    }
}

/// Installs a global worker pool capped by [`THREADS_ENV`] when set.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(Error::config(format!("{THREADS_ENV} must be positive")));
        }
        // A pool may already exist when embedded; keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Entry point shared by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = configure_threads().and_then(|_| cli.resolve()).and_then(|cfg| {
        eprintln!("{}", cfg.canonical_json());
        run(&cfg)
    });
    match result {
        Ok(files) => {
            for f in files {
                log::info!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            e.exit_code()
        }
    }
}
