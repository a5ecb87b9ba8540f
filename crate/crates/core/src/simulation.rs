//! Benchmark scenarios A-F, Monte-Carlo population targets, design-conditional
//! targets, and replication studies scoring false coverage rates.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{run_bootstrap, MultiplierLaw};
use crate::data_model::{subset_matrix, subset_vector, Dataset, DictionaryPlan, FeatureDictionary, ModelSet, Stage, Trajectory};
use crate::error::{Error, Result};
use crate::inference::{stage_inference, IntervalFlavor, NullTestOutcome, StageInference};
use crate::linalg;
use crate::nuisance::{LearnerConfig, OracleFn};
use crate::rng;
use crate::selection::SelectorConfig;
use crate::stage_engine::{fit_two_stage, gram_hessian, FitConfig, GramFlavor, GramPair, NuisanceLearners, StageFit, TwoStageFit};

const BETA: [f64; 5] = [2.0, 2.0, 1.0, 0.1, 0.1];
const MC_CHUNK: usize = 65_536;
pub const MIN_MC_DRAWS: usize = 100_000;

fn check_dim(x: &[f64]) -> Result<()> {
    if x.len() < 5 {
        return Err(Error::config(format!("scenario functions need at least 5 coordinates, got {}", x.len())));
    }
    Ok(())
}

fn lin(x: &[f64]) -> f64 {
    x[..5].iter().zip(BETA).map(|(a, b)| a * b).sum()
}

fn quad(x: &[f64]) -> f64 {
    let q: f64 = x[..5].iter().zip(BETA).map(|(a, b)| b * a * a).sum();
    0.5 * (q + lin(x) - 2.0)
}

fn nonlin(x: &[f64]) -> f64 {
    0.5 * (PI * x[0] * x[1]).sin() + 2.0 * (x[2] - 0.5).powi(2) - 1.0
}

/// `xᵀβ` with `β = (2, 2, 1, .1, .1)` on the first five coordinates.
pub fn f_l(x: &[f64]) -> Result<f64> {
    check_dim(x)?;
    Ok(lin(x))
}

/// `0.5 (xᵀ diag(β) x + xᵀβ − 2)`.
pub fn f_q(x: &[f64]) -> Result<f64> {
    check_dim(x)?;
    Ok(quad(x))
}

/// `0.5 sin(π x1 x2) + 2 (x3 − 0.5)² − 1`.
pub fn f_n(x: &[f64]) -> Result<f64> {
    check_dim(x)?;
    Ok(nonlin(x))
}

pub fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionTag {
    #[serde(rename = "f_l")]
    Linear,
    #[serde(rename = "f_q")]
    Quadratic,
    #[serde(rename = "f_n")]
    Nonlinear,
    Zero,
    One,
}

impl FunctionTag {
    /// Evaluates the tagged function; callers guarantee at least five
    /// coordinates (checked when the scenario is built).
    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            FunctionTag::Linear => lin(x),
            FunctionTag::Quadratic => quad(x),
            FunctionTag::Nonlinear => nonlin(x),
            FunctionTag::Zero => 0.0,
            FunctionTag::One => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioLabel {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl ScenarioLabel {
    pub const ALL: [ScenarioLabel; 6] = [
        ScenarioLabel::A,
        ScenarioLabel::B,
        ScenarioLabel::C,
        ScenarioLabel::D,
        ScenarioLabel::E,
        ScenarioLabel::F,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(ScenarioLabel::A),
            "B" | "b" => Ok(ScenarioLabel::B),
            "C" | "c" => Ok(ScenarioLabel::C),
            "D" | "d" => Ok(ScenarioLabel::D),
            "E" | "e" => Ok(ScenarioLabel::E),
            "F" | "f" => Ok(ScenarioLabel::F),
            other => Err(Error::config(format!("scenario must be one of A-F, got '{other}'"))),
        }
    }
}

impl std::fmt::Display for ScenarioLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// One row of the scenario table plus covariate dimension and sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub label: ScenarioLabel,
    pub eta1: FunctionTag,
    pub delta1: FunctionTag,
    pub eta2: FunctionTag,
    pub delta2: FunctionTag,
    pub psi_a: FunctionTag,
    pub gamma: f64,
    pub p1: usize,
    pub n: usize,
}

impl ScenarioSpec {
    pub fn new(label: ScenarioLabel, p1: usize, n: usize) -> Result<Self> {
        use FunctionTag::*;
        let (eta1, delta1, eta2, delta2, psi_a, gamma) = match label {
            ScenarioLabel::A => (Quadratic, Linear, Zero, One, Linear, 0.0),
            ScenarioLabel::B => (Quadratic, Linear, Zero, One, Nonlinear, 0.0),
            ScenarioLabel::C => (Zero, Linear, Zero, One, Zero, 0.0),
            ScenarioLabel::D => (Linear, Linear, Quadratic, Linear, Linear, 1.0),
            ScenarioLabel::E => (Linear, Linear, Quadratic, Linear, Nonlinear, 1.0),
            ScenarioLabel::F => (Zero, Zero, Zero, Zero, One, 1.0),
        };
        let spec = Self {
            label,
            eta1,
            delta1,
            eta2,
            delta2,
            psi_a,
            gamma,
            p1,
            n,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p1 < 5 {
            return Err(Error::config(format!("p1 must be at least 5, got {}", self.p1)));
        }
        if self.n < 2 {
            return Err(Error::config("n must be at least 2"));
        }
        Ok(())
    }

    /// Stage-1 targets are known only where the stage-2 blip is constant and
    /// `X2` does not depend on `A1`.
    pub fn stage1_supported(&self) -> bool {
        matches!(self.label, ScenarioLabel::A | ScenarioLabel::B | ScenarioLabel::C)
    }

    pub fn truth(&self) -> TrueFunctions {
        TrueFunctions { spec: *self }
    }
}

/// Known conditional means and blips of a scenario.
#[derive(Debug, Clone, Copy)]
pub struct TrueFunctions {
    spec: ScenarioSpec,
}

impl TrueFunctions {
    pub fn mu_a(&self, x: &[f64]) -> f64 {
        expit(self.spec.psi_a.eval(x))
    }

    pub fn delta2(&self, x2: &[f64]) -> f64 {
        self.spec.delta2.eval(x2)
    }

    pub fn delta1(&self, x1: &[f64]) -> Result<f64> {
        if !self.spec.stage1_supported() {
            return Err(self.unsupported());
        }
        Ok(self.spec.delta1.eval(x1))
    }

    fn unsupported(&self) -> Error {
        Error::UnsupportedScenario(format!(
            "stage-1 targets are only available for scenarios A-C, not {}",
            self.spec.label
        ))
    }

    /// `E[Y | X1, A1, X2]` on the stage-2 history layout `(X1, A1, X2)`.
    pub fn mu_y2(&self, h2: &[f64]) -> f64 {
        let p1 = self.spec.p1;
        let (x1, a1, x2) = (&h2[..p1], h2[p1], &h2[p1 + 1..]);
        let s = &self.spec;
        s.eta1.eval(x1) + a1 * s.delta1.eval(x1) + s.eta2.eval(x2) + self.mu_a(x2) * s.delta2.eval(x2)
    }

    pub fn oracle_propensity1(&self) -> OracleFn {
        let t = *self;
        OracleFn::new(move |x1| t.mu_a(x1))
    }

    pub fn oracle_propensity2(&self) -> OracleFn {
        let t = *self;
        OracleFn::new(move |h2| t.mu_a(&h2[t.spec.p1 + 1..]))
    }

    pub fn oracle_outcome2(&self) -> OracleFn {
        let t = *self;
        OracleFn::new(move |h2| t.mu_y2(h2))
    }
}

/// Draws `n` trajectories from a scenario.
pub fn generate_trajectories(spec: &ScenarioSpec, seed: u64) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    let truth = spec.truth();
    let mut r = rng::stream(seed, rng::DOMAIN_DATA, 0);
    let p1 = spec.p1;
    let out = (0..spec.n)
        .map(|_| {
            let x1: Vec<f64> = (0..p1).map(|_| r.random_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..p1).map(|_| r.random_range(-1.0..1.0)).collect();
            let a1 = r.random::<f64>() < truth.mu_a(&x1);
            let shift = if a1 { spec.gamma } else { 0.0 };
            let x2: Vec<f64> = x1.iter().zip(&u).map(|(a, b)| a + shift + b).collect();
            let a2 = r.random::<f64>() < truth.mu_a(&x2);
            let eps: f64 = StandardNormal.sample(&mut r);
            let y = spec.eta1.eval(&x1)
                + if a1 { spec.delta1.eval(&x1) } else { 0.0 }
                + spec.eta2.eval(&x2)
                + if a2 { spec.delta2.eval(&x2) } else { 0.0 }
                + eps;
            Trajectory { x1, a1, x2, a2, y }
        })
        .collect();
    Ok(out)
}

pub fn generate_scenario(spec: &ScenarioSpec, plan: &DictionaryPlan, seed: u64) -> Result<Dataset> {
    let trajectories = generate_trajectories(spec, seed)?;
    let (d1, d2) = plan.build(spec.p1, spec.p1)?;
    Dataset::new(trajectories, d1, d2)
}

/// Full-dimension population gram summaries computed by Monte Carlo with the
/// true propensities, using `E[(A − μ)² | X] = μ(1 − μ)`.
#[derive(Debug, Clone)]
pub struct PopulationOracle {
    pub spec: ScenarioSpec,
    pub mc_n: usize,
    pub seed: u64,
    dict1: FeatureDictionary,
    dict2: FeatureDictionary,
    stage2: GramPair,
    stage1: Option<GramPair>,
}

struct McDraw {
    w1: Vec<f64>,
    w2: Vec<f64>,
    weight1: f64,
    weight2: f64,
    delta1: f64,
    delta2: f64,
}

fn mc_chunk_draws(spec: &ScenarioSpec, d1: &FeatureDictionary, d2: &FeatureDictionary, seed: u64, chunk: usize, len: usize, mut f: impl FnMut(&McDraw)) {
    let truth = spec.truth();
    let mut r = rng::stream(seed, rng::DOMAIN_MONTE_CARLO, chunk as u64);
    let p1 = spec.p1;
    let mut h2 = vec![0.0; 2 * p1 + 1];
    let mut d = McDraw {
        w1: vec![0.0; d1.p()],
        w2: vec![0.0; d2.p()],
        weight1: 0.0,
        weight2: 0.0,
        delta1: 0.0,
        delta2: 0.0,
    };
    for _ in 0..len {
        for v in h2[..p1].iter_mut() {
            *v = r.random_range(-1.0..1.0);
        }
        let mu1 = truth.mu_a(&h2[..p1]);
        let a1 = r.random::<f64>() < mu1;
        h2[p1] = if a1 { 1.0 } else { 0.0 };
        let shift = if a1 { spec.gamma } else { 0.0 };
        for j in 0..p1 {
            let u: f64 = r.random_range(-1.0..1.0);
            h2[p1 + 1 + j] = h2[j] + shift + u;
        }
        let x2 = &h2[p1 + 1..];
        let mu2 = truth.mu_a(x2);
        d.weight1 = mu1 * (1.0 - mu1);
        d.weight2 = mu2 * (1.0 - mu2);
        d.delta1 = spec.delta1.eval(&h2[..p1]);
        d.delta2 = spec.delta2.eval(x2);
        d1.evaluate_into(&h2[..p1], &mut d.w1);
        d2.evaluate_into(&h2, &mut d.w2);
        f(&d);
    }
}

fn chunks(mc_n: usize) -> Vec<(usize, usize)> {
    (0..mc_n.div_ceil(MC_CHUNK))
        .map(|c| (c, MC_CHUNK.min(mc_n - c * MC_CHUNK)))
        .collect()
}

fn accumulate(g: &mut [f64], h: &mut [f64], w: &[f64], weight: f64, delta: f64) {
    let p = w.len();
    for j in 0..p {
        g[j] += weight * delta * w[j];
        let wj = weight * w[j];
        for k in 0..=j {
            h[j * p + k] += wj * w[k];
        }
    }
}

fn finish(g: Vec<f64>, h: Vec<f64>, mc_n: usize, stage: Stage) -> GramPair {
    let p = g.len();
    let inv = 1.0 / mc_n as f64;
    GramPair {
        g: DVector::from_iterator(p, g.into_iter().map(|v| v * inv)),
        h: DMatrix::from_fn(p, p, |j, k| h[j.max(k) * p + j.min(k)] * inv),
        stage,
        flavor: GramFlavor::PopulationMc,
    }
}

type CacheKey = (ScenarioLabel, usize, usize, u64, String);

fn oracle_cache() -> &'static Mutex<HashMap<CacheKey, Arc<PopulationOracle>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<PopulationOracle>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

impl PopulationOracle {
    pub fn compute(spec: &ScenarioSpec, dict1: &FeatureDictionary, dict2: &FeatureDictionary, mc_n: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if mc_n < MIN_MC_DRAWS {
            return Err(Error::config(format!("mc_draws must be at least {MIN_MC_DRAWS}, got {mc_n}")));
        }
        let (p1, p2) = (dict1.p(), dict2.p());
        let stage1 = spec.stage1_supported();
        let partials: Vec<[Vec<f64>; 4]> = chunks(mc_n)
            .into_par_iter()
            .map(|(c, len)| {
                let mut acc = [vec![0.0; p2], vec![0.0; p2 * p2], vec![0.0; p1], vec![0.0; p1 * p1]];
                mc_chunk_draws(spec, dict1, dict2, seed, c, len, |d| {
                    let [g2, h2, g1, h1] = &mut acc;
                    accumulate(g2, h2, &d.w2, d.weight2, d.delta2);
                    if stage1 {
                        accumulate(g1, h1, &d.w1, d.weight1, d.delta1);
                    }
                });
                acc
            })
            .collect();
        let mut total = [vec![0.0; p2], vec![0.0; p2 * p2], vec![0.0; p1], vec![0.0; p1 * p1]];
        for part in partials {
            for (t, v) in total.iter_mut().zip(part) {
                for (a, b) in t.iter_mut().zip(v) {
                    *a += b;
                }
            }
        }
        let [g2, h2, g1, h1] = total;
        Ok(Self {
            spec: *spec,
            mc_n,
            seed,
            dict1: dict1.clone(),
            dict2: dict2.clone(),
            stage2: finish(g2, h2, mc_n, Stage::Two),
            stage1: stage1.then(|| finish(g1, h1, mc_n, Stage::One)),
        })
    }

    /// Shared instance per (scenario, p1, mc_n, seed, dictionaries).
    pub fn cached(spec: &ScenarioSpec, dict1: &FeatureDictionary, dict2: &FeatureDictionary, mc_n: usize, seed: u64) -> Result<Arc<Self>> {
        let dicts = serde_json::to_string(&(dict1, dict2))?;
        let key = (spec.label, spec.p1, mc_n, seed, dicts);
        if let Some(o) = oracle_cache().lock().expect("oracle cache poisoned").get(&key) {
            return Ok(o.clone());
        }
        let mut base = *spec;
        base.n = base.n.max(2);
        let o = Arc::new(Self::compute(&base, dict1, dict2, mc_n, seed)?);
        oracle_cache().lock().expect("oracle cache poisoned").insert(key, o.clone());
        Ok(o)
    }

    pub fn gram(&self, stage: Stage) -> Result<&GramPair> {
        match stage {
            Stage::Two => Ok(&self.stage2),
            Stage::One => self.stage1.as_ref().ok_or_else(|| self.spec.truth().unsupported()),
        }
    }

    pub fn target(&self, stage: Stage, m: &ModelSet) -> Result<DVector<f64>> {
        let (g, h) = self.gram(stage)?.subset(m)?;
        linalg::solve_spd(&h, &g, m)
    }

    /// Target plus a per-coordinate Monte-Carlo standard error from the
    /// delta-method influence `H(m)⁻¹ (g_i − h_i θ)`.
    pub fn target_with_se(&self, stage: Stage, m: &ModelSet) -> Result<(DVector<f64>, DVector<f64>)> {
        let theta = self.target(stage, m)?;
        let (_, h) = self.gram(stage)?.subset(m)?;
        let h_inv = linalg::inverse_spd(&h, m)?;
        let k = m.len();
        let idx = m.indices().to_vec();
        let sums: Vec<(Vec<f64>, Vec<f64>)> = chunks(self.mc_n)
            .into_par_iter()
            .map(|(c, len)| {
                let mut s1 = vec![0.0; k];
                let mut s2 = vec![0.0; k];
                let mut wm = DVector::zeros(k);
                mc_chunk_draws(&self.spec, &self.dict1, &self.dict2, self.seed, c, len, |d| {
                    let (w, weight, delta) = match stage {
                        Stage::One => (&d.w1, d.weight1, d.delta1),
                        Stage::Two => (&d.w2, d.weight2, d.delta2),
                    };
                    for (a, &j) in idx.iter().enumerate() {
                        wm[a] = w[j];
                    }
                    let resid = weight * (delta - wm.dot(&theta));
                    let psi = &h_inv * (&wm * resid);
                    for a in 0..k {
                        s1[a] += psi[a];
                        s2[a] += psi[a] * psi[a];
                    }
                });
                (s1, s2)
            })
            .collect();
        let mut s1 = vec![0.0; k];
        let mut s2 = vec![0.0; k];
        for (a, b) in sums {
            for j in 0..k {
                s1[j] += a[j];
                s2[j] += b[j];
            }
        }
        let n = self.mc_n as f64;
        let se = DVector::from_fn(k, |j, _| {
            let mean = s1[j] / n;
            ((s2[j] / n - mean * mean).max(0.0) / n).sqrt()
        });
        Ok((theta, se))
    }
}

/// Population target with its Monte-Carlo standard error.
pub fn true_population_target(
    spec: &ScenarioSpec,
    plan: &DictionaryPlan,
    m: &ModelSet,
    stage: Stage,
    mc_n: usize,
    seed: u64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if stage == Stage::One && !spec.stage1_supported() {
        return Err(spec.truth().unsupported());
    }
    let (d1, d2) = plan.build(spec.p1, spec.p1)?;
    PopulationOracle::cached(spec, &d1, &d2, mc_n, seed)?.target_with_se(stage, m)
}

/// Gram summaries for the design-conditional target: `(A − μ0)²` weights with
/// oracle propensities and the true blip in place of the outcome.
pub fn conditional_gram(dataset: &Dataset, spec: &ScenarioSpec, stage: Stage) -> Result<GramPair> {
    let truth = spec.truth();
    let trajs = dataset.trajectories();
    let (mu0, delta): (Vec<f64>, Vec<f64>) = match stage {
        Stage::Two => trajs.iter().map(|t| (truth.mu_a(&t.x2), truth.delta2(&t.x2))).unzip(),
        Stage::One => {
            let mut mu = Vec::with_capacity(trajs.len());
            let mut de = Vec::with_capacity(trajs.len());
            for t in trajs {
                mu.push(truth.mu_a(&t.x1));
                de.push(truth.delta1(&t.x1)?);
            }
            (mu, de)
        }
    };
    let a = dataset.treatments(stage);
    let basis = dataset.basis(stage);
    let n = dataset.n();
    let mut g = DVector::zeros(basis.ncols());
    for i in 0..n {
        let w = (a[i] - mu0[i]).powi(2) * delta[i];
        for j in 0..basis.ncols() {
            g[j] += w * basis[(i, j)];
        }
    }
    Ok(GramPair {
        g: g / n as f64,
        h: gram_hessian(basis, &a, &mu0, None)?,
        stage,
        flavor: GramFlavor::Conditional,
    })
}

pub fn conditional_target(dataset: &Dataset, spec: &ScenarioSpec, m: &ModelSet, stage: Stage) -> Result<DVector<f64>> {
    let gram = conditional_gram(dataset, spec, stage)?;
    let (g, h) = gram.subset(m)?;
    linalg::solve_spd(&h, &g, m)
}

/// `(‖Ĝ − G0‖∞, ‖Ĥ − H0‖∞)` over the full dictionary.
pub fn observed_d_statistics(fit: &StageFit, oracle: &GramPair) -> (f64, f64) {
    (
        linalg::max_abs_diff_vec(&fit.gram.g, &oracle.g),
        linalg::max_abs_diff_mat(&fit.gram.h, &oracle.h),
    )
}

/// Both sides of `‖Ĥ(M)(θ̂ − θ*)‖∞ ≤ D^G + D^H ‖θ*‖₁` for the selected model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub theta_star_l1: f64,
}

impl InequalityCheck {
    pub fn holds(&self, rel_slack: f64) -> bool {
        self.lhs <= self.rhs + rel_slack * (1.0 + self.theta_star_l1)
    }
}

pub fn deterministic_inequality(fit: &StageFit, oracle: &GramPair, theta_star: &DVector<f64>) -> InequalityCheck {
    let (dg, dh) = observed_d_statistics(fit, oracle);
    let h = subset_matrix(&fit.gram.h, &fit.model).expect("model checked at construction");
    let l1 = linalg::l1_norm(theta_star);
    InequalityCheck {
        lhs: linalg::max_abs((h * (&fit.theta - theta_star)).iter().copied()),
        rhs: dg + dh * l1,
        theta_star_l1: l1,
    }
}

/// Learner choices for the four nuisances.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerPlan {
    pub propensity1: LearnerConfig,
    pub propensity2: LearnerConfig,
    pub outcome2: LearnerConfig,
    pub outcome1: LearnerConfig,
}

impl LearnerPlan {
    /// Resolves learner choices, wiring oracle learners to the scenario's
    /// known functions. The stage-1 outcome mean has no closed form.
    pub fn resolve(&self, truth: Option<&TrueFunctions>) -> Result<NuisanceLearners> {
        Ok(NuisanceLearners {
            propensity1: self.propensity1.resolve(truth.map(|t| t.oracle_propensity1()), "propensity1")?,
            propensity2: self.propensity2.resolve(truth.map(|t| t.oracle_propensity2()), "propensity2")?,
            outcome2: self.outcome2.resolve(truth.map(|t| t.oracle_outcome2()), "outcome2")?,
            outcome1: self.outcome1.resolve(None, "outcome1")?,
        })
    }
}

/// Settings shared by fitting and simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub folds: usize,
    pub bootstrap_draws: usize,
    pub alpha: f64,
    pub selector: SelectorConfig,
    pub caps: [usize; 2],
    pub hierarchy: bool,
    pub force_intercept: bool,
    pub learners: LearnerPlan,
    pub multiplier: MultiplierLaw,
    pub propensity_eps: f64,
    pub dictionary: DictionaryPlan,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            folds: 5,
            bootstrap_draws: 1000,
            alpha: 0.05,
            selector: SelectorConfig::default(),
            caps: [6, 6],
            hierarchy: false,
            force_intercept: true,
            learners: LearnerPlan::default(),
            multiplier: MultiplierLaw::Exponential,
            propensity_eps: crate::nuisance::DEFAULT_PROPENSITY_EPS,
            dictionary: DictionaryPlan::default(),
        }
    }
}

impl PipelineSettings {
    pub fn fit_config(&self, seed: u64, truth: Option<&TrueFunctions>) -> Result<FitConfig> {
        Ok(FitConfig {
            folds: self.folds,
            seed,
            fold_partition: None,
            learners: self.learners.resolve(truth)?,
            selector1: self.selector.resolve(Stage::One, self.caps[0], self.hierarchy, self.force_intercept)?,
            selector2: self.selector.resolve(Stage::Two, self.caps[1], self.hierarchy, self.force_intercept)?,
            propensity_eps: self.propensity_eps,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub spec: ScenarioSpec,
    pub reps: usize,
    pub seed: u64,
    pub mc_draws: usize,
    pub settings: PipelineSettings,
}

impl StudyConfig {
    pub fn oracle_seed(&self) -> u64 {
        rng::derive_seed(self.seed, rng::DOMAIN_MONTE_CARLO, 0)
    }

    pub fn rep_seed(&self, rep: usize) -> u64 {
        rng::derive_seed(self.seed, rng::DOMAIN_REPLICATION, rep as u64)
    }
}

/// One flavor's intervals in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub flavor: IntervalFlavor,
    pub centers: Vec<f64>,
    pub half_lengths: Vec<f64>,
    /// Coverage of the matching target; absent when no target is known.
    pub covered: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub model: ModelSet,
    pub combined_radius: f64,
    pub conditional_radius: f64,
    pub null_rejected: bool,
    /// Normal-equation residual relative to `1 + ‖g(M)‖∞`.
    pub relative_residual: f64,
    /// Per coordinate, off-diagonal ℓ1 mass of the row of `h(M)⁻¹`.
    pub offdiag_mass: Vec<f64>,
    pub population_target: Option<Vec<f64>>,
    pub conditional_target: Option<Vec<f64>>,
    pub inequality: Option<InequalityCheck>,
    pub intervals: Vec<IntervalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub rejected_draws: usize,
}

/// Everything a single replication produces, before reduction to records.
pub struct RepArtifacts {
    pub dataset: Dataset,
    pub fit: TwoStageFit,
    pub inference: [StageInference; 2],
    pub record: RepRecord,
}

fn score(target: Option<&DVector<f64>>, set: &crate::inference::IntervalSet) -> Option<Vec<bool>> {
    target.map(|t| set.covers(t))
}

/// Runs replication `rep` of a study.
pub fn run_one_replication(cfg: &StudyConfig, oracle: &PopulationOracle, rep: usize) -> Result<RepArtifacts> {
    let seed = cfg.rep_seed(rep);
    let wrap = |e: Error| Error::Replication {
        rep,
        seed,
        source: Box::new(e),
    };
    (|| {
        let spec = &cfg.spec;
        let truth = spec.truth();
        let dataset = generate_scenario(spec, &cfg.settings.dictionary, rng::derive_seed(seed, rng::DOMAIN_DATA, 0))?;
        let fit = fit_two_stage(&dataset, &cfg.settings.fit_config(seed, Some(&truth))?)?;
        let draws = run_bootstrap(
            &fit,
            &dataset,
            cfg.settings.bootstrap_draws,
            cfg.settings.multiplier,
            rng::derive_seed(seed, rng::DOMAIN_BOOTSTRAP, 0),
        )?;
        let inf1 = stage_inference(&fit.stage1, &draws, cfg.settings.alpha)?;
        let inf2 = stage_inference(&fit.stage2, &draws, cfg.settings.alpha)?;
        let mut stages = Vec::with_capacity(2);
        for (sf, inf) in [(&fit.stage1, &inf1), (&fit.stage2, &inf2)] {
            let stage = sf.stage();
            let scored = stage == Stage::Two || spec.stage1_supported();
            let (pop, cond, ineq) = if scored {
                let pop = oracle.target(stage, &sf.model)?;
                let cond = conditional_target(&dataset, spec, &sf.model, stage)?;
                let ineq = deterministic_inequality(sf, oracle.gram(stage)?, &pop);
                (Some(pop), Some(cond), Some(ineq))
            } else {
                (None, None, None)
            };
            let intervals = inf
                .intervals()
                .iter()
                .map(|set| {
                    let target = match set.flavor {
                        IntervalFlavor::UposiHyperrect | IntervalFlavor::UposiCoord => pop.as_ref(),
                        IntervalFlavor::UposiCoordConditional | IntervalFlavor::Naive => cond.as_ref(),
                    };
                    IntervalRecord {
                        flavor: set.flavor,
                        centers: set.centers.iter().copied().collect(),
                        half_lengths: set.half_lengths.iter().copied().collect(),
                        covered: score(target, set),
                    }
                })
                .collect();
            stages.push(StageRecord {
                stage,
                model: sf.model.clone(),
                combined_radius: inf.combined_radius,
                conditional_radius: inf.conditional_radius,
                null_rejected: inf.null_test == NullTestOutcome::Reject,
                relative_residual: sf.residual / (1.0 + linalg::max_abs(sf.g_sub().iter().copied())),
                offdiag_mass: (0..sf.h_inv.nrows())
                    .map(|j| (0..sf.h_inv.ncols()).filter(|&k| k != j).map(|k| sf.h_inv[(j, k)].abs()).sum())
                    .collect(),
                population_target: pop.map(|v| v.iter().copied().collect()),
                conditional_target: cond.map(|v| v.iter().copied().collect()),
                inequality: ineq,
                intervals,
            });
        }
        let record = RepRecord {
            rep,
            seed,
            stages,
            rejected_draws: draws.rejected,
        };
        Ok(RepArtifacts {
            dataset,
            fit,
            inference: [inf1, inf2],
            record,
        })
    })()
    .map_err(wrap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlavorMetrics {
    pub flavor: IntervalFlavor,
    /// Mean over replications of the fraction of non-covering intervals.
    pub fcr: Option<f64>,
    /// Median full interval width `2 × half_length`.
    pub median_length: f64,
    pub intervals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: Stage,
    pub scored: bool,
    pub flavors: Vec<FlavorMetrics>,
    pub rejection_rate: f64,
    pub max_inequality_excess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub scenario: ScenarioLabel,
    pub n: usize,
    pub reps: usize,
    pub alpha: f64,
    pub bootstrap_draws: usize,
    pub stages: Vec<StageMetrics>,
    /// FCR pooling both stages' intervals within each replication.
    pub pooled: Vec<FlavorMetrics>,
    pub rejected_draws: usize,
}

impl Metrics {
    pub fn stage(&self, stage: Stage) -> &StageMetrics {
        self.stages.iter().find(|s| s.stage == stage).expect("both stages present")
    }

    pub fn flavor(&self, stage: Stage, flavor: IntervalFlavor) -> &FlavorMetrics {
        self.stage(stage).flavors.iter().find(|f| f.flavor == flavor).expect("all flavors present")
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

fn flavor_metrics(records: &[RepRecord], stages: &[Stage], flavor: IntervalFlavor) -> FlavorMetrics {
    let mut widths = Vec::new();
    let mut per_rep = Vec::new();
    for r in records {
        let mut miss = 0usize;
        let mut total = 0usize;
        let mut scored = false;
        for s in r.stages.iter().filter(|s| stages.contains(&s.stage)) {
            let iv = s.intervals.iter().find(|i| i.flavor == flavor).expect("flavor present");
            widths.extend(iv.half_lengths.iter().map(|h| 2.0 * h));
            if let Some(c) = &iv.covered {
                scored = true;
                total += c.len();
                miss += c.iter().filter(|x| !**x).count();
            }
        }
        if scored && total > 0 {
            per_rep.push(miss as f64 / total as f64);
        }
    }
    FlavorMetrics {
        flavor,
        fcr: (!per_rep.is_empty()).then(|| per_rep.iter().sum::<f64>() / per_rep.len() as f64),
        median_length: median(&mut widths),
        intervals: widths.len(),
    }
}

pub fn summarize(cfg: &StudyConfig, records: &[RepRecord]) -> Metrics {
    let stages = [Stage::One, Stage::Two]
        .iter()
        .map(|&stage| {
            let rows: Vec<&StageRecord> = records.iter().flat_map(|r| r.stages.iter().filter(move |s| s.stage == stage)).collect();
            StageMetrics {
                stage,
                scored: stage == Stage::Two || cfg.spec.stage1_supported(),
                flavors: IntervalFlavor::ALL.iter().map(|&f| flavor_metrics(records, &[stage], f)).collect(),
                rejection_rate: rows.iter().filter(|s| s.null_rejected).count() as f64 / rows.len().max(1) as f64,
                max_inequality_excess: rows
                    .iter()
                    .filter_map(|s| s.inequality.map(|i| i.lhs - i.rhs))
                    .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))),
            }
        })
        .collect();
    Metrics {
        scenario: cfg.spec.label,
        n: cfg.spec.n,
        reps: records.len(),
        alpha: cfg.settings.alpha,
        bootstrap_draws: cfg.settings.bootstrap_draws,
        stages,
        pooled: IntervalFlavor::ALL
            .iter()
            .map(|&f| flavor_metrics(records, &[Stage::One, Stage::Two], f))
            .collect(),
        rejected_draws: records.iter().map(|r| r.rejected_draws).sum(),
    }
}

/// Runs all replications in parallel; records are ordered by replication
/// index regardless of scheduling.
pub fn run_replications_with_oracle(cfg: &StudyConfig, oracle: &PopulationOracle) -> Result<(Metrics, Vec<RepRecord>)> {
    if cfg.reps == 0 {
        return Err(Error::config("reps must be at least 1"));
    }
    let results: Vec<Result<RepRecord>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_one_replication(cfg, oracle, rep).map(|a| a.record))
        .collect();
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((summarize(cfg, &records), records))
}

pub fn study_oracle(cfg: &StudyConfig) -> Result<Arc<PopulationOracle>> {
    let (d1, d2) = cfg.settings.dictionary.build(cfg.spec.p1, cfg.spec.p1)?;
    PopulationOracle::cached(&cfg.spec, &d1, &d2, cfg.mc_draws, cfg.oracle_seed())
}

pub fn run_replications(cfg: &StudyConfig) -> Result<(Metrics, Vec<RepRecord>)> {
    let oracle = study_oracle(cfg)?;
    run_replications_with_oracle(cfg, &oracle)
}

/// Per-replication CSV: `rep,stage,flavor,coordinate,center,half_length,covered,selected_model`.
pub fn write_rep_csv(mut w: impl Write, records: &[RepRecord]) -> Result<()> {
    writeln!(w, "rep,stage,flavor,coordinate,center,half_length,covered,selected_model")?;
    for r in records {
        for s in &r.stages {
            let model = s.model.to_cell();
            for iv in &s.intervals {
                for (j, &coord) in s.model.one_based().iter().enumerate() {
                    let covered = iv.covered.as_ref().map_or(String::new(), |c| u8::from(c[j]).to_string());
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{},{}",
                        r.rep, s.stage, iv.flavor, coord, iv.centers[j], iv.half_lengths[j], covered, model
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Plot-ready rows `scenario,n,method,stage,fcr,median_length`; stage is
/// `1`, `2` or `pooled`.
pub fn write_aggregated_csv(mut w: impl Write, metrics: &[Metrics]) -> Result<()> {
    writeln!(w, "scenario,n,method,stage,fcr,median_length")?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for m in metrics {
        for s in &m.stages {
            for f in &s.flavors {
                writeln!(w, "{},{},{},{},{},{}", m.scenario, m.n, f.flavor, s.stage, fmt(f.fcr), f.median_length)?;
            }
        }
        for f in &m.pooled {
            writeln!(w, "{},{},{},pooled,{},{}", m.scenario, m.n, f.flavor, fmt(f.fcr), f.median_length)?;
        }
    }
    Ok(())
}

/// Subsets a full-dimension gram to a model; convenience for callers that
/// hold oracle grams.
pub fn gram_subset(g: &GramPair, m: &ModelSet) -> Result<(DVector<f64>, DMatrix<f64>)> {
    Ok((subset_vector(&g.g, m)?, subset_matrix(&g.h, m)?))
}
