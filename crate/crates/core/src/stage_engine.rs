//! Centered gram summaries, normal equations, blips, pseudo-outcomes and the
//! two-stage fitting pipeline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_model::{make_folds, subset_matrix, subset_vector, Dataset, FoldPartition, ModelSet, Stage};
use crate::error::{Error, Result};
use crate::linalg;
use crate::nuisance::{crossfit_predict, CrossFitPredictions, LearnerSpec, OracleFn, TargetKind, DEFAULT_PROPENSITY_EPS};
use crate::selection::{select, transformed_design, SelectorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GramFlavor {
    Crossfit,
    Oracle,
    PopulationMc,
    Conditional,
    Perturbed,
}

/// Gradient vector `g` and Hessian `h` of one stage's centered least-squares
/// objective, over the full dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct GramPair {
    pub g: DVector<f64>,
    pub h: DMatrix<f64>,
    pub stage: Stage,
    pub flavor: GramFlavor,
}

impl GramPair {
    pub fn p(&self) -> usize {
        self.g.len()
    }

    pub fn subset(&self, m: &ModelSet) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((subset_vector(&self.g, m)?, subset_matrix(&self.h, m)?))
    }
}

fn check_lengths(n: usize, lens: &[(usize, &str)]) -> Result<()> {
    if n == 0 {
        return Err(Error::config("gram summaries need at least one row"));
    }
    for (len, what) in lens {
        if *len != n {
            return Err(Error::config(format!("{what} has length {len}, expected {n}")));
        }
    }
    Ok(())
}

#[inline]
fn multiplier(m: Option<&[f64]>, i: usize) -> f64 {
    m.map_or(1.0, |w| w[i])
}

/// `(1/n) Σ ω_i (a_i − μ_i)² W_i W_iᵀ`.
pub fn gram_hessian(basis: &DMatrix<f64>, a: &[f64], mu_a: &[f64], multipliers: Option<&[f64]>) -> Result<DMatrix<f64>> {
    let (n, p) = basis.shape();
    check_lengths(n, &[(a.len(), "treatment"), (mu_a.len(), "propensity")])?;
    if let Some(w) = multipliers {
        check_lengths(n, &[(w.len(), "multipliers")])?;
    }
    let mut h = DMatrix::zeros(p, p);
    let mut row = vec![0.0; p];
    for i in 0..n {
        let d = a[i] - mu_a[i];
        let w = multiplier(multipliers, i) * (d * d);
        for (j, r) in row.iter_mut().enumerate() {
            *r = basis[(i, j)];
        }
        for k in 0..p {
            let wk = w * row[k];
            for j in k..p {
                h[(j, k)] += wk * row[j];
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    for k in 0..p {
        for j in k..p {
            let v = h[(j, k)] * inv_n;
            h[(j, k)] = v;
            h[(k, j)] = v;
        }
    }
    Ok(h)
}

fn centered_gradient(
    basis: &DMatrix<f64>,
    a: &[f64],
    mu_a: &[f64],
    response: &[f64],
    mu_resp: &[f64],
    multipliers: Option<&[f64]>,
) -> Result<DVector<f64>> {
    let (n, p) = basis.shape();
    check_lengths(
        n,
        &[
            (a.len(), "treatment"),
            (mu_a.len(), "propensity"),
            (response.len(), "response"),
            (mu_resp.len(), "outcome nuisance"),
        ],
    )?;
    if let Some(w) = multipliers {
        check_lengths(n, &[(w.len(), "multipliers")])?;
    }
    let mut g = DVector::zeros(p);
    for i in 0..n {
        let w = multiplier(multipliers, i) * ((a[i] - mu_a[i]) * (response[i] - mu_resp[i]));
        for j in 0..p {
            g[j] += w * basis[(i, j)];
        }
    }
    Ok(g / n as f64)
}

/// `(1/n) Σ ω_i W2i (a2i − μ̂2Ai)(y_i − μ̂2Yi)`.
pub fn grad_stage2(
    basis2: &DMatrix<f64>,
    a2: &[f64],
    mu_a2: &[f64],
    y: &[f64],
    mu_y2: &[f64],
    multipliers: Option<&[f64]>,
) -> Result<DVector<f64>> {
    centered_gradient(basis2, a2, mu_a2, y, mu_y2, multipliers)
}

/// Stage-1 pseudo-outcome together with the stage-2 model that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoOutcome {
    pub values: Vec<f64>,
    pub m2: ModelSet,
}

/// `(1/n) Σ ω_i W1i (a1i − μ̂1Ai)(Ŷ1i − μ̂1Yi)`. The outcome nuisance must
/// have been trained on the pseudo-outcome of the same stage-2 model.
pub fn grad_stage1(
    basis1: &DMatrix<f64>,
    a1: &[f64],
    mu_a1: &[f64],
    pseudo: &PseudoOutcome,
    mu_y1: &CrossFitPredictions,
    multipliers: Option<&[f64]>,
) -> Result<DVector<f64>> {
    match &mu_y1.m2 {
        Some(m2) if *m2 == pseudo.m2 => {}
        other => {
            return Err(Error::config(format!(
                "stage-1 outcome nuisance was trained for stage-2 model {}, pseudo-outcome uses {}",
                other.as_ref().map_or("<none>".to_string(), ToString::to_string),
                pseudo.m2
            )))
        }
    }
    centered_gradient(basis1, a1, mu_a1, &pseudo.values, &mu_y1.values, multipliers)
}

/// Solves `h(m) θ = g(m)`.
pub fn solve_normal(gram: &GramPair, m: &ModelSet) -> Result<DVector<f64>> {
    let (g, h) = gram.subset(m)?;
    let theta = linalg::solve_spd(&h, &g, m)?;
    let res = normal_residual(&g, &h, &theta);
    let tol = 1e-10 * (1.0 + linalg::max_abs(g.iter().copied()));
    if !(res <= tol) {
        return Err(Error::Numerical(format!(
            "normal-equation residual {res:.3e} exceeds {tol:.3e} for model {m}"
        )));
    }
    Ok(theta)
}

pub fn normal_residual(g: &DVector<f64>, h: &DMatrix<f64>, theta: &DVector<f64>) -> f64 {
    linalg::max_abs_diff_vec(g, &(h * theta))
}

/// Blip correction `s(1{s>0} − a2)` with `s = xᵀθ`; the indicator is strict.
pub fn blip_xi(a2: bool, x: &[f64], theta: &[f64]) -> f64 {
    let s: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
    let opt = if s > 0.0 { 1.0 } else { 0.0 };
    s * (opt - if a2 { 1.0 } else { 0.0 })
}

/// `Ŷ1i = y_i + ξ(a2i, W2i(m2); θ2)`.
pub fn pseudo_outcome(y: &[f64], a2: &[f64], basis2: &DMatrix<f64>, m2: &ModelSet, theta2: &DVector<f64>) -> Result<PseudoOutcome> {
    let n = basis2.nrows();
    check_lengths(n, &[(y.len(), "outcome"), (a2.len(), "treatment")])?;
    m2.check_bounds(basis2.ncols())?;
    if theta2.len() != m2.len() {
        return Err(Error::config(format!(
            "theta2 has length {}, model {m2} has {} terms",
            theta2.len(),
            m2.len()
        )));
    }
    let mut x = vec![0.0; m2.len()];
    let values = (0..n)
        .map(|i| {
            for (slot, &j) in x.iter_mut().zip(m2.indices()) {
                *slot = basis2[(i, j)];
            }
            y[i] + blip_xi(a2[i] > 0.5, &x, theta2.as_slice())
        })
        .collect();
    Ok(PseudoOutcome { values, m2: m2.clone() })
}

/// Coefficients of one stage at a chosen model.
#[derive(Debug, Clone)]
pub struct StageFit {
    pub model: ModelSet,
    pub theta: DVector<f64>,
    pub gram: GramPair,
    pub l1_norm: f64,
    /// Inverse of `h(model)`.
    pub h_inv: DMatrix<f64>,
    pub residual: f64,
    pub selection_flags: Vec<String>,
}

impl StageFit {
    pub fn new(gram: GramPair, model: ModelSet) -> Result<Self> {
        let theta = solve_normal(&gram, &model)?;
        let (g, h) = gram.subset(&model)?;
        let h_inv = linalg::inverse_spd(&h, &model)?;
        Ok(Self {
            residual: normal_residual(&g, &h, &theta),
            l1_norm: linalg::l1_norm(&theta),
            model,
            theta,
            gram,
            h_inv,
            selection_flags: Vec::new(),
        })
    }

    pub fn stage(&self) -> Stage {
        self.gram.stage
    }

    pub fn h_sub(&self) -> DMatrix<f64> {
        subset_matrix(&self.gram.h, &self.model).expect("model checked at construction")
    }

    pub fn g_sub(&self) -> DVector<f64> {
        subset_vector(&self.gram.g, &self.model).expect("model checked at construction")
    }
}

#[derive(Debug, Clone)]
pub struct NuisanceLearners {
    pub propensity1: LearnerSpec,
    pub propensity2: LearnerSpec,
    pub outcome2: LearnerSpec,
    pub outcome1: LearnerSpec,
}

impl Default for NuisanceLearners {
    fn default() -> Self {
        Self {
            propensity1: LearnerSpec::Linear,
            propensity2: LearnerSpec::Linear,
            outcome2: LearnerSpec::Linear,
            outcome1: LearnerSpec::Linear,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub folds: usize,
    pub seed: u64,
    /// Explicit fold assignment; overrides `folds`/`seed` when set.
    pub fold_partition: Option<FoldPartition>,
    pub learners: NuisanceLearners,
    pub selector1: SelectorSpec,
    pub selector2: SelectorSpec,
    pub propensity_eps: f64,
}

impl FitConfig {
    pub fn new(seed: u64, selector1: SelectorSpec, selector2: SelectorSpec) -> Self {
        Self {
            folds: 5,
            seed,
            fold_partition: None,
            learners: NuisanceLearners::default(),
            selector1,
            selector2,
            propensity_eps: DEFAULT_PROPENSITY_EPS,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Nuisances {
    pub mu_a1: CrossFitPredictions,
    pub mu_a2: CrossFitPredictions,
    pub mu_y2: CrossFitPredictions,
    pub mu_y1: CrossFitPredictions,
}

#[derive(Debug, Clone)]
pub struct TwoStageFit {
    pub stage2: StageFit,
    pub stage1: StageFit,
    pub pseudo: PseudoOutcome,
    pub nuisances: Nuisances,
    pub folds: FoldPartition,
}

impl TwoStageFit {
    pub fn stage(&self, stage: Stage) -> &StageFit {
        match stage {
            Stage::One => &self.stage1,
            Stage::Two => &self.stage2,
        }
    }

    pub fn report(&self, dataset: &Dataset) -> FitReport {
        let stage_report = |s: &StageFit| {
            let h = s.h_sub();
            let dict = dataset.dictionary(s.stage());
            StageReport {
                stage: s.stage().number(),
                model: s.model.one_based(),
                terms: s.model.indices().iter().map(|&j| dict.terms()[j].to_string()).collect(),
                theta: s.theta.iter().copied().collect(),
                l1_norm: s.l1_norm,
                min_eigenvalue: linalg::min_eigenvalue(&h),
                condition_number: linalg::condition_number(&h),
                residual: s.residual,
                selection_flags: s.selection_flags.clone(),
            }
        };
        FitReport {
            n: dataset.n(),
            folds: self.folds.k(),
            stages: vec![stage_report(&self.stage1), stage_report(&self.stage2)],
            nuisances: vec![
                NuisanceReport::from_predictions("mu_a1", &self.nuisances.mu_a1),
                NuisanceReport::from_predictions("mu_a2", &self.nuisances.mu_a2),
                NuisanceReport::from_predictions("mu_y2", &self.nuisances.mu_y2),
                NuisanceReport::from_predictions("mu_y1", &self.nuisances.mu_y1),
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    /// 1-based dictionary positions.
    pub model: Vec<usize>,
    pub terms: Vec<String>,
    pub theta: Vec<f64>,
    pub l1_norm: f64,
    pub min_eigenvalue: f64,
    pub condition_number: f64,
    pub residual: f64,
    pub selection_flags: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuisanceReport {
    pub name: String,
    pub learner: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub constant_target_folds: Vec<usize>,
    pub clamped: usize,
}

impl NuisanceReport {
    fn from_predictions(name: &str, p: &CrossFitPredictions) -> Self {
        Self {
            name: name.into(),
            learner: p.diagnostics.learner.clone(),
            mean: p.values.iter().sum::<f64>() / p.values.len() as f64,
            min: p.values.iter().copied().fold(f64::INFINITY, f64::min),
            max: p.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            constant_target_folds: p.diagnostics.constant_target_folds.clone(),
            clamped: p.diagnostics.clamped,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub n: usize,
    pub folds: usize,
    pub stages: Vec<StageReport>,
    pub nuisances: Vec<NuisanceReport>,
}

fn stage2_fit(dataset: &Dataset, mu_a2: &[f64], mu_y2: &[f64], selector: &SelectorSpec, flavor: GramFlavor) -> Result<StageFit> {
    let basis2 = dataset.basis(Stage::Two);
    let a2 = dataset.treatments(Stage::Two);
    let y = dataset.outcomes();
    let gram = GramPair {
        g: grad_stage2(basis2, &a2, mu_a2, &y, mu_y2, None)?,
        h: gram_hessian(basis2, &a2, mu_a2, None)?,
        stage: Stage::Two,
        flavor,
    };
    let (design, response) = transformed_design(basis2, &a2, mu_a2, &y, mu_y2)?;
    let selection = select(selector, dataset.dictionary(Stage::Two), &design, &response)?;
    let mut fit = StageFit::new(gram, selection.model)?;
    fit.selection_flags = selection.flags;
    Ok(fit)
}

fn stage1_fit(
    dataset: &Dataset,
    mu_a1: &[f64],
    pseudo: &PseudoOutcome,
    mu_y1: &CrossFitPredictions,
    selector: &SelectorSpec,
    flavor: GramFlavor,
) -> Result<StageFit> {
    let basis1 = dataset.basis(Stage::One);
    let a1 = dataset.treatments(Stage::One);
    let gram = GramPair {
        g: grad_stage1(basis1, &a1, mu_a1, pseudo, mu_y1, None)?,
        h: gram_hessian(basis1, &a1, mu_a1, None)?,
        stage: Stage::One,
        flavor,
    };
    let (design, response) = transformed_design(basis1, &a1, mu_a1, &pseudo.values, &mu_y1.values)?;
    let selection = select(selector, dataset.dictionary(Stage::One), &design, &response)?;
    let mut fit = StageFit::new(gram, selection.model)?;
    fit.selection_flags = selection.flags;
    Ok(fit)
}

/// Runs the cross-fitted two-stage pipeline: stage-2 nuisances, gram
/// summaries, selection and solve; pseudo-outcomes; stage-1 nuisances
/// (outcome regressed on `X1`), gram summaries, selection and solve.
pub fn fit_two_stage(dataset: &Dataset, config: &FitConfig) -> Result<TwoStageFit> {
    let n = dataset.n();
    let folds = match &config.fold_partition {
        Some(f) if f.n() != n => {
            return Err(Error::config(format!("fold partition covers {} rows, dataset has {n}", f.n())))
        }
        Some(f) => f.clone(),
        None => make_folds(n, config.folds, config.seed)?,
    };
    let eps = config.propensity_eps;
    let l = &config.learners;

    let h2 = dataset.history_matrix(Stage::Two);
    let a2 = dataset.treatments(Stage::Two);
    let y = dataset.outcomes();
    let stage2 = (|| {
        let mu_a2 = crossfit_predict(&l.propensity2, &h2, &a2, &folds, TargetKind::PropensityStage2, eps)?;
        let mu_y2 = crossfit_predict(&l.outcome2, &h2, &y, &folds, TargetKind::OutcomeStage2, eps)?;
        let fit = stage2_fit(dataset, &mu_a2.values, &mu_y2.values, &config.selector2, GramFlavor::Crossfit)?;
        Ok((fit, mu_a2, mu_y2))
    })()
    .map_err(|e: Error| e.in_stage(2))?;
    let (stage2, mu_a2, mu_y2) = stage2;

    let pseudo = pseudo_outcome(&y, &a2, dataset.basis(Stage::Two), &stage2.model, &stage2.theta)?;
    let h1 = dataset.history_matrix(Stage::One);
    let a1 = dataset.treatments(Stage::One);
    let stage1 = (|| {
        let mu_a1 = crossfit_predict(&l.propensity1, &h1, &a1, &folds, TargetKind::PropensityStage1, eps)?;
        let mut mu_y1 = crossfit_predict(&l.outcome1, &h1, &pseudo.values, &folds, TargetKind::PseudoOutcomeStage1, eps)?;
        mu_y1.m2 = Some(stage2.model.clone());
        let fit = stage1_fit(dataset, &mu_a1.values, &pseudo, &mu_y1, &config.selector1, GramFlavor::Crossfit)?;
        Ok((fit, mu_a1, mu_y1))
    })()
    .map_err(|e: Error| e.in_stage(1))?;
    let (stage1, mu_a1, mu_y1) = stage1;

    Ok(TwoStageFit {
        stage2,
        stage1,
        pseudo,
        nuisances: Nuisances { mu_a1, mu_a2, mu_y2, mu_y1 },
        folds,
    })
}

/// Known nuisance functions, evaluated on the raw stage histories.
#[derive(Debug, Clone)]
pub struct OracleNuisances {
    pub mu_a1: OracleFn,
    pub mu_a2: OracleFn,
    pub mu_y2: OracleFn,
    pub mu_y1: OracleFn,
}

/// Estimator that plugs the true nuisance functions in directly, with no
/// fold structure.
pub fn oracle_fit(
    dataset: &Dataset,
    nuisances: &OracleNuisances,
    selector1: &SelectorSpec,
    selector2: &SelectorSpec,
) -> Result<(StageFit, StageFit)> {
    let eval = |f: &OracleFn, stage: Stage| -> Vec<f64> {
        dataset
            .trajectories()
            .iter()
            .map(|t| match stage {
                Stage::One => f.call(&t.history1()),
                Stage::Two => f.call(&t.history2()),
            })
            .collect()
    };
    let mu_a2 = eval(&nuisances.mu_a2, Stage::Two);
    let mu_y2 = eval(&nuisances.mu_y2, Stage::Two);
    let stage2 = stage2_fit(dataset, &mu_a2, &mu_y2, selector2, GramFlavor::Oracle).map_err(|e| e.in_stage(2))?;
    let pseudo = pseudo_outcome(
        &dataset.outcomes(),
        &dataset.treatments(Stage::Two),
        dataset.basis(Stage::Two),
        &stage2.model,
        &stage2.theta,
    )?;
    let mu_a1 = eval(&nuisances.mu_a1, Stage::One);
    let mu_y1 = CrossFitPredictions {
        values: eval(&nuisances.mu_y1, Stage::One),
        target_kind: TargetKind::PseudoOutcomeStage1,
        m2: Some(stage2.model.clone()),
        diagnostics: Default::default(),
    };
    let stage1 = stage1_fit(dataset, &mu_a1, &pseudo, &mu_y1, selector1, GramFlavor::Oracle).map_err(|e| e.in_stage(1))?;
    Ok((stage1, stage2))
}
