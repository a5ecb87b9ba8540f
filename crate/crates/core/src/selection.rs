//! Submodel selection on the centered regression: fixed models, forward
//! stepwise, and lasso-path entry order, with optional hierarchy and a
//! sparsity cap.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_model::{FeatureDictionary, ModelSet, Stage, Term};
use crate::error::{Error, Result};
use crate::linalg::SINGULAR_EIGEN_THRESHOLD;

#[derive(Debug, Clone, PartialEq)]
pub enum SelectorKind {
    Fixed(ModelSet),
    /// `size` columns added beyond the forced ones.
    ForwardStepwise { size: usize },
    LassoPath { size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorSpec {
    pub kind: SelectorKind,
    pub hierarchy: bool,
    /// Maximum model size `C`.
    pub cap: usize,
    /// Always include the intercept term, when the dictionary has one.
    pub force_intercept: bool,
}

impl SelectorSpec {
    pub fn forward_stepwise(size: usize, cap: usize) -> Self {
        Self {
            kind: SelectorKind::ForwardStepwise { size },
            hierarchy: false,
            cap,
            force_intercept: true,
        }
    }

    pub fn lasso_path(size: usize, cap: usize) -> Self {
        Self {
            kind: SelectorKind::LassoPath { size },
            hierarchy: false,
            cap,
            force_intercept: true,
        }
    }

    pub fn fixed(model: ModelSet) -> Self {
        let cap = model.len();
        Self {
            kind: SelectorKind::Fixed(model),
            hierarchy: false,
            cap,
            force_intercept: false,
        }
    }
}

/// Serializable selector choice; fixed models use 1-based positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum SelectorConfig {
    Fixed {
        stage1: Vec<usize>,
        stage2: Vec<usize>,
    },
    ForwardStepwise {
        size: usize,
    },
    LassoPath {
        size: usize,
    },
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig::ForwardStepwise { size: 5 }
    }
}

impl SelectorConfig {
    pub fn resolve(&self, stage: Stage, cap: usize, hierarchy: bool, force_intercept: bool) -> Result<SelectorSpec> {
        let kind = match self {
            SelectorConfig::Fixed { stage1, stage2 } => {
                let idx = if stage == Stage::One { stage1 } else { stage2 };
                SelectorKind::Fixed(ModelSet::from_one_based(stage, idx)?)
            }
            SelectorConfig::ForwardStepwise { size } => SelectorKind::ForwardStepwise { size: *size },
            SelectorConfig::LassoPath { size } => SelectorKind::LassoPath { size: *size },
        };
        Ok(SelectorSpec {
            kind,
            hierarchy,
            cap,
            force_intercept,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub model: ModelSet,
    pub flags: Vec<String>,
}

/// The regression selectors operate on: `R_ij = (a_i − μ̂_i) W_ij` and
/// `r_i = response_i − μ̂resp_i`.
pub fn transformed_design(
    basis: &DMatrix<f64>,
    a: &[f64],
    mu_a: &[f64],
    response: &[f64],
    mu_resp: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = basis.nrows();
    if [a.len(), mu_a.len(), response.len(), mu_resp.len()].iter().any(|&l| l != n) {
        return Err(Error::config("transformed_design: length mismatch"));
    }
    let r = DMatrix::from_fn(n, basis.ncols(), |i, j| (a[i] - mu_a[i]) * basis[(i, j)]);
    let v = DVector::from_fn(n, |i, _| response[i] - mu_resp[i]);
    Ok((r, v))
}

/// Explained sum of squares `cᵀ G⁻¹ c` for the columns in `cols`, or `None`
/// if the sub-Gram matrix is numerically singular.
fn explained(gram: &DMatrix<f64>, c: &DVector<f64>, cols: &[usize]) -> Option<f64> {
    let k = cols.len();
    if k == 0 {
        return Some(0.0);
    }
    let g = DMatrix::from_fn(k, k, |a, b| gram[(cols[a], cols[b])]);
    let scale = (0..k).map(|a| g[(a, a)]).fold(0.0, f64::max).max(1.0);
    let lam = g.clone().symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
    if !(lam > SINGULAR_EIGEN_THRESHOLD * scale) {
        return None;
    }
    let cs = DVector::from_fn(k, |a, _| c[cols[a]]);
    let x = g.cholesky()?.solve(&cs);
    Some(cs.dot(&x))
}

/// Greedy forward selection starting from `forced`, adding the column with
/// the largest RSS reduction until `size` columns have been added. Ties go to
/// the lowest index; columns that make the design singular are skipped.
pub fn forward_stepwise(r_mat: &DMatrix<f64>, r: &DVector<f64>, size: usize, forced: &[usize]) -> Result<Vec<usize>> {
    let p = r_mat.ncols();
    if size > p {
        return Err(Error::config(format!("forward stepwise: size {size} exceeds dimension {p}")));
    }
    let gram = r_mat.transpose() * r_mat;
    let c = r_mat.transpose() * r;
    let mut model: Vec<usize> = forced.to_vec();
    model.sort_unstable();
    model.dedup();
    let target = (model.len() + size).min(p);
    while model.len() < target {
        let mut best: Option<(f64, usize)> = None;
        for j in (0..p).filter(|j| !model.contains(j)) {
            let mut cand = model.clone();
            cand.push(j);
            if let Some(e) = explained(&gram, &c, &cand) {
                if best.is_none_or(|(b, _)| e > b) {
                    best = Some((e, j));
                }
            }
        }
        match best {
            Some((_, j)) => {
                model.push(j);
            }
            None => break,
        }
    }
    model.sort_unstable();
    Ok(model)
}

/// Residual sum of squares `‖r − R_M β̂‖²` of the least-squares fit on `cols`.
pub fn rss(r_mat: &DMatrix<f64>, r: &DVector<f64>, cols: &[usize]) -> Option<f64> {
    let gram = r_mat.transpose() * r_mat;
    let c = r_mat.transpose() * r;
    explained(&gram, &c, cols).map(|e| r.norm_squared() - e)
}

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Coordinate descent for `(1/2n)‖r − Xβ‖² + λ Σ_{j∉forced} |β_j|`, warm
/// started from `beta`.
pub fn lasso_coordinate_descent(
    x: &DMatrix<f64>,
    r: &DVector<f64>,
    lambda: f64,
    forced: &[usize],
    beta: &mut DVector<f64>,
    tol: f64,
    max_sweeps: usize,
) -> usize {
    let (n, p) = x.shape();
    let nf = n as f64;
    let col_sq: Vec<f64> = (0..p).map(|j| x.column(j).norm_squared() / nf).collect();
    let mut resid = r - x * &*beta;
    for sweep in 0..max_sweeps {
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            if col_sq[j] == 0.0 {
                continue;
            }
            let old = beta[j];
            let rho = x.column(j).dot(&resid) / nf + col_sq[j] * old;
            let new = if forced.contains(&j) {
                rho / col_sq[j]
            } else {
                soft_threshold(rho, lambda) / col_sq[j]
            };
            if new != old {
                resid.axpy(old - new, &x.column(j), 1.0);
                beta[j] = new;
                max_delta = max_delta.max((new - old).abs());
            }
        }
        if max_delta < tol {
            return sweep + 1;
        }
    }
    max_sweeps
}

/// Path outcome: non-forced columns in entry order, and whether the path
/// ended before `size` of them had entered.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoPathResult {
    pub entered: Vec<usize>,
    pub exhausted: bool,
}

pub const LASSO_GRID: usize = 200;
pub const LASSO_MIN_RATIO: f64 = 1e-4;

/// Runs the lasso over a log-spaced decreasing λ grid and records the order
/// in which non-forced columns first become active. Non-forced columns are
/// scaled to unit mean square inside the path. Columns entering at the same
/// grid point are ordered by the magnitude of their gradient at the previous
/// solution, then by index.
pub fn lasso_path_order(r_mat: &DMatrix<f64>, r: &DVector<f64>, size: usize, forced: &[usize]) -> LassoPathResult {
    let (n, p) = r_mat.shape();
    let nf = n as f64;
    let scale: Vec<f64> = (0..p)
        .map(|j| {
            let ms = (r_mat.column(j).norm_squared() / nf).sqrt();
            if forced.contains(&j) || ms == 0.0 {
                1.0
            } else {
                ms
            }
        })
        .collect();
    let x = DMatrix::from_fn(n, p, |i, j| r_mat[(i, j)] / scale[j]);
    let mut beta = DVector::zeros(p);
    // Forced columns are unpenalized: fit them first.
    lasso_coordinate_descent(&x, r, f64::INFINITY, forced, &mut beta, 1e-12, 10_000);
    let gradient = |beta: &DVector<f64>| -> DVector<f64> { x.transpose() * (r - &x * beta) / nf };
    let free: Vec<usize> = (0..p).filter(|j| !forced.contains(j) && scale[*j] > 0.0 && x.column(*j).norm_squared() > 0.0).collect();
    let lambda_max = free.iter().map(|&j| gradient(&beta)[j].abs()).fold(0.0, f64::max);
    let mut entered: Vec<usize> = Vec::new();
    if lambda_max > 0.0 && size > 0 {
        for step in 0..LASSO_GRID {
            let frac = step as f64 / (LASSO_GRID - 1) as f64;
            let lambda = lambda_max * LASSO_MIN_RATIO.powf(frac);
            let prev_grad = gradient(&beta);
            lasso_coordinate_descent(&x, r, lambda, forced, &mut beta, 1e-10, 10_000);
            let mut new: Vec<usize> = free.iter().copied().filter(|j| beta[*j] != 0.0 && !entered.contains(j)).collect();
            new.sort_by(|&a, &b| prev_grad[b].abs().total_cmp(&prev_grad[a].abs()).then(a.cmp(&b)));
            entered.extend(new);
            if entered.len() >= size {
                break;
            }
        }
    }
    let exhausted = entered.len() < size;
    entered.truncate(size);
    LassoPathResult { entered, exhausted }
}

/// Adds the main effects of every interaction in `m`.
pub fn enforce_hierarchy(m: &ModelSet, dict: &FeatureDictionary) -> Result<ModelSet> {
    let mut idx = m.indices().to_vec();
    for &j in m.indices() {
        if let Some(Term::Interaction { i, j: k }) = dict.terms().get(j) {
            for main in [*i, *k] {
                let pos = dict.position(&Term::Main { index: main }).ok_or_else(|| {
                    Error::config(format!(
                        "hierarchy: dictionary lacks the main effect h{} required by {}",
                        main + 1,
                        dict.terms()[j]
                    ))
                })?;
                idx.push(pos);
            }
        }
    }
    ModelSet::new(m.stage(), idx)
}

fn forced_columns(spec: &SelectorSpec, dict: &FeatureDictionary) -> Vec<usize> {
    if spec.force_intercept {
        dict.intercept_index().into_iter().collect()
    } else {
        Vec::new()
    }
}

/// Applies a selector to the transformed regression of one stage.
pub fn select(spec: &SelectorSpec, dict: &FeatureDictionary, r_mat: &DMatrix<f64>, r: &DVector<f64>) -> Result<Selection> {
    let p = dict.p();
    if r_mat.ncols() != p || r_mat.nrows() != r.len() {
        return Err(Error::config("selection: design does not match the dictionary"));
    }
    if spec.cap == 0 {
        return Err(Error::config("selection: cap must be at least 1"));
    }
    let forced = forced_columns(spec, dict);
    let mut flags = Vec::new();
    let stage = dict.stage();
    let model = match &spec.kind {
        SelectorKind::Fixed(m) => {
            m.check_bounds(p)?;
            if m.stage() != stage {
                return Err(Error::config(format!("fixed model {m} belongs to stage {}", m.stage())));
            }
            if m.len() > spec.cap {
                return Err(Error::config(format!("fixed model {m} exceeds cap {}", spec.cap)));
            }
            let mut idx = m.indices().to_vec();
            idx.extend(&forced);
            ModelSet::new(stage, idx)?
        }
        SelectorKind::ForwardStepwise { size } | SelectorKind::LassoPath { size } => {
            if *size > p {
                return Err(Error::config(format!("selection: size {size} exceeds dimension {p}")));
            }
            if forced.len() + size > spec.cap {
                return Err(Error::config(format!(
                    "selection: size {size} plus {} forced term(s) exceeds cap {}",
                    forced.len(),
                    spec.cap
                )));
            }
            let idx = if let SelectorKind::LassoPath { .. } = spec.kind {
                let path = lasso_path_order(r_mat, r, *size, &forced);
                if path.exhausted {
                    flags.push(format!("lasso path activated only {} of {size} variables", path.entered.len()));
                }
                forced.iter().copied().chain(path.entered).collect()
            } else {
                let idx = forward_stepwise(r_mat, r, *size, &forced)?;
                if idx.len() < (forced.len() + size).min(p) {
                    flags.push(format!("forward stepwise stopped at {} terms (singular candidates)", idx.len()));
                }
                idx
            };
            if idx.is_empty() {
                return Err(Error::config("selection produced an empty model; force the intercept or raise size"));
            }
            ModelSet::new(stage, idx)?
        }
    };
    let model = if spec.hierarchy {
        let h = enforce_hierarchy(&model, dict)?;
        if h.len() > spec.cap {
            let msg = format!("hierarchy grew model {h} past cap {}; cap relaxed", spec.cap);
            log::warn!("stage {stage}: {msg}");
            flags.push(msg);
        }
        h
    } else {
        model
    };
    Ok(Selection { model, flags })
}
