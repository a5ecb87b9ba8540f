//! Cross-fitted conditional-mean learners for the propensity and outcome
//! nuisances.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{FoldPartition, ModelSet};
use crate::error::{Error, Result};

/// Default propensity clamp.
pub const DEFAULT_PROPENSITY_EPS: f64 = 0.01;

/// Known regression function, evaluated on a raw feature row.
#[derive(Clone)]
pub struct OracleFn(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>);

impl OracleFn {
    pub fn new(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn call(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

impl fmt::Debug for OracleFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("OracleFn(..)")
    }
}

#[derive(Debug, Clone)]
pub enum LearnerSpec {
    Oracle(OracleFn),
    /// Ordinary least squares with an intercept.
    Linear,
    Knn { k: usize },
    /// Gaussian Nadaraya-Watson. `None` selects Scott's rule per coordinate.
    Kernel { bandwidth: Option<f64> },
}

impl LearnerSpec {
    pub fn oracle(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        LearnerSpec::Oracle(OracleFn::new(f))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LearnerSpec::Knn { k } if *k == 0 => Err(Error::config("knn: k must be at least 1")),
            LearnerSpec::Kernel { bandwidth: Some(b) } if !(*b > 0.0 && b.is_finite()) => {
                Err(Error::config("kernel: bandwidth must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            LearnerSpec::Oracle(_) => "oracle".into(),
            LearnerSpec::Linear => "linear".into(),
            LearnerSpec::Knn { k } => format!("knn(k={k})"),
            LearnerSpec::Kernel { bandwidth: None } => "kernel(scott)".into(),
            LearnerSpec::Kernel { bandwidth: Some(b) } => format!("kernel(h={b})"),
        }
    }
}

/// Serializable learner choice. `Oracle` is resolved against known
/// functions, which exist only for simulated data.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum LearnerConfig {
    Oracle,
    #[default]
    Linear,
    Knn {
        k: usize,
    },
    Kernel {
        #[serde(default)]
        bandwidth: Option<f64>,
    },
}

impl LearnerConfig {
    pub fn resolve(self, oracle: Option<OracleFn>, what: &str) -> Result<LearnerSpec> {
        let spec = match self {
            LearnerConfig::Oracle => LearnerSpec::Oracle(oracle.ok_or_else(|| {
                Error::config(format!("learners.{what}: no known function is available for an oracle learner"))
            })?),
            LearnerConfig::Linear => LearnerSpec::Linear,
            LearnerConfig::Knn { k } => LearnerSpec::Knn { k },
            LearnerConfig::Kernel { bandwidth } => LearnerSpec::Kernel { bandwidth },
        };
        spec.validate().map_err(|e| Error::config(format!("learners.{what}: {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    PropensityStage1,
    PropensityStage2,
    OutcomeStage2,
    PseudoOutcomeStage1,
}

impl TargetKind {
    pub fn is_propensity(self) -> bool {
        matches!(self, TargetKind::PropensityStage1 | TargetKind::PropensityStage2)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub learner: String,
    /// Folds whose training target was constant, predicted by the fold mean.
    pub constant_target_folds: Vec<usize>,
    /// Number of predictions moved by the propensity clamp.
    pub clamped: usize,
}

/// Out-of-fold nuisance predictions for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFitPredictions {
    pub values: Vec<f64>,
    pub target_kind: TargetKind,
    /// Stage-2 model whose pseudo-outcome the predictions were trained on.
    pub m2: Option<ModelSet>,
    pub diagnostics: Diagnostics,
}

impl CrossFitPredictions {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn clamp_propensity(p: f64, eps: f64) -> f64 {
    p.max(eps).min(1.0 - eps)
}

enum Fitted {
    Constant(f64),
    Linear(DVector<f64>),
    Knn { x: DMatrix<f64>, y: Vec<f64>, k: usize },
    Kernel { x: DMatrix<f64>, y: Vec<f64>, inv_bw: Vec<f64> },
}

impl Fitted {
    fn predict(&self, row: &[f64]) -> f64 {
        match self {
            Fitted::Constant(c) => *c,
            Fitted::Linear(beta) => beta[0] + row.iter().zip(beta.iter().skip(1)).map(|(a, b)| a * b).sum::<f64>(),
            Fitted::Knn { x, y, k } => {
                let mut d: Vec<(f64, usize)> = (0..x.nrows())
                    .map(|i| {
                        let dist: f64 = row.iter().enumerate().map(|(j, v)| (v - x[(i, j)]).powi(2)).sum();
                        (dist, i)
                    })
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let k = (*k).min(d.len());
                d[..k].iter().map(|&(_, i)| y[i]).sum::<f64>() / k as f64
            }
            Fitted::Kernel { x, y, inv_bw } => {
                let logw: Vec<f64> = (0..x.nrows())
                    .map(|i| {
                        -0.5 * row
                            .iter()
                            .zip(inv_bw)
                            .enumerate()
                            .map(|(j, (v, s))| ((v - x[(i, j)]) * s).powi(2))
                            .sum::<f64>()
                    })
                    .collect();
                let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (mut num, mut den) = (0.0, 0.0);
                for (lw, yi) in logw.iter().zip(y) {
                    let w = (lw - top).exp();
                    num += w * yi;
                    den += w;
                }
                num / den
            }
        }
    }
}

fn sample_sd(col: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = col.clone().count() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = col.clone().sum::<f64>() / n;
    (col.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn rows_of(features: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), features.ncols(), |r, c| features[(idx[r], c)])
}

/// Trains a learner on the given rows. Returns the fitted model and whether
/// the constant-target fallback fired.
fn train(learner: &LearnerSpec, x: DMatrix<f64>, y: Vec<f64>) -> Result<(Fitted, bool)> {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let constant = y.iter().all(|v| *v == y[0]);
    Ok(match learner {
        LearnerSpec::Oracle(_) => unreachable!("oracle learners are never trained"),
        LearnerSpec::Linear => {
            let design = DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
            let svd = design.svd(true, true);
            let beta = svd
                .solve(&DVector::from_vec(y), 1e-12)
                .map_err(|e| Error::Numerical(format!("linear learner: {e}")))?;
            (Fitted::Linear(beta), false)
        }
        _ if constant => (Fitted::Constant(mean), true),
        LearnerSpec::Knn { k } => (Fitted::Knn { x, y, k: *k }, false),
        LearnerSpec::Kernel { bandwidth } => {
            let n = x.nrows() as f64;
            let d = x.ncols() as f64;
            let inv_bw = (0..x.ncols())
                .map(|j| {
                    let h = match bandwidth {
                        Some(b) => *b,
                        None => n.powf(-1.0 / (d + 4.0)) * sample_sd(x.column(j).iter().copied()),
                    };
                    // A constant column carries no information; drop it.
                    if h > 0.0 {
                        1.0 / h
                    } else {
                        0.0
                    }
                })
                .collect();
            (Fitted::Kernel { x, y, inv_bw }, false)
        }
    })
}

/// Out-of-fold predictions: rows of fold `k` are predicted by a learner
/// trained only on the other folds. Propensity targets are clamped to
/// `[eps, 1 - eps]`.
pub fn crossfit_predict(
    learner: &LearnerSpec,
    features: &DMatrix<f64>,
    targets: &[f64],
    folds: &FoldPartition,
    target_kind: TargetKind,
    eps: f64,
) -> Result<CrossFitPredictions> {
    learner.validate()?;
    let n = features.nrows();
    if targets.len() != n || folds.n() != n {
        return Err(Error::config(format!(
            "crossfit: features have {n} rows, targets {}, folds cover {}",
            targets.len(),
            folds.n()
        )));
    }
    if target_kind.is_propensity() && !(eps > 0.0 && eps < 0.5) {
        return Err(Error::config("propensity_eps must lie in (0, 0.5)"));
    }
    let row = |i: usize| -> Vec<f64> { features.row(i).iter().copied().collect() };
    let mut values = vec![0.0; n];
    let mut diagnostics = Diagnostics {
        learner: learner.name(),
        ..Default::default()
    };

    if let LearnerSpec::Oracle(f) = learner {
        for (i, v) in values.iter_mut().enumerate() {
            *v = f.call(&row(i));
        }
    } else {
        let per_fold: Vec<Result<(Vec<f64>, bool)>> = (0..folds.k())
            .into_par_iter()
            .map(|k| {
                let train_idx = folds.complement(k);
                let x = rows_of(features, &train_idx);
                let y: Vec<f64> = train_idx.iter().map(|&i| targets[i]).collect();
                let (model, fallback) = train(learner, x, y)?;
                Ok((folds.folds()[k].iter().map(|&i| model.predict(&row(i))).collect(), fallback))
            })
            .collect();
        for (k, res) in per_fold.into_iter().enumerate() {
            let (preds, fallback) = res?;
            if fallback {
                diagnostics.constant_target_folds.push(k);
            }
            for (&i, p) in folds.folds()[k].iter().zip(preds) {
                values[i] = p;
            }
        }
    }

    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{target_kind:?}: non-finite prediction at row {i}")));
    }
    if target_kind.is_propensity() {
        for v in values.iter_mut() {
            let c = clamp_propensity(*v, eps);
            if c != *v {
                diagnostics.clamped += 1;
                *v = c;
            }
        }
    }
    Ok(CrossFitPredictions {
        values,
        target_kind,
        m2: None,
        diagnostics,
    })
}
