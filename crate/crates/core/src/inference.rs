//! Confidence regions, interval half-lengths, naive baseline intervals and
//! the null test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bootstrap::{combined_radius, conditional_radius, upper_quantile, BootstrapDraws};
use crate::data_model::{ModelSet, Stage};
use crate::error::{Error, Result};
use crate::linalg;
use crate::stage_engine::StageFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalFlavor {
    UposiHyperrect,
    UposiCoord,
    UposiCoordConditional,
    Naive,
}

impl IntervalFlavor {
    pub const ALL: [IntervalFlavor; 4] = [
        IntervalFlavor::UposiHyperrect,
        IntervalFlavor::UposiCoord,
        IntervalFlavor::UposiCoordConditional,
        IntervalFlavor::Naive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IntervalFlavor::UposiHyperrect => "uposi-hyperrect",
            IntervalFlavor::UposiCoord => "uposi-coord",
            IntervalFlavor::UposiCoordConditional => "uposi-coord-conditional",
            IntervalFlavor::Naive => "naive",
        }
    }
}

impl std::fmt::Display for IntervalFlavor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Symmetric intervals `center ± half_length`, one per model coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSet {
    pub model: ModelSet,
    pub centers: DVector<f64>,
    pub half_lengths: DVector<f64>,
    pub flavor: IntervalFlavor,
}

impl IntervalSet {
    pub fn lower(&self, j: usize) -> f64 {
        self.centers[j] - self.half_lengths[j]
    }

    pub fn upper(&self, j: usize) -> f64 {
        self.centers[j] + self.half_lengths[j]
    }

    /// Per-coordinate coverage of `target`.
    pub fn covers(&self, target: &DVector<f64>) -> Vec<bool> {
        (0..self.centers.len())
            .map(|j| (self.centers[j] - target[j]).abs() <= self.half_lengths[j])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionStatistic {
    HWeighted,
    DiagonalWeighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpec {
    pub model: ModelSet,
    pub theta_hat: DVector<f64>,
    pub h_hat_sub: DMatrix<f64>,
    pub radius: f64,
    pub statistic: RegionStatistic,
}

impl RegionSpec {
    pub fn from_fit(fit: &StageFit, radius: f64, statistic: RegionStatistic) -> Self {
        Self {
            model: fit.model.clone(),
            theta_hat: fit.theta.clone(),
            h_hat_sub: fit.h_sub(),
            radius,
            statistic,
        }
    }

    /// Value of the region's statistic at `theta`.
    pub fn statistic_at(&self, theta: &DVector<f64>) -> Result<f64> {
        if theta.len() != self.theta_hat.len() {
            return Err(Error::config("region: dimension mismatch"));
        }
        let diff = &self.theta_hat - theta;
        Ok(match self.statistic {
            RegionStatistic::HWeighted => linalg::max_abs((&self.h_hat_sub * diff).iter().copied()),
            RegionStatistic::DiagonalWeighted => {
                let inv = linalg::inverse_spd(&self.h_hat_sub, &self.model)?;
                linalg::max_abs(diff.iter().enumerate().map(|(j, d)| d / inv[(j, j)]))
            }
        })
    }
}

pub fn region_contains(spec: &RegionSpec, theta: &DVector<f64>) -> Result<bool> {
    Ok(spec.statistic_at(theta)? <= spec.radius)
}

fn check_radius(radius: f64) -> Result<()> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::config(format!("radius must be finite and nonnegative, got {radius}")));
    }
    Ok(())
}

/// `L†_j = ‖e_jᵀ h⁻¹‖₁ · radius`: the hyperrectangle enclosing the region.
pub fn hyperrect_halflengths(fit: &StageFit, radius: f64) -> Result<IntervalSet> {
    check_radius(radius)?;
    let inv = &fit.h_inv;
    Ok(IntervalSet {
        model: fit.model.clone(),
        centers: fit.theta.clone(),
        half_lengths: DVector::from_fn(inv.nrows(), |j, _| inv.row(j).iter().map(|v| v.abs()).sum::<f64>() * radius),
        flavor: IntervalFlavor::UposiHyperrect,
    })
}

fn diagonal_halflengths(fit: &StageFit, radius: f64, flavor: IntervalFlavor) -> Result<IntervalSet> {
    check_radius(radius)?;
    let inv = &fit.h_inv;
    Ok(IntervalSet {
        model: fit.model.clone(),
        centers: fit.theta.clone(),
        half_lengths: DVector::from_fn(inv.nrows(), |j, _| inv[(j, j)].abs() * radius),
        flavor,
    })
}

/// `L_j = |e_jᵀ h⁻¹ e_j| · radius`.
pub fn coord_halflengths(fit: &StageFit, radius: f64) -> Result<IntervalSet> {
    diagonal_halflengths(fit, radius, IntervalFlavor::UposiCoord)
}

/// Coordinate intervals at the conditional radius.
pub fn conditional_halflengths(fit: &StageFit, cond_radius: f64) -> Result<IntervalSet> {
    diagonal_halflengths(fit, cond_radius, IntervalFlavor::UposiCoordConditional)
}

/// Marginal intervals that ignore selection: half-length is the `(1−α)`
/// quantile of `|θ̂ᵇ_j − θ̂_j|` over draws.
pub fn naive_intervals(fit: &StageFit, theta_b: &[DVector<f64>], alpha: f64) -> Result<IntervalSet> {
    if theta_b.len() < crate::bootstrap::MIN_DRAWS {
        return Err(Error::config(format!(
            "naive intervals need at least {} draws, got {}",
            crate::bootstrap::MIN_DRAWS,
            theta_b.len()
        )));
    }
    let p = fit.theta.len();
    if theta_b.iter().any(|t| t.len() != p) {
        return Err(Error::config("naive intervals: draw dimension mismatch"));
    }
    let half = DVector::from_fn(p, |j, _| {
        let dev: Vec<f64> = theta_b.iter().map(|t| (t[j] - fit.theta[j]).abs()).collect();
        upper_quantile(&dev, alpha)
    });
    Ok(IntervalSet {
        model: fit.model.clone(),
        centers: fit.theta.clone(),
        half_lengths: half,
        flavor: IntervalFlavor::Naive,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NullTestOutcome {
    Reject,
    Retain,
}

/// Test of `θ = 0`: reject iff `‖h(model) θ̂‖∞` exceeds the radius computed
/// with the hypothesized ℓ1 norm (zero).
pub fn test_null_zero(fit: &StageFit, radius_at_zero: f64) -> NullTestOutcome {
    let stat = linalg::max_abs((fit.h_sub() * &fit.theta).iter().copied());
    if stat > radius_at_zero {
        NullTestOutcome::Reject
    } else {
        NullTestOutcome::Retain
    }
}

/// Test of a general point null `θ = θ0`: the region radius is evaluated at
/// `‖θ0‖₁` and the statistic is `‖h(model)(θ̂ − θ0)‖∞`.
pub fn test_point_null(fit: &StageFit, theta0: &DVector<f64>, draws: &BootstrapDraws, alpha: f64) -> Result<NullTestOutcome> {
    if theta0.len() != fit.theta.len() {
        return Err(Error::config("point null has the wrong dimension"));
    }
    let radius = combined_radius(draws, fit.stage(), linalg::l1_norm(theta0), alpha)?;
    let stat = linalg::max_abs((fit.h_sub() * (&fit.theta - theta0)).iter().copied());
    Ok(if stat > radius {
        NullTestOutcome::Reject
    } else {
        NullTestOutcome::Retain
    })
}

/// Least-squares solution restricted to `θ_j = t`:
/// `θ̂ʳ = θ̂ + h⁻¹ e_j (t − θ̂_j) / (h⁻¹)_jj`.
pub fn restricted_ls(fit: &StageFit, j: usize, t: f64) -> Result<DVector<f64>> {
    restricted_ls_raw(&fit.h_sub(), &fit.theta, j, t, &fit.model)
}

pub fn restricted_ls_raw(h: &DMatrix<f64>, theta_hat: &DVector<f64>, j: usize, t: f64, model: &ModelSet) -> Result<DVector<f64>> {
    if j >= theta_hat.len() {
        return Err(Error::config(format!("coordinate {j} out of range")));
    }
    let inv = linalg::inverse_spd(h, model)?;
    let col = inv.column(j).into_owned();
    Ok(theta_hat + col * ((t - theta_hat[j]) / inv[(j, j)]))
}

/// All interval flavors for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageInference {
    pub stage: Stage,
    pub combined_radius: f64,
    pub conditional_radius: f64,
    pub hyperrect: IntervalSet,
    pub coord: IntervalSet,
    pub conditional: IntervalSet,
    pub naive: IntervalSet,
    pub null_test: NullTestOutcome,
}

impl StageInference {
    pub fn intervals(&self) -> [&IntervalSet; 4] {
        [&self.hyperrect, &self.coord, &self.conditional, &self.naive]
    }
}

pub fn stage_inference(fit: &StageFit, draws: &BootstrapDraws, alpha: f64) -> Result<StageInference> {
    let stage = fit.stage();
    let comb = combined_radius(draws, stage, fit.l1_norm, alpha)?;
    let cond = conditional_radius(draws, stage, alpha)?;
    Ok(StageInference {
        stage,
        combined_radius: comb,
        conditional_radius: cond,
        hyperrect: hyperrect_halflengths(fit, comb)?,
        coord: coord_halflengths(fit, comb)?,
        conditional: conditional_halflengths(fit, cond)?,
        naive: naive_intervals(fit, draws.thetas(stage), alpha)?,
        null_test: test_null_zero(fit, cond),
    })
}
