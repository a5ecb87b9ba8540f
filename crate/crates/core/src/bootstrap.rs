//! Perturbation (multiplier) bootstrap of the gram summaries and
//! pseudo-outcomes, and the quantile radii built from it.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{Dataset, Stage};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::stage_engine::{grad_stage1, grad_stage2, gram_hessian, pseudo_outcome, solve_normal, GramFlavor, GramPair, TwoStageFit};

pub const MIN_DRAWS: usize = 100;
/// Largest tolerated fraction of rejected (singular) draws.
pub const MAX_REJECTED_FRACTION: f64 = 0.01;

/// Multiplier distributions, each with mean one and variance one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiplierLaw {
    #[default]
    Exponential,
    TwoPoint,
    Normal,
}

impl MultiplierLaw {
    pub fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            MultiplierLaw::Exponential => Exp1.sample(rng),
            MultiplierLaw::TwoPoint => {
                if rng.random_bool(0.5) {
                    2.0
                } else {
                    0.0
                }
            }
            MultiplierLaw::Normal => {
                let z: f64 = StandardNormal.sample(rng);
                1.0 + z
            }
        }
    }

    /// Exact fourth central moment `E(ω−1)⁴`, used for Monte-Carlo error
    /// bounds on the sample variance.
    pub fn fourth_central_moment(self) -> f64 {
        match self {
            MultiplierLaw::Exponential => 9.0,
            MultiplierLaw::TwoPoint => 1.0,
            MultiplierLaw::Normal => 3.0,
        }
    }
}

pub fn draw_multipliers(n: usize, law: MultiplierLaw, stream: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| law.sample(stream)).collect()
}

/// Unscaled deviations and perturbed coefficients from one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawOutcome {
    pub d_g2: f64,
    pub d_h2: f64,
    pub d_g1: f64,
    pub d_h1: f64,
    pub theta2: DVector<f64>,
    pub theta1: DVector<f64>,
}

/// Perturbed gram summaries for one multiplier vector, with stage-2
/// coefficients re-solved at the selected model and the stage-1 pseudo-outcome
/// rebuilt from them. Nuisance predictions are held fixed.
pub fn perturbed_grams(fit: &TwoStageFit, dataset: &Dataset, multipliers: &[f64]) -> Result<(GramPair, GramPair, DVector<f64>)> {
    if multipliers.len() != dataset.n() {
        return Err(Error::config(format!(
            "bootstrap: {} multipliers for {} rows",
            multipliers.len(),
            dataset.n()
        )));
    }
    let nz = &fit.nuisances;
    let basis2 = dataset.basis(Stage::Two);
    let a2 = dataset.treatments(Stage::Two);
    let y = dataset.outcomes();
    let w = Some(multipliers);
    let gram2 = GramPair {
        g: grad_stage2(basis2, &a2, &nz.mu_a2.values, &y, &nz.mu_y2.values, w)?,
        h: gram_hessian(basis2, &a2, &nz.mu_a2.values, w)?,
        stage: Stage::Two,
        flavor: GramFlavor::Perturbed,
    };
    let theta2 = solve_normal(&gram2, &fit.stage2.model).map_err(|e| e.in_stage(2))?;
    let pseudo = pseudo_outcome(&y, &a2, basis2, &fit.stage2.model, &theta2)?;
    let basis1 = dataset.basis(Stage::One);
    let a1 = dataset.treatments(Stage::One);
    let gram1 = GramPair {
        g: grad_stage1(basis1, &a1, &nz.mu_a1.values, &pseudo, &nz.mu_y1, w)?,
        h: gram_hessian(basis1, &a1, &nz.mu_a1.values, w)?,
        stage: Stage::One,
        flavor: GramFlavor::Perturbed,
    };
    Ok((gram2, gram1, theta2))
}

pub fn one_bootstrap_draw(fit: &TwoStageFit, dataset: &Dataset, multipliers: &[f64]) -> Result<DrawOutcome> {
    let (gram2, gram1, theta2) = perturbed_grams(fit, dataset, multipliers)?;
    let theta1 = solve_normal(&gram1, &fit.stage1.model).map_err(|e| e.in_stage(1))?;
    Ok(DrawOutcome {
        d_g2: linalg::max_abs_diff_vec(&gram2.g, &fit.stage2.gram.g),
        d_h2: linalg::max_abs_diff_mat(&gram2.h, &fit.stage2.gram.h),
        d_g1: linalg::max_abs_diff_vec(&gram1.g, &fit.stage1.gram.g),
        d_h1: linalg::max_abs_diff_mat(&gram1.h, &fit.stage1.gram.h),
        theta2,
        theta1,
    })
}

/// Bootstrap deviation statistics, scaled by `√n`, plus the perturbed
/// coefficients of every accepted draw.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapDraws {
    pub n: usize,
    pub d_g_stage2: Vec<f64>,
    pub d_h_stage2: Vec<f64>,
    pub d_g_stage1: Vec<f64>,
    pub d_h_stage1: Vec<f64>,
    pub theta_stage2: Vec<DVector<f64>>,
    pub theta_stage1: Vec<DVector<f64>>,
    pub rejected: usize,
}

impl BootstrapDraws {
    pub fn b(&self) -> usize {
        self.d_g_stage2.len()
    }

    pub fn d_g(&self, stage: Stage) -> &[f64] {
        match stage {
            Stage::One => &self.d_g_stage1,
            Stage::Two => &self.d_g_stage2,
        }
    }

    pub fn d_h(&self, stage: Stage) -> &[f64] {
        match stage {
            Stage::One => &self.d_h_stage1,
            Stage::Two => &self.d_h_stage2,
        }
    }

    pub fn thetas(&self, stage: Stage) -> &[DVector<f64>] {
        match stage {
            Stage::One => &self.theta_stage1,
            Stage::Two => &self.theta_stage2,
        }
    }

    /// Writes `draw,dG2,dH2,dG1,dH1` rows.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "draw,dG2,dH2,dG1,dH1")?;
        for i in 0..self.b() {
            writeln!(
                w,
                "{i},{},{},{},{}",
                self.d_g_stage2[i], self.d_h_stage2[i], self.d_g_stage1[i], self.d_h_stage1[i]
            )?;
        }
        Ok(())
    }
}

/// Runs `b` accepted draws. Draw `i` uses its own counter-derived stream, so
/// the result does not depend on scheduling. Singular draws are rejected and
/// replaced by further indices; more than 1% rejections is an error.
pub fn run_bootstrap(fit: &TwoStageFit, dataset: &Dataset, b: usize, law: MultiplierLaw, seed: u64) -> Result<BootstrapDraws> {
    if b < MIN_DRAWS {
        return Err(Error::config(format!("bootstrap: B = {b} is below the minimum {MIN_DRAWS}")));
    }
    let n = dataset.n();
    let max_rejected = (MAX_REJECTED_FRACTION * b as f64).floor() as usize;
    let mut accepted: Vec<DrawOutcome> = Vec::with_capacity(b);
    let mut rejected = 0usize;
    let mut next = 0usize;
    while accepted.len() < b {
        let want = b - accepted.len();
        let batch: Vec<Result<DrawOutcome>> = (next..next + want)
            .into_par_iter()
            .map(|i| {
                let mut s = rng::stream(seed, rng::DOMAIN_BOOTSTRAP, i as u64);
                one_bootstrap_draw(fit, dataset, &draw_multipliers(n, law, &mut s))
            })
            .collect();
        next += want;
        for r in batch {
            match r {
                Ok(d) => accepted.push(d),
                Err(e) if matches!(e.root(), Error::Singular { .. }) => rejected += 1,
                Err(e) => return Err(e),
            }
        }
        if rejected > max_rejected {
            return Err(Error::BootstrapUnstable {
                rejected,
                attempted: next,
            });
        }
    }
    if rejected > 0 {
        log::info!("bootstrap: {rejected} singular draw(s) rejected");
    }
    let sq = (n as f64).sqrt();
    let col = |f: fn(&DrawOutcome) -> f64| accepted.iter().map(|d| f(d) * sq).collect::<Vec<_>>();
    Ok(BootstrapDraws {
        n,
        d_g_stage2: col(|d| d.d_g2),
        d_h_stage2: col(|d| d.d_h2),
        d_g_stage1: col(|d| d.d_g1),
        d_h_stage1: col(|d| d.d_h1),
        theta_stage2: accepted.iter().map(|d| d.theta2.clone()).collect(),
        theta_stage1: accepted.iter().map(|d| d.theta1.clone()).collect(),
        rejected,
    })
}

/// Index (1-based) of the conservative `(1−α)` order statistic among `b`
/// draws; zero means the quantile is taken as 0.
pub fn quantile_rank(b: usize, alpha: f64) -> usize {
    ((1.0 - alpha) * b as f64 - 1e-9).ceil().max(0.0) as usize
}

/// `⌈(1−α)B⌉`-th order statistic of `values`.
pub fn upper_quantile(values: &[f64], alpha: f64) -> f64 {
    let k = quantile_rank(values.len(), alpha).min(values.len());
    if k == 0 {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[k - 1]
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::config(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// Radius `C^G + C^H ‖θ̂‖₁` realized as one quantile of the combined
/// statistic `D^G + ‖θ̂‖₁ D^H`.
pub fn combined_radius(draws: &BootstrapDraws, stage: Stage, l1_norm: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let comb: Vec<f64> = draws
        .d_g(stage)
        .iter()
        .zip(draws.d_h(stage))
        .map(|(g, h)| g + l1_norm * h)
        .collect();
    Ok(upper_quantile(&comb, alpha) / (draws.n as f64).sqrt())
}

/// Radius for the design-conditional target: quantile of `D^G` alone.
pub fn conditional_radius(draws: &BootstrapDraws, stage: Stage, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(upper_quantile(draws.d_g(stage), alpha) / (draws.n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn draws_from(dg: Vec<f64>, dh: Vec<f64>, n: usize) -> BootstrapDraws {
        BootstrapDraws {
            n,
            d_g_stage1: dg.clone(),
            d_h_stage1: dh.clone(),
            d_g_stage2: dg,
            d_h_stage2: dh,
            theta_stage1: vec![],
            theta_stage2: vec![],
            rejected: 0,
        }
    }

    #[test]
    fn multiplier_supports() {
        let mut s = rng::stream(1, rng::DOMAIN_BOOTSTRAP, 0);
        assert!(draw_multipliers(1000, MultiplierLaw::TwoPoint, &mut s).iter().all(|w| *w == 0.0 || *w == 2.0));
        assert!(draw_multipliers(1000, MultiplierLaw::Exponential, &mut s).iter().all(|w| *w > 0.0));
    }

    #[test]
    fn multiplier_mean_clt_bound() {
        for law in [MultiplierLaw::Exponential, MultiplierLaw::TwoPoint, MultiplierLaw::Normal] {
            let mut s = rng::stream(2, rng::DOMAIN_BOOTSTRAP, 0);
            let w = draw_multipliers(100_000, law, &mut s);
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            assert!((mean - 1.0).abs() < 4.0 / (1e5f64).sqrt(), "{law:?}: {mean}");
        }
    }

    #[test]
    fn constant_draws_give_exact_radius() {
        let d = draws_from(vec![3.0; 200], vec![1.0; 200], 16);
        for alpha in [0.01, 0.05, 0.5, 0.9] {
            assert_eq!(conditional_radius(&d, Stage::Two, alpha).unwrap(), 0.75);
            assert_eq!(combined_radius(&d, Stage::Two, 2.0, alpha).unwrap(), 1.25);
        }
    }

    #[test]
    fn order_statistic_recount() {
        let mut s = rng::stream(3, rng::DOMAIN_BOOTSTRAP, 0);
        let dg: Vec<f64> = (0..1000).map(|_| s.random::<f64>()).collect();
        let dh: Vec<f64> = (0..1000).map(|_| s.random::<f64>()).collect();
        let d = draws_from(dg.clone(), dh.clone(), 100);
        let mut comb: Vec<f64> = dg.iter().zip(&dh).map(|(g, h)| g + 0.7 * h).collect();
        comb.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(combined_radius(&d, Stage::One, 0.7, 0.05).unwrap(), comb[949] / 10.0);
        assert_eq!(combined_radius(&d, Stage::One, 0.0, 0.05).unwrap(), conditional_radius(&d, Stage::One, 0.05).unwrap());
    }

    #[test]
    fn median_and_alpha_checks() {
        let d = draws_from((1..=200).map(f64::from).collect(), vec![0.0; 200], 1);
        assert_eq!(conditional_radius(&d, Stage::Two, 0.5).unwrap(), 100.0);
        assert_eq!(conditional_radius(&d, Stage::Two, 1.0).unwrap(), 0.0);
        assert!(conditional_radius(&d, Stage::Two, 0.0).is_err());
        assert!(conditional_radius(&d, Stage::Two, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn conditional_never_exceeds_combined(
            dg in proptest::collection::vec(0.0f64..10.0, 100..300),
            l1 in 0.0f64..20.0,
            alpha in 0.001f64..0.999,
            seed in any::<u64>(),
        ) {
            let mut s = rng::stream(seed, 9, 0);
            let dh: Vec<f64> = dg.iter().map(|_| s.random_range(0.0..5.0)).collect();
            let d = draws_from(dg, dh, 50);
            prop_assert!(conditional_radius(&d, Stage::Two, alpha).unwrap() <= combined_radius(&d, Stage::Two, l1, alpha).unwrap());
        }

        #[test]
        fn radius_monotone_in_alpha(
            dg in proptest::collection::vec(0.0f64..10.0, 100..300),
            a1 in 0.001f64..0.999,
            a2 in 0.001f64..0.999,
        ) {
            let d = draws_from(dg.clone(), vec![0.0; dg.len()], 9);
            let (lo, hi) = (a1.min(a2), a1.max(a2));
            prop_assert!(conditional_radius(&d, Stage::One, hi).unwrap() <= conditional_radius(&d, Stage::One, lo).unwrap());
        }
    }
}
