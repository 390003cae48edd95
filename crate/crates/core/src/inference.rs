//! Uncertainty quantification: analytic normal intervals, the parametric
//! spatial bootstrap (decorrelate residuals, resample, recorrelate, refit),
//! and subsampling standard errors.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::{CovParams, FitResult};
use crate::geometry::LocationSet;
use crate::kernels::{covariance_matrix, KernelFamily, KernelSpec};
use crate::linalg::spd_factor;
use crate::rng::RngStream;
use crate::vecchia::{VecchiaFactor, VecchiaPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    Analytic,
    ParametricBootstrap,
    Subsample,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IntervalSpec {
    pub level: f64,
    pub method: CiMethod,
    pub replicates: usize,
}

impl IntervalSpec {
    pub fn analytic(level: f64) -> Self {
        IntervalSpec { level, method: CiMethod::Analytic, replicates: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidParameter {
                name: "level",
                value: self.level,
                requirement: "in (0, 1)",
            });
        }
        if self.method != CiMethod::Analytic && self.replicates < 50 {
            return Err(Error::InvalidParameter {
                name: "replicates",
                value: self.replicates as f64,
                requirement: ">= 50 for resampling methods",
            });
        }
        Ok(())
    }
}

/// Two-sided standard normal quantile for a coverage level.
pub fn normal_quantile(level: f64) -> f64 {
    let dist = Normal::new(0.0, 1.0).unwrap();
    dist.inverse_cdf(0.5 + level / 2.0)
}

/// beta_hat +/- z * se.
pub fn analytic_ci(fit: &FitResult, level: f64) -> Result<(f64, f64)> {
    let se = fit.se.ok_or(Error::MissingSe)?;
    let z = normal_quantile(level);
    Ok((fit.beta_hat - z * se, fit.beta_hat + z * se))
}

/// Parametric spatial bootstrap for a GLS fit with covariance `cov` (family
/// plus fitted parameters). Residuals are whitened by the fitted factor,
/// resampled with replacement, recolored, and beta refit under the same
/// fitted covariance. Returns (se, percentile or normal-theory CI).
pub fn parametric_spatial_bootstrap(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    locations: &LocationSet,
    family: KernelFamily,
    cov: &CovParams,
    replicates: usize,
    level: f64,
    normal_theory: bool,
    rng: &mut RngStream,
) -> Result<(f64, (f64, f64))> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n || locations.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len().min(locations.len()) });
    }
    // A zero range parameter only ever arises with zero spatial variance
    // (i.i.d. residual bootstrap); substitute a valid placeholder scale.
    let scale = if cov.scale > 0.0 { cov.scale } else { 1.0 };
    let spec = KernelSpec::new(family, cov.gamma2, scale, cov.nugget)?;
    let sigma = covariance_matrix(&spec, locations)?;
    let f = spd_factor(&sigma)?;

    // Whitened design and GLS point estimate under the fitted covariance.
    let xs: Vec<Array1<f64>> = (0..p)
        .map(|j| f.solve_lower(x.column(j)))
        .collect::<Result<_>>()?;
    let ys = f.solve_lower(y)?;
    bootstrap_from_whitened(&xs, &ys, replicates, level, normal_theory, rng)
}

/// Same bootstrap, but whitening with the nearest-neighbor factor used by
/// the Vecchia GLS fit, so the bootstrap center coincides with that fit's
/// point estimate.
pub fn parametric_vecchia_bootstrap(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    locations: &LocationSet,
    family: KernelFamily,
    cov: &CovParams,
    m: usize,
    replicates: usize,
    level: f64,
    normal_theory: bool,
    rng: &mut RngStream,
) -> Result<(f64, (f64, f64))> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n || locations.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len().min(locations.len()) });
    }
    let scale = if cov.scale > 0.0 { cov.scale } else { 1.0 };
    let spec = KernelSpec::new(family, cov.gamma2, scale, cov.nugget)?;
    let plan = VecchiaPlan::new(locations, m)?;
    let vf = VecchiaFactor::new(&plan, &spec)?;
    let xs: Vec<Array1<f64>> = (0..p)
        .map(|j| vf.decorrelate(x.column(j)))
        .collect::<Result<_>>()?;
    let ys = vf.decorrelate(y)?;
    bootstrap_from_whitened(&xs, &ys, replicates, level, normal_theory, rng)
}

/// Residual bootstrap in whitened coordinates: refit the GLS slope on
/// resampled whitened residuals. beta* = beta + A^-1 Xs' e*, so each
/// replicate costs O(np) under the fixed fitted covariance.
fn bootstrap_from_whitened(
    xs: &[Array1<f64>],
    ys: &Array1<f64>,
    replicates: usize,
    level: f64,
    normal_theory: bool,
    rng: &mut RngStream,
) -> Result<(f64, (f64, f64))> {
    let p = xs.len();
    let n = ys.len();
    let mut a = Array2::zeros((p, p));
    let mut b = Array1::zeros(p);
    for i in 0..p {
        for j in 0..=i {
            let v = xs[i].dot(&xs[j]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
        b[i] = xs[i].dot(ys);
    }
    let fa = spd_factor(&a)?;
    let beta = fa.solve(b.view())?;

    // Whitened residuals; under the model these are i.i.d.
    let mut e = ys.clone();
    for j in 0..p {
        e.scaled_add(-beta[j], &xs[j]);
    }

    let mut estimates = Vec::with_capacity(replicates);
    for rep in 0..replicates {
        let mut r = rng.substream(rep as u64);
        let mut estar = Array1::zeros(n);
        for i in 0..n {
            estar[i] = e[r.index(n)];
        }
        let mut xe = Array1::zeros(p);
        for j in 0..p {
            xe[j] = xs[j].dot(&estar);
        }
        let delta = fa.solve(xe.view())?;
        estimates.push(beta[0] + delta[0]);
    }

    summarize_replicates(&estimates, beta[0], level, normal_theory)
}

fn summarize_replicates(
    estimates: &[f64],
    center: f64,
    level: f64,
    normal_theory: bool,
) -> Result<(f64, (f64, f64))> {
    let m = estimates.len();
    if m < 2 {
        return Err(Error::InvalidParameter {
            name: "replicates",
            value: m as f64,
            requirement: ">= 2",
        });
    }
    let mean = estimates.iter().sum::<f64>() / m as f64;
    let var = estimates.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / (m - 1) as f64;
    let se = var.sqrt();
    let ci = if normal_theory {
        let z = normal_quantile(level);
        (center - z * se, center + z * se)
    } else {
        let mut sorted = estimates.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let alpha = (1.0 - level) / 2.0;
        let lo_idx = ((alpha * m as f64).floor() as usize).min(m - 1);
        let hi_idx = (((1.0 - alpha) * m as f64).ceil() as usize)
            .saturating_sub(1)
            .min(m - 1);
        (sorted[lo_idx], sorted[hi_idx])
    };
    Ok((se, ci))
}

/// Subsampling standard error: refit on `reps` random subsets of size
/// fraction * n, rescale the sd of the estimates by sqrt(b/n), and return a
/// normal-theory CI around the full-sample estimate. When `groups` is given,
/// whole groups are drawn so within-group structure survives.
pub fn subsample_se<F>(
    n: usize,
    groups: Option<&[usize]>,
    fraction: f64,
    reps: usize,
    point_estimate: f64,
    level: f64,
    rng: &mut RngStream,
    mut refit: F,
) -> Result<(f64, (f64, f64))>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "fraction",
            value: fraction,
            requirement: "in (0, 1]",
        });
    }
    let b = ((fraction * n as f64).round() as usize).max(1);
    if b < 30 && fraction < 1.0 {
        return Err(Error::InvalidParameter {
            name: "fraction",
            value: fraction,
            requirement: "fraction * n >= 30",
        });
    }

    let mut estimates = Vec::with_capacity(reps);
    for rep in 0..reps {
        let mut r = rng.substream(rep as u64);
        let rows: Vec<usize> = match groups {
            None => {
                // Sample b distinct rows by partial Fisher-Yates.
                let mut idx: Vec<usize> = (0..n).collect();
                for i in 0..b {
                    let j = i + r.index(n - i);
                    idx.swap(i, j);
                }
                let mut take = idx[..b].to_vec();
                take.sort_unstable();
                take
            }
            Some(gids) => {
                let mut unique: Vec<usize> = gids.to_vec();
                unique.sort_unstable();
                unique.dedup();
                let m = unique.len();
                let gtake = ((fraction * m as f64).round() as usize).clamp(1, m);
                let mut idx: Vec<usize> = (0..m).collect();
                for i in 0..gtake {
                    let j = i + r.index(m - i);
                    idx.swap(i, j);
                }
                let chosen: std::collections::BTreeSet<usize> =
                    idx[..gtake].iter().map(|&i| unique[i]).collect();
                (0..n).filter(|&i| chosen.contains(&gids[i])).collect()
            }
        };
        estimates.push(refit(&rows)?);
    }

    let m = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / m;
    let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (m - 1.0);
    let se = var.sqrt() * (b as f64 / n as f64).sqrt();
    let z = normal_quantile(level);
    Ok((se, (point_estimate - z * se, point_estimate + z * se)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{fit_gls_profile, fit_ols, Method};
    use crate::geometry::sample_uniform_square;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn analytic_interval_quantile() {
        let mut fit = FitResult {
            method: Method::Ols,
            beta_hat: 0.0,
            se: Some(1.0),
            ci: None,
            cov_params: None,
            diagnostics: Default::default(),
        };
        let (lo, hi) = analytic_ci(&fit, 0.95).unwrap();
        assert_abs_diff_eq!(lo, -1.959964, epsilon = 1e-6);
        assert_abs_diff_eq!(hi, 1.959964, epsilon = 1e-6);

        let (lo50, hi50) = analytic_ci(&fit, 0.5).unwrap();
        assert!(lo < lo50 && hi50 < hi);

        fit.se = None;
        assert!(matches!(analytic_ci(&fit, 0.95), Err(Error::MissingSe)));
    }

    #[test]
    fn interval_spec_validation() {
        assert!(IntervalSpec::analytic(0.95).validate().is_ok());
        assert!(IntervalSpec { level: 1.2, ..IntervalSpec::analytic(0.95) }
            .validate()
            .is_err());
        let sub = IntervalSpec { level: 0.95, method: CiMethod::Subsample, replicates: 10 };
        assert!(sub.validate().is_err());
    }

    fn spatial_dataset(
        seed: u64,
        n: usize,
    ) -> (Array2<f64>, Array1<f64>, LocationSet) {
        let mut rng = RngStream::new(seed, 0);
        let l = sample_uniform_square(n, 0.0, 10.0, &mut rng).unwrap();
        let spec = KernelSpec::new(KernelFamily::Exponential, 1.0, 0.5, 0.0).unwrap();
        let f = spd_factor(&{
            let mut s = covariance_matrix(&spec, &l).unwrap();
            for i in 0..n {
                s[[i, i]] += 1e-8;
            }
            s
        })
        .unwrap();
        let g = f
            .multiply_lower(Array1::from(rng.normal_vec(n)).view())
            .unwrap();
        let mut x = Array2::zeros((n, 2));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            x[[i, 0]] = rng.standard_normal();
            x[[i, 1]] = 1.0;
            y[i] = x[[i, 0]] + g[i] + 0.5 * rng.standard_normal();
        }
        (x, y, l)
    }

    #[test]
    fn bootstrap_deterministic_and_covers_center() {
        let (x, y, l) = spatial_dataset(51, 150);
        let fit = fit_gls_profile(x.view(), y.view(), &l, KernelFamily::Exponential).unwrap();
        let cov = fit.cov_params.unwrap();
        let mut r1 = RngStream::new(52, 0);
        let (se1, ci1) = parametric_spatial_bootstrap(
            x.view(), y.view(), &l, KernelFamily::Exponential, &cov, 200, 0.95, false, &mut r1,
        )
        .unwrap();
        let mut r2 = RngStream::new(52, 0);
        let (se2, ci2) = parametric_spatial_bootstrap(
            x.view(), y.view(), &l, KernelFamily::Exponential, &cov, 200, 0.95, false, &mut r2,
        )
        .unwrap();
        assert_eq!(se1, se2);
        assert_eq!(ci1, ci2);
        assert!(se1 > 0.0);
        assert!(ci1.0 < fit.beta_hat && fit.beta_hat < ci1.1);
    }

    #[test]
    fn bootstrap_reduces_to_iid_when_spatial_variance_zero() {
        let (x, y, l) = spatial_dataset(53, 120);
        let ols = fit_ols(x.view(), y.view()).unwrap();
        let cov = CovParams { gamma2: 0.0, scale: 0.0, nugget: 1.0 };
        let mut rng = RngStream::new(54, 0);
        let (se, _) = parametric_spatial_bootstrap(
            x.view(), y.view(), &l, KernelFamily::Exponential, &cov, 400, 0.95, false, &mut rng,
        )
        .unwrap();
        // i.i.d. residual bootstrap SE should land near the OLS analytic SE.
        let target = ols.se.unwrap();
        assert!(
            (se - target).abs() <= 0.35 * target,
            "bootstrap se {se} vs analytic {target}"
        );
    }

    #[test]
    fn subsample_constant_estimator_has_zero_se() {
        let mut rng = RngStream::new(55, 0);
        let (se, ci) = subsample_se(500, None, 0.2, 60, 1.0, 0.95, &mut rng, |_rows| Ok(2.5))
            .unwrap();
        assert_eq!(se, 0.0);
        assert_eq!(ci, (1.0, 1.0));
    }

    #[test]
    fn subsample_full_fraction_degenerate() {
        let mut rng = RngStream::new(56, 0);
        let data: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let (se, _) = subsample_se(100, None, 1.0, 50, 0.0, 0.95, &mut rng, |rows| {
            Ok(rows.iter().map(|&i| data[i]).sum::<f64>() / rows.len() as f64)
        })
        .unwrap();
        assert_eq!(se, 0.0);
    }

    #[test]
    fn subsample_draws_whole_groups() {
        let n = 200;
        let groups: Vec<usize> = (0..n).map(|i| i / 10 + 1).collect();
        let mut rng = RngStream::new(57, 0);
        let (_, _) = subsample_se(n, Some(&groups), 0.25, 50, 0.0, 0.95, &mut rng, |rows| {
            // every selected group must be complete
            let mut counts = std::collections::BTreeMap::new();
            for &i in rows {
                *counts.entry(groups[i]).or_insert(0usize) += 1;
            }
            for (_, c) in counts {
                assert_eq!(c, 10);
            }
            Ok(0.0)
        })
        .unwrap();
    }

    #[test]
    fn subsample_matches_iid_sampling_theory() {
        // Sample mean of N(0,1): SE of the full-sample mean is 1/sqrt(n);
        // the subsampling estimate should approximate it.
        let mut rng = RngStream::new(58, 0);
        let n = 1000;
        let data: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let (se, _) = subsample_se(n, None, 0.1, 200, 0.0, 0.95, &mut rng, |rows| {
            Ok(rows.iter().map(|&i| data[i]).sum::<f64>() / rows.len() as f64)
        })
        .unwrap();
        let target = 1.0 / (n as f64).sqrt();
        assert!((se - target).abs() <= 0.5 * target, "se {se} vs {target}");
    }
}
