//! Effect estimators for the partially linear model, all returning a
//! uniform [`FitResult`].
//!
//! The exposure of interest is column 0 of the design matrix; `beta_hat`
//! is always its coefficient. Spline-based fits expect the polynomial
//! block (intercept + linear coordinates) to come from the basis, so the
//! design passed to them is typically the bare exposure column.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::geometry::LocationSet;
use crate::kernels::{kernel_eval, KernelFamily, KernelSpec};
use crate::linalg::{spd_factor, SpdFactor};
use crate::smoothers::{
    penalized_lsq, select_lambda_gcv, select_lambda_gcv_design, SplineBasis,
};
use crate::vecchia::{VecchiaFactor, VecchiaPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Ols,
    Rsr,
    GlsKnown,
    GlsProfile,
    GlsVecchia,
    GpRidge,
    Gam,
    GamFx,
    SpatialPlus,
    GroupedRe,
}

impl Method {
    pub fn id(&self) -> &'static str {
        match self {
            Method::Ols => "ols",
            Method::Rsr => "rsr",
            Method::GlsKnown => "gls_known",
            Method::GlsProfile => "gls_profile",
            Method::GlsVecchia => "gls_vecchia",
            Method::GpRidge => "gp_ridge",
            Method::Gam => "gam",
            Method::GamFx => "gam_fx",
            Method::SpatialPlus => "spatial_plus",
            Method::GroupedRe => "grouped_re",
        }
    }

    pub fn from_id(id: &str) -> Result<Method> {
        Ok(match id {
            "ols" => Method::Ols,
            "rsr" => Method::Rsr,
            "gls_known" => Method::GlsKnown,
            "gls_profile" => Method::GlsProfile,
            "gls_vecchia" => Method::GlsVecchia,
            "gp_ridge" => Method::GpRidge,
            "gam" => Method::Gam,
            "gam_fx" => Method::GamFx,
            "spatial_plus" => Method::SpatialPlus,
            "grouped_re" => Method::GroupedRe,
            other => return Err(Error::Config(format!("unknown estimator id: {other}"))),
        })
    }
}

/// Fitted covariance parameters of a spatial or random-effects model.
#[derive(Debug, Clone, Copy)]
pub struct CovParams {
    pub gamma2: f64,
    /// Range/lengthscale parameter; 0 for models without one (grouped RE).
    pub scale: f64,
    pub nugget: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub method: Method,
    pub beta_hat: f64,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub cov_params: Option<CovParams>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl FitResult {
    fn new(method: Method, beta_hat: f64) -> Self {
        FitResult {
            method,
            beta_hat,
            se: None,
            ci: None,
            cov_params: None,
            diagnostics: BTreeMap::new(),
        }
    }

    /// se is only recorded when strictly positive and finite.
    fn set_se(&mut self, se: f64) {
        if se.is_finite() && se > 0.0 {
            self.se = Some(se);
        }
    }
}

fn check_xy(x: &ArrayView2<f64>, y: &ArrayView1<f64>) -> Result<(usize, usize)> {
    let n = x.nrows();
    let p = x.ncols();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if p == 0 || n <= p {
        return Err(Error::RankDeficient(format!(
            "design is {n} x {p}; need n > p >= 1"
        )));
    }
    Ok((n, p))
}

fn factor_normal_equations(a: &Array2<f64>) -> Result<SpdFactor> {
    spd_factor(a).map_err(|e| match e {
        Error::NotPositiveDefinite { index, .. } => {
            Error::RankDeficient(format!("normal equations singular at column {index}"))
        }
        other => other,
    })
}

// ---------------------------------------------------------------------------
// OLS and RSR
// ---------------------------------------------------------------------------

pub fn fit_ols(x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<FitResult> {
    let (n, p) = check_xy(&x, &y)?;
    let xtx = x.t().dot(&x);
    let f = factor_normal_equations(&xtx)?;
    let coef = f.solve(x.t().dot(&y).view())?;
    let fitted = x.dot(&coef);
    let rss: f64 = y
        .iter()
        .zip(fitted.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let sigma2 = rss / (n - p) as f64;

    let mut e0 = Array1::zeros(p);
    e0[0] = 1.0;
    let inv_col0 = f.solve(e0.view())?;
    let mut out = FitResult::new(Method::Ols, coef[0]);
    out.set_se((sigma2 * inv_col0[0]).sqrt());
    out.diagnostics.insert("rss".into(), rss);
    out.diagnostics.insert("sigma2_hat".into(), sigma2);
    Ok(out)
}

/// Restricted spatial regression: the basis is projected onto the orthogonal
/// complement of the column space of X before the joint fit, so the point
/// estimate coincides with OLS.
pub fn fit_rsr(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    basis: &SplineBasis,
) -> Result<FitResult> {
    let (n, p) = check_xy(&x, &y)?;
    if basis.n() != n && basis.rank() > 0 {
        return Err(Error::DimensionMismatch { expected: n, got: basis.n() });
    }
    let xtx = x.t().dot(&x);
    let fx = factor_normal_equations(&xtx)?;

    // Project basis columns off X, then orthonormalize them against each
    // other; columns that collapse are dropped (they carry no information
    // beyond X's span).
    let mut kept: Vec<Array1<f64>> = Vec::new();
    let mut dropped = 0usize;
    for j in 0..basis.rank() {
        let b = basis.design.column(j).to_owned();
        let norm0 = b.dot(&b).sqrt();
        if norm0 == 0.0 {
            dropped += 1;
            continue;
        }
        let mut v = b;
        // Two projection passes for numerical orthogonality.
        for _ in 0..2 {
            let proj = fx.solve(x.t().dot(&v).view())?;
            v = &v - &x.dot(&proj);
            for q in &kept {
                let c = q.dot(&v);
                v.scaled_add(-c, q);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm <= 1e-8 * norm0 {
            dropped += 1;
            continue;
        }
        kept.push(&v / norm);
    }

    let q = kept.len();
    let mut m = Array2::zeros((n, p + q));
    m.slice_mut(s![.., ..p]).assign(&x);
    for (j, col) in kept.iter().enumerate() {
        m.column_mut(p + j).assign(col);
    }
    if n <= p + q {
        return Err(Error::RankDeficient(format!(
            "joint design is {n} x {}; need n > columns",
            p + q
        )));
    }
    let mtm = m.t().dot(&m);
    let fm = factor_normal_equations(&mtm)?;
    let coef = fm.solve(m.t().dot(&y).view())?;
    let fitted = m.dot(&coef);
    let rss: f64 = y
        .iter()
        .zip(fitted.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let sigma2 = rss / (n - p - q) as f64;
    let mut e0 = Array1::zeros(p + q);
    e0[0] = 1.0;
    let inv_col0 = fm.solve(e0.view())?;

    let mut out = FitResult::new(Method::Rsr, coef[0]);
    out.set_se((sigma2 * inv_col0[0]).sqrt());
    out.diagnostics.insert("rss".into(), rss);
    out.diagnostics.insert("sigma2_hat".into(), sigma2);
    out.diagnostics.insert("dropped_columns".into(), dropped as f64);
    Ok(out)
}

// ---------------------------------------------------------------------------
// GLS family
// ---------------------------------------------------------------------------

/// GLS normal equations from decorrelated columns: A = Xw' Xw, b = Xw' yw
/// where Xw, yw are the whitened design and response.
fn gls_core(xs: &[Array1<f64>], ys: &Array1<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let p = xs.len();
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
    let f = factor_normal_equations(&a)?;
    let coef = f.solve(b.view())?;
    let a_inv = f.inverse()?;
    Ok((coef, a_inv))
}

pub fn fit_gls_known(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    f: &SpdFactor,
) -> Result<FitResult> {
    let (n, p) = check_xy(&x, &y)?;
    if f.n() != n {
        return Err(Error::DimensionMismatch { expected: n, got: f.n() });
    }
    let xs: Vec<Array1<f64>> = (0..p)
        .map(|j| f.solve_lower(x.column(j)))
        .collect::<Result<_>>()?;
    let ys = f.solve_lower(y)?;
    let (coef, a_inv) = gls_core(&xs, &ys)?;
    let se = a_inv[[0, 0]].sqrt();
    let mut out = FitResult::new(Method::GlsKnown, coef[0]);
    out.set_se(se);
    out.diagnostics.insert("model_se".into(), se);
    out.diagnostics.insert("logdet".into(), f.logdet());
    Ok(out)
}

/// Posterior-mean estimator under a N(0, tau2 I) prior on the coefficients:
/// (X' S^-1 X + I/tau2)^-1 X' S^-1 Y.
pub fn fit_gp_ridge(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    f: &SpdFactor,
    tau2: f64,
) -> Result<FitResult> {
    let (n, p) = check_xy(&x, &y)?;
    if f.n() != n {
        return Err(Error::DimensionMismatch { expected: n, got: f.n() });
    }
    if tau2 <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "tau2",
            value: tau2,
            requirement: "> 0",
        });
    }
    let xs: Vec<Array1<f64>> = (0..p)
        .map(|j| f.solve_lower(x.column(j)))
        .collect::<Result<_>>()?;
    let ys = f.solve_lower(y)?;
    let mut a = Array2::zeros((p, p));
    let mut b = Array1::zeros(p);
    for i in 0..p {
        for j in 0..=i {
            let v = xs[i].dot(&xs[j]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
        a[[i, i]] += 1.0 / tau2;
        b[i] = xs[i].dot(&ys);
    }
    let fa = factor_normal_equations(&a)?;
    let coef = fa.solve(b.view())?;
    let a_inv = fa.inverse()?;
    let mut out = FitResult::new(Method::GpRidge, coef[0]);
    out.set_se(a_inv[[0, 0]].sqrt());
    out.diagnostics.insert("tau2".into(), tau2);
    Ok(out)
}

pub fn fit_gls_vecchia(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    locations: &LocationSet,
    spec: &KernelSpec,
    m: usize,
) -> Result<FitResult> {
    let (_, p) = check_xy(&x, &y)?;
    let plan = VecchiaPlan::new(locations, m)?;
    let vf = VecchiaFactor::new(&plan, spec)?;
    let xs: Vec<Array1<f64>> = (0..p)
        .map(|j| vf.decorrelate(x.column(j)))
        .collect::<Result<_>>()?;
    let ys = vf.decorrelate(y)?;
    let (coef, a_inv) = gls_core(&xs, &ys)?;
    let mut out = FitResult::new(Method::GlsVecchia, coef[0]);
    out.set_se(a_inv[[0, 0]].sqrt());
    out.cov_params = Some(CovParams {
        gamma2: spec.variance,
        scale: spec.scale,
        nugget: spec.nugget,
    });
    out.diagnostics.insert("m".into(), m as f64);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Feasible GLS via profile likelihood
// ---------------------------------------------------------------------------

/// Negative profile log-likelihood of a covariance factor: beta is replaced
/// by its GLS value, giving (logdet S + r' S^-1 r)/2 up to a constant.
pub fn gls_nll(x: ArrayView2<f64>, y: ArrayView1<f64>, f: &SpdFactor) -> Result<f64> {
    let (_, p) = check_xy(&x, &y)?;
    let xs: Vec<Array1<f64>> = (0..p)
        .map(|j| f.solve_lower(x.column(j)))
        .collect::<Result<_>>()?;
    let ys = f.solve_lower(y)?;
    let (coef, _) = gls_core(&xs, &ys)?;
    let mut r = ys.clone();
    for j in 0..p {
        r.scaled_add(-coef[j], &xs[j]);
    }
    Ok(0.5 * (f.logdet() + r.dot(&r)))
}

/// Deterministic median pairwise distance over a strided subsample of pairs.
fn median_distance(locations: &LocationSet) -> f64 {
    let n = locations.len();
    let step = (n / 64).max(1);
    let mut ds = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + step;
        while j < n {
            ds.push(locations.dist(i, j));
            j += step;
        }
        i += step;
    }
    ds.retain(|d| *d > 0.0);
    if ds.is_empty() {
        return 1.0;
    }
    ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = ds.len();
    if m % 2 == 1 {
        ds[m / 2]
    } else {
        0.5 * (ds[m / 2 - 1] + ds[m / 2])
    }
}

fn initial_scale(family: KernelFamily, med: f64) -> f64 {
    match family {
        // scale is an inverse range for these families
        KernelFamily::Spherical | KernelFamily::Exponential => 1.0 / med,
        // and a lengthscale for the squared-exponential
        KernelFamily::SquaredExponential => med,
    }
}

/// Derivative-free Nelder-Mead minimization. Returns (argmin, min,
/// evaluations, converged).
fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    step: f64,
    max_evals: usize,
    ftol: f64,
) -> (Vec<f64>, f64, usize, bool) {
    let d = start.len();
    let mut evals = 0usize;
    let mut eval = |p: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(p);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let fv = eval(start, &mut evals);
    simplex.push((start.to_vec(), fv));
    for i in 0..d {
        let mut p = start.to_vec();
        p[i] += step;
        let fv = eval(&p, &mut evals);
        simplex.push((p, fv));
    }

    let mut converged = false;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let best = simplex[0].1;
        let worst = simplex[d].1;
        let spread = (worst - best).abs();
        let size: f64 = (0..d)
            .map(|i| {
                simplex
                    .iter()
                    .map(|(p, _)| (p[i] - simplex[0].0[i]).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if spread <= ftol * (1.0 + best.abs()) && size <= 1e-3 {
            converged = true;
            break;
        }

        // Centroid of all but the worst vertex.
        let mut c = vec![0.0; d];
        for (p, _) in simplex.iter().take(d) {
            for i in 0..d {
                c[i] += p[i] / d as f64;
            }
        }
        let xw = simplex[d].0.clone();
        let reflect: Vec<f64> = (0..d).map(|i| c[i] + (c[i] - xw[i])).collect();
        let fr = eval(&reflect, &mut evals);
        if fr < simplex[0].1 {
            let expand: Vec<f64> = (0..d).map(|i| c[i] + 2.0 * (c[i] - xw[i])).collect();
            let fe = eval(&expand, &mut evals);
            simplex[d] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (reflect, fr);
        } else {
            let contract: Vec<f64> = if fr < simplex[d].1 {
                (0..d).map(|i| c[i] + 0.5 * (reflect[i] - c[i])).collect()
            } else {
                (0..d).map(|i| c[i] + 0.5 * (xw[i] - c[i])).collect()
            };
            let fc = eval(&contract, &mut evals);
            if fc < simplex[d].1.min(fr) {
                simplex[d] = (contract, fc);
            } else {
                // Shrink toward the best vertex.
                let x0 = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    for i in 0..d {
                        v.0[i] = x0[i] + 0.5 * (v.0[i] - x0[i]);
                    }
                    v.1 = eval(&v.0.clone(), &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    (simplex[0].0.clone(), simplex[0].1, evals, converged)
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Shared profile-likelihood search. The total variance is concentrated out
/// analytically; the simplex runs over (logit nugget-fraction, log scale).
/// `build` maps a unit-variance KernelSpec (variance 1-w, nugget w) to the
/// whitened (X columns, y, logdet) triple, or None on factorization failure.
fn profile_search<B>(
    n: usize,
    family: KernelFamily,
    med: f64,
    mut build: B,
) -> (f64, f64, f64, usize, bool)
where
    B: FnMut(&KernelSpec) -> Option<(Vec<Array1<f64>>, Array1<f64>, f64)>,
{
    let nf = n as f64;
    let mut objective = |theta: &[f64]| -> f64 {
        let w = logistic(theta[0]).clamp(1e-8, 1.0 - 1e-8);
        let scale = theta[1].exp();
        let spec = match KernelSpec::new(family, 1.0 - w, scale, w) {
            Ok(s) => s,
            Err(_) => return f64::INFINITY,
        };
        let (xs, ys, logdet) = match build(&spec) {
            Some(t) => t,
            None => return f64::INFINITY,
        };
        let (coef, _) = match gls_core(&xs, &ys) {
            Ok(t) => t,
            Err(_) => return f64::INFINITY,
        };
        let mut r = ys.clone();
        for (j, xc) in xs.iter().enumerate() {
            r.scaled_add(-coef[j], xc);
        }
        let s2 = r.dot(&r) / nf;
        if s2 <= 0.0 || !s2.is_finite() {
            return f64::INFINITY;
        }
        0.5 * (nf * s2.ln() + logdet)
    };

    let start = [0.0, initial_scale(family, med).ln()];
    let (theta, _fmin, evals, converged) = nelder_mead(&mut objective, &start, 0.75, 500, 1e-6);
    let w = logistic(theta[0]).clamp(1e-8, 1.0 - 1e-8);
    let scale = theta[1].exp();

    // Recover the profiled total variance at the optimum.
    let s2 = {
        let spec = KernelSpec::new(family, 1.0 - w, scale, w).unwrap();
        match build(&spec) {
            Some((xs, ys, _)) => match gls_core(&xs, &ys) {
                Ok((coef, _)) => {
                    let mut r = ys.clone();
                    for (j, xc) in xs.iter().enumerate() {
                        r.scaled_add(-coef[j], xc);
                    }
                    r.dot(&r) / nf
                }
                Err(_) => f64::NAN,
            },
            None => f64::NAN,
        }
    };
    (w, scale, s2, evals, converged)
}

fn dense_covariance_from_distances(
    spec: &KernelSpec,
    d: &Array2<f64>,
) -> Result<Array2<f64>> {
    let n = d.nrows();
    let mut sigma = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut v = kernel_eval(spec, d[[i, j]])?;
            if i == j {
                v += spec.nugget;
            }
            sigma[[i, j]] = v;
            sigma[[j, i]] = v;
        }
    }
    Ok(sigma)
}

/// Feasible GLS: Gaussian maximum likelihood over the covariance parameters
/// (beta and the total variance profiled out), then GLS at the optimum.
pub fn fit_gls_profile(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    locations: &LocationSet,
    family: KernelFamily,
) -> Result<FitResult> {
    let (n, p) = check_xy(&x, &y)?;
    if n < 30 {
        return Err(Error::InvalidParameter {
            name: "n",
            value: n as f64,
            requirement: ">= 30 for profile likelihood",
        });
    }
    if locations.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: locations.len() });
    }
    let d = crate::geometry::distance_matrix(locations);
    let med = median_distance(locations);

    let build = |spec: &KernelSpec| -> Option<(Vec<Array1<f64>>, Array1<f64>, f64)> {
        let sigma = dense_covariance_from_distances(spec, &d).ok()?;
        let f = spd_factor(&sigma).ok()?;
        let xs: Option<Vec<Array1<f64>>> =
            (0..p).map(|j| f.solve_lower(x.column(j)).ok()).collect();
        let ys = f.solve_lower(y).ok()?;
        Some((xs?, ys, f.logdet()))
    };
    let (w, scale, s2, evals, converged) = profile_search(n, family, med, build);
    if !s2.is_finite() {
        return Err(Error::NoConvergence { evals });
    }

    let spec = KernelSpec::new(family, (1.0 - w) * s2, scale, w * s2)?;
    let sigma = dense_covariance_from_distances(&spec, &d)?;
    let f = spd_factor(&sigma)?;
    let xs: Vec<Array1<f64>> = (0..p)
        .map(|j| f.solve_lower(x.column(j)))
        .collect::<Result<_>>()?;
    let ys = f.solve_lower(y)?;
    let (coef, a_inv) = gls_core(&xs, &ys)?;

    let mut out = FitResult::new(Method::GlsProfile, coef[0]);
    out.set_se(a_inv[[0, 0]].sqrt());
    out.cov_params = Some(CovParams {
        gamma2: spec.variance,
        scale: spec.scale,
        nugget: spec.nugget,
    });
    out.diagnostics.insert("evals".into(), evals as f64);
    out.diagnostics
        .insert("converged".into(), if converged { 1.0 } else { 0.0 });
    out.diagnostics.insert("nll".into(), gls_nll(x, y, &f)?);
    Ok(out)
}

/// Feasible GLS with the likelihood and solves run through the Vecchia
/// approximation; the nearest-neighbor plan is built once and reused across
/// parameter evaluations.
pub fn fit_gls_profile_vecchia(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    locations: &LocationSet,
    family: KernelFamily,
    m: usize,
) -> Result<FitResult> {
    let (n, p) = check_xy(&x, &y)?;
    if n < 30 {
        return Err(Error::InvalidParameter {
            name: "n",
            value: n as f64,
            requirement: ">= 30 for profile likelihood",
        });
    }
    let plan = VecchiaPlan::new(locations, m)?;
    let med = median_distance(locations);

    let build = |spec: &KernelSpec| -> Option<(Vec<Array1<f64>>, Array1<f64>, f64)> {
        let vf = VecchiaFactor::new(&plan, spec).ok()?;
        let xs: Option<Vec<Array1<f64>>> =
            (0..p).map(|j| vf.decorrelate(x.column(j)).ok()).collect();
        let ys = vf.decorrelate(y).ok()?;
        Some((xs?, ys, vf.logdet()))
    };
    let (w, scale, s2, evals, converged) = profile_search(n, family, med, build);
    if !s2.is_finite() {
        return Err(Error::NoConvergence { evals });
    }

    let spec = KernelSpec::new(family, (1.0 - w) * s2, scale, w * s2)?;
    let vf = VecchiaFactor::new(&plan, &spec)?;
    let xs: Vec<Array1<f64>> = (0..p)
        .map(|j| vf.decorrelate(x.column(j)))
        .collect::<Result<_>>()?;
    let ys = vf.decorrelate(y)?;
    let (coef, a_inv) = gls_core(&xs, &ys)?;

    let mut out = FitResult::new(Method::GlsVecchia, coef[0]);
    out.set_se(a_inv[[0, 0]].sqrt());
    out.cov_params = Some(CovParams {
        gamma2: spec.variance,
        scale: spec.scale,
        nugget: spec.nugget,
    });
    out.diagnostics.insert("m".into(), m as f64);
    out.diagnostics.insert("evals".into(), evals as f64);
    out.diagnostics
        .insert("converged".into(), if converged { 1.0 } else { 0.0 });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Spline partially linear models
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplineMode {
    /// Penalty on the basis block chosen by GCV over the supplied grid.
    GcvPenalty,
    /// No smoothness penalty (lambda = 0).
    NoPenalty,
}

/// Joint design [X | B] with the penalty zero-padded over the X columns.
fn joint_design(
    x: &ArrayView2<f64>,
    basis: &SplineBasis,
) -> (Array2<f64>, Array2<f64>) {
    let n = x.nrows();
    let p = x.ncols();
    let k = basis.rank();
    let mut m = Array2::zeros((n, p + k));
    m.slice_mut(s![.., ..p]).assign(x);
    m.slice_mut(s![.., p..]).assign(&basis.design);
    let mut pen = Array2::zeros((p + k, p + k));
    pen.slice_mut(s![p.., p..]).assign(&basis.penalty);
    (m, pen)
}

/// SE of the first coefficient in the penalized joint model with lambda held
/// fixed: sigma2 [(M'M+lP)^-1 M'M (M'M+lP)^-1]_00, sigma2 = rss/(n - edf).
fn penalized_se(
    m: &Array2<f64>,
    pen: &Array2<f64>,
    lambda: f64,
    rss: f64,
    hat_trace: f64,
) -> Result<f64> {
    let n = m.nrows() as f64;
    if n - hat_trace <= 0.0 {
        return Err(Error::RankDeficient(
            "no residual degrees of freedom for the joint model".into(),
        ));
    }
    let sigma2 = rss / (n - hat_trace);
    let mtm = m.t().dot(m);
    let mut lhs = mtm.clone();
    lhs.scaled_add(lambda, pen);
    let f = factor_normal_equations(&lhs)?;
    let mut e0 = Array1::zeros(m.ncols());
    e0[0] = 1.0;
    let u = f.solve(e0.view())?;
    Ok((sigma2 * u.dot(&mtm.dot(&u))).sqrt())
}

/// GAM-style joint fit of Y on [X | basis]; the basis supplies the intercept
/// and linear terms, so X is typically the bare exposure column.
pub fn fit_spline_plm(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    basis: &SplineBasis,
    mode: SplineMode,
    lambda_grid: &[f64],
) -> Result<FitResult> {
    check_xy(&x, &y)?;
    if basis.n() != x.nrows() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), got: basis.n() });
    }
    let (m, pen) = joint_design(&x, basis);
    let (lambda, fit) = match mode {
        SplineMode::GcvPenalty => select_lambda_gcv_design(&m, &pen, y, lambda_grid)?,
        SplineMode::NoPenalty => (0.0, penalized_lsq(&m, &pen, y, 0.0)?),
    };
    let se = penalized_se(&m, &pen, lambda, fit.rss, fit.hat_trace)?;

    let method = match mode {
        SplineMode::GcvPenalty => Method::Gam,
        SplineMode::NoPenalty => Method::GamFx,
    };
    let mut out = FitResult::new(method, fit.coefficients[0]);
    out.set_se(se);
    out.diagnostics.insert("lambda".into(), lambda);
    out.diagnostics.insert("edf".into(), fit.hat_trace);
    out.diagnostics.insert("rss".into(), fit.rss);
    Ok(out)
}

/// Spatial+: stage 1 residualizes the exposure on the basis (GCV penalty);
/// stage 2 fits Y on the residualized exposure plus the basis.
pub fn fit_spatial_plus(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    basis: &SplineBasis,
    lambda_grid: &[f64],
) -> Result<FitResult> {
    check_xy(&x, &y)?;
    if basis.n() != x.nrows() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), got: basis.n() });
    }
    let exposure = x.column(0).to_owned();
    let (lambda1, stage1) = select_lambda_gcv(basis, exposure.view(), lambda_grid)?;
    let resid = &exposure - &stage1.fitted;
    // Degenerate when the relative residual norm is at rounding level.
    if resid.dot(&resid) <= 1e-8 * exposure.dot(&exposure) {
        return Err(Error::NotIdentified(
            "exposure is fully explained by the spatial basis".into(),
        ));
    }

    let mut x2 = x.to_owned();
    x2.column_mut(0).assign(&resid);
    let (m, pen) = joint_design(&x2.view(), basis);
    let (lambda2, fit) = select_lambda_gcv_design(&m, &pen, y, lambda_grid)?;
    let se = penalized_se(&m, &pen, lambda2, fit.rss, fit.hat_trace)?;

    let mut out = FitResult::new(Method::SpatialPlus, fit.coefficients[0]);
    out.set_se(se);
    out.diagnostics.insert("stage1_lambda".into(), lambda1);
    out.diagnostics.insert("lambda".into(), lambda2);
    out.diagnostics.insert("edf".into(), fit.hat_trace);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Grouped random effects
// ---------------------------------------------------------------------------

/// GLS under block compound symmetry Sigma = sigma2 (I + rho J_groups), with
/// rho = v2/sigma2 estimated by maximum likelihood on a grid plus golden-
/// section refinement. Equivalent to a location-specific random intercept
/// model.
pub fn fit_grouped_re(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    groups: &[usize],
) -> Result<FitResult> {
    let (n, p) = check_xy(&x, &y)?;
    if groups.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: groups.len() });
    }
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::NotIdentified(
            "grouped random effects need at least 2 groups".into(),
        ));
    }

    // Sufficient statistics: the profile likelihood in rho only needs X'X,
    // X'y, y'y and per-group column sums.
    let xtx = x.t().dot(&x);
    let xty = x.t().dot(&y);
    let yty = y.dot(&y);
    let mut sums: BTreeMap<usize, (Array1<f64>, f64, usize)> = BTreeMap::new();
    for (i, &gid) in groups.iter().enumerate() {
        let entry = sums
            .entry(gid)
            .or_insert_with(|| (Array1::zeros(p), 0.0, 0));
        for j in 0..p {
            entry.0[j] += x[[i, j]];
        }
        entry.1 += y[i];
        entry.2 += 1;
    }
    let group_stats: Vec<(Array1<f64>, f64, f64)> = sums
        .into_values()
        .map(|(sx, sy, k)| (sx, sy, k as f64))
        .collect();
    let nf = n as f64;

    // Profile NLL at a given rho >= 0; also returns beta, sigma2 and the
    // unit-scale information matrix A for reuse at the optimum.
    let eval = |rho: f64| -> Result<(f64, Array1<f64>, f64, Array2<f64>)> {
        let mut a = xtx.clone();
        let mut b = xty.clone();
        let mut logdet = 0.0;
        for (sx, sy, k) in &group_stats {
            let c = rho / (1.0 + k * rho);
            for i in 0..p {
                for j in 0..p {
                    a[[i, j]] -= c * sx[i] * sx[j];
                }
                b[i] -= c * sy * sx[i];
            }
            logdet += (1.0 + k * rho).ln();
        }
        let f = factor_normal_equations(&a)?;
        let beta = f.solve(b.view())?;
        let mut r_omega_r = yty - 2.0 * beta.dot(&xty) + beta.dot(&xtx.dot(&beta));
        for (sx, sy, k) in &group_stats {
            let c = rho / (1.0 + k * rho);
            let gsum = sy - sx.dot(&beta);
            r_omega_r -= c * gsum * gsum;
        }
        let sigma2 = r_omega_r / nf;
        if sigma2 <= 0.0 || !sigma2.is_finite() {
            return Err(Error::NonFinite("grouped RE profile variance"));
        }
        Ok((0.5 * (nf * sigma2.ln() + logdet), beta, sigma2, a))
    };

    // Coarse log grid including the boundary rho = 0.
    let mut grid = vec![0.0];
    for i in 0..=60 {
        grid.push(1e-6 * (1e10_f64).powf(i as f64 / 60.0));
    }
    let nlls: Vec<f64> = grid
        .iter()
        .map(|&rho| eval(rho).map(|t| t.0).unwrap_or(f64::INFINITY))
        .collect();
    if !nlls.iter().any(|v| v.is_finite()) {
        return Err(Error::NoConvergence { evals: grid.len() });
    }

    // The profile likelihood can be multimodal, with a spurious mode near
    // rho = 0 alongside the one a local optimizer finds. Mimic mixed-model
    // fitting, which initializes the random-effect variance generously and
    // descends: start from the largest grid value and walk downhill to the
    // local minimum whose basin contains that start.
    let mut idx = grid.len() - 1;
    while !nlls[idx].is_finite() && idx > 0 {
        idx -= 1;
    }
    loop {
        if idx > 0 && nlls[idx - 1] < nlls[idx] {
            idx -= 1;
        } else if idx + 1 < grid.len() && nlls[idx + 1] < nlls[idx] {
            idx += 1;
        } else {
            break;
        }
    }
    let best = (nlls[idx], idx);
    // Golden-section refinement around the grid winner when interior.
    let mut rho_hat = grid[idx];
    if idx > 0 && idx + 1 < grid.len() {
        let (mut lo, mut hi) = (grid[idx - 1], grid[idx + 1]);
        let phi = 0.5 * (5.0_f64.sqrt() - 1.0);
        for _ in 0..40 {
            let m1 = hi - phi * (hi - lo);
            let m2 = lo + phi * (hi - lo);
            let f1 = eval(m1).map(|t| t.0).unwrap_or(f64::INFINITY);
            let f2 = eval(m2).map(|t| t.0).unwrap_or(f64::INFINITY);
            if f1 < f2 {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let mid = 0.5 * (lo + hi);
        if eval(mid).map(|t| t.0).unwrap_or(f64::INFINITY) < best.0 {
            rho_hat = mid;
        }
    }

    let (_, beta, sigma2, a) = eval(rho_hat)?;
    let fa = factor_normal_equations(&a)?;
    let a_inv = fa.inverse()?;
    let mut out = FitResult::new(Method::GroupedRe, beta[0]);
    out.set_se((sigma2 * a_inv[[0, 0]]).sqrt());
    out.cov_params = Some(CovParams {
        gamma2: rho_hat * sigma2,
        scale: 0.0,
        nugget: sigma2,
    });
    out.diagnostics.insert("rho".into(), rho_hat);
    out.diagnostics.insert("n_groups".into(), group_stats.len() as f64);
    Ok(out)
}
