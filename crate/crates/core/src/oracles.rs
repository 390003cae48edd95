//! Ground-truth bias functionals and numerical diagnostics. Everything here
//! consumes [`SimulatedDataset`] truth fields (g, h) that estimators never
//! see.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1};

use crate::dgp::SimulatedDataset;
use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::smoothers::SplineBasis;

/// Bias of a GLS-type fit decomposed into the cross terms of its numerator
/// and denominator.
#[derive(Debug, Clone)]
pub struct BiasReport {
    /// Realized error beta_hat - beta of the GLS fit on this dataset.
    pub exact_bias: f64,
    pub predicted_bias: Option<f64>,
    pub ols_asymptotic_bias: Option<f64>,
    pub components: BTreeMap<String, f64>,
}

/// Conditional-on-(X, locations) bias of GLS: X' S^-1 g / X' S^-1 X.
pub fn exact_gls_bias(
    x: ArrayView1<f64>,
    f: &SpdFactor,
    g_true: ArrayView1<f64>,
) -> Result<f64> {
    let num = f.quad_form(x, g_true)?;
    let den = f.quad_form(x, x)?;
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::RankDeficient(format!(
            "X' S^-1 X = {den} is not positive"
        )));
    }
    Ok(num / den)
}

/// Sample-moment plug-in of the OLS bias limit cov(X, g)/var(X).
pub fn ols_asymptotic_bias(x: ArrayView1<f64>, g_true: ArrayView1<f64>) -> Result<f64> {
    let n = x.len();
    if g_true.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: g_true.len() });
    }
    let nf = n as f64;
    let mx = x.sum() / nf;
    let mg = g_true.sum() / nf;
    let mut cov = 0.0;
    let mut var = 0.0;
    for i in 0..n {
        cov += (x[i] - mx) * (g_true[i] - mg);
        var += (x[i] - mx) * (x[i] - mx);
    }
    if var <= 0.0 {
        return Err(Error::NotIdentified("exposure has zero variance".into()));
    }
    Ok(cov / var)
}

/// Lemma 1 statistic: (1/n) h' S^-1 eps.
pub fn cross_term_diag(
    h_true: ArrayView1<f64>,
    f: &SpdFactor,
    noise: ArrayView1<f64>,
) -> Result<f64> {
    Ok(f.quad_form(h_true, noise)? / h_true.len() as f64)
}

/// Lemma 2 statistic: (1/n) eta' S^-1 eta, which stays bounded away from
/// zero (around var(eta)/(gamma^2 + sigma^2) for a stationary S).
pub fn quadform_diag(eta: ArrayView1<f64>, f: &SpdFactor, var_eta: f64) -> Result<f64> {
    if var_eta <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "var_eta",
            value: var_eta,
            requirement: "> 0",
        });
    }
    Ok(f.quad_form(eta, eta)? / eta.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Identifiability {
    Identified,
    Degenerate,
}

/// Identifiability check: the exposure must retain mass outside the span of the
/// spatial basis. Returns Degenerate when the projection residual norm falls
/// below tol * ||X||.
pub fn identifiability_check(
    x: ArrayView1<f64>,
    basis: &SplineBasis,
    tol: f64,
) -> Identifiability {
    let norm0 = x.dot(&x).sqrt();
    if norm0 == 0.0 {
        return Identifiability::Degenerate;
    }
    // Orthonormalize the basis columns (dropping collapsed ones) and project.
    let mut kept: Vec<Array1<f64>> = Vec::new();
    for j in 0..basis.rank() {
        let mut v = basis.design.column(j).to_owned();
        let vnorm0 = v.dot(&v).sqrt();
        if vnorm0 == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for q in &kept {
                let c = q.dot(&v);
                v.scaled_add(-c, q);
            }
        }
        let vnorm = v.dot(&v).sqrt();
        if vnorm > 1e-10 * vnorm0 {
            kept.push(&v / vnorm);
        }
    }
    let mut r = x.to_owned();
    for _ in 0..2 {
        for q in &kept {
            let c = q.dot(&r);
            r.scaled_add(-c, q);
        }
    }
    if r.dot(&r).sqrt() >= tol * norm0 {
        Identifiability::Identified
    } else {
        Identifiability::Degenerate
    }
}

/// Decompose the realized GLS error on simulated data into the Eq. (7)
/// cross terms: numerator (1/n)[h'S^-1 g + eta'S^-1 g + x'S^-1 eps] over
/// denominator (1/n)[h'S^-1 h + eta'S^-1 eta + 2 h'S^-1 eta].
pub fn gls_error_decomposition(
    data: &SimulatedDataset,
    f: &SpdFactor,
) -> Result<BiasReport> {
    let h = data
        .h_true
        .as_ref()
        .ok_or_else(|| Error::NotIdentified("scenario defines no smooth exposure component".into()))?;
    let n = data.n() as f64;
    let eta = &data.x - h;
    let eps = &data.y - &(&data.x * data.beta_true) - &data.g_true;

    let mut components = BTreeMap::new();
    let num_h_g = f.quad_form(h.view(), data.g_true.view())? / n;
    let num_eta_g = f.quad_form(eta.view(), data.g_true.view())? / n;
    let num_x_eps = f.quad_form(data.x.view(), eps.view())? / n;
    let den_h_h = f.quad_form(h.view(), h.view())? / n;
    let den_eta_eta = f.quad_form(eta.view(), eta.view())? / n;
    let den_h_eta_2 = 2.0 * f.quad_form(h.view(), eta.view())? / n;
    components.insert("num_h_g".into(), num_h_g);
    components.insert("num_eta_g".into(), num_eta_g);
    components.insert("num_x_eps".into(), num_x_eps);
    components.insert("den_h_h".into(), den_h_h);
    components.insert("den_eta_eta".into(), den_eta_eta);
    components.insert("den_h_eta_2".into(), den_h_eta_2);

    // Realized GLS error from the Y-based form.
    let num_y = f.quad_form(data.x.view(), data.y.view())?;
    let den = f.quad_form(data.x.view(), data.x.view())?;
    if den <= 0.0 {
        return Err(Error::RankDeficient("X' S^-1 X is not positive".into()));
    }
    let exact_bias = num_y / den - data.beta_true;
    components.insert(
        "conditional_bias".into(),
        exact_gls_bias(data.x.view(), f, data.g_true.view())?,
    );

    Ok(BiasReport {
        exact_bias,
        predicted_bias: None,
        ols_asymptotic_bias: Some(ols_asymptotic_bias(data.x.view(), data.g_true.view())?),
        components,
    })
}

impl BiasReport {
    /// Recombine the Eq. (7) components into the bias ratio.
    pub fn recombined(&self) -> f64 {
        let num = self.components["num_h_g"]
            + self.components["num_eta_g"]
            + self.components["num_x_eps"];
        let den = self.components["den_h_h"]
            + self.components["den_eta_eta"]
            + self.components["den_h_eta_2"];
        num / den
    }
}
