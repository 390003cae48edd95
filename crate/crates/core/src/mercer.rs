//! Analytic Hermite eigensystem of the squared-exponential kernel under
//! Gaussian location sampling, the truncated Mercer approximation of the
//! covariance inverse, and the eigen-expansion bias functional for GLS.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::geometry::{DensityTag, LocationSet};

/// Hard cap on the expansion order; the eigenvalues decay geometrically so
/// higher terms are below noise at desk scale.
pub const K_MAX_CAP: usize = 10;

/// Closed-form eigenvalues and empirically normalized eigenfunction columns
/// of exp(-(x-x')^2 / (2 l^2)) under N(0, sigma^2) sampling.
///
/// Constants follow the standard parameterization:
/// a^{-1} = 4 sigma^2, b^{-1} = 2 l^2, c = sqrt(a^2 + 2ab),
/// A = a + b + c, B = b / A, lambda_k = sqrt(2a/A) B^k.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub big_a: f64,
    pub big_b: f64,
    /// lambda_0 .. lambda_kmax, strictly decreasing.
    pub eigenvalues: Vec<f64>,
    /// n x (k_max + 1) eigenfunction evaluations at the sample locations,
    /// rescaled so each column has empirical mean square 1.
    pub phi: Array2<f64>,
    /// Per-column scaling applied during normalization.
    pub normalization: Vec<f64>,
}

impl EigenSystem {
    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    pub fn k_max(&self) -> usize {
        self.eigenvalues.len() - 1
    }
}

/// Physicists' Hermite polynomial H_k(x) by the three-term recurrence
/// H_{k+1}(x) = 2 x H_k(x) - 2 k H_{k-1}(x).
pub fn hermite(k: usize, x: f64) -> f64 {
    let mut h0 = 1.0;
    if k == 0 {
        return h0;
    }
    let mut h1 = 2.0 * x;
    for m in 1..k {
        let h2 = 2.0 * x * h1 - 2.0 * m as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// Build the analytic eigensystem at the sampled locations. The locations
/// must carry a `gaussian_line` density tag; the eigen-identities hold under
/// that sampling measure only.
pub fn hermite_eigensystem(
    sigma: f64,
    lengthscale: f64,
    k_max: usize,
    locations: &LocationSet,
) -> Result<EigenSystem> {
    match locations.density_tag {
        DensityTag::GaussianLine { sd } if (sd - sigma).abs() < 1e-12 => {}
        _ => {
            return Err(Error::InvalidParameter {
                name: "locations",
                value: f64::NAN,
                requirement: "gaussian_line density with matching sd",
            })
        }
    }
    if k_max > K_MAX_CAP {
        return Err(Error::InvalidParameter {
            name: "k_max",
            value: k_max as f64,
            requirement: "<= 10",
        });
    }
    let a = 1.0 / (4.0 * sigma * sigma);
    let b = 1.0 / (2.0 * lengthscale * lengthscale);
    let c = (a * a + 2.0 * a * b).sqrt();
    let big_a = a + b + c;
    let big_b = b / big_a;

    let eigenvalues: Vec<f64> = (0..=k_max)
        .map(|k| (2.0 * a / big_a).sqrt() * big_b.powi(k as i32))
        .collect();

    let n = locations.len();
    let mut phi = Array2::zeros((n, k_max + 1));
    let root_2c = (2.0 * c).sqrt();
    for i in 0..n {
        let x = locations.coords[[i, 0]];
        let envelope = (-(c - a) * x * x).exp();
        for k in 0..=k_max {
            phi[[i, k]] = envelope * hermite(k, root_2c * x);
        }
    }
    // Empirical normalization: mean square of each column over the sample
    // equals 1, making (1/n) Phi^T Phi approximately the identity.
    let mut normalization = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let ms = phi.column(k).iter().map(|v| v * v).sum::<f64>() / n as f64;
        let scale = 1.0 / ms.sqrt();
        normalization.push(scale);
        phi.column_mut(k).mapv_inplace(|v| v * scale);
    }

    Ok(EigenSystem {
        a,
        b,
        c,
        big_a,
        big_b,
        eigenvalues,
        phi,
        normalization,
    })
}

/// Truncated Mercer action (1/n) Phi (D + sigma^2 I)^{-1} Phi^T v with
/// D = diag(n lambda_k), approximating Sigma^{-1} v on span(Phi).
pub fn mercer_sigma_inverse_action(
    eigen: &EigenSystem,
    nugget: f64,
    v: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let n = eigen.n();
    if v.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: v.len() });
    }
    let proj = eigen.phi.t().dot(&v);
    let scaled: Array1<f64> = proj
        .iter()
        .zip(&eigen.eigenvalues)
        .map(|(p, lam)| p / (n as f64 * lam + nugget))
        .collect();
    Ok(eigen.phi.dot(&scaled) / n as f64)
}

/// Predicted GLS bias from the eigen expansion:
/// [sum_k c_{g,k} c_{h,k} / (n lambda_k + sigma0^2)] / denom,
/// with denom = X^T Sigma^{-1} X / n.
pub fn predicted_gls_bias(
    c_g: &[f64],
    c_h: &[f64],
    eigenvalues: &[f64],
    sigma0_2: f64,
    denom: f64,
    n: usize,
) -> Result<f64> {
    if c_g.len() != c_h.len() || c_g.len() > eigenvalues.len() {
        return Err(Error::DimensionMismatch {
            expected: eigenvalues.len(),
            got: c_g.len().max(c_h.len()),
        });
    }
    if denom <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "denom",
            value: denom,
            requirement: "> 0",
        });
    }
    let num: f64 = c_g
        .iter()
        .zip(c_h)
        .zip(eigenvalues)
        .map(|((g, h), lam)| g * h / (n as f64 * lam + sigma0_2))
        .sum();
    Ok(num / denom)
}
