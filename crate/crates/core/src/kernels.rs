//! Covariance families and covariance-matrix assembly.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LocationSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Spherical,
    Exponential,
    SquaredExponential,
}

/// Stationary covariance specification: marginal variance, scale
/// (inverse-range phi for spherical/exponential, lengthscale for
/// squared-exponential), and nugget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub variance: f64,
    pub scale: f64,
    pub nugget: f64,
}

impl KernelSpec {
    /// Degenerate variance = 0 (pure nugget) is allowed; factorization then
    /// requires a positive nugget.
    pub fn new(family: KernelFamily, variance: f64, scale: f64, nugget: f64) -> Result<Self> {
        if variance < 0.0 {
            return Err(Error::InvalidParameter {
                name: "variance",
                value: variance,
                requirement: ">= 0",
            });
        }
        if scale <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "scale",
                value: scale,
                requirement: "> 0",
            });
        }
        if nugget < 0.0 {
            return Err(Error::InvalidParameter {
                name: "nugget",
                value: nugget,
                requirement: ">= 0",
            });
        }
        Ok(KernelSpec { family, variance, scale, nugget })
    }
}

/// Squared-exponential covariance with the sample-size-dependent bandwidth
/// a_n = n^{1/(2 alpha + d)} used by the consistency theorem. Requires a
/// nonzero nugget and Holder smoothness alpha > d/2.
#[derive(Debug, Clone, Copy)]
pub struct TheoremKernelSpec {
    pub gamma2: f64,
    pub sigma2: f64,
    pub alpha: f64,
    pub dim: usize,
    pub n: usize,
}

impl TheoremKernelSpec {
    pub fn new(gamma2: f64, sigma2: f64, alpha: f64, dim: usize, n: usize) -> Result<Self> {
        if alpha <= dim as f64 / 2.0 {
            return Err(Error::InvalidParameter {
                name: "alpha",
                value: alpha,
                requirement: "> d/2",
            });
        }
        if sigma2 <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "sigma2",
                value: sigma2,
                requirement: "> 0 (nonzero nugget required)",
            });
        }
        Ok(TheoremKernelSpec { gamma2, sigma2, alpha, dim, n })
    }

    pub fn bandwidth(&self) -> f64 {
        (self.n as f64).powf(1.0 / (2.0 * self.alpha + self.dim as f64))
    }
}

/// Covariance value at distance d, without the nugget.
pub fn kernel_eval(spec: &KernelSpec, d: f64) -> Result<f64> {
    if d < 0.0 {
        return Err(Error::InvalidParameter {
            name: "distance",
            value: d,
            requirement: ">= 0",
        });
    }
    let v = match spec.family {
        KernelFamily::Spherical => {
            let t = spec.scale * d;
            if t <= 1.0 {
                spec.variance * (1.0 - 1.5 * t + 0.5 * t * t * t)
            } else {
                0.0
            }
        }
        KernelFamily::Exponential => spec.variance * (-spec.scale * d).exp(),
        KernelFamily::SquaredExponential => {
            spec.variance * (-d * d / (2.0 * spec.scale * spec.scale)).exp()
        }
    };
    Ok(v)
}

/// Dense covariance matrix: kernel on pairwise distances plus nugget on the
/// diagonal.
pub fn covariance_matrix(spec: &KernelSpec, locations: &LocationSet) -> Result<Array2<f64>> {
    let n = locations.len();
    let mut sigma = Array2::zeros((n, n));
    for i in 0..n {
        sigma[[i, i]] = spec.variance + spec.nugget;
        for j in (i + 1)..n {
            let v = kernel_eval(spec, locations.dist(i, j))?;
            sigma[[i, j]] = v;
            sigma[[j, i]] = v;
        }
    }
    if sigma.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("covariance_matrix"));
    }
    Ok(sigma)
}

/// gamma^2 exp(-a_n |s_i - s_j|^2) + sigma^2 on the diagonal.
pub fn theorem_covariance(spec: &TheoremKernelSpec, locations: &LocationSet) -> Result<Array2<f64>> {
    let n = locations.len();
    let a_n = spec.bandwidth();
    let mut sigma = Array2::zeros((n, n));
    for i in 0..n {
        sigma[[i, i]] = spec.gamma2 + spec.sigma2;
        for j in (i + 1)..n {
            let d = locations.dist(i, j);
            let v = spec.gamma2 * (-a_n * d * d).exp();
            sigma[[i, j]] = v;
            sigma[[j, i]] = v;
        }
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_gaussian_line, DensityTag, LocationSet};
    use crate::linalg::{spd_factor, sym_eigenvalues};
    use crate::rng::RngStream;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn spherical(variance: f64, phi: f64, nugget: f64) -> KernelSpec {
        KernelSpec::new(KernelFamily::Spherical, variance, phi, nugget).unwrap()
    }

    #[test]
    fn spherical_values() {
        let k = spherical(1.0, 0.25, 0.0);
        assert_abs_diff_eq!(kernel_eval(&k, 0.0).unwrap(), 1.0);
        // support boundary: phi*d = 1 gives 1 - 1.5 + 0.5 = 0
        assert_abs_diff_eq!(kernel_eval(&k, 4.0).unwrap(), 0.0);
        // phi*d = 0.5: 1 - 0.75 + 0.0625
        assert_abs_diff_eq!(kernel_eval(&k, 2.0).unwrap(), 0.3125, epsilon = 1e-15);
        assert_abs_diff_eq!(kernel_eval(&k, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn exponential_value() {
        let k = KernelSpec::new(KernelFamily::Exponential, 1.0, 0.25, 0.0).unwrap();
        assert_abs_diff_eq!(kernel_eval(&k, 4.0).unwrap(), (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn negative_distance_rejected() {
        let k = spherical(1.0, 0.25, 0.0);
        assert!(kernel_eval(&k, -1.0).is_err());
    }

    #[test]
    fn kernel_monotone_nonincreasing() {
        for family in [
            KernelFamily::Spherical,
            KernelFamily::Exponential,
            KernelFamily::SquaredExponential,
        ] {
            let k = KernelSpec::new(family, 1.3, 0.5, 0.0).unwrap();
            let mut prev = f64::INFINITY;
            for i in 0..=300 {
                let d = 6.0 * i as f64 / 300.0; // grid over [0, 3/phi]
                let v = kernel_eval(&k, d).unwrap();
                assert!(v <= prev + 1e-14);
                assert!((0.0..=1.3 + 1e-14).contains(&v));
                prev = v;
            }
        }
    }

    #[test]
    fn covariance_diagonal_and_coincident_points() {
        let l = LocationSet {
            dim: 1,
            coords: array![[0.0], [0.0]],
            density_tag: DensityTag::GaussianLine { sd: 1.0 },
            groups: None,
        };
        let k = KernelSpec::new(KernelFamily::Exponential, 1.0, 1.0, 0.5).unwrap();
        let sigma = covariance_matrix(&k, &l).unwrap();
        assert_eq!(sigma, array![[1.5, 1.0], [1.0, 1.5]]);
    }

    #[test]
    fn pure_nugget_is_scaled_identity() {
        let mut rng = RngStream::new(2, 0);
        let l = sample_gaussian_line(5, 1.0, &mut rng).unwrap();
        let k = KernelSpec::new(KernelFamily::SquaredExponential, 0.0, 1.0, 2.0).unwrap();
        let sigma = covariance_matrix(&k, &l).unwrap();
        assert_eq!(sigma, ndarray::Array2::<f64>::eye(5) * 2.0);
    }

    #[test]
    fn theorem_bandwidth_and_matrix() {
        assert_abs_diff_eq!(
            TheoremKernelSpec::new(1.0, 1.0, 1.0, 1, 1).unwrap().bandwidth(),
            1.0
        );
        assert_abs_diff_eq!(
            TheoremKernelSpec::new(1.0, 1.0, 1.5, 1, 16).unwrap().bandwidth(),
            2.0,
            epsilon = 1e-14
        );
        assert!(TheoremKernelSpec::new(1.0, 1.0, 0.5, 2, 16).is_err());

        let l = LocationSet {
            dim: 1,
            coords: array![[1.0], [1.0]],
            density_tag: DensityTag::GaussianLine { sd: 1.0 },
            groups: None,
        };
        let spec = TheoremKernelSpec::new(1.5, 0.5, 1.0, 1, 100).unwrap();
        let sigma = theorem_covariance(&spec, &l).unwrap();
        assert_eq!(sigma, array![[2.0, 1.5], [1.5, 2.0]]);
    }

    #[test]
    fn smallest_eigenvalue_at_least_nugget() {
        let mut rng = RngStream::new(6, 0);
        let l = crate::geometry::sample_uniform_square(60, 0.0, 10.0, &mut rng).unwrap();
        for family in [
            KernelFamily::Spherical,
            KernelFamily::Exponential,
            KernelFamily::SquaredExponential,
        ] {
            let k = KernelSpec::new(family, 1.0, 0.25, 0.3).unwrap();
            let sigma = covariance_matrix(&k, &l).unwrap();
            let ev = sym_eigenvalues(&sigma);
            let min = ev.last().copied().unwrap();
            assert!(min >= 0.3 - 1e-8, "min eigenvalue {min}");
            assert!(spd_factor(&sigma).is_ok());
        }
    }
}
