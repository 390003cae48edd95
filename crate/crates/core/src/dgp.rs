//! Data-generating processes for the simulation scenarios: smoothed GP
//! confounder on the unit square (fixed or redrawn), clustered linear
//! confounder on a 1-D grid, and the Hermite-eigenfunction construction.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fixed_grid_locations, sample_gaussian_line, sample_uniform_square, LocationSet};
use crate::kernels::{covariance_matrix, KernelFamily, KernelSpec};
use crate::linalg::spd_factor;
use crate::mercer::{hermite_eigensystem, EigenSystem};
use crate::rng::RngStream;
use crate::smoothers::{default_lambda_grid, select_lambda_gcv, thinplate_basis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioTag {
    FixedConfounder,
    RandomConfounder,
    Clustered,
    Eigen,
}

/// One simulated dataset. `g_true` / `h_true` carry the ground truth for
/// the oracle layer and must never be handed to an estimator.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub locations: LocationSet,
    pub x: Array1<f64>,
    pub y: Array1<f64>,
    pub beta_true: f64,
    pub g_true: Array1<f64>,
    /// Smooth exposure component, where the scenario defines one.
    pub h_true: Option<Array1<f64>>,
    pub groups: Option<Vec<usize>>,
    pub scenario_tag: ScenarioTag,
}

impl SimulatedDataset {
    pub fn n(&self) -> usize {
        self.x.len()
    }
}

/// Configuration of the smoothed-GP confounder scenarios.
#[derive(Debug, Clone)]
pub struct FixedConfounderConfig {
    pub n: usize,
    pub square_lo: f64,
    pub square_hi: f64,
    /// GP kernel of the raw surface Z*.
    pub kernel: KernelSpec,
    pub smoother_rank: usize,
    pub exposure_noise_var: f64,
    pub outcome_noise_var: f64,
    pub beta: f64,
}

impl Default for FixedConfounderConfig {
    fn default() -> Self {
        FixedConfounderConfig {
            n: 2000,
            square_lo: 0.0,
            square_hi: 10.0,
            kernel: KernelSpec::new(KernelFamily::Spherical, 1.0, 0.25, 0.0).unwrap(),
            smoother_rank: 200,
            exposure_noise_var: 1.0,
            outcome_noise_var: 1.0,
            beta: 1.0,
        }
    }
}

impl FixedConfounderConfig {
    fn validate(&self) -> Result<()> {
        if self.n < self.smoother_rank {
            return Err(Error::InvalidParameter {
                name: "n",
                value: self.n as f64,
                requirement: ">= smoother_rank",
            });
        }
        if self.square_hi <= self.square_lo {
            return Err(Error::InvalidBounds { lo: self.square_lo, hi: self.square_hi });
        }
        // Identifiability: the exposure needs a non-smooth component.
        if self.exposure_noise_var <= 0.0 {
            return Err(Error::NotIdentified(
                "exposure noise variance must be positive (exposure would be a \
                 deterministic function of location)"
                    .into(),
            ));
        }
        if self.outcome_noise_var < 0.0 {
            return Err(Error::InvalidParameter {
                name: "outcome_noise_var",
                value: self.outcome_noise_var,
                requirement: ">= 0",
            });
        }
        Ok(())
    }
}

/// Configuration of the Hermite-eigenfunction scenario.
#[derive(Debug, Clone)]
pub struct EigenScenarioConfig {
    pub n: usize,
    /// Standard deviation of the Gaussian sampling density.
    pub sigma: f64,
    /// Kernel lengthscale.
    pub ell: f64,
    pub k_max: usize,
    /// Exposure noise variance kappa^2.
    pub kappa2: f64,
    /// Outcome noise variance sigma_0^2.
    pub sigma0_2: f64,
    /// Nugget assumed by the analysis covariance (not the DGP).
    pub analysis_nugget: f64,
    pub beta: f64,
}

impl Default for EigenScenarioConfig {
    fn default() -> Self {
        EigenScenarioConfig {
            n: 3000,
            sigma: 1.0,
            ell: 1.0,
            k_max: 5,
            kappa2: 1.0 / 16.0,
            sigma0_2: 1.0,
            analysis_nugget: 2.0,
            beta: 1.0,
        }
    }
}

/// A confounder surface frozen across replications: the locations and the
/// smoothed Z values.
#[derive(Debug, Clone)]
pub struct ConfounderSurface {
    pub locations: LocationSet,
    pub g: Array1<f64>,
}

// Substream tags: the surface and the per-replication noise never share a
// stream, so pinning the surface stream pairs fixed and random scenarios.
const SURFACE_TAG: u64 = 0;
const NOISE_TAG: u64 = 1;

/// Simulate Z* ~ GP(0, kernel) at fresh uniform locations and smooth it with
/// a rank-`smoother_rank` thin-plate GCV fit; the smoothed field is the
/// confounder g.
pub fn gen_confounder_surface(
    cfg: &FixedConfounderConfig,
    rng: &mut RngStream,
) -> Result<ConfounderSurface> {
    cfg.validate()?;
    let locations = sample_uniform_square(cfg.n, cfg.square_lo, cfg.square_hi, rng)?;
    let sigma = covariance_matrix(&cfg.kernel, &locations)?;
    // The compactly supported kernel can be numerically semidefinite at
    // dense samplings; escalate a diagonal jitter until it factors.
    let factor = {
        let mut jitter = 0.0;
        loop {
            let mut s = sigma.clone();
            if jitter > 0.0 {
                for i in 0..cfg.n {
                    s[[i, i]] += jitter;
                }
            }
            match spd_factor(&s) {
                Ok(f) => break f,
                Err(_) if jitter < 1e-4 => {
                    jitter = if jitter == 0.0 { 1e-10 } else { jitter * 100.0 };
                }
                Err(e) => return Err(e),
            }
        }
    };
    let z_star = factor.multiply_lower(Array1::from(rng.normal_vec(cfg.n)).view())?;

    let basis = thinplate_basis(&locations, cfg.smoother_rank)?;
    let grid = default_lambda_grid(cfg.n, 1e-8, 1e4, 40);
    let (_, fit) = select_lambda_gcv(&basis, z_star.view(), &grid)?;
    Ok(ConfounderSurface { locations, g: fit.fitted })
}

fn confounder_outcome(
    cfg: &FixedConfounderConfig,
    surface: &ConfounderSurface,
    tag: ScenarioTag,
    rng: &mut RngStream,
) -> SimulatedDataset {
    let n = surface.g.len();
    let mut noise = rng.substream(NOISE_TAG);
    let ex_sd = cfg.exposure_noise_var.sqrt();
    let out_sd = cfg.outcome_noise_var.sqrt();
    let mut x = Array1::zeros(n);
    let mut y = Array1::zeros(n);
    for i in 0..n {
        x[i] = surface.g[i] + ex_sd * noise.standard_normal();
    }
    for i in 0..n {
        y[i] = cfg.beta * x[i] + surface.g[i] + out_sd * noise.standard_normal();
    }
    SimulatedDataset {
        locations: surface.locations.clone(),
        x,
        y,
        beta_true: cfg.beta,
        g_true: surface.g.clone(),
        h_true: Some(surface.g.clone()),
        groups: None,
        scenario_tag: tag,
    }
}

/// Fixed-confounder replication: the surface (locations and g) is reused
/// across replications; exposure and outcome noise are redrawn.
pub fn gen_fixed_confounder(
    cfg: &FixedConfounderConfig,
    frozen: Option<&ConfounderSurface>,
    rng: &mut RngStream,
) -> Result<SimulatedDataset> {
    cfg.validate()?;
    match frozen {
        Some(surface) => Ok(confounder_outcome(cfg, surface, ScenarioTag::FixedConfounder, rng)),
        None => {
            let surface = gen_confounder_surface(cfg, &mut rng.substream(SURFACE_TAG))?;
            Ok(confounder_outcome(cfg, &surface, ScenarioTag::FixedConfounder, rng))
        }
    }
}

/// Random-confounder replication: the surface is redrawn every call from the
/// caller's stream.
pub fn gen_random_confounder(
    cfg: &FixedConfounderConfig,
    rng: &mut RngStream,
) -> Result<SimulatedDataset> {
    cfg.validate()?;
    let surface = gen_confounder_surface(cfg, &mut rng.substream(SURFACE_TAG))?;
    Ok(confounder_outcome(cfg, &surface, ScenarioTag::RandomConfounder, rng))
}

/// Clustered linear confounder: m grid locations with k
/// repeats each, s_ij = i, Z_ij = s_ij/10, X ~ N(Z,1), Y ~ N(X+Z,1).
pub fn gen_clustered_linear(m: usize, k: usize, rng: &mut RngStream) -> Result<SimulatedDataset> {
    let locations = fixed_grid_locations(m, k)?;
    let n = locations.len();
    let groups = locations.groups.clone();
    let mut noise = rng.substream(NOISE_TAG);
    let mut g = Array1::zeros(n);
    let mut x = Array1::zeros(n);
    let mut y = Array1::zeros(n);
    for i in 0..n {
        g[i] = locations.coords[[i, 0]] / 10.0;
        x[i] = g[i] + noise.standard_normal();
    }
    for i in 0..n {
        y[i] = x[i] + g[i] + noise.standard_normal();
    }
    Ok(SimulatedDataset {
        locations,
        x,
        y,
        beta_true: 1.0,
        g_true: g.clone(),
        h_true: Some(g),
        groups,
        scenario_tag: ScenarioTag::Clustered,
    })
}

/// Hermite-eigenfunction scenario: h and g are random linear
/// combinations of the first k_max+1 eigenfunctions; X = h + eta,
/// Y = X beta + g + eps.
pub fn gen_eigen_scenario(
    cfg: &EigenScenarioConfig,
    rng: &mut RngStream,
) -> Result<(SimulatedDataset, EigenSystem, Array1<f64>, Array1<f64>)> {
    if cfg.kappa2 <= 0.0 {
        return Err(Error::NotIdentified(
            "kappa2 must be positive (exposure would be a smooth function of location)".into(),
        ));
    }
    let locations = sample_gaussian_line(cfg.n, cfg.sigma, &mut rng.substream(SURFACE_TAG))?;
    let system = hermite_eigensystem(cfg.sigma, cfg.ell, cfg.k_max, &locations)?;
    let k = cfg.k_max + 1;
    let mut coef = rng.substream(2);
    let c_g = Array1::from(coef.normal_vec(k));
    let c_h = Array1::from(coef.normal_vec(k));
    let h = system.phi.dot(&c_h);
    let g = system.phi.dot(&c_g);

    let mut noise = rng.substream(NOISE_TAG);
    let kappa = cfg.kappa2.sqrt();
    let sd0 = cfg.sigma0_2.sqrt();
    let mut x = Array1::zeros(cfg.n);
    let mut y = Array1::zeros(cfg.n);
    for i in 0..cfg.n {
        x[i] = h[i] + kappa * noise.standard_normal();
    }
    for i in 0..cfg.n {
        y[i] = cfg.beta * x[i] + g[i] + sd0 * noise.standard_normal();
    }
    let data = SimulatedDataset {
        locations,
        x,
        y,
        beta_true: cfg.beta,
        g_true: g,
        h_true: Some(h),
        groups: None,
        scenario_tag: ScenarioTag::Eigen,
    };
    Ok((data, system, c_g, c_h))
}
