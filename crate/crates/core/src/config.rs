//! Experiment configuration: a single JSON document with strict field
//! checking (unknown keys are errors).

use serde::{Deserialize, Serialize};

use crate::dgp::{EigenScenarioConfig, FixedConfounderConfig, ScenarioTag};
use crate::error::{Error, Result};
use crate::estimators::Method;
use crate::inference::{CiMethod, IntervalSpec};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::smoothers::default_lambda_grid;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioTag,
    pub seed: u64,
    pub replications: usize,
    pub estimators: Vec<String>,

    // Scenario size: n for continuous scenarios, m groups x k repeats for
    // the clustered one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,

    // Eigen-scenario parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kmax: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma0_2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ell: Option<f64>,

    // Confounder-surface kernel parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nugget: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoother_rank: Option<usize>,

    // Interval settings; ci_method overrides the per-estimator defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_method: Option<CiMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boot_reps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample_reps: Option<usize>,

    // Smoothing-penalty search grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid_hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid_len: Option<usize>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_sweep: Option<Vec<usize>>,

    // Knobs for specific estimators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vecchia_m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau2: Option<f64>,
    /// Largest n allowed on the dense-covariance path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_cap: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("estimators list is empty".into()));
        }
        for id in &self.estimators {
            Method::from_id(id).map_err(|e| Error::Config(e.to_string()))?;
        }
        match self.scenario {
            ScenarioTag::Clustered => {
                if self.m.is_none() || self.k.is_none() {
                    return Err(Error::Config(
                        "clustered scenario needs m (groups) and k (repeats)".into(),
                    ));
                }
            }
            _ => {
                if self.n.is_none() {
                    return Err(Error::Config("scenario needs n".into()));
                }
            }
        }
        if let Some(level) = self.ci_level {
            if !(level > 0.0 && level < 1.0) {
                return Err(Error::Config("ci_level must be in (0, 1)".into()));
            }
        }
        let dense_cap = self.dense_cap.unwrap_or(4000);
        let n = self.dataset_size();
        let dense_estimators = ["gls_known", "gls_profile", "gp_ridge"];
        if n > dense_cap
            && self
                .estimators
                .iter()
                .any(|e| dense_estimators.contains(&e.as_str()))
        {
            return Err(Error::Config(format!(
                "n = {n} exceeds the dense-path cap {dense_cap}; use gls_vecchia"
            )));
        }
        Ok(())
    }

    pub fn dataset_size(&self) -> usize {
        match self.scenario {
            ScenarioTag::Clustered => self.m.unwrap_or(0) * self.k.unwrap_or(0),
            _ => self.n.unwrap_or(0),
        }
    }

    pub fn ci_level(&self) -> f64 {
        self.ci_level.unwrap_or(0.95)
    }

    pub fn boot_reps(&self) -> usize {
        self.boot_reps.unwrap_or(200)
    }

    pub fn subsample_fraction(&self) -> f64 {
        self.subsample_fraction.unwrap_or(0.05)
    }

    pub fn subsample_reps(&self) -> usize {
        self.subsample_reps.unwrap_or(120)
    }

    pub fn vecchia_m(&self) -> usize {
        self.vecchia_m.unwrap_or(15)
    }

    pub fn tau2(&self) -> f64 {
        self.tau2.unwrap_or(1e6)
    }

    pub fn lambda_grid(&self, n: usize) -> Vec<f64> {
        default_lambda_grid(
            n,
            self.lambda_grid_lo.unwrap_or(1e-8),
            self.lambda_grid_hi.unwrap_or(1e4),
            self.lambda_grid_len.unwrap_or(40),
        )
    }

    /// Interval settings for one estimator: feasible-GLS fits default to the
    /// parametric spatial bootstrap, grouped RE to subsampling, everything
    /// else to the analytic interval.
    pub fn interval_spec(&self, estimator: &str) -> IntervalSpec {
        let level = self.ci_level();
        let method = self.ci_method.unwrap_or(match estimator {
            "gls_profile" | "gls_vecchia" => CiMethod::ParametricBootstrap,
            "grouped_re" => CiMethod::Subsample,
            _ => CiMethod::Analytic,
        });
        let replicates = match method {
            CiMethod::Analytic => 0,
            CiMethod::ParametricBootstrap => self.boot_reps(),
            CiMethod::Subsample => self.subsample_reps(),
        };
        IntervalSpec { level, method, replicates }
    }

    pub fn fixed_confounder_config(&self) -> Result<FixedConfounderConfig> {
        let defaults = FixedConfounderConfig::default();
        let kernel = KernelSpec::new(
            KernelFamily::Spherical,
            self.gamma2.unwrap_or(defaults.kernel.variance),
            self.phi.unwrap_or(defaults.kernel.scale),
            self.nugget.unwrap_or(defaults.kernel.nugget),
        )?;
        Ok(FixedConfounderConfig {
            n: self.n.unwrap_or(defaults.n),
            kernel,
            smoother_rank: self.smoother_rank.unwrap_or(defaults.smoother_rank),
            beta: self.beta.unwrap_or(defaults.beta),
            ..defaults
        })
    }

    pub fn eigen_config(&self) -> EigenScenarioConfig {
        let defaults = EigenScenarioConfig::default();
        EigenScenarioConfig {
            n: self.n.unwrap_or(defaults.n),
            ell: self.ell.unwrap_or(defaults.ell),
            k_max: self.kmax.unwrap_or(defaults.k_max),
            kappa2: self.kappa2.unwrap_or(defaults.kappa2),
            sigma0_2: self.sigma0_2.unwrap_or(defaults.sigma0_2),
            analysis_nugget: self.nugget.unwrap_or(defaults.analysis_nugget),
            beta: self.beta.unwrap_or(defaults.beta),
            ..defaults
        }
    }

    /// Canonical JSON echo recorded in reports.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
