//! Experiment configuration: a TOML tree with every default explicit.
//!
//! Unknown keys are rejected. The resolved configuration (file values,
//! then command-line overrides, then system-dependent defaults) is echoed
//! into every report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::density::{DensitySettings, SimulationSettings};
use crate::driver::SamplingMethod;
use crate::error::{Error, Result};
use crate::fields::VectorFieldSystem;
use crate::malliavin::ProbeSettings;
use crate::rate::RateOptions;

/// Fields given inline instead of a built-in name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineSystem {
    pub name: String,
    pub n: usize,
    /// One expression per component of each field, in `x1..xn`.
    pub fields: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbmConfig {
    pub n_paths: usize,
    pub m: usize,
    pub dim: usize,
    pub method: SamplingMethod,
    /// Times `(s, t)` on the grid.
    pub pairs: Vec<[f64; 2]>,
    pub z_threshold: f64,
    /// Hurst index used to generate the ensemble when it should differ
    /// from the one checked against.
    pub sample_hurst: Option<f64>,
}

impl Default for FbmConfig {
    fn default() -> Self {
        FbmConfig {
            n_paths: 100_000,
            m: 64,
            dim: 1,
            method: SamplingMethod::Circulant,
            pairs: vec![[0.25, 0.25], [0.25, 0.5], [0.5, 0.5], [0.25, 1.0], [0.5, 1.0], [1.0, 1.0]],
            z_threshold: 4.0,
            sample_hurst: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypoConfig {
    pub level: usize,
    pub trials: usize,
    /// Pass threshold for `λ_hat`.
    pub min_lambda: f64,
}

impl Default for HypoConfig {
    fn default() -> Self {
        HypoConfig { level: 3, trials: 2000, min_lambda: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConfig {
    pub y: Option<Vec<f64>>,
    /// Batch mode: one row per target.
    pub y_grid: Vec<Vec<f64>>,
    pub restricted: bool,
    pub delta_det: f64,
    pub grids: Vec<usize>,
    /// RK4 steps per grid interval for the smooth control drives.
    pub substeps: usize,
    pub restarts: usize,
    pub tol_c: f64,
    pub tol_g: f64,
    pub mu0: f64,
    pub max_outer: usize,
}

impl Default for RateConfig {
    fn default() -> Self {
        let o = RateOptions::default();
        RateConfig {
            y: None,
            y_grid: Vec::new(),
            restricted: true,
            delta_det: 1e-6,
            grids: o.grids,
            substeps: o.substeps,
            restarts: o.restarts,
            tol_c: o.tol_c,
            tol_g: o.tol_g,
            mu0: o.mu0,
            max_outer: o.max_outer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub y: Option<Vec<f64>>,
    pub eps_grid: Vec<f64>,
    pub n_samples: usize,
    pub bandwidth_factor: f64,
    /// Sample under the Cameron–Martin shift toward the rate minimizer.
    pub importance: bool,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            y: None,
            eps_grid: vec![0.5, 0.4, 0.3, 0.25, 0.2],
            n_samples: 200_000,
            bandwidth_factor: 1.0,
            importance: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingKind {
    /// `1/λ_min(γ)` against ε.
    Gamma,
    /// Chain inequality, `γ` and `M` scaling at bracket level `hypo.level`.
    Hypoelliptic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub kind: ScalingKind,
    pub eps_grid: Vec<f64>,
    pub n_samples: usize,
    /// Accepted interval for the fitted slope; defaults to `[−2.3, −1.7]`
    /// for `gamma` and `[−2l, −2]` for `hypoelliptic`.
    pub slope_range: Option<[f64; 2]>,
    /// Minimum fraction of samples satisfying the chain inequality.
    pub chain_fraction: f64,
    /// Overrides the bracket constant from `hypo-check`.
    pub lambda_hat: Option<f64>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            kind: ScalingKind::Gamma,
            eps_grid: vec![1.0, 0.5, 0.25, 0.125],
            n_samples: 500,
            slope_range: None,
            chain_fraction: 0.99,
            lambda_hat: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: String,
    pub system_def: Option<InlineSystem>,
    pub hurst: f64,
    /// Defaults to `1` for `scalar-linear` and the origin otherwise.
    pub x0: Option<Vec<f64>>,
    /// Grid for stochastic runs.
    pub m: usize,
    /// RK4 steps per grid interval for stochastic runs; 16 keeps
    /// `‖J·J⁻¹ − Id‖` below 1e-8 on rough `H = 1/2` drives up to `ε = 1`.
    pub substeps: usize,
    pub seed: u64,
    pub fbm: FbmConfig,
    pub hypo: HypoConfig,
    pub rate: RateConfig,
    pub density: DensityConfig,
    pub scaling: ScalingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            system: "elliptic-identity".into(),
            system_def: None,
            hurst: 0.5,
            x0: None,
            m: 32,
            substeps: 16,
            seed: 0,
            fbm: FbmConfig::default(),
            hypo: HypoConfig::default(),
            rate: RateConfig::default(),
            density: DensityConfig::default(),
            scaling: ScalingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn build_system(&self) -> Result<VectorFieldSystem> {
        match &self.system_def {
            Some(def) => VectorFieldSystem::from_sources(&def.name, def.n, &def.fields),
            None => VectorFieldSystem::builtin(&self.system),
        }
    }

    /// Fill system-dependent defaults and check ranges.
    pub fn resolve(mut self) -> Result<(Self, VectorFieldSystem)> {
        let sys = self.build_system()?;
        if let Some(def) = &self.system_def {
            self.system = def.name.clone();
        }
        if self.x0.is_none() {
            self.x0 = Some(if sys.name == "scalar-linear" { vec![1.0] } else { vec![0.0; sys.n] });
        }
        let n = sys.n;
        let check_point = |what: &str, p: &Option<Vec<f64>>| -> Result<()> {
            match p {
                Some(v) if v.len() != n => {
                    Err(Error::Config(format!("{what} has {} coordinates, the system has {n}", v.len())))
                }
                Some(v) if v.iter().any(|c| !c.is_finite()) => Err(Error::Config(format!("{what} is not finite"))),
                _ => Ok(()),
            }
        };
        check_point("x0", &self.x0)?;
        check_point("rate.y", &self.rate.y)?;
        check_point("density.y", &self.density.y)?;
        for y in &self.rate.y_grid {
            check_point("rate.y_grid entry", &Some(y.clone()))?;
        }
        if !(self.hurst > 0.25 && self.hurst < 1.0) {
            return Err(Error::Config(format!("hurst = {} outside (1/4, 1)", self.hurst)));
        }
        if self.m == 0 || self.substeps == 0 || self.rate.substeps == 0 {
            return Err(Error::Config("m and substeps must be positive".into()));
        }
        if self.fbm.n_paths == 0 {
            return Err(Error::Config("fbm.n_paths must be positive".into()));
        }
        if self.rate.grids.is_empty() || self.rate.grids.windows(2).any(|w| w[1] % w[0] != 0) {
            return Err(Error::Config("rate.grids must be nonempty and each a multiple of the previous".into()));
        }
        if self.scaling.slope_range.is_none() {
            self.scaling.slope_range = Some(match self.scaling.kind {
                ScalingKind::Gamma => [-2.3, -1.7],
                ScalingKind::Hypoelliptic => [-2.0 * self.hypo.level as f64, -2.0],
            });
        }
        if self.hurst < 1.0 / 3.0 {
            log::warn!("H = {} < 1/3: Wong–Zakai convergence of the piecewise-linear drives is slow", self.hurst);
        }
        Ok((self, sys))
    }

    pub fn x0(&self) -> Vec<f64> {
        self.x0.clone().unwrap_or_default()
    }

    pub fn rate_options(&self) -> RateOptions {
        RateOptions {
            hurst: self.hurst,
            grids: self.rate.grids.clone(),
            substeps: self.rate.substeps,
            restarts: self.rate.restarts,
            seed: self.seed,
            tol_c: self.rate.tol_c,
            tol_g: self.rate.tol_g,
            mu0: self.rate.mu0,
            max_outer: self.rate.max_outer,
        }
    }

    pub fn probe_settings(&self) -> ProbeSettings {
        ProbeSettings {
            hurst: self.hurst,
            m: self.m,
            substeps: self.substeps,
            n_samples: self.scaling.n_samples,
            seed: self.seed,
        }
    }

    /// Density runs share the finest rate grid so the importance shift applies.
    pub fn density_settings(&self) -> DensitySettings {
        DensitySettings {
            sim: SimulationSettings {
                hurst: self.hurst,
                m: *self.rate.grids.last().unwrap_or(&self.m),
                substeps: self.substeps,
                n_samples: self.density.n_samples,
                seed: self.seed,
            },
            eps_grid: self.density.eps_grid.clone(),
            bandwidth_factor: self.density.bandwidth_factor,
            importance: self.density.importance,
        }
    }
}
