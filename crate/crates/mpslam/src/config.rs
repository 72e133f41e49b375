//! Run configuration: one TOML file with sections mirroring the modules.
//!
//! Every field has a default, so an empty file is a valid configuration of
//! the reference experiment; the file only states deviations. `RunConfig`
//! holds fully resolved values, which makes its serialization a complete
//! echo: parsing the echo reproduces the run bit for bit.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::TransitionParams;
use crate::inference::{BirthSettings, Hypers, InitSpec};
use crate::metrics::GospaParams;
use crate::scene::Point2;
use crate::signal::{PathAmplitudeModel, PulseSpec, SignalError};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// `[pulse]` — the frequency grid and optional spectrum shaping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseSection {
    pub m: usize,
    pub delta_hz: f64,
    /// Optional per-bin complex spectrum as [re, im] pairs (length m);
    /// absent means flat H ≡ 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<Vec<[f64; 2]>>,
}

impl Default for PulseSection {
    fn default() -> Self {
        Self {
            m: 41,
            delta_hz: 1e7,
            spectrum: None,
        }
    }
}

/// `[dynamics]` — transition model parameters, variance parametrization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSection {
    pub accel_var: f64,
    pub feature_pos_var: f64,
    pub feature_gamma_var: f64,
    pub p_s: f64,
    pub c_eps: f64,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            accel_var: 1e-4,
            feature_pos_var: 1e-8,
            feature_gamma_var: 1e-4,
            p_s: 0.999,
            c_eps: 10.0,
        }
    }
}

/// `[birth]` — at most one of `p_birth` / `mu_b` selects the route; with
/// neither given, parsing resolves to the default p_birth = 1e-4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BirthSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_birth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_b: Option<f64>,
    /// Range-cell width [m]; absent means the pulse's c/B.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cell_width: Option<f64>,
    /// Log-uniform intensity prior as multiples of the snapshot's median
    /// bin power.
    pub gamma_prior_rel: [f64; 2],
}

impl Default for BirthSection {
    // Raw state: neither route picked, so a `[birth]` section that only
    // sets `mu_b` is not contradicted by an implicit p_birth.
    fn default() -> Self {
        Self {
            p_birth: None,
            mu_b: None,
            cell_width: None,
            gamma_prior_rel: [1e-3, 1e1],
        }
    }
}

const DEFAULT_P_BIRTH: f64 = 1e-4;

/// `[amplitude]` — path-gain intensity model plus the true noise variance
/// used by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmplitudeSection {
    pub gamma_ref: f64,
    pub d_ref: f64,
    pub reflection_loss_db: f64,
    /// True σ² for snapshot synthesis; the filter estimates it.
    pub sigma2: f64,
}

impl Default for AmplitudeSection {
    fn default() -> Self {
        Self {
            gamma_ref: 150.0,
            d_ref: 1.0,
            reflection_loss_db: 3.0,
            sigma2: 1.0,
        }
    }
}

/// `[init]` — prior construction around the true starting state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSection {
    pub pos_std: f64,
    pub vel_std: f64,
    /// Center of the σ² prior; absent means the true `amplitude.sigma2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2_init: Option<f64>,
    pub sigma2_spread: [f64; 2],
    pub gamma_init_rel: [f64; 2],
}

impl Default for InitSection {
    fn default() -> Self {
        Self {
            pos_std: 0.1,
            vel_std: 0.05,
            sigma2_init: None,
            sigma2_spread: [0.1, 10.0],
            gamma_init_rel: [1.0, 1e4],
        }
    }
}

/// `[gospa]` — evaluation metric parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GospaSection {
    pub c: f64,
    pub p: f64,
    /// Gate the map truth by per-step path visibility; `false` scores
    /// against the full static anchor set.
    pub visibility_gated_truth: bool,
}

impl Default for GospaSection {
    fn default() -> Self {
        Self {
            c: 2.0,
            p: 1.0,
            visibility_gated_truth: true,
        }
    }
}

/// The complete, resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario_path: PathBuf,
    pub n_runs: usize,
    pub base_seed: u64,
    /// Truncate every run to this many steps; absent means the full
    /// trajectory. The CLI `--steps` flag overrides it, and the config echo
    /// records the effective value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub output_dir: PathBuf,
    pub pulse: PulseSection,
    pub dynamics: DynamicsSection,
    pub birth: BirthSection,
    pub amplitude: AmplitudeSection,
    pub hypers: Hypers,
    pub init: InitSection,
    pub gospa: GospaSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario_path: PathBuf::from("scenario.toml"),
            n_runs: 100,
            base_seed: 1,
            steps: None,
            output_dir: PathBuf::from("out"),
            pulse: PulseSection::default(),
            dynamics: DynamicsSection::default(),
            birth: BirthSection {
                p_birth: Some(DEFAULT_P_BIRTH),
                ..BirthSection::default()
            },
            amplitude: AmplitudeSection::default(),
            hypers: Hypers::default(),
            init: InitSection::default(),
            gospa: GospaSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config from TOML text, resolves defaults and validates.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            source: Box::new(e),
        })?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads, resolves and validates a config file. A relative
    /// `scenario_path` is resolved against the config file's directory and
    /// then absolutized, so the config echo works from any directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(e),
        })?;
        if cfg.scenario_path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.scenario_path = dir.join(&cfg.scenario_path);
            }
        }
        // canonicalize also tidies `..` components; fall back to a plain
        // absolutization when the file does not exist yet so that validation
        // can report the missing path cleanly later.
        cfg.scenario_path = cfg
            .scenario_path
            .canonicalize()
            .or_else(|_| std::path::absolute(&cfg.scenario_path))
            .unwrap_or_else(|_| cfg.scenario_path.clone());
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills defaults that depend on other fields being absent.
    fn resolve(&mut self) {
        if self.birth.p_birth.is_none() && self.birth.mu_b.is_none() {
            self.birth.p_birth = Some(DEFAULT_P_BIRTH);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_runs == 0 {
            return Err(invalid("n_runs must be at least 1"));
        }
        if self.steps == Some(0) {
            return Err(invalid("steps must be at least 1 when given"));
        }
        self.pulse_spec()
            .map_err(|e| invalid(format!("pulse: {e}")))?;
        let d = &self.dynamics;
        for (name, v) in [
            ("accel_var", d.accel_var),
            ("feature_pos_var", d.feature_pos_var),
            ("feature_gamma_var", d.feature_gamma_var),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("dynamics.{name} must be ≥ 0, got {v}")));
            }
        }
        if !(d.p_s > 0.0 && d.p_s <= 1.0) {
            return Err(invalid(format!("dynamics.p_s must be in (0,1], got {}", d.p_s)));
        }
        if !(d.c_eps > 0.0) {
            return Err(invalid(format!("dynamics.c_eps must be positive, got {}", d.c_eps)));
        }
        let b = &self.birth;
        match (b.p_birth, b.mu_b) {
            (Some(p), None) => {
                if !(p > 0.0 && p < 1.0) {
                    return Err(invalid(format!("birth.p_birth must be in (0,1), got {p}")));
                }
            }
            (None, Some(mu)) => {
                if !(mu > 0.0) {
                    return Err(invalid(format!("birth.mu_b must be positive, got {mu}")));
                }
            }
            (Some(_), Some(_)) => {
                return Err(invalid("birth: set exactly one of p_birth and mu_b, not both"))
            }
            (None, None) => {
                return Err(invalid("birth: set exactly one of p_birth and mu_b"))
            }
        }
        if let Some(w) = b.cell_width {
            if !(w > 0.0) {
                return Err(invalid(format!("birth.cell_width must be positive, got {w}")));
            }
        }
        let [lo, hi] = b.gamma_prior_rel;
        if !(lo > 0.0 && hi >= lo) {
            return Err(invalid(format!(
                "birth.gamma_prior_rel must satisfy 0 < lo ≤ hi, got [{lo}, {hi}]"
            )));
        }
        let a = &self.amplitude;
        if !(a.gamma_ref > 0.0) || !(a.d_ref > 0.0) {
            return Err(invalid("amplitude.gamma_ref and d_ref must be positive"));
        }
        if !(a.reflection_loss_db >= 0.0) {
            return Err(invalid(format!(
                "amplitude.reflection_loss_db must be ≥ 0, got {}",
                a.reflection_loss_db
            )));
        }
        if !(a.sigma2 > 0.0) {
            return Err(invalid(format!("amplitude.sigma2 must be positive, got {}", a.sigma2)));
        }
        self.hypers
            .validate()
            .map_err(|e| invalid(format!("hypers: {e}")))?;
        let i = &self.init;
        if !(i.pos_std > 0.0 && i.vel_std > 0.0) {
            return Err(invalid("init.pos_std and vel_std must be positive"));
        }
        if let Some(s) = i.sigma2_init {
            if !(s > 0.0) {
                return Err(invalid(format!("init.sigma2_init must be positive, got {s}")));
            }
        }
        for (name, [lo, hi]) in [
            ("sigma2_spread", i.sigma2_spread),
            ("gamma_init_rel", i.gamma_init_rel),
        ] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(invalid(format!(
                    "init.{name} must satisfy 0 < lo ≤ hi, got [{lo}, {hi}]"
                )));
            }
        }
        let g = &self.gospa;
        GospaParams {
            c: g.c,
            p: g.p,
            alpha: 2,
        }
        .validate()
        .map_err(|e| invalid(format!("gospa: {e}")))?;
        Ok(())
    }

    /// Serializes the fully resolved configuration (the artifact echo).
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn pulse_spec(&self) -> Result<PulseSpec, SignalError> {
        match &self.pulse.spectrum {
            None => PulseSpec::flat(self.pulse.m, self.pulse.delta_hz),
            Some(pairs) => PulseSpec::with_spectrum(
                self.pulse.m,
                self.pulse.delta_hz,
                pairs.iter().map(|&[re, im]| Complex64::new(re, im)).collect(),
            ),
        }
    }

    pub fn transition_params(&self) -> TransitionParams {
        let d = &self.dynamics;
        TransitionParams::from_variances(
            d.accel_var,
            d.feature_pos_var,
            d.feature_gamma_var,
            d.p_s,
            d.c_eps,
        )
    }

    pub fn birth_settings(&self) -> BirthSettings {
        let b = &self.birth;
        BirthSettings {
            p_birth: b.p_birth,
            mu_b: b.mu_b,
            cell_width: b.cell_width,
            gamma_prior_rel: (b.gamma_prior_rel[0], b.gamma_prior_rel[1]),
        }
    }

    pub fn amplitude_model(&self) -> PathAmplitudeModel {
        let a = &self.amplitude;
        PathAmplitudeModel {
            gamma_ref: a.gamma_ref,
            d_ref: a.d_ref,
            reflection_loss_db: a.reflection_loss_db,
        }
    }

    /// Prior spec anchored at the given true starting state.
    pub fn init_spec(&self, start_pos: Point2, start_vel: Point2) -> InitSpec {
        let i = &self.init;
        InitSpec {
            start_pos,
            start_vel,
            pos_std: i.pos_std,
            vel_std: i.vel_std,
            sigma2_init: i.sigma2_init.unwrap_or(self.amplitude.sigma2),
            sigma2_spread: (i.sigma2_spread[0], i.sigma2_spread[1]),
            gamma_init_rel: (i.gamma_init_rel[0], i.gamma_init_rel[1]),
        }
    }

    pub fn gospa_params(&self) -> GospaParams {
        GospaParams {
            c: self.gospa.c,
            p: self.gospa.p,
            alpha: 2,
        }
    }
}
