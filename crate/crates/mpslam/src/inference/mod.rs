//! Belief-propagation engine: prediction, birth, moment-matched measurement
//! updates, existence bookkeeping, resampling, declaration/pruning and MMSE
//! estimation.
//!
//! All beliefs are weighted particle sets. Measurement updates approximate
//! each message by a single zero-mean complex Gaussian whose covariance is
//! the expectation of the model covariance under the predicted beliefs of the
//! marginalized variables (moment matching of a zero-mean mixture); the
//! conditioning variable stays explicit, so the agent update evaluates one
//! covariance per agent particle, the feature update one rank-one perturbation
//! per feature particle, and the noise update one diagonal shift per σ²
//! particle. Weight arithmetic is done in the log domain throughout.

mod load;
mod schedule;
mod updates;

pub use load::{expected_load, LoadAccumulator};
pub use schedule::{
    declare_and_prune, estimate, init_beliefs, predict, spawn_births, step, BeliefState,
    BirthSettings, InitSpec, StepContext, StepDiagnostics, StepOutput,
};
pub use updates::{thin_agents, update_agent, update_feature, update_noise, ThinnedAgents};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{AgentState, FeatureKinematicState};
use crate::scene::Point2;
use crate::signal::ModelCovariance;

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("empty particle set in {0}")]
    EmptyBelief(&'static str),
    #[error("degenerate update: {0}")]
    DegenerateUpdate(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHypers(String),
    #[error(transparent)]
    Signal(#[from] crate::signal::SignalError),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
    #[error("at step {step}, PA {pa}: {source}")]
    AtStep {
        step: usize,
        pa: usize,
        source: Box<InferenceError>,
    },
}

/// Weighted particle belief over the agent state.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBelief {
    pub particles: Vec<AgentState>,
    pub weights: Vec<f64>,
}

/// Bernoulli-existence belief over one potential feature. Particles represent
/// the r=1 branch; `existence` carries the Bernoulli mass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBelief {
    pub pf_id: u64,
    pub pa_index: usize,
    pub existence: f64,
    pub particles: Vec<FeatureKinematicState>,
    pub weights: Vec<f64>,
    pub origin_step: usize,
}

/// Particle belief over the noise variance σ² of one PA.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBelief {
    pub particles: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NoiseBelief {
    /// E[σ²] under the belief.
    pub fn mean_sigma2(&self) -> f64 {
        self.particles
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| s * w)
            .sum()
    }
}

/// A moment-matched zero-mean complex Gaussian message over z.
#[derive(Debug, Clone)]
pub struct GaussianMessage {
    pub cov: ModelCovariance,
}

/// Engine thresholds and particle counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hypers {
    /// Declaration threshold on existence (strict >).
    pub t_dec: f64,
    /// Pruning threshold on existence (strict <).
    pub t_pru: f64,
    pub p_a: usize,
    pub p_f: usize,
    pub p_sigma: usize,
    /// Resample when ESS < ess_frac × particle count.
    pub ess_frac: f64,
    /// Agent-particle subsample size for feature/noise updates.
    pub agent_thin: usize,
    /// Features whose total expected per-bin load falls below
    /// load_floor × E[σ²] are skipped when assembling update covariances
    /// (their own κ update still runs). 0 disables the floor.
    pub load_floor: f64,
    /// Localization gate [m], applied to feature clouds in two places.
    /// Agent update: features whose weighted rms position spread exceeds it
    /// are left out — a cloud wider than the delay resolution carries no
    /// usable geometry, while its mixture load peaks wherever the agent
    /// minimizes the spread of distances to it, i.e. at the cloud's
    /// centroid, which reads as a spurious attraction. Such features keep
    /// their own updates (and stay in the feature/noise bases) until they
    /// localize. Feature resampling: a cloud whose *support* (unweighted
    /// spread) exceeds it is held at an ESS crash — weights are carried
    /// instead of selected on — so the delay-annulus support can only
    /// narrow through accumulated evidence, never through selection noise.
    /// ∞ disables both gates.
    pub loc_gate: f64,
}

impl Hypers {
    pub fn validate(&self) -> Result<(), InferenceError> {
        let err = |m: String| Err(InferenceError::InvalidHypers(m));
        if !(0.0 < self.t_pru && self.t_pru < self.t_dec && self.t_dec < 1.0) {
            return err(format!(
                "need 0 < t_pru < t_dec < 1, got t_pru={} t_dec={}",
                self.t_pru, self.t_dec
            ));
        }
        if self.p_a < 100 {
            return err(format!("p_a must be ≥ 100, got {}", self.p_a));
        }
        if self.p_f < 50 {
            return err(format!("p_f must be ≥ 50, got {}", self.p_f));
        }
        if self.p_sigma == 0 {
            return err("p_sigma must be positive".into());
        }
        if !(self.ess_frac > 0.0 && self.ess_frac <= 1.0) {
            return err(format!("ess_frac must be in (0,1], got {}", self.ess_frac));
        }
        if self.agent_thin == 0 {
            return err("agent_thin must be positive".into());
        }
        if !(self.load_floor >= 0.0) {
            return err(format!("load_floor must be ≥ 0, got {}", self.load_floor));
        }
        if !(self.loc_gate > 0.0) {
            return err(format!("loc_gate must be > 0, got {}", self.loc_gate));
        }
        Ok(())
    }
}

impl Default for Hypers {
    fn default() -> Self {
        Self {
            t_dec: 0.5,
            t_pru: 1e-2,
            p_a: 2000,
            p_f: 200,
            p_sigma: 100,
            ess_frac: 0.5,
            agent_thin: 16,
            load_floor: 1e-3,
            loc_gate: 1.0,
        }
    }
}

/// Effective sample size 1/Σw² of a normalized weight vector.
pub fn ess(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().map(|w| w * w).sum();
    if s > 0.0 {
        1.0 / s
    } else {
        0.0
    }
}

/// Exponentiates and normalizes log-weights in place (log-sum-exp). Returns
/// an error when every entry is −∞.
pub(crate) fn normalize_log_weights(log_w: &mut [f64]) -> Result<(), InferenceError> {
    let mx = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(InferenceError::DegenerateUpdate(
            "all log-weights are -inf".into(),
        ));
    }
    let mut sum = 0.0;
    for w in log_w.iter_mut() {
        *w = (*w - mx).exp();
        sum += *w;
    }
    for w in log_w.iter_mut() {
        *w /= sum;
    }
    Ok(())
}

/// Normalizes plain weights in place.
pub(crate) fn normalize_weights(w: &mut [f64]) -> Result<(), InferenceError> {
    let sum: f64 = w.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(InferenceError::DegenerateUpdate(format!(
            "weight sum {sum} is not positive-finite"
        )));
    }
    for x in w.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// Systematic resampling: returns `n` source indices with the stratified
/// single-uniform scheme, so particle i appears ⌊n·w_i⌋ or ⌈n·w_i⌉ times.
pub fn systematic_resample_indices<R: Rng>(
    weights: &[f64],
    n: usize,
    rng: &mut R,
) -> Vec<usize> {
    debug_assert!(!weights.is_empty());
    let u0: f64 = rng.gen::<f64>() / n as f64;
    let mut indices = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0usize;
    for s in 0..n {
        let u = u0 + s as f64 / n as f64;
        while u > cum && i + 1 < weights.len() {
            i += 1;
            cum += weights[i];
        }
        indices.push(i);
    }
    indices
}

/// Weighted mean of agent particle positions.
pub(crate) fn weighted_mean_pos(particles: &[AgentState], weights: &[f64]) -> Point2 {
    let mut p = Point2::new(0.0, 0.0);
    for (x, w) in particles.iter().zip(weights) {
        p = p + x.p * *w;
    }
    p
}

/// Weighted mean of feature particle positions.
pub(crate) fn weighted_mean_feature_pos(
    particles: &[FeatureKinematicState],
    weights: &[f64],
) -> Point2 {
    let mut p = Point2::new(0.0, 0.0);
    for (x, w) in particles.iter().zip(weights) {
        p = p + x.p * *w;
    }
    p
}
