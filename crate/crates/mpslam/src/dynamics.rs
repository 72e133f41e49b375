//! State-transition and birth/survival models.
//!
//! Time is discrete with unit step duration, so all rates and covariances are
//! per step. The agent follows a constant-velocity model, feature states
//! (position + intensity) follow a Gaussian random walk with Bernoulli
//! survival, and the noise variance follows a mean-preserving Gamma walk.
//! Births attach one potential feature per range cell (annulus of one
//! delay-resolution width around the agent).

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scene::{Point2, Rect};

#[derive(Debug, thiserror::Error)]
pub enum DynamicsError {
    #[error("noise variance must be positive, got {0}")]
    NonPositiveSigma2(f64),
    #[error("birth cell {m} does not intersect the surveillance bounds")]
    DegenerateBirthCell { m: usize },
    #[error("invalid birth model: {0}")]
    InvalidBirthModel(String),
}

/// Agent kinematic state: position and per-step velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub p: Point2,
    pub v: Point2,
}

/// Feature kinematic state φ = (p, γ): position and path intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureKinematicState {
    pub p: Point2,
    pub gamma: f64,
}

/// Existence indicator r ∈ {0, 1} of a potential feature.
pub type ExistenceFlag = bool;

/// Transition model parameters. Stored as standard deviations; the §-style
/// per-step covariances are the squares (accel Σ = σ_qx²·I₂, feature walk
/// Σ = diag(σ_pos², σ_pos², σ_γ²)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionParams {
    /// Accel-noise std [m/step²].
    pub sigma_qx: f64,
    /// Feature position walk std [m/step].
    pub sigma_q_pos: f64,
    /// Feature intensity walk std [power/step].
    pub sigma_q_gamma: f64,
    /// Survival probability per step.
    pub p_s: f64,
    /// Gamma-walk spread parameter c_ε (variance σ²·c_ε).
    pub c_eps: f64,
}

impl TransitionParams {
    /// Builds from the variance parametrization (accel variance, feature walk
    /// variances, survival, Gamma spread).
    pub fn from_variances(
        accel_var: f64,
        walk_pos_var: f64,
        walk_gamma_var: f64,
        p_s: f64,
        c_eps: f64,
    ) -> Self {
        Self {
            sigma_qx: accel_var.sqrt(),
            sigma_q_pos: walk_pos_var.sqrt(),
            sigma_q_gamma: walk_gamma_var.sqrt(),
            p_s,
            c_eps,
        }
    }

    /// Constant-velocity state matrix F = [[I₂, I₂], [0, I₂]] (unit step),
    /// ordering (px, py, vx, vy).
    pub fn f_matrix() -> [[f64; 4]; 4] {
        [
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Noise input matrix W = [[½I₂], [I₂]] (unit step).
    pub fn w_matrix() -> [[f64; 2]; 4] {
        [[0.5, 0.0], [0.0, 0.5], [1.0, 0.0], [0.0, 1.0]]
    }
}

/// Per-cell birth model. `gamma_prior` is the (min, max) of the log-uniform
/// intensity prior in absolute power units (callers resolve any relative
/// specification before constructing the model).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BirthModel {
    /// Fixed per-PF birth probability; overrides the Poisson route when set.
    pub p_birth: Option<f64>,
    /// Poisson birth mean over the surveillance region (used when `p_birth`
    /// is unset, with a spatially uniform birth density over bounds).
    pub mu_b: Option<f64>,
    /// Range-cell width [m].
    pub cell_width: f64,
    pub gamma_prior: (f64, f64),
}

impl BirthModel {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let err = |m: String| Err(DynamicsError::InvalidBirthModel(m));
        if let Some(p) = self.p_birth {
            if !(p > 0.0 && p < 1.0) {
                return err(format!("p_birth must be in (0,1), got {p}"));
            }
        } else if self.mu_b.is_none() {
            return err("either p_birth or mu_b must be set".into());
        }
        if !(self.cell_width > 0.0) {
            return err(format!("cell_width must be positive, got {}", self.cell_width));
        }
        let (lo, hi) = self.gamma_prior;
        if !(lo > 0.0 && hi > lo) {
            return err(format!("gamma_prior must satisfy 0 < min < max, got ({lo}, {hi})"));
        }
        Ok(())
    }
}

/// One constant-velocity transition: x′ = F x + W q, q ~ N(0, σ_qx²·I₂).
pub fn agent_transition_sample<R: Rng>(
    x: &AgentState,
    params: &TransitionParams,
    rng: &mut R,
) -> AgentState {
    let qx: f64 = StandardNormal.sample(rng);
    let qy: f64 = StandardNormal.sample(rng);
    let q = Point2::new(qx * params.sigma_qx, qy * params.sigma_qx);
    AgentState {
        p: x.p + x.v + q * 0.5,
        v: x.v + q,
    }
}

/// Feature random walk φ′ = φ + q_φ (intensity clamped at 0, the boundary of
/// its domain).
pub fn feature_walk_sample<R: Rng>(
    phi: &FeatureKinematicState,
    params: &TransitionParams,
    rng: &mut R,
) -> FeatureKinematicState {
    let dx: f64 = StandardNormal.sample(rng);
    let dy: f64 = StandardNormal.sample(rng);
    let dg: f64 = StandardNormal.sample(rng);
    FeatureKinematicState {
        p: phi.p + Point2::new(dx * params.sigma_q_pos, dy * params.sigma_q_pos),
        gamma: (phi.gamma + dg * params.sigma_q_gamma).max(0.0),
    }
}

/// Full feature transition: dead features stay dead; live ones survive with
/// probability p_s and walk. The survival draw precedes the walk draws.
pub fn feature_transition_sample<R: Rng>(
    phi: &FeatureKinematicState,
    r: ExistenceFlag,
    params: &TransitionParams,
    rng: &mut R,
) -> (FeatureKinematicState, ExistenceFlag) {
    if !r {
        return (*phi, false);
    }
    let survives = rng.gen::<f64>() < params.p_s;
    let walked = feature_walk_sample(phi, params, rng);
    (walked, survives)
}

/// One Gamma-walk transition: σ²′ ~ G(shape = σ²/c_ε, scale = c_ε), so the
/// mean is preserved at σ² and the variance is σ²·c_ε. Zero draws (possible
/// underflow at small shape) are redrawn to keep the chain positive.
pub fn noise_var_transition_sample<R: Rng>(
    sigma2: f64,
    c_eps: f64,
    rng: &mut R,
) -> Result<f64, DynamicsError> {
    if !(sigma2 > 0.0) {
        return Err(DynamicsError::NonPositiveSigma2(sigma2));
    }
    debug_assert!(c_eps > 0.0);
    let dist = Gamma::new(sigma2 / c_eps, c_eps).expect("positive shape and scale");
    for _ in 0..100 {
        let s = dist.sample(rng);
        if s > 0.0 {
            return Ok(s);
        }
    }
    // vanishing shape: the mass sits at 0⁺; return a tiny positive value
    Ok(sigma2 * 1e-12)
}

/// Index m ≥ 1 of the range cell containing `p` as seen from `agent`:
/// (m−1)·w ≤ ‖p − agent‖ < m·w (half-open, boundary belongs to the upper
/// cell).
pub fn birth_cell(p: Point2, agent: Point2, model: &BirthModel) -> usize {
    (p.dist(agent) / model.cell_width).floor() as usize + 1
}

/// Draws a birth state for cell m: position uniform in area over the annulus
/// {(m−1)w ≤ ‖p−agent‖ < m·w} ∩ bounds (rejection sampling), intensity
/// log-uniform over `gamma_prior`.
pub fn sample_birth<R: Rng>(
    m: usize,
    agent: Point2,
    model: &BirthModel,
    bounds: &Rect,
    rng: &mut R,
) -> Result<FeatureKinematicState, DynamicsError> {
    debug_assert!(m >= 1);
    let w = model.cell_width;
    let r1 = (m - 1) as f64 * w;
    let r2 = m as f64 * w;
    let r1sq = r1 * r1;
    let r2sq = r2 * r2;
    for _ in 0..10_000 {
        let u: f64 = rng.gen();
        let r = (r1sq + u * (r2sq - r1sq)).sqrt();
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        let p = agent + Point2::new(r * theta.cos(), r * theta.sin());
        if bounds.contains(p) && p.dist(agent) < r2 {
            let (lo, hi) = model.gamma_prior;
            let lg = rng.gen::<f64>() * (hi.ln() - lo.ln()) + lo.ln();
            return Ok(FeatureKinematicState {
                p,
                gamma: lg.exp(),
            });
        }
    }
    Err(DynamicsError::DegenerateBirthCell { m })
}

/// Birth probability of the PF attached to cell m: the fixed override when
/// configured, otherwise p = μ_B,n/(μ_B,n + 1) with μ_B,n the Poisson mean
/// restricted to the cell (spatially uniform density over bounds, integrated
/// by Monte Carlo with ≥10⁴ points).
pub fn birth_probability<R: Rng>(
    m: usize,
    agent: Point2,
    model: &BirthModel,
    bounds: &Rect,
    rng: &mut R,
) -> f64 {
    if let Some(p) = model.p_birth {
        return p;
    }
    let mu_b = model.mu_b.expect("validated birth model");
    let w = model.cell_width;
    let r1 = (m - 1) as f64 * w;
    let r2 = m as f64 * w;
    const N: usize = 20_000;
    let mut hits = 0usize;
    for _ in 0..N {
        let p = Point2::new(
            rng.gen_range(bounds.min.x..bounds.max.x),
            rng.gen_range(bounds.min.y..bounds.max.y),
        );
        let d = p.dist(agent);
        if d >= r1 && d < r2 {
            hits += 1;
        }
    }
    let frac = hits as f64 / N as f64;
    let mu = mu_b * frac;
    mu / (mu + 1.0)
}
