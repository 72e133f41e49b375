//! Frequency-domain signal model: pulse and steering vectors, Swerling-1
//! snapshot synthesis, and complex-Gaussian likelihood algebra.
//!
//! A snapshot is z = Σ_l ρ_l h(τ_l) + ε with per-path gains ρ_l drawn
//! zero-mean circular complex Gaussian of variance γ_l (Swerling 1, i.i.d.
//! across steps and paths) and white noise ε ~ CN(0, σ²I). Conditioned on the
//! geometry, z is zero-mean complex Gaussian with covariance
//! C = σ²I + Σ_l γ_l h(τ_l) h(τ_l)ᴴ; everything downstream evaluates that
//! density and low-rank perturbations of it in the log domain.

mod io;
mod linalg;

pub use io::{read_snapshots, write_snapshots, SnapshotFileMeta, SnapshotSet};
pub(crate) use linalg::{chol_in_place, dotc, forward_solve_in_place, norm2};

use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scene::{Point2, PropagationPath};
use crate::SPEED_OF_LIGHT;

#[derive(Debug, thiserror::Error)]
pub enum SignalError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("matrix is not Hermitian (max asymmetry {max_asym:e})")]
    NotHermitian { max_asym: f64 },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid pulse: {0}")]
    InvalidPulse(String),
    #[error("snapshot file {path}: {msg}")]
    SnapshotFile { path: String, msg: String },
    #[error("snapshot file {path}: {source}")]
    SnapshotIo {
        path: String,
        source: std::io::Error,
    },
}

/// Sampled transmit pulse: M frequency bins f_m = (m − (M+1)/2)·Δ for
/// m = 1..M, with per-bin spectrum values H(f_m).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSpec {
    m: usize,
    delta_hz: f64,
    h_spectrum: Vec<C64>,
}

impl PulseSpec {
    /// Flat unit-magnitude spectrum (H ≡ 1) over M bins.
    pub fn flat(m: usize, delta_hz: f64) -> Result<Self, SignalError> {
        Self::with_spectrum(m, delta_hz, vec![C64::new(1.0, 0.0); m])
    }

    pub fn with_spectrum(
        m: usize,
        delta_hz: f64,
        h_spectrum: Vec<C64>,
    ) -> Result<Self, SignalError> {
        if m < 3 || m % 2 == 0 {
            return Err(SignalError::InvalidPulse(format!(
                "M must be odd and ≥ 3, got {m}"
            )));
        }
        if !(delta_hz > 0.0) {
            return Err(SignalError::InvalidPulse(format!(
                "delta must be positive, got {delta_hz}"
            )));
        }
        if h_spectrum.len() != m {
            return Err(SignalError::Dimension {
                expected: m,
                got: h_spectrum.len(),
            });
        }
        if h_spectrum.iter().any(|h| !h.re.is_finite() || !h.im.is_finite()) {
            return Err(SignalError::NonFinite("pulse spectrum"));
        }
        Ok(Self {
            m,
            delta_hz,
            h_spectrum,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn delta_hz(&self) -> f64 {
        self.delta_hz
    }

    /// Bandwidth B = (M−1)·Δ.
    pub fn bandwidth_hz(&self) -> f64 {
        (self.m as f64 - 1.0) * self.delta_hz
    }

    /// Delay-resolution cell width c/B [m].
    pub fn range_cell_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.bandwidth_hz()
    }

    /// Frequency of bin `i` (0-based), f = (i − (M−1)/2)·Δ.
    pub fn freq_hz(&self, i: usize) -> f64 {
        (i as f64 - (self.m as f64 - 1.0) / 2.0) * self.delta_hz
    }

    pub fn spectrum(&self) -> &[C64] {
        &self.h_spectrum
    }
}

/// One received frequency-domain measurement vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub z: Vec<C64>,
    pub pa_index: usize,
    pub step: usize,
}

/// Ground-truth path intensity: free-space inverse-square law with a fixed
/// per-bounce reflection loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathAmplitudeModel {
    pub gamma_ref: f64,
    pub d_ref: f64,
    pub reflection_loss_db: f64,
}

impl PathAmplitudeModel {
    /// Expected path power γ = gamma_ref·(d_ref/d)²·10^(−bounce·loss/10).
    /// Distances below 1 mm are clamped to keep γ finite.
    pub fn intensity(&self, dist_m: f64, bounce: u8) -> f64 {
        let d = dist_m.max(1e-3);
        let spread = (self.d_ref / d).powi(2);
        let loss = 10f64.powf(-(bounce as f64) * self.reflection_loss_db / 10.0);
        self.gamma_ref * spread * loss
    }
}

/// Steering vector h(τ): entry m is H(f_m)·exp(−j 2π f_m τ).
pub fn steering_vector(tau: f64, pulse: &PulseSpec) -> Vec<C64> {
    debug_assert!(tau >= 0.0);
    (0..pulse.m)
        .map(|i| {
            let phase = -2.0 * std::f64::consts::PI * pulse.freq_hz(i) * tau;
            let (s, c) = phase.sin_cos();
            pulse.h_spectrum[i] * C64::new(c, s)
        })
        .collect()
}

/// Draws one circular complex Gaussian CN(0, var).
fn sample_cn<R: Rng>(var: f64, rng: &mut R) -> C64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(s * re, s * im)
}

/// Synthesizes one Swerling-1 snapshot: per-path gains ρ_l ~ CN(0, γ_l) with
/// γ_l from the amplitude model, plus white noise CN(0, σ²I). Gains are drawn
/// in path order, then the noise vector, so output is reproducible given the
/// generator state.
pub fn synthesize_snapshot<R: Rng>(
    paths: &[PropagationPath],
    amp: &PathAmplitudeModel,
    sigma2: f64,
    pulse: &PulseSpec,
    pa_index: usize,
    step: usize,
    rng: &mut R,
) -> Snapshot {
    assert!(sigma2 > 0.0, "sigma2 must be positive");
    let m = pulse.m;
    let mut z = vec![C64::new(0.0, 0.0); m];
    for p in paths {
        let gamma = amp.intensity(p.delay * SPEED_OF_LIGHT, p.bounce);
        let rho = sample_cn(gamma, rng);
        let h = steering_vector(p.delay, pulse);
        for (zi, hi) in z.iter_mut().zip(&h) {
            *zi += rho * hi;
        }
    }
    for zi in z.iter_mut() {
        *zi += sample_cn(sigma2, rng);
    }
    Snapshot { z, pa_index, step }
}

/// M×M Hermitian model covariance with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct ModelCovariance {
    m: usize,
    c: Vec<C64>,
    chol: Vec<C64>,
    log_det: f64,
}

impl ModelCovariance {
    /// Validates Hermitian symmetry (1e-12 relative) and factors the matrix.
    /// A failed factorization is retried once with diagonal jitter
    /// 1e-12·trace/M before giving up.
    pub fn new(c: Vec<C64>, m: usize) -> Result<Self, SignalError> {
        if c.len() != m * m {
            return Err(SignalError::Dimension {
                expected: m * m,
                got: c.len(),
            });
        }
        if c.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(SignalError::NonFinite("covariance"));
        }
        let scale = c.iter().map(|z| z.norm()).fold(0.0f64, f64::max).max(1e-300);
        let mut max_asym = 0.0f64;
        for i in 0..m {
            for j in 0..=i {
                let d = (c[i * m + j] - c[j * m + i].conj()).norm();
                max_asym = max_asym.max(d);
            }
        }
        if max_asym > 1e-12 * scale {
            return Err(SignalError::NotHermitian {
                max_asym: max_asym / scale,
            });
        }
        let mut chol = c.clone();
        let log_det = match chol_in_place(&mut chol, m) {
            Some(ld) => ld,
            None => {
                let trace: f64 = (0..m).map(|i| c[i * m + i].re).sum();
                let jitter = 1e-12 * trace / m as f64;
                chol.copy_from_slice(&c);
                for i in 0..m {
                    chol[i * m + i] += C64::new(jitter, 0.0);
                }
                chol_in_place(&mut chol, m).ok_or(SignalError::NotPositiveDefinite)?
            }
        };
        Ok(Self { m, c, chol, log_det })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn entry(&self, i: usize, j: usize) -> C64 {
        self.c[i * self.m + j]
    }

    pub fn matrix(&self) -> &[C64] {
        &self.c
    }

    /// ln det C.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// L⁻¹ v for the cached factor (whitening half-solve).
    pub(crate) fn solve_lower(&self, v: &[C64]) -> Vec<C64> {
        let mut out = v.to_vec();
        forward_solve_in_place(&self.chol, self.m, &mut out);
        out
    }
}

/// σ²I + Σ_{n: r_n=1} γ_n h(τ_n)h(τ_n)ᴴ at τ_n = ‖agent − p_n‖/c.
pub fn model_covariance(
    agent_pos: Point2,
    features: &[(Point2, f64, bool)],
    sigma2: f64,
    pulse: &PulseSpec,
) -> Result<ModelCovariance, SignalError> {
    if !(sigma2 > 0.0) {
        return Err(SignalError::NonFinite("sigma2 must be positive"));
    }
    let m = pulse.m;
    let mut c = vec![C64::new(0.0, 0.0); m * m];
    for i in 0..m {
        c[i * m + i] = C64::new(sigma2, 0.0);
    }
    for &(p, gamma, exists) in features {
        if !exists || gamma == 0.0 {
            continue;
        }
        debug_assert!(gamma >= 0.0);
        let tau = agent_pos.dist(p) / SPEED_OF_LIGHT;
        let h = steering_vector(tau, pulse);
        for i in 0..m {
            for j in 0..m {
                c[i * m + j] += h[i] * h[j].conj() * gamma;
            }
        }
    }
    ModelCovariance::new(c, m)
}

/// Zero-mean circular complex Gaussian log-density:
/// −M·ln π − ln det C − zᴴ C⁻¹ z, via the cached Cholesky.
pub fn loglik(z: &Snapshot, cov: &ModelCovariance) -> Result<f64, SignalError> {
    if z.z.len() != cov.m {
        return Err(SignalError::Dimension {
            expected: cov.m,
            got: z.z.len(),
        });
    }
    if z.z.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(SignalError::NonFinite("snapshot"));
    }
    let t = cov.solve_lower(&z.z);
    Ok(loglik_from_parts(cov.m, cov.log_det, norm2(&t)))
}

/// Assembles the log-density from precomputed pieces (shared by the cached
/// and rank-one paths).
pub(crate) fn loglik_from_parts(m: usize, log_det: f64, quad: f64) -> f64 {
    -(m as f64) * std::f64::consts::PI.ln() - log_det - quad
}

/// Log-likelihood of z under C ± γ·u uᴴ without refactorizing, via the
/// matrix-determinant lemma and Sherman–Morrison on the cached factor.
///
/// `sign` must be +1 or −1; a downdate that would leave the matrix indefinite
/// is an error.
pub fn loglik_rank_one_delta(
    z: &Snapshot,
    cov: &ModelCovariance,
    u: &[C64],
    gamma: f64,
    sign: i8,
) -> Result<f64, SignalError> {
    assert!(sign == 1 || sign == -1, "sign must be ±1");
    if u.len() != cov.m || z.z.len() != cov.m {
        return Err(SignalError::Dimension {
            expected: cov.m,
            got: u.len(),
        });
    }
    debug_assert!(gamma >= 0.0);
    let t = cov.solve_lower(&z.z);
    let s = cov.solve_lower(u);
    let g = f64::from(sign) * gamma;
    let denom = 1.0 + g * norm2(&s);
    if !(denom > 0.0) {
        return Err(SignalError::NotPositiveDefinite);
    }
    let st = dotc(&s, &t).norm_sqr();
    let quad = norm2(&t) - g * st / denom;
    Ok(loglik_from_parts(cov.m, cov.log_det + denom.ln(), quad))
}
