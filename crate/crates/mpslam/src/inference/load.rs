//! Expected-load assembly.
//!
//! Every covariance the updates need is σ²I plus a sum of terms
//! c_t·h(τ_t)h(τ_t)ᴴ. On the frequency grid f_a = (a−(M−1)/2)Δ the outer
//! product has entries H_a·conj(H_b)·e^{−j2πΔ(a−b)τ_t}, so the whole sum is
//! determined by the generator sequence g_d = Σ_t c_t·e^{−j2πΔdτ_t} for
//! d = 0..M−1. Accumulating g costs one complex exponential and M−1 complex
//! multiplies per term instead of M² multiply-adds, which is what makes the
//! per-particle agent update affordable. The dense matrix is materialized
//! once per factorization, not per term.

use num_complex::Complex64;

use crate::inference::FeatureBelief;
use crate::scene::Point2;
use crate::signal::PulseSpec;
use crate::SPEED_OF_LIGHT;

/// Accumulates the generator sequence of a Toeplitz-structured load sum.
#[derive(Debug, Clone)]
pub struct LoadAccumulator {
    m: usize,
    delta_hz: f64,
    g: Vec<Complex64>,
}

impl LoadAccumulator {
    pub fn new(pulse: &PulseSpec) -> Self {
        Self {
            m: pulse.m(),
            delta_hz: pulse.delta_hz(),
            g: vec![Complex64::new(0.0, 0.0); pulse.m()],
        }
    }

    pub fn clear(&mut self) {
        self.g.fill(Complex64::new(0.0, 0.0));
    }

    /// Adds c·h(τ)h(τ)ᴴ to the represented sum.
    pub fn add_term(&mut self, coeff: f64, tau: f64) {
        let theta = -2.0 * std::f64::consts::PI * self.delta_hz * tau;
        let (s, c) = theta.sin_cos();
        let (wr, wi) = (c, s);
        let (mut cr, mut ci) = (coeff, 0.0);
        for d in 0..self.m {
            self.g[d].re += cr;
            self.g[d].im += ci;
            let nr = cr * wr - ci * wi;
            ci = cr * wi + ci * wr;
            cr = nr;
        }
    }

    /// Adds Σ_t c_t·h(τ_t)h(τ_t)ᴴ. Equivalent to repeated `add_term`, but
    /// runs four independent recurrence chains to hide multiply latency.
    pub fn add_terms(&mut self, coeffs: &[f64], taus: &[f64]) {
        assert_eq!(coeffs.len(), taus.len());
        let n = coeffs.len();
        let mut t = 0;
        while t + 4 <= n {
            let mut wr = [0.0f64; 4];
            let mut wi = [0.0f64; 4];
            let mut cr = [0.0f64; 4];
            let mut ci = [0.0f64; 4];
            for l in 0..4 {
                let theta = -2.0 * std::f64::consts::PI * self.delta_hz * taus[t + l];
                let (s, c) = theta.sin_cos();
                wr[l] = c;
                wi[l] = s;
                cr[l] = coeffs[t + l];
                ci[l] = 0.0;
            }
            for d in 0..self.m {
                self.g[d].re += cr[0] + cr[1] + cr[2] + cr[3];
                self.g[d].im += ci[0] + ci[1] + ci[2] + ci[3];
                for l in 0..4 {
                    let nr = cr[l] * wr[l] - ci[l] * wi[l];
                    ci[l] = cr[l] * wi[l] + ci[l] * wr[l];
                    cr[l] = nr;
                }
            }
            t += 4;
        }
        while t < n {
            self.add_term(coeffs[t], taus[t]);
            t += 1;
        }
    }

    /// Adds one feature's expected load seen from `agent_pos`:
    /// existence · Σ_i w_i γ_i h(τ_i)h(τ_i)ᴴ, with τ_i the delay to
    /// particle i, optionally pre-scaled by `scale`.
    pub fn add_feature(&mut self, feature: &FeatureBelief, agent_pos: Point2, scale: f64) {
        let r = feature.existence * scale;
        if r == 0.0 {
            return;
        }
        let n = feature.particles.len();
        let mut coeffs = Vec::with_capacity(n);
        let mut taus = Vec::with_capacity(n);
        for (p, w) in feature.particles.iter().zip(&feature.weights) {
            coeffs.push(r * w * p.gamma);
            taus.push(agent_pos.dist(p.p) / SPEED_OF_LIGHT);
        }
        self.add_terms(&coeffs, &taus);
    }

    /// Elementwise sum with another accumulator over the same grid.
    pub fn add_assign(&mut self, other: &LoadAccumulator) {
        debug_assert_eq!(self.m, other.m);
        for (a, b) in self.g.iter_mut().zip(&other.g) {
            *a += b;
        }
    }

    /// Elementwise difference; exact removal of a sub-sum that was
    /// accumulated separately.
    pub fn minus(&self, other: &LoadAccumulator) -> LoadAccumulator {
        debug_assert_eq!(self.m, other.m);
        let mut out = self.clone();
        for (a, b) in out.g.iter_mut().zip(&other.g) {
            *a -= b;
        }
        out
    }

    /// Σ_t c_t — the represented sum's per-bin power before spectrum shaping.
    pub fn total_coeff(&self) -> f64 {
        self.g[0].re
    }

    /// Materializes σ²I plus the represented load as a dense row-major
    /// Hermitian matrix.
    pub fn to_covariance(&self, sigma2: f64, pulse: &PulseSpec) -> Vec<Complex64> {
        assert_eq!(self.m, pulse.m());
        let m = self.m;
        let spec = pulse.spectrum();
        let mut c = vec![Complex64::new(0.0, 0.0); m * m];
        for a in 0..m {
            for b in 0..m {
                let gd = if a >= b {
                    self.g[a - b]
                } else {
                    self.g[b - a].conj()
                };
                c[a * m + b] = spec[a] * spec[b].conj() * gd;
            }
            c[a * m + a].re += sigma2;
            c[a * m + a].im = 0.0;
        }
        c
    }
}

/// Expected load of one feature seen from `agent_pos`:
/// existence · Σ_i w_i γ_i h(τ(agent_pos, p_i)) h(τ(agent_pos, p_i))ᴴ
/// as a dense row-major M×M matrix.
pub fn expected_load(
    feature: &FeatureBelief,
    agent_pos: Point2,
    pulse: &PulseSpec,
) -> Vec<Complex64> {
    let mut acc = LoadAccumulator::new(pulse);
    acc.add_feature(feature, agent_pos, 1.0);
    acc.to_covariance(0.0, pulse)
}
