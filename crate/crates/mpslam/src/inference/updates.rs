//! The three measurement updates.
//!
//! Each update conditions on one variable and moment-matches the rest: the
//! agent update evaluates the full covariance at every agent particle, the
//! feature update perturbs a shared base covariance by one rank-one term per
//! feature particle, and the noise update shifts the diagonal of a shared
//! load matrix per σ² particle. The base covariances average the load over a
//! small weight-proportional subsample of agent particles (`Hypers::
//! agent_thin`); one subsample per PA and step is shared by the feature and
//! noise updates so the engine's cost stays linear in the particle counts.
//!
//! Features whose total expected per-bin power falls below
//! `load_floor × E[σ²]` are left out of assembled covariances: their
//! contribution is below the resolution of the likelihood while their own
//! update still runs. This is what keeps newborn features (existence 1e-4)
//! from costing a covariance term each.

use rand::Rng;

use crate::inference::load::LoadAccumulator;
use crate::inference::{
    normalize_log_weights, normalize_weights, AgentBelief, FeatureBelief, Hypers,
    InferenceError, NoiseBelief,
};
use crate::scene::Point2;
use crate::signal::{
    loglik, loglik_rank_one_delta, steering_vector, ModelCovariance, PulseSpec, SignalError,
    Snapshot,
};
use crate::SPEED_OF_LIGHT;

/// A weight-proportional subsample of agent particles, drawn once per PA and
/// step and shared by the feature and noise updates.
#[derive(Debug, Clone)]
pub struct ThinnedAgents {
    pub positions: Vec<Point2>,
    pub weights: Vec<f64>,
    pub mean_pos: Point2,
}

/// Draws `size` agent particles weight-proportionally without replacement
/// (all of them, with their weights, when the belief is no larger than
/// `size`). The subsample carries uniform weights when drawn.
pub fn thin_agents<R: Rng>(agent: &AgentBelief, size: usize, rng: &mut R) -> ThinnedAgents {
    let n = agent.particles.len();
    let (positions, weights) = if n <= size {
        (
            agent.particles.iter().map(|s| s.p).collect::<Vec<_>>(),
            agent.weights.clone(),
        )
    } else {
        let mut remaining = agent.weights.clone();
        let mut total: f64 = remaining.iter().sum();
        let mut chosen = Vec::with_capacity(size);
        for _ in 0..size {
            if !(total > 0.0) {
                break; // fewer positive-weight particles than requested
            }
            let u = rng.gen::<f64>() * total;
            let mut cum = 0.0;
            let mut pick = remaining.len() - 1;
            for (i, w) in remaining.iter().enumerate() {
                cum += w;
                if u <= cum && *w > 0.0 {
                    pick = i;
                    break;
                }
            }
            total -= remaining[pick];
            remaining[pick] = 0.0;
            chosen.push(pick);
        }
        let k = chosen.len().max(1);
        (
            chosen
                .iter()
                .map(|&i| agent.particles[i].p)
                .collect::<Vec<_>>(),
            vec![1.0 / k as f64; chosen.len()],
        )
    };
    let mut mean_pos = Point2::new(0.0, 0.0);
    for (p, w) in positions.iter().zip(&weights) {
        mean_pos = mean_pos + *p * *w;
    }
    ThinnedAgents {
        positions,
        weights,
        mean_pos,
    }
}

/// Mean per-bin spectrum power, the scale that converts a feature's total
/// intensity into expected per-bin load.
fn mean_spectrum_power(pulse: &PulseSpec) -> f64 {
    pulse.spectrum().iter().map(|h| h.norm_sqr()).sum::<f64>() / pulse.m() as f64
}

fn total_intensity(f: &FeatureBelief) -> f64 {
    f.particles
        .iter()
        .zip(&f.weights)
        .map(|(p, w)| w * p.gamma)
        .sum()
}

fn passes_floor(f: &FeatureBelief, mean_h2: f64, load_floor: f64, sigma_bar: f64) -> bool {
    f.existence * total_intensity(f) * mean_h2 > load_floor * sigma_bar
}

/// Weighted rms distance of a feature cloud from its weighted mean position.
fn position_spread(f: &FeatureBelief) -> f64 {
    let mut mean = Point2::new(0.0, 0.0);
    for (p, w) in f.particles.iter().zip(&f.weights) {
        mean = mean + p.p * *w;
    }
    f.particles
        .iter()
        .zip(&f.weights)
        .map(|(p, w)| w * p.p.dist(mean).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Reweights the agent belief by the snapshot likelihood: per particle p the
/// covariance is E[σ²]·I plus the expected load of every localized feature
/// (position spread ≤ `loc_gate`) seen from x⁽ᵖ⁾. A degenerate update (every
/// likelihood −∞) is an error; the caller keeps the predicted belief.
pub fn update_agent(
    agent: &AgentBelief,
    features: &[FeatureBelief],
    noise: &NoiseBelief,
    z: &Snapshot,
    pulse: &PulseSpec,
    load_floor: f64,
    loc_gate: f64,
) -> Result<AgentBelief, InferenceError> {
    if agent.particles.is_empty() {
        return Err(InferenceError::EmptyBelief("agent"));
    }
    if noise.particles.is_empty() {
        return Err(InferenceError::EmptyBelief("noise"));
    }
    let sigma_bar = noise.mean_sigma2();
    let mh2 = mean_spectrum_power(pulse);

    // Intensity coefficients are particle-indexed but agent-independent, so
    // flatten them once; only the delays change per agent particle.
    let mut coeffs = Vec::new();
    let mut points = Vec::new();
    for f in features {
        if !passes_floor(f, mh2, load_floor, sigma_bar) || position_spread(f) > loc_gate {
            continue;
        }
        for (p, w) in f.particles.iter().zip(&f.weights) {
            coeffs.push(f.existence * w * p.gamma);
            points.push(p.p);
        }
    }

    let mut log_w: Vec<f64> = agent.weights.iter().map(|w| w.ln()).collect();
    let mut acc = LoadAccumulator::new(pulse);
    let mut taus = vec![0.0; coeffs.len()];
    for (state, lw) in agent.particles.iter().zip(log_w.iter_mut()) {
        if *lw == f64::NEG_INFINITY {
            continue;
        }
        acc.clear();
        for (t, pt) in taus.iter_mut().zip(&points) {
            *t = state.p.dist(*pt) / SPEED_OF_LIGHT;
        }
        acc.add_terms(&coeffs, &taus);
        let cov = ModelCovariance::new(acc.to_covariance(sigma_bar, pulse), pulse.m())?;
        *lw += loglik(z, &cov)?;
    }
    normalize_log_weights(&mut log_w)?;
    Ok(AgentBelief {
        particles: agent.particles.clone(),
        weights: log_w,
    })
}

/// Per-PA shared state for the feature and noise updates: the thinned-average
/// total load generator and each included feature's own share.
pub(crate) struct PaBase {
    pub g_total: LoadAccumulator,
    /// Parallel to the feature list handed to `prepare_base`; `None` for
    /// features under the load floor (they are not part of `g_total`).
    pub g_own: Vec<Option<LoadAccumulator>>,
}

pub(crate) fn prepare_base(
    features: &[&FeatureBelief],
    thinned: &ThinnedAgents,
    sigma_bar: f64,
    load_floor: f64,
    pulse: &PulseSpec,
) -> PaBase {
    let mh2 = mean_spectrum_power(pulse);
    let mut g_total = LoadAccumulator::new(pulse);
    let mut g_own = Vec::with_capacity(features.len());
    for f in features {
        if passes_floor(f, mh2, load_floor, sigma_bar) {
            let mut own = LoadAccumulator::new(pulse);
            for (x, w) in thinned.positions.iter().zip(&thinned.weights) {
                own.add_feature(f, *x, *w);
            }
            g_total.add_assign(&own);
            g_own.push(Some(own));
        } else {
            g_own.push(None);
        }
    }
    PaBase { g_total, g_own }
}

/// Core of the feature update against a prepared others-only base generator.
fn update_feature_with_base(
    feature: &FeatureBelief,
    others: &LoadAccumulator,
    sigma_bar: f64,
    mean_pos: Point2,
    z: &Snapshot,
    pulse: &PulseSpec,
) -> Result<FeatureBelief, InferenceError> {
    if feature.particles.is_empty() {
        return Err(InferenceError::EmptyBelief("feature"));
    }
    let cov = ModelCovariance::new(others.to_covariance(sigma_bar, pulse), pulse.m())?;
    let l0 = loglik(z, &cov)?;

    let n = feature.particles.len();
    let mut l1 = vec![0.0; n];
    for (i, p) in feature.particles.iter().enumerate() {
        if p.gamma == 0.0 {
            l1[i] = l0;
            continue;
        }
        let tau = mean_pos.dist(p.p) / SPEED_OF_LIGHT;
        let h = steering_vector(tau, pulse);
        l1[i] = loglik_rank_one_delta(z, &cov, &h, p.gamma, 1)?;
    }

    // Shared max over the positive-weight particles keeps the exponentials
    // representable in both the weight and existence computations.
    let mx = feature
        .weights
        .iter()
        .zip(&l1)
        .filter(|(w, _)| **w > 0.0)
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(InferenceError::DegenerateUpdate(format!(
            "feature {} update: all conditional likelihoods vanished",
            feature.pf_id
        )));
    }

    let m_star = mx.max(l0);
    let mut weights: Vec<f64> = feature
        .weights
        .iter()
        .zip(&l1)
        .map(|(w, l)| w * (l - m_star).exp())
        .collect();
    let l1_bar: f64 = weights.iter().sum();
    let l0_scaled = (l0 - m_star).exp();
    normalize_weights(&mut weights)?;

    let num = feature.existence * l1_bar;
    let den = num + (1.0 - feature.existence) * l0_scaled;
    if !(den > 0.0) || !den.is_finite() {
        return Err(InferenceError::DegenerateUpdate(format!(
            "feature {} update: existence posterior is undefined",
            feature.pf_id
        )));
    }
    let existence = (num / den).clamp(0.0, 1.0);

    Ok(FeatureBelief {
        pf_id: feature.pf_id,
        pa_index: feature.pa_index,
        existence,
        particles: feature.particles.clone(),
        weights,
        origin_step: feature.origin_step,
    })
}

/// Measurement update of one feature's kinematic belief and existence.
///
/// The base covariance averages E[σ²]·I plus the other features' expected
/// loads over a thinned agent subsample; the feature's own term enters as a
/// rank-one perturbation per particle, with the steering vector taken at the
/// subsample's weighted-mean position. Existence follows the Bernoulli
/// posterior p̂·L̄₁ / (p̂·L̄₁ + (1−p̂)·L₀) under a shared log offset.
pub fn update_feature<R: Rng>(
    feature: &FeatureBelief,
    other_features: &[FeatureBelief],
    agent: &AgentBelief,
    noise: &NoiseBelief,
    z: &Snapshot,
    pulse: &PulseSpec,
    hypers: &Hypers,
    rng: &mut R,
) -> Result<FeatureBelief, InferenceError> {
    if agent.particles.is_empty() {
        return Err(InferenceError::EmptyBelief("agent"));
    }
    if noise.particles.is_empty() {
        return Err(InferenceError::EmptyBelief("noise"));
    }
    let thinned = thin_agents(agent, hypers.agent_thin, rng);
    let sigma_bar = noise.mean_sigma2();
    let refs: Vec<&FeatureBelief> = other_features.iter().collect();
    let base = prepare_base(&refs, &thinned, sigma_bar, hypers.load_floor, pulse);
    update_feature_with_base(feature, &base.g_total, sigma_bar, thinned.mean_pos, z, pulse)
}

/// Batch feature update for one PA sharing a single prepared base. Returns
/// the number of degenerate per-feature updates (those keep their predicted
/// belief).
pub(crate) fn update_features_for_pa(
    features: &mut [FeatureBelief],
    idxs: &[usize],
    thinned: &ThinnedAgents,
    sigma_bar: f64,
    z: &Snapshot,
    pulse: &PulseSpec,
    hypers: &Hypers,
) -> Result<usize, InferenceError> {
    let base = {
        let refs: Vec<&FeatureBelief> = idxs.iter().map(|&i| &features[i]).collect();
        prepare_base(&refs, thinned, sigma_bar, hypers.load_floor, pulse)
    };
    let mut degenerate = 0usize;
    for (k, &fi) in idxs.iter().enumerate() {
        let others = match &base.g_own[k] {
            Some(own) => base.g_total.minus(own),
            None => base.g_total.clone(),
        };
        let first = update_feature_with_base(
            &features[fi],
            &others,
            sigma_bar,
            thinned.mean_pos,
            z,
            pulse,
        );
        let outcome = match first {
            Err(InferenceError::Signal(SignalError::NotPositiveDefinite)) => {
                // Cancellation in total − own pushed an eigenvalue below
                // zero; rebuild the base from the other features directly.
                let mut fresh = LoadAccumulator::new(pulse);
                for (k2, own) in base.g_own.iter().enumerate() {
                    if k2 != k {
                        if let Some(o) = own {
                            fresh.add_assign(o);
                        }
                    }
                }
                update_feature_with_base(
                    &features[fi],
                    &fresh,
                    sigma_bar,
                    thinned.mean_pos,
                    z,
                    pulse,
                )
            }
            other => other,
        };
        match outcome {
            Ok(updated) => features[fi] = updated,
            Err(InferenceError::DegenerateUpdate(_)) => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(degenerate)
}

/// Core of the noise update against a prepared total-load generator.
pub(crate) fn update_noise_with_base(
    noise: &NoiseBelief,
    g_total: &LoadAccumulator,
    z: &Snapshot,
    pulse: &PulseSpec,
) -> Result<NoiseBelief, InferenceError> {
    if noise.particles.is_empty() {
        return Err(InferenceError::EmptyBelief("noise"));
    }
    let mut log_w: Vec<f64> = noise.weights.iter().map(|w| w.ln()).collect();
    for (sq, lw) in noise.particles.iter().zip(log_w.iter_mut()) {
        if *lw == f64::NEG_INFINITY {
            continue;
        }
        let cov = ModelCovariance::new(g_total.to_covariance(*sq, pulse), pulse.m())?;
        *lw += loglik(z, &cov)?;
    }
    normalize_log_weights(&mut log_w)?;
    Ok(NoiseBelief {
        particles: noise.particles.clone(),
        weights: log_w,
    })
}

/// Measurement update of one PA's noise belief: per σ² particle the
/// covariance is σ²·I plus the total expected load averaged over a thinned
/// agent subsample.
pub fn update_noise<R: Rng>(
    noise: &NoiseBelief,
    features: &[FeatureBelief],
    agent: &AgentBelief,
    z: &Snapshot,
    pulse: &PulseSpec,
    hypers: &Hypers,
    rng: &mut R,
) -> Result<NoiseBelief, InferenceError> {
    if agent.particles.is_empty() {
        return Err(InferenceError::EmptyBelief("agent"));
    }
    let thinned = thin_agents(agent, hypers.agent_thin, rng);
    let sigma_bar = noise.mean_sigma2();
    let refs: Vec<&FeatureBelief> = features.iter().collect();
    let base = prepare_base(&refs, &thinned, sigma_bar, hypers.load_floor, pulse);
    update_noise_with_base(noise, &base.g_total, z, pulse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{AgentState, FeatureKinematicState};
    use crate::scene::PropagationPath;
    use crate::signal::{synthesize_snapshot, PathAmplitudeModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_agent(positions: &[(f64, f64)]) -> AgentBelief {
        let n = positions.len();
        AgentBelief {
            particles: positions
                .iter()
                .map(|&(x, y)| AgentState {
                    p: Point2::new(x, y),
                    v: Point2::new(0.0, 0.0),
                })
                .collect(),
            weights: vec![1.0 / n as f64; n],
        }
    }

    fn point_feature(pos: (f64, f64), gamma: f64, existence: f64) -> FeatureBelief {
        FeatureBelief {
            pf_id: 7,
            pa_index: 0,
            existence,
            particles: vec![FeatureKinematicState {
                p: Point2::new(pos.0, pos.1),
                gamma,
            }],
            weights: vec![1.0],
            origin_step: 0,
        }
    }

    fn known_noise(sigma2: f64) -> NoiseBelief {
        NoiseBelief {
            particles: vec![sigma2],
            weights: vec![1.0],
        }
    }

    /// One direct path from a hypothetical anchor at `pos`, reaching the
    /// receiver across `dist` meters.
    fn direct_path(pos: (f64, f64), dist: f64) -> PropagationPath {
        PropagationPath {
            anchor_pos: Point2::new(pos.0, pos.1),
            delay: dist / SPEED_OF_LIGHT,
            bounce: 0,
            segment_id: None,
            pa_index: 0,
        }
    }

    #[test]
    fn agent_update_without_features_keeps_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pulse = PulseSpec::flat(41, 1e7).unwrap();
        let agent = uniform_agent(&[(0.0, 0.0), (3.0, 1.0), (-2.0, 4.0)]);
        let amp = PathAmplitudeModel {
            gamma_ref: 1.0,
            d_ref: 1.0,
            reflection_loss_db: 3.0,
        };
        let z = synthesize_snapshot(&[], &amp, 1.0, &pulse, 0, 0, &mut rng);
        let post = update_agent(&agent, &[], &known_noise(1.0), &z, &pulse, 0.0, f64::INFINITY).unwrap();
        for w in &post.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn agent_update_prefers_the_true_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let pulse = PulseSpec::flat(41, 1e7).unwrap();
        let anchor = (10.0, 0.0);
        let truth = Point2::new(0.0, 0.0);
        let amp = PathAmplitudeModel {
            gamma_ref: 200.0,
            d_ref: 10.0,
            reflection_loss_db: 3.0,
        };
        // Candidate 4 m off in range: two full range cells at 400 MHz.
        let agent = uniform_agent(&[(0.0, 0.0), (4.0, 0.0)]);
        let feature = point_feature(anchor, 200.0, 1.0);
        let noise = known_noise(1.0);
        let mut wins = 0;
        for _ in 0..20 {
            let path = direct_path(anchor, truth.dist(Point2::new(anchor.0, anchor.1)));
            let z = synthesize_snapshot(&[path], &amp, 1.0, &pulse, 0, 0, &mut rng);
            let post = update_agent(&agent, &[feature.clone()], &noise, &z, &pulse, 0.0, f64::INFINITY).unwrap();
            if post.weights[0] > post.weights[1] {
                wins += 1;
            }
        }
        assert!(wins >= 17, "true position won only {wins}/20 snapshots");
    }

    #[test]
    fn agent_update_floor_skips_negligible_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pulse = PulseSpec::flat(41, 1e7).unwrap();
        let agent = uniform_agent(&[(0.0, 0.0), (1.0, 0.0), (0.0, 2.0)]);
        let amp = PathAmplitudeModel {
            gamma_ref: 1.0,
            d_ref: 1.0,
            reflection_loss_db: 3.0,
        };
        let z = synthesize_snapshot(&[], &amp, 1.0, &pulse, 0, 0, &mut rng);
        // existence · Σwγ = 1e-4 · 3 < 1e-3 · 1 → floored out.
        let faint = point_feature((5.0, 5.0), 3.0, 1e-4);
        let with_faint =
            update_agent(&agent, &[faint], &known_noise(1.0), &z, &pulse, 1e-3, f64::INFINITY).unwrap();
        let without = update_agent(&agent, &[], &known_noise(1.0), &z, &pulse, 1e-3, f64::INFINITY).unwrap();
        for (a, b) in with_faint.weights.iter().zip(&without.weights) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn agent_update_gate_skips_unlocalized_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let pulse = PulseSpec::flat(41, 1e7).unwrap();
        let agent = uniform_agent(&[(0.0, 0.0), (1.0, 0.0), (0.0, 2.0)]);
        let amp = PathAmplitudeModel {
            gamma_ref: 1.0,
            d_ref: 1.0,
            reflection_loss_db: 3.0,
        };
        let z = synthesize_snapshot(&[], &amp, 1.0, &pulse, 0, 0, &mut rng);
        // A strong feature smeared over ±4 m: rms spread 4 m > 1 m gate.
        let diffuse = FeatureBelief {
            pf_id: 7,
            pa_index: 0,
            existence: 1.0,
            particles: vec![
                FeatureKinematicState {
                    p: Point2::new(1.0, 0.0),
                    gamma: 5.0,
                },
                FeatureKinematicState {
                    p: Point2::new(9.0, 0.0),
                    gamma: 5.0,
                },
            ],
            weights: vec![0.5, 0.5],
            origin_step: 0,
        };
        let gated = update_agent(&agent, &[diffuse.clone()], &known_noise(1.0), &z, &pulse, 0.0, 1.0)
            .unwrap();
        let without = update_agent(&agent, &[], &known_noise(1.0), &z, &pulse, 0.0, 1.0).unwrap();
        for (a, b) in gated.weights.iter().zip(&without.weights) {
            assert_eq!(a, b);
        }
        // The same cloud collapsed to ±0.2 m passes the gate and changes the
        // posterior.
        let mut tight = diffuse;
        tight.particles[0].p = Point2::new(4.8, 0.0);
        tight.particles[1].p = Point2::new(5.2, 0.0);
        let open = update_agent(&agent, &[tight], &known_noise(1.0), &z, &pulse, 0.0, 1.0).unwrap();
        assert!(
            open.weights
                .iter()
                .zip(&without.weights)
                .any(|(a, b)| (a - b).abs() > 1e-12),
            "localized feature had no effect on the agent update"
        );
    }

    #[test]
    fn feature_update_raises_existence_when_path_present() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let pulse = PulseSpec::flat(41, 1e7).unwrap();
        let anchor = (8.0, 0.0);
        let amp = PathAmplitudeModel {
            gamma_ref: 100.0,
            d_ref: 8.0,
            reflection_loss_db: 3.0,
        };
        let agent = uniform_agent(&[(0.0, 0.0)]);
        let noise = known_noise(1.0);
        let hypers = Hypers::default();
        let feature = point_feature(anchor, 100.0, 0.5);
        let path = direct_path(anchor, 8.0);
        let z = synthesize_snapshot(&[path], &amp, 1.0, &pulse, 0, 0, &mut rng);
        let post = update_feature(
            &feature, &[], &agent, &noise, &z, &pulse, &hypers, &mut rng,
        )
        .unwrap();
        assert!(
            post.existence > 0.99,
            "existence only reached {}",
            post.existence
        );
    }

    #[test]
    fn feature_update_lowers_existence_when_only_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let pulse = PulseSpec::flat(41, 1e7).unwrap();
        let amp = PathAmplitudeModel {
            gamma_ref: 100.0,
            d_ref: 8.0,
            reflection_loss_db: 3.0,
        };
        let agent = uniform_agent(&[(0.0, 0.0)]);
        let noise = known_noise(1.0);
        let hypers = Hypers::default();
        let feature = point_feature((8.0, 0.0), 100.0, 0.5);
        let z = synthesize_snapshot(&[], &amp, 1.0, &pulse, 0, 0, &mut rng);
        let post = update_feature(
            &feature, &[], &agent, &noise, &z, &pulse, &hypers, &mut rng,
        )
        .unwrap();
        assert!(
            post.existence < 0.05,
            "existence stayed at {}",
            post.existence
        );
    }

    #[test]
    fn existence_posterior_matches_direct_bernoulli_bayes() {
        // Single feature particle, so L̄₁ is one dense likelihood; the
        // update must reproduce p̂L₁/(p̂L₁+(1−p̂)L₀) computed with two
        // independent dense factorizations.
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let pulse = PulseSpec::flat(21, 1e7).unwrap();
        let anchor = Point2::new(6.0, 1.0);
        let agent = uniform_agent(&[(0.0, 0.5)]);
        let noise = known_noise(2.0);
        let hypers = Hypers {
            load_floor: 0.0,
            ..Hypers::default()
        };
        let gamma = 37.0;
        let p_hat = 0.31;
        let feature = point_feature((anchor.x, anchor.y), gamma, p_hat);
        let amp = PathAmplitudeModel {
            gamma_ref: gamma,
            d_ref: agent.particles[0].p.dist(anchor),
            reflection_loss_db: 3.0,
        };
        let path = direct_path((anchor.x, anchor.y), agent.particles[0].p.dist(anchor));
        let z = synthesize_snapshot(&[path], &amp, 2.0, &pulse, 0, 0, &mut rng);

        let post = update_feature(
            &feature, &[], &agent, &noise, &z, &pulse, &hypers, &mut rng,
        )
        .unwrap();

        let c0 = crate::signal::model_covariance(agent.particles[0].p, &[], 2.0, &pulse).unwrap();
        let c1 = crate::signal::model_covariance(
            agent.particles[0].p,
            &[(anchor, gamma, true)],
            2.0,
            &pulse,
        )
        .unwrap();
        let l0 = loglik(&z, &c0).unwrap();
        let l1 = loglik(&z, &c1).unwrap();
        let m = l0.max(l1);
        let want =
            p_hat * (l1 - m).exp() / (p_hat * (l1 - m).exp() + (1.0 - p_hat) * (l0 - m).exp());
        assert!(
            (post.existence - want).abs() < 1e-10,
            "{} vs {}",
            post.existence,
            want
        );
    }

    #[test]
    fn batch_update_matches_single_op_when_thinning_is_trivial() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let pulse = PulseSpec::flat(21, 1e7).unwrap();
        let agent = uniform_agent(&[(0.0, 0.0), (0.3, 0.1)]);
        let noise = known_noise(1.0);
        let hypers = Hypers {
            agent_thin: 16, // ≥ particle count → deterministic passthrough
            load_floor: 0.0,
            ..Hypers::default()
        };
        let fa = point_feature((5.0, 0.0), 50.0, 0.6);
        let mut fb = point_feature((0.0, 7.0), 30.0, 0.4);
        fb.pf_id = 8;
        let amp = PathAmplitudeModel {
            gamma_ref: 50.0,
            d_ref: 5.0,
            reflection_loss_db: 3.0,
        };
        let z = synthesize_snapshot(
            &[direct_path((5.0, 0.0), 5.0)],
            &amp,
            1.0,
            &pulse,
            0,
            0,
            &mut rng,
        );

        let single_a = update_feature(
            &fa,
            std::slice::from_ref(&fb),
            &agent,
            &noise,
            &z,
            &pulse,
            &hypers,
            &mut rng,
        )
        .unwrap();
        let single_b = update_feature(
            &fb,
            std::slice::from_ref(&fa),
            &agent,
            &noise,
            &z,
            &pulse,
            &hypers,
            &mut rng,
        )
        .unwrap();

        let mut batch = vec![fa.clone(), fb.clone()];
        let thinned = thin_agents(&agent, hypers.agent_thin, &mut rng);
        let degenerate = update_features_for_pa(
            &mut batch,
            &[0, 1],
            &thinned,
            noise.mean_sigma2(),
            &z,
            &pulse,
            &hypers,
        )
        .unwrap();
        assert_eq!(degenerate, 0);
        assert!((batch[0].existence - single_a.existence).abs() < 1e-10);
        assert!((batch[1].existence - single_b.existence).abs() < 1e-10);
        for (a, b) in batch[0].weights.iter().zip(&single_a.weights) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn noise_update_concentrates_on_the_true_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let pulse = PulseSpec::flat(41, 1e7).unwrap();
        let agent = uniform_agent(&[(0.0, 0.0)]);
        let hypers = Hypers::default();
        let noise = NoiseBelief {
            particles: vec![1.0, 4.0, 16.0],
            weights: vec![1.0 / 3.0; 3],
        };
        let amp = PathAmplitudeModel {
            gamma_ref: 1.0,
            d_ref: 1.0,
            reflection_loss_db: 3.0,
        };
        let z = synthesize_snapshot(&[], &amp, 4.0, &pulse, 0, 0, &mut rng);
        let post = update_noise(&noise, &[], &agent, &z, &pulse, &hypers, &mut rng).unwrap();
        assert!(post.weights[1] > post.weights[0]);
        assert!(post.weights[1] > post.weights[2]);
    }

    #[test]
    fn thinning_passes_through_small_beliefs() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let agent = uniform_agent(&[(1.0, 2.0), (3.0, 4.0)]);
        let t = thin_agents(&agent, 16, &mut rng);
        assert_eq!(t.positions.len(), 2);
        assert!((t.mean_pos.x - 2.0).abs() < 1e-12);
        assert!((t.mean_pos.y - 3.0).abs() < 1e-12);
    }

    #[test]
    fn thinning_draws_distinct_indices_proportional_to_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let n = 200;
        let mut agent = uniform_agent(
            &(0..n)
                .map(|i| (i as f64, 0.0))
                .collect::<Vec<_>>(),
        );
        // Half the particles carry zero weight and must never be selected.
        for i in 0..n / 2 {
            agent.weights[2 * i + 1] = 0.0;
        }
        let s: f64 = agent.weights.iter().sum();
        agent.weights.iter_mut().for_each(|w| *w /= s);
        for _ in 0..50 {
            let t = thin_agents(&agent, 16, &mut rng);
            assert_eq!(t.positions.len(), 16);
            let mut xs: Vec<i64> = t.positions.iter().map(|p| p.x as i64).collect();
            xs.sort_unstable();
            xs.dedup();
            assert_eq!(xs.len(), 16, "thinned subset repeated a particle");
            assert!(xs.iter().all(|x| x % 2 == 0), "picked a zero-weight particle");
        }
    }

    #[test]
    fn empty_beliefs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pulse = PulseSpec::flat(11, 1e7).unwrap();
        let amp = PathAmplitudeModel {
            gamma_ref: 1.0,
            d_ref: 1.0,
            reflection_loss_db: 3.0,
        };
        let z = synthesize_snapshot(&[], &amp, 1.0, &pulse, 0, 0, &mut rng);
        let empty_agent = AgentBelief {
            particles: vec![],
            weights: vec![],
        };
        let err = update_agent(&empty_agent, &[], &known_noise(1.0), &z, &pulse, 0.0, f64::INFINITY);
        assert!(matches!(err, Err(InferenceError::EmptyBelief("agent"))));
    }
}
