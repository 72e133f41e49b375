//! Evaluation: per-step agent RMSE, error CDFs, and the GOSPA metric between
//! declared feature sets and true anchor sets, plus the CSV emitters.
//!
//! GOSPA is computed exactly (optimal partial assignment via a padded
//! square assignment problem) with α = 2, where the metric decomposes into
//! localization, missed and false components.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scene::Point2;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no run logs supplied")]
    EmptyLogs,
    #[error("run logs have unequal lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("run log {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("run log {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid GOSPA parameters: {0}")]
    InvalidParams(String),
}

/// A feature reported at declaration time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeclaredFeature {
    pub pf_id: u64,
    pub pos: Point2,
    pub existence: f64,
}

/// Per-step record of one run. `declared` and `truth_anchors` are indexed by
/// PA; `truth_anchors` lists the PA plus the VAs of currently visible paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub true_pos: Point2,
    pub est_pos: Point2,
    pub sigma2_est: Vec<f64>,
    pub declared: Vec<Vec<DeclaredFeature>>,
    pub truth_anchors: Vec<Vec<Point2>>,
}

/// Full log of one Monte Carlo run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub run: usize,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
}

impl RunLog {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::to_writer(std::io::BufWriter::new(file), self).map_err(|source| {
            MetricsError::Json {
                path: path.display().to_string(),
                source,
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_reader(std::io::BufReader::new(file)).map_err(|source| {
            MetricsError::Json {
                path: path.display().to_string(),
                source,
            }
        })
    }
}

/// GOSPA parameters. α is pinned to 2, the value with a localization /
/// missed / false decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GospaParams {
    pub c: f64,
    pub p: f64,
    pub alpha: u32,
}

impl Default for GospaParams {
    fn default() -> Self {
        Self {
            c: 2.0,
            p: 1.0,
            alpha: 2,
        }
    }
}

impl GospaParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.c > 0.0) {
            return Err(MetricsError::InvalidParams(format!("c must be > 0, got {}", self.c)));
        }
        if !(self.p >= 1.0) {
            return Err(MetricsError::InvalidParams(format!("p must be ≥ 1, got {}", self.p)));
        }
        if self.alpha != 2 {
            return Err(MetricsError::InvalidParams(format!(
                "alpha is fixed at 2, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// GOSPA value and its α=2 decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GospaResult {
    pub total: f64,
    pub localization: f64,
    pub missed: usize,
    pub false_alarms: usize,
}

/// Exact GOSPA between `estimates` and `truth`.
///
/// Solved as a padded (n+m)×(n+m) assignment problem: real–real pairs cost
/// min(d, c)^p, pairing with a dummy costs c^p/2, dummy–dummy is free. Pairs
/// assigned at the cap (d ≥ c) are equivalent to an unassigned pair and are
/// counted as one miss plus one false alarm.
pub fn gospa(estimates: &[Point2], truth: &[Point2], params: &GospaParams) -> GospaResult {
    params.validate().expect("valid GOSPA parameters");
    let (n, m) = (estimates.len(), truth.len());
    if n == 0 && m == 0 {
        return GospaResult {
            total: 0.0,
            localization: 0.0,
            missed: 0,
            false_alarms: 0,
        };
    }
    let size = n + m;
    let cap = params.c.powf(params.p);
    let dummy = cap / 2.0;
    let mut cost = vec![0.0f64; size * size];
    for i in 0..size {
        for j in 0..size {
            cost[i * size + j] = match (i < n, j < m) {
                (true, true) => estimates[i].dist(truth[j]).powf(params.p).min(cap),
                (true, false) | (false, true) => dummy,
                (false, false) => 0.0,
            };
        }
    }
    let assignment = solve_assignment(&cost, size);
    let mut total_p = 0.0;
    let mut loc_p = 0.0;
    let (mut missed, mut false_alarms) = (0usize, 0usize);
    for (i, &j) in assignment.iter().enumerate() {
        let real_pair = i < n && j < m;
        if real_pair {
            let d = estimates[i].dist(truth[j]).powf(params.p);
            if d < cap {
                loc_p += d;
                total_p += d;
            } else {
                missed += 1;
                false_alarms += 1;
                total_p += cap;
            }
        } else if i < n {
            false_alarms += 1;
            total_p += dummy;
        } else if j < m {
            missed += 1;
            total_p += dummy;
        }
    }
    let inv_p = 1.0 / params.p;
    GospaResult {
        total: total_p.powf(inv_p),
        localization: loc_p.powf(inv_p),
        missed,
        false_alarms,
    }
}

/// Exact minimum-cost perfect assignment on a square matrix (shortest
/// augmenting paths with potentials, O(size³)). Returns `row → column`.
fn solve_assignment(cost: &[f64], size: usize) -> Vec<usize> {
    const INF: f64 = f64::INFINITY;
    // 1-based internal arrays per the classic formulation
    let mut u = vec![0.0f64; size + 1];
    let mut v = vec![0.0f64; size + 1];
    let mut p = vec![0usize; size + 1]; // column → assigned row
    let mut way = vec![0usize; size + 1];
    for i in 1..=size {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=size {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * size + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; size];
    for j in 1..=size {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Per-step agent RMSE over runs: rmse(k) = sqrt(mean_runs ‖p̂_k − p_k‖²).
pub fn rmse_series(logs: &[RunLog]) -> Result<Vec<(usize, f64)>, MetricsError> {
    let k_steps = check_equal_lengths(logs)?;
    let mut out = Vec::with_capacity(k_steps);
    for k in 0..k_steps {
        let mse: f64 = logs
            .iter()
            .map(|l| {
                let s = &l.steps[k];
                let d = s.est_pos.dist(s.true_pos);
                d * d
            })
            .sum::<f64>()
            / logs.len() as f64;
        out.push((logs[0].steps[k].k, mse.sqrt()));
    }
    Ok(out)
}

/// Empirical CDF of all per-step, per-run position errors: sorted errors with
/// fraction (i+1)/n per sample; range (0, 1].
pub fn error_cdf(logs: &[RunLog]) -> Result<Vec<(f64, f64)>, MetricsError> {
    check_equal_lengths(logs)?;
    let mut errors: Vec<f64> = logs
        .iter()
        .flat_map(|l| l.steps.iter().map(|s| s.est_pos.dist(s.true_pos)))
        .collect();
    errors.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let n = errors.len() as f64;
    Ok(errors
        .into_iter()
        .enumerate()
        .map(|(i, e)| (e, (i + 1) as f64 / n))
        .collect())
}

/// Per-step GOSPA against the logged truth anchors for PA `pa_index`,
/// averaged over runs (all four components).
pub fn gospa_series(
    logs: &[RunLog],
    pa_index: usize,
    params: &GospaParams,
) -> Result<Vec<(usize, [f64; 4])>, MetricsError> {
    let k_steps = check_equal_lengths(logs)?;
    let mut out = Vec::with_capacity(k_steps);
    for k in 0..k_steps {
        let mut acc = [0.0f64; 4];
        for l in logs {
            let s = &l.steps[k];
            let est: Vec<Point2> = s.declared[pa_index].iter().map(|d| d.pos).collect();
            let r = gospa(&est, &s.truth_anchors[pa_index], params);
            acc[0] += r.total;
            acc[1] += r.localization;
            acc[2] += r.missed as f64;
            acc[3] += r.false_alarms as f64;
        }
        for a in acc.iter_mut() {
            *a /= logs.len() as f64;
        }
        out.push((logs[0].steps[k].k, acc));
    }
    Ok(out)
}

fn check_equal_lengths(logs: &[RunLog]) -> Result<usize, MetricsError> {
    let first = logs.first().ok_or(MetricsError::EmptyLogs)?;
    for l in logs {
        if l.steps.len() != first.steps.len() {
            return Err(MetricsError::LengthMismatch(first.steps.len(), l.steps.len()));
        }
    }
    Ok(first.steps.len())
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, MetricsError> {
    let file = std::fs::File::create(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(std::io::BufWriter::new(file))
}

fn io_ctx(path: &Path) -> impl Fn(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `rmse.csv` with header `k,rmse`.
pub fn write_rmse_csv(path: impl AsRef<Path>, series: &[(usize, f64)]) -> Result<(), MetricsError> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let ctx = io_ctx(path);
    writeln!(w, "k,rmse").map_err(&ctx)?;
    for (k, rmse) in series {
        writeln!(w, "{k},{rmse}").map_err(&ctx)?;
    }
    w.flush().map_err(&ctx)
}

/// Writes `cdf.csv` with header `error,fraction`.
pub fn write_cdf_csv(path: impl AsRef<Path>, series: &[(f64, f64)]) -> Result<(), MetricsError> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let ctx = io_ctx(path);
    writeln!(w, "error,fraction").map_err(&ctx)?;
    for (e, f) in series {
        writeln!(w, "{e},{f}").map_err(&ctx)?;
    }
    w.flush().map_err(&ctx)
}

/// Writes `gospa_paJ.csv` with header `k,total,loc,missed,false`.
pub fn write_gospa_csv(
    path: impl AsRef<Path>,
    series: &[(usize, [f64; 4])],
) -> Result<(), MetricsError> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let ctx = io_ctx(path);
    writeln!(w, "k,total,loc,missed,false").map_err(&ctx)?;
    for (k, [total, loc, missed, false_alarms]) in series {
        writeln!(w, "{k},{total},{loc},{missed},{false_alarms}").map_err(&ctx)?;
    }
    w.flush().map_err(&ctx)
}
