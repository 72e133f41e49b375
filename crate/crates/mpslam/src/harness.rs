//! Experiment pipeline: simulate measurement files, run the estimator over
//! them, and fold the run logs into metric CSVs.
//!
//! Everything flows through the output directory, so the three phases can run
//! in separate invocations (or on different machines) and crashed batches can
//! be resumed. Per-run RNG seeds derive deterministically from the base seed,
//! runs never share a generator, and each writer lands atomically
//! (tmp + rename), which together make every data byte a pure function of
//! (config, scenario) regardless of thread count or interruptions.
//!
//! Output directory layout, for run `NNN` (zero-padded):
//!
//! ```text
//! config_echo.toml        fully resolved configuration (reproduces the run)
//! seeds.csv               run index → derived RNG seed
//! snapshots_runNNN.bin    all M-bin snapshots, k-major
//! truth_runNNN.json       trajectory slice, true σ², visible paths per step
//! log_runNNN.json         per-step estimates and truth anchors
//! metrics/rmse.csv        per-step agent RMSE over runs
//! metrics/cdf.csv         pooled agent error CDF
//! metrics/gospa_paJ.csv   per-step GOSPA (total/loc/missed/false) for PA J
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, RunConfig};
use crate::inference::{init_beliefs, step, InferenceError, StepContext};
use crate::metrics::{
    error_cdf, gospa_series, rmse_series, write_cdf_csv, write_gospa_csv, write_rmse_csv,
    MetricsError, RunLog, StepRecord,
};
use crate::scene::{enumerate_paths, load_scenario, static_anchors, Point2, Scenario, SceneError};
use crate::signal::{
    read_snapshots, synthesize_snapshot, write_snapshots, SignalError, Snapshot, SnapshotFileMeta,
    SnapshotSet,
};
use crate::SPEED_OF_LIGHT;

/// Pipeline failure, split by exit code: configuration problems (bad TOML,
/// bad scenario, impossible overrides) exit with 2, data problems (missing or
/// mismatched files, I/O errors, estimator failures) with 3.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) => 3,
        }
    }
}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl From<SceneError> for HarnessError {
    fn from(e: SceneError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl From<SignalError> for HarnessError {
    fn from(e: SignalError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<InferenceError> for HarnessError {
    fn from(e: InferenceError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<MetricsError> for HarnessError {
    fn from(e: MetricsError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

fn data(msg: impl Into<String>) -> HarnessError {
    HarnessError::Data(msg.into())
}

fn io_data(path: &Path, e: std::io::Error) -> HarnessError {
    data(format!("{}: {e}", path.display()))
}

/// Command-line overrides applied on top of the loaded configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub steps: Option<usize>,
    /// Worker threads across runs; `None` uses all cores.
    pub jobs: Option<usize>,
    /// Skip runs whose output files already exist.
    pub resume: bool,
}

/// A validated unit of work: the resolved configuration (overrides applied,
/// effective step count recorded), the loaded scenario, and execution knobs
/// that do not affect output bytes.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub cfg: RunConfig,
    pub scenario: Scenario,
    /// Steps per run, ≤ the scenario trajectory length.
    pub steps: usize,
    /// Worker threads; 0 = rayon default.
    pub jobs: usize,
    pub resume: bool,
}

/// Applies overrides, revalidates, loads the scenario and pins the effective
/// step count (so the config echo reproduces a `--steps`-truncated batch).
pub fn plan(cfg: &RunConfig, overrides: &Overrides) -> Result<ExperimentPlan, HarnessError> {
    let mut cfg = cfg.clone();
    if let Some(o) = &overrides.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = overrides.seed {
        cfg.base_seed = s;
    }
    if let Some(r) = overrides.runs {
        cfg.n_runs = r;
    }
    if let Some(s) = overrides.steps {
        cfg.steps = Some(s);
    }
    cfg.validate()?;
    let scenario = load_scenario(&cfg.scenario_path)?;
    let k_total = scenario.trajectory.len();
    let steps = match cfg.steps {
        Some(s) if s > k_total => {
            return Err(HarnessError::Config(format!(
                "steps = {s} exceeds the scenario trajectory ({k_total} steps)"
            )));
        }
        Some(s) => s,
        None => k_total,
    };
    cfg.steps = Some(steps);
    Ok(ExperimentPlan {
        cfg,
        scenario,
        steps,
        jobs: overrides.jobs.unwrap_or(0),
        resume: overrides.resume,
    })
}

/// Per-run RNG seed: a splitmix64 scramble of `base_seed` and the run index.
/// Nearby (base, run) pairs map to unrelated seeds, and the mapping is fixed,
/// so any single run can be reproduced in isolation.
pub fn run_seed(base_seed: u64, run: usize) -> u64 {
    const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut z = base_seed.wrapping_add((run as u64 + 1).wrapping_mul(GOLDEN));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// Simulation and inference consume disjoint streams of the same per-run
// generator, so adding inference draws can never perturb the measurements.
fn sim_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

fn inference_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn snapshot_path(dir: &Path, run: usize) -> PathBuf {
    dir.join(format!("snapshots_run{run:03}.bin"))
}

pub fn truth_path(dir: &Path, run: usize) -> PathBuf {
    dir.join(format!("truth_run{run:03}.json"))
}

pub fn log_path(dir: &Path, run: usize) -> PathBuf {
    dir.join(format!("log_run{run:03}.json"))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).map_err(|e| io_data(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_data(path, e))
}

/// One visible propagation path as simulated: its anchor (the PA for LOS, the
/// VA for a bounce), delay, and the model intensity its gain was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthPathRecord {
    pub anchor_pos: Point2,
    pub delay: f64,
    pub bounce: u8,
    pub segment_id: Option<u32>,
    pub gamma: f64,
}

/// Ground truth of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthLog {
    pub run: usize,
    pub seed: u64,
    /// True noise variance the snapshots were drawn with.
    pub sigma2: f64,
    /// Trajectory slice actually simulated (`steps` entries).
    pub positions: Vec<Point2>,
    /// `paths[k][j]` lists the visible paths at step `k` for PA `j`.
    pub paths: Vec<Vec<Vec<TruthPathRecord>>>,
}

impl TruthLog {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(self)
            .map_err(|e| data(format!("{}: {e}", path.display())))?;
        atomic_write(path, &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| io_data(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| data(format!("{}: {e}", path.display())))
    }
}

/// Simulates one run to disk. Returns `false` when resumed (both files
/// already present).
fn simulate_run(plan: &ExperimentPlan, run: usize) -> Result<bool, HarnessError> {
    let dir = &plan.cfg.output_dir;
    let snap_file = snapshot_path(dir, run);
    let truth_file = truth_path(dir, run);
    if plan.resume && snap_file.exists() && truth_file.exists() {
        return Ok(false);
    }
    let seed = run_seed(plan.cfg.base_seed, run);
    let mut rng = sim_rng(seed);
    let pulse = plan.cfg.pulse_spec().map_err(|e| HarnessError::Config(e.to_string()))?;
    let amp = plan.cfg.amplitude_model();
    let sigma2 = plan.cfg.amplitude.sigma2;
    let j_pas = plan.scenario.anchors.len();
    let mut set = SnapshotSet::new(SnapshotFileMeta {
        m: pulse.m(),
        k_steps: plan.steps,
        j_pas,
        seed,
        delta_hz: pulse.delta_hz(),
        bandwidth_hz: pulse.bandwidth_hz(),
    });
    let mut paths_log = Vec::with_capacity(plan.steps);
    for k in 0..plan.steps {
        let x = plan.scenario.trajectory.positions[k];
        let mut per_pa = Vec::with_capacity(j_pas);
        for j in 0..j_pas {
            let paths = enumerate_paths(x, j, &plan.scenario.plan, &plan.scenario.anchors);
            let snap = synthesize_snapshot(&paths, &amp, sigma2, &pulse, j, k, &mut rng);
            set.set(k, j, &snap.z);
            per_pa.push(
                paths
                    .iter()
                    .map(|p| TruthPathRecord {
                        anchor_pos: p.anchor_pos,
                        delay: p.delay,
                        bounce: p.bounce,
                        segment_id: p.segment_id,
                        gamma: amp.intensity(p.delay * SPEED_OF_LIGHT, p.bounce),
                    })
                    .collect::<Vec<_>>(),
            );
        }
        paths_log.push(per_pa);
    }
    let tmp = tmp_path(&snap_file);
    write_snapshots(&tmp, &set)?;
    fs::rename(&tmp, &snap_file).map_err(|e| io_data(&snap_file, e))?;
    TruthLog {
        run,
        seed,
        sigma2,
        positions: plan.scenario.trajectory.positions[..plan.steps].to_vec(),
        paths: paths_log,
    }
    .save(&truth_file)?;
    Ok(true)
}

fn check_meta(
    meta: &SnapshotFileMeta,
    pulse_m: usize,
    pulse_delta: f64,
    j_pas: usize,
    steps: usize,
    expected_seed: u64,
    run: usize,
) -> Result<(), HarnessError> {
    let fail = |msg: String| Err(data(format!("run {run:03}: snapshot file {msg}")));
    if meta.m != pulse_m {
        return fail(format!("has M = {} but the config says {pulse_m}", meta.m));
    }
    if meta.delta_hz != pulse_delta {
        return fail(format!(
            "has Δ = {} Hz but the config says {pulse_delta} Hz",
            meta.delta_hz
        ));
    }
    if meta.j_pas != j_pas {
        return fail(format!("has {} PA(s) but the scenario has {j_pas}", meta.j_pas));
    }
    if meta.k_steps < steps {
        return fail(format!("covers {} step(s) but {steps} were requested", meta.k_steps));
    }
    if meta.seed != expected_seed {
        return fail(format!(
            "was simulated with seed {} but the base seed derives {expected_seed}; \
             re-simulate or fix --seed",
            meta.seed
        ));
    }
    Ok(())
}

/// Runs the estimator over one simulated run and writes its log. Returns
/// `false` when resumed.
fn infer_run(plan: &ExperimentPlan, run: usize) -> Result<bool, HarnessError> {
    let dir = &plan.cfg.output_dir;
    let log_file = log_path(dir, run);
    if plan.resume && log_file.exists() {
        return Ok(false);
    }
    let set = read_snapshots(snapshot_path(dir, run))?;
    let truth = TruthLog::load(truth_path(dir, run))?;
    let pulse = plan.cfg.pulse_spec().map_err(|e| HarnessError::Config(e.to_string()))?;
    let j_pas = plan.scenario.anchors.len();
    let seed = run_seed(plan.cfg.base_seed, run);
    check_meta(&set.meta, pulse.m(), pulse.delta_hz(), j_pas, plan.steps, seed, run)?;
    if truth.seed != seed || truth.positions.len() < plan.steps || truth.paths.len() < plan.steps {
        return Err(data(format!(
            "run {run:03}: truth log does not match the snapshot file; re-simulate"
        )));
    }

    // The prior is anchored at the true starting state; the starting velocity
    // is read off the first displacement.
    let v0 = if truth.positions.len() >= 2 {
        truth.positions[1] - truth.positions[0]
    } else {
        Point2::new(0.0, 0.0)
    };
    let init = plan.cfg.init_spec(truth.positions[0], v0);
    let ctx = StepContext {
        pulse,
        bounds: plan.scenario.plan.bounds,
        params: plan.cfg.transition_params(),
        birth: plan.cfg.birth_settings(),
        hypers: plan.cfg.hypers,
    };
    let mut rng = inference_rng(seed);
    let mut state = init_beliefs(&init, &plan.scenario.anchors.pa_positions, &ctx.hypers, &mut rng)
        .map_err(|e| data(format!("run {run:03}: {e}")))?;

    let static_truth: Vec<Vec<Point2>> = if plan.cfg.gospa.visibility_gated_truth {
        Vec::new()
    } else {
        plan.scenario
            .anchors
            .pa_positions
            .iter()
            .map(|&pa| static_anchors(pa, &plan.scenario.plan))
            .collect()
    };

    let mut records = Vec::with_capacity(plan.steps);
    for k in 0..plan.steps {
        let snaps: Vec<Snapshot> = (0..j_pas).map(|j| set.snapshot(k, j)).collect();
        let out = step(&mut state, &snaps, &ctx, k, &mut rng)
            .map_err(|e| data(format!("run {run:03}: {e}")))?;
        let truth_anchors = if plan.cfg.gospa.visibility_gated_truth {
            truth.paths[k]
                .iter()
                .map(|pa| pa.iter().map(|p| p.anchor_pos).collect())
                .collect()
        } else {
            static_truth.clone()
        };
        records.push(StepRecord {
            k,
            true_pos: truth.positions[k],
            est_pos: out.est_pos,
            sigma2_est: out.sigma2_est,
            declared: out.declared,
            truth_anchors,
        });
    }

    let log = RunLog { run, seed, steps: records };
    let tmp = tmp_path(&log_file);
    log.save(&tmp)?;
    fs::rename(&tmp, &log_file).map_err(|e| io_data(&log_file, e))?;
    Ok(true)
}

fn write_provenance(plan: &ExperimentPlan) -> Result<(), HarnessError> {
    let dir = &plan.cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| io_data(dir, e))?;
    atomic_write(&dir.join("config_echo.toml"), plan.cfg.to_toml_string().as_bytes())?;
    let mut seeds = String::from("run,seed\n");
    for run in 0..plan.cfg.n_runs {
        seeds.push_str(&format!("{run},{}\n", run_seed(plan.cfg.base_seed, run)));
    }
    atomic_write(&dir.join("seeds.csv"), seeds.as_bytes())
}

/// Runs `work` over all run indices, optionally on a dedicated thread pool,
/// and counts how many did work (as opposed to resuming).
fn for_each_run(
    plan: &ExperimentPlan,
    work: impl Fn(&ExperimentPlan, usize) -> Result<bool, HarnessError> + Sync,
) -> Result<usize, HarnessError> {
    let body = || {
        (0..plan.cfg.n_runs)
            .into_par_iter()
            .map(|run| work(plan, run).map(usize::from))
            .try_reduce(|| 0, |a, b| Ok(a + b))
    };
    if plan.jobs == 0 {
        body()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(plan.jobs)
            .build()
            .map_err(|e| HarnessError::Config(format!("failed to build thread pool: {e}")))?;
        pool.install(body)
    }
}

/// Phase 1: draw all measurement snapshots and truth logs.
pub fn cli_simulate(plan: &ExperimentPlan) -> Result<(), HarnessError> {
    write_provenance(plan)?;
    let done = for_each_run(plan, simulate_run)?;
    println!(
        "simulated {done} of {} run(s), {} step(s) each → {}",
        plan.cfg.n_runs,
        plan.steps,
        plan.cfg.output_dir.display()
    );
    Ok(())
}

/// Phase 2: run the estimator over previously simulated snapshots.
pub fn cli_run(plan: &ExperimentPlan) -> Result<(), HarnessError> {
    let done = for_each_run(plan, infer_run)?;
    println!(
        "estimated {done} of {} run(s) → {}",
        plan.cfg.n_runs,
        plan.cfg.output_dir.display()
    );
    Ok(())
}

/// Phase 3: fold all run logs into the metric CSVs.
pub fn cli_eval(plan: &ExperimentPlan) -> Result<(), HarnessError> {
    let dir = &plan.cfg.output_dir;
    let mut logs = Vec::with_capacity(plan.cfg.n_runs);
    for run in 0..plan.cfg.n_runs {
        let p = log_path(dir, run);
        if !p.exists() {
            return Err(data(format!(
                "missing {} — run the estimation phase first",
                p.display()
            )));
        }
        logs.push(RunLog::load(&p)?);
    }
    let mdir = dir.join("metrics");
    fs::create_dir_all(&mdir).map_err(|e| io_data(&mdir, e))?;
    write_rmse_csv(mdir.join("rmse.csv"), &rmse_series(&logs)?)?;
    write_cdf_csv(mdir.join("cdf.csv"), &error_cdf(&logs)?)?;
    let params = plan.cfg.gospa_params();
    for j in 0..plan.scenario.anchors.len() {
        let series = gospa_series(&logs, j, &params)?;
        write_gospa_csv(mdir.join(format!("gospa_pa{j}.csv")), &series)?;
    }
    println!("wrote metrics over {} run(s) → {}", logs.len(), mdir.display());
    Ok(())
}

/// All three phases in one invocation.
pub fn cli_full(plan: &ExperimentPlan) -> Result<(), HarnessError> {
    cli_simulate(plan)?;
    cli_run(plan)?;
    cli_eval(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::parse_scenario;

    fn tiny_scenario_toml() -> &'static str {
        r#"
            bounds = [-2.0, -3.0, 12.0, 5.0]
            segments = [[0.0, 0.0, 10.0, 0.0, 7.0]]
            pas = [[5.0, 1.5]]
            trajectory = [[3.0, 2.0], [3.1, 2.0], [3.2, 2.0], [3.3, 2.0]]
        "#
    }

    fn write_tiny_setup(dir: &Path) -> PathBuf {
        let scen = dir.join("scene.toml");
        fs::write(&scen, tiny_scenario_toml()).unwrap();
        let cfg = dir.join("config.toml");
        fs::write(
            &cfg,
            format!(
                r#"
                    scenario_path = "scene.toml"
                    n_runs = 2
                    base_seed = 42
                    output_dir = "{}"

                    [hypers]
                    p_a = 150
                    p_f = 60
                    p_sigma = 40
                "#,
                dir.join("out").display()
            ),
        )
        .unwrap();
        cfg
    }

    #[test]
    fn run_seed_is_pinned_and_collision_free_nearby() {
        // Pin the mapping: changing it would silently re-randomize archived
        // experiments.
        assert_eq!(run_seed(1, 0), run_seed(1, 0));
        let mut seen = std::collections::HashSet::new();
        for base in 0..4u64 {
            for run in 0..64 {
                seen.insert(run_seed(base, run));
            }
        }
        assert_eq!(seen.len(), 4 * 64);
        assert_ne!(run_seed(1, 0), run_seed(2, 0));
        assert_ne!(run_seed(1, 0), run_seed(1, 1));
        // Regression values: these exact outputs are part of the file format.
        assert_eq!(run_seed(0, 0), 16294208416658607535);
        assert_eq!(run_seed(1, 0), 10451216379200822465);
        assert_eq!(run_seed(1, 1), 13757245211066428519);
    }

    #[test]
    fn plan_applies_overrides_and_rejects_long_step_requests() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg_path = write_tiny_setup(tmp.path());
        let cfg = RunConfig::load(&cfg_path).unwrap();
        let p = plan(&cfg, &Overrides::default()).unwrap();
        assert_eq!(p.steps, 4);
        assert_eq!(p.cfg.steps, Some(4));

        let ov = Overrides {
            steps: Some(2),
            runs: Some(1),
            seed: Some(7),
            ..Overrides::default()
        };
        let p = plan(&cfg, &ov).unwrap();
        assert_eq!((p.steps, p.cfg.n_runs, p.cfg.base_seed), (2, 1, 7));

        let ov = Overrides { steps: Some(5), ..Overrides::default() };
        assert!(matches!(plan(&cfg, &ov), Err(HarnessError::Config(_))));
    }

    #[test]
    fn truth_log_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let log = TruthLog {
            run: 3,
            seed: 99,
            sigma2: 1.5,
            positions: vec![Point2::new(1.0, 2.0)],
            paths: vec![vec![vec![TruthPathRecord {
                anchor_pos: Point2::new(5.0, 1.5),
                delay: 1e-8,
                bounce: 0,
                segment_id: None,
                gamma: 25.0,
            }]]],
        };
        let p = tmp.path().join("truth.json");
        log.save(&p).unwrap();
        assert_eq!(TruthLog::load(&p).unwrap(), log);
        assert!(!tmp_path(&p).exists());
    }

    #[test]
    fn simulate_writes_deterministic_files_and_resumes() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(write_tiny_setup(tmp.path())).unwrap();
        let p = plan(&cfg, &Overrides::default()).unwrap();
        cli_simulate(&p).unwrap();

        let dir = &p.cfg.output_dir;
        let snap0 = fs::read(snapshot_path(dir, 0)).unwrap();
        let truth0 = fs::read(truth_path(dir, 0)).unwrap();
        assert!(dir.join("config_echo.toml").exists());
        assert!(dir.join("seeds.csv").exists());

        // A second simulation over different thread counts reproduces the
        // exact bytes.
        let p2 = plan(&cfg, &Overrides { jobs: Some(1), ..Overrides::default() }).unwrap();
        cli_simulate(&p2).unwrap();
        assert_eq!(fs::read(snapshot_path(dir, 0)).unwrap(), snap0);
        assert_eq!(fs::read(truth_path(dir, 0)).unwrap(), truth0);

        // Resume mode touches nothing once files exist.
        let before = fs::metadata(snapshot_path(dir, 0)).unwrap().modified().unwrap();
        let p3 = plan(&cfg, &Overrides { resume: true, ..Overrides::default() }).unwrap();
        cli_simulate(&p3).unwrap();
        let after = fs::metadata(snapshot_path(dir, 0)).unwrap().modified().unwrap();
        assert_eq!(before, after);

        // Truth the simulator wrote matches the scenario's own ray tracing.
        let truth = TruthLog::load(truth_path(dir, 0)).unwrap();
        assert_eq!(truth.positions.len(), 4);
        let scen = parse_scenario(tiny_scenario_toml()).unwrap();
        let expected = enumerate_paths(scen.trajectory.positions[0], 0, &scen.plan, &scen.anchors);
        assert_eq!(truth.paths[0][0].len(), expected.len());
        for (rec, path) in truth.paths[0][0].iter().zip(&expected) {
            assert_eq!(rec.anchor_pos, path.anchor_pos);
            assert_eq!(rec.delay, path.delay);
        }
    }

    #[test]
    fn infer_refuses_mismatched_snapshots() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(write_tiny_setup(tmp.path())).unwrap();
        let p = plan(&cfg, &Overrides::default()).unwrap();
        cli_simulate(&p).unwrap();

        // A different base seed must refuse the stale snapshot files.
        let p_other = plan(&cfg, &Overrides { seed: Some(1234), ..Overrides::default() }).unwrap();
        let err = cli_run(&p_other).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("seed"), "got: {err}");

        // A config with a different grid must refuse them too.
        let mut cfg_m = cfg.clone();
        cfg_m.pulse.m = 17;
        let p_m = plan(&cfg_m, &Overrides::default()).unwrap();
        let err = cli_run(&p_m).unwrap_err();
        assert!(err.to_string().contains("M ="), "got: {err}");
    }

    #[test]
    fn eval_without_logs_is_a_data_error() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(write_tiny_setup(tmp.path())).unwrap();
        let p = plan(&cfg, &Overrides::default()).unwrap();
        cli_simulate(&p).unwrap();
        let err = cli_eval(&p).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn full_pipeline_on_tiny_scenario_produces_metrics() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(write_tiny_setup(tmp.path())).unwrap();
        let p = plan(&cfg, &Overrides::default()).unwrap();
        cli_full(&p).unwrap();
        let mdir = p.cfg.output_dir.join("metrics");
        for name in ["rmse.csv", "cdf.csv", "gospa_pa0.csv"] {
            let text = fs::read_to_string(mdir.join(name)).unwrap();
            assert!(text.lines().count() > 1, "{name} is empty");
        }
        let rmse = fs::read_to_string(mdir.join("rmse.csv")).unwrap();
        assert_eq!(rmse.lines().count(), 1 + 4);
        // Estimates stay finite and inside the surveillance region.
        let log = RunLog::load(log_path(&p.cfg.output_dir, 0)).unwrap();
        for s in &log.steps {
            assert!(s.est_pos.x.is_finite() && s.est_pos.y.is_finite());
        }
    }
}
