//! Floor-plan geometry, virtual-anchor construction by mirror imaging, and
//! single-bounce specular ray tracing with visibility checks.
//!
//! Geometry is 2-D and in meters. Reflecting surfaces are line segments that
//! mirror from both faces; only direct (LOS) and single-bounce paths exist.
//! A virtual anchor (VA) is the mirror image of a physical anchor (PA) across
//! a reflecting segment, so the length of the bounce path agent → reflection
//! point → PA equals the straight-line distance agent → VA.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::SPEED_OF_LIGHT;

/// Grazing tolerance [m]: a ray passing within this distance of a segment
/// endpoint counts as blocked, and a reflection point must clear the segment
/// ends by this margin. Keeps tangent cases deterministic.
pub const GRAZE_TOL_M: f64 = 1e-9;

/// Hard sanity bound on per-step agent displacement [m] used by trajectory
/// validation (one step is the unit of time throughout).
pub const DEFAULT_MAX_STEP_M: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("reading scenario {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing scenario {path}: {source}")]
    Parse {
        path: String,
        source: Box<toml::de::Error>,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// 2-D point / vector [m]. Kept deliberately minimal; serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 2-D cross product `self × o`.
    pub fn cross(self, o: Self) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Self) -> f64 {
        (self - o).norm()
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Self { x: v[0], y: v[1] }
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

impl fmt::Display for Point2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3})", self.x, self.y)
    }
}

/// Reflecting wall segment. `id` is unique within a floor plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Point2,
    pub b: Point2,
    pub id: u32,
}

impl Segment {
    pub fn len(&self) -> f64 {
        self.a.dist(self.b)
    }
}

/// Axis-aligned surveillance region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Point2,
    pub max: Point2,
}

impl Rect {
    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn diagonal(&self) -> f64 {
        self.min.dist(self.max)
    }

    pub fn area(&self) -> f64 {
        (self.max.x - self.min.x) * (self.max.y - self.min.y)
    }
}

/// Floor plan: reflecting segments plus the surveillance region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorPlan {
    pub segments: Vec<Segment>,
    pub bounds: Rect,
}

/// Known PA positions (J ≥ 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub pa_positions: Vec<Point2>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.pa_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pa_positions.is_empty()
    }
}

/// True agent positions indexed by time step (one entry per step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub positions: Vec<Point2>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }
}

/// One resolvable propagation path between the agent and a PA.
///
/// `anchor_pos` is the PA itself for the LOS path and the VA (mirror image)
/// for a bounce path, so in both cases `delay = ‖agent − anchor_pos‖ / c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationPath {
    pub anchor_pos: Point2,
    pub delay: f64,
    pub bounce: u8,
    pub segment_id: Option<u32>,
    pub pa_index: usize,
}

/// Validated scenario: geometry, anchors, and the true trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub plan: FloorPlan,
    pub anchors: AnchorSet,
    pub trajectory: Trajectory,
}

/// Reflects `p` across the infinite line through `s`.
///
/// Involution: applying twice returns `p` (to rounding). Points on the line
/// are fixed points.
pub fn mirror_point(p: Point2, s: &Segment) -> Point2 {
    let d = s.b - s.a;
    let len2 = d.dot(d);
    debug_assert!(len2 > 0.0, "degenerate segment {}", s.id);
    let t = (p - s.a).dot(d) / len2;
    let foot = s.a + d * t;
    foot + foot - p
}

/// Proper intersection of the line through `p` with direction `dp` and the
/// line through `a` with direction `da`: returns parameters `(s, u)` with
/// `p + s·dp = a + u·da`, or `None` for (near-)parallel lines.
fn line_intersection(p: Point2, dp: Point2, a: Point2, da: Point2) -> Option<(f64, f64)> {
    let denom = dp.cross(da);
    if denom.abs() <= 1e-12 * dp.norm() * da.norm() {
        return None;
    }
    let r = a - p;
    Some((r.cross(da) / denom, r.cross(dp) / denom))
}

/// True iff the open leg `p → q` is blocked by `wall`.
///
/// A crossing blocks when it is strictly interior to the leg and lands on the
/// wall within `GRAZE_TOL_M` of its extent (so grazing a wall endpoint counts
/// as blocked). Touching at the leg's own endpoints never blocks — a
/// reflection point lies on its mirror by construction.
fn leg_blocked(p: Point2, q: Point2, wall: &Segment) -> bool {
    let dp = q - p;
    let leg_len = dp.norm();
    if leg_len <= GRAZE_TOL_M {
        return false;
    }
    let da = wall.b - wall.a;
    match line_intersection(p, dp, wall.a, da) {
        None => false,
        Some((s, u)) => {
            let s_tol = GRAZE_TOL_M / leg_len;
            let u_tol = GRAZE_TOL_M / wall.len();
            s > s_tol && s < 1.0 - s_tol && u > -u_tol && u < 1.0 + u_tol
        }
    }
}

/// True iff the leg `p → q` is blocked by any segment of `plan`.
pub fn occluded(p: Point2, q: Point2, plan: &FloorPlan) -> bool {
    plan.segments.iter().any(|w| leg_blocked(p, q, w))
}

/// Single-bounce specular path from `agent` to `pa` via reflecting segment
/// `s`, or `None` when no valid reflection exists.
///
/// Valid iff agent and PA lie strictly on the same side of the mirror line,
/// the ray agent → VA crosses `s` strictly inside its extent, and neither
/// sub-ray is occluded. `pa_index` is recorded on the returned path.
pub fn specular_path(
    agent: Point2,
    pa: Point2,
    s: &Segment,
    plan: &FloorPlan,
    pa_index: usize,
) -> Option<PropagationPath> {
    let d = s.b - s.a;
    let side_a = d.cross(agent - s.a);
    let side_p = d.cross(pa - s.a);
    let margin = GRAZE_TOL_M * d.norm();
    if side_a.abs() <= margin || side_p.abs() <= margin || side_a.signum() != side_p.signum() {
        return None;
    }
    let va = mirror_point(pa, s);
    let to_va = va - agent;
    let (t, u) = line_intersection(agent, to_va, s.a, d)?;
    let u_tol = GRAZE_TOL_M / s.len();
    let t_tol = GRAZE_TOL_M / to_va.norm();
    if u < u_tol || u > 1.0 - u_tol || t <= t_tol || t >= 1.0 - t_tol {
        return None;
    }
    let rp = agent + to_va * t;
    if occluded(agent, rp, plan) || occluded(rp, pa, plan) {
        return None;
    }
    Some(PropagationPath {
        anchor_pos: va,
        delay: to_va.norm() / SPEED_OF_LIGHT,
        bounce: 1,
        segment_id: Some(s.id),
        pa_index,
    })
}

/// All currently visible paths from `agent` to PA `pa_index`: the LOS path if
/// unobstructed, then one bounce path per reflecting segment (in segment
/// order). May be empty when the LOS is blocked and no reflection resolves.
pub fn enumerate_paths(
    agent: Point2,
    pa_index: usize,
    plan: &FloorPlan,
    anchors: &AnchorSet,
) -> Vec<PropagationPath> {
    let pa = anchors.pa_positions[pa_index];
    let mut paths = Vec::with_capacity(1 + plan.segments.len());
    if !occluded(agent, pa, plan) {
        paths.push(PropagationPath {
            anchor_pos: pa,
            delay: agent.dist(pa) / SPEED_OF_LIGHT,
            bounce: 0,
            segment_id: None,
            pa_index,
        });
    }
    for s in &plan.segments {
        if let Some(p) = specular_path(agent, pa, s, plan, pa_index) {
            paths.push(p);
        }
    }
    paths
}

/// Static map truth for one PA: the PA itself plus the mirror image across
/// every reflecting segment (whether or not currently visible).
pub fn static_anchors(pa: Point2, plan: &FloorPlan) -> Vec<Point2> {
    let mut out = Vec::with_capacity(1 + plan.segments.len());
    out.push(pa);
    out.extend(plan.segments.iter().map(|s| mirror_point(pa, s)));
    out
}

/// On-disk scenario layout (see README for the grammar). Segment rows carry
/// 4 values `[ax, ay, bx, by]` (id = row index) or 5 with an explicit id.
#[derive(Deserialize)]
struct RawScenario {
    bounds: [f64; 4],
    segments: Vec<Vec<f64>>,
    pas: Vec<[f64; 2]>,
    trajectory: Vec<[f64; 2]>,
}

/// Parses and validates scenario text (TOML).
pub fn parse_scenario(text: &str) -> Result<Scenario, SceneError> {
    let raw: RawScenario = toml::from_str(text).map_err(|source| SceneError::Parse {
        path: "<inline>".into(),
        source: Box::new(source),
    })?;
    validate(raw)
}

/// Loads a scenario file (format per README).
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, SceneError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let raw: RawScenario = toml::from_str(&text).map_err(|source| SceneError::Parse {
        path: path.display().to_string(),
        source: Box::new(source),
    })?;
    validate(raw)
}

fn validate(raw: RawScenario) -> Result<Scenario, SceneError> {
    let invalid = |msg: String| Err(SceneError::Invalid(msg));

    let [xmin, ymin, xmax, ymax] = raw.bounds;
    if !(xmin < xmax && ymin < ymax) {
        return invalid(format!(
            "bounds must satisfy xmin < xmax and ymin < ymax, got {:?}",
            raw.bounds
        ));
    }
    let bounds = Rect {
        min: Point2::new(xmin, ymin),
        max: Point2::new(xmax, ymax),
    };

    let mut segments = Vec::with_capacity(raw.segments.len());
    for (i, row) in raw.segments.iter().enumerate() {
        let id = match row.len() {
            4 => i as u32,
            5 => {
                let id = row[4];
                if id.fract() != 0.0 || id < 0.0 || id > u32::MAX as f64 {
                    return invalid(format!("segments[{i}]: id {id} is not a small integer"));
                }
                id as u32
            }
            n => {
                return invalid(format!(
                    "segments[{i}]: expected 4 values [ax,ay,bx,by] or 5 with id, got {n}"
                ))
            }
        };
        let a = Point2::new(row[0], row[1]);
        let b = Point2::new(row[2], row[3]);
        if a.dist(b) <= GRAZE_TOL_M {
            return invalid(format!("segments[{i}]: endpoints coincide"));
        }
        if !bounds.contains(a) || !bounds.contains(b) {
            return invalid(format!("segments[{i}]: endpoint outside bounds"));
        }
        if segments.iter().any(|s: &Segment| s.id == id) {
            return invalid(format!("segments[{i}]: duplicate id {id}"));
        }
        segments.push(Segment { a, b, id });
    }

    if raw.pas.is_empty() {
        return invalid("pas: at least one PA required".into());
    }
    let pa_positions: Vec<Point2> = raw.pas.iter().map(|&p| p.into()).collect();
    for (j, &p) in pa_positions.iter().enumerate() {
        if !bounds.contains(p) {
            return invalid(format!("pas[{j}]: {p} outside bounds"));
        }
    }

    if raw.trajectory.is_empty() {
        return invalid("trajectory: at least one waypoint required".into());
    }
    let positions: Vec<Point2> = raw.trajectory.iter().map(|&p| p.into()).collect();
    for (k, &p) in positions.iter().enumerate() {
        if !bounds.contains(p) {
            return invalid(format!("trajectory[{k}]: {p} outside bounds"));
        }
    }
    for (k, w) in positions.windows(2).enumerate() {
        let step = w[0].dist(w[1]);
        if step > DEFAULT_MAX_STEP_M {
            return invalid(format!(
                "trajectory[{}→{}]: step {step:.3} m exceeds max {DEFAULT_MAX_STEP_M} m",
                k,
                k + 1
            ));
        }
    }

    Ok(Scenario {
        plan: FloorPlan { segments, bounds },
        anchors: AnchorSet { pa_positions },
        trajectory: Trajectory { positions },
    })
}
