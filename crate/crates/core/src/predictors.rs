//! Knowledge-driven trajectory predictors.
//!
//! * `lin`: constant-velocity Kalman filter,
//! * `cv`: constant-velocity extrapolation of the last step,
//! * `kd1`: lane following at the current speed,
//! * `kd2`: lane following with a leader-tracking speed profile.
//!
//! Except for `lin`, variances come from a [`KdVariancePrior`] expressed in the
//! track frame of each predicted step (along-track, cross-track) and rotated to
//! the world frame with the step's track heading.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::scene::{AgentHistory, Projection, ScenarioState};
use crate::trajectory::{rotate_diag_variance, GaussianTrajectory};
use crate::{FRAME_DT, PRED_LEN, VAR_FLOOR};

/// Steps over which an off-center ego is pulled back onto the centerline.
const OFFSET_DECAY_STEPS: f64 = 2.0;
/// Lateral corridor around the ego lane in which a leader is searched.
const LEADER_CORRIDOR: f64 = 2.0;
/// Two trajectories closer than this at every step count as one branch.
const BRANCH_MERGE_DISTANCE: f64 = 0.5;
/// Lanes within this distance of the best match are considered for branching.
const BRANCH_LANE_SLACK: f64 = 0.5;

/// Per-step (along-track, cross-track) variance table of a KD predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdVariancePrior {
    pub table: Vec<Vec2>,
}

impl Default for KdVariancePrior {
    /// A growing table used before any training data has been seen.
    fn default() -> Self {
        KdVariancePrior {
            table: (1..=PRED_LEN)
                .map(|j| {
                    let t = j as f64 * FRAME_DT;
                    Vec2::new((0.3 + 0.5 * t).powi(2), (0.2 + 0.15 * t).powi(2))
                })
                .collect(),
        }
    }
}

impl KdVariancePrior {
    pub fn constant(var: f64, steps: usize) -> Self {
        KdVariancePrior {
            table: vec![Vec2::new(var, var); steps],
        }
    }

    /// World-frame diagonal variances for per-step track headings.
    pub fn world_variances(&self, headings: &[f64]) -> Vec<Vec2> {
        self.table
            .iter()
            .zip(headings)
            .map(|(v, h)| {
                let (s, c) = h.sin_cos();
                rotate_diag_variance(*v, c, s)
            })
            .collect()
    }
}

/// A KD prediction with the track frame of every step.
#[derive(Debug, Clone, PartialEq)]
pub struct KdHypothesis {
    /// World frame.
    pub trajectory: GaussianTrajectory,
    /// World-frame direction of travel at each step.
    pub headings: Vec<f64>,
    /// (along-track, cross-track) variances.
    pub track_variances: Vec<Vec2>,
    /// Each mean relative to the ego along the followed lane: (arc length
    /// travelled, change of signed lateral offset). Map-free predictors use
    /// the line of the ego heading, where these are plain ego-frame
    /// coordinates.
    pub lane_coords: Vec<Vec2>,
    /// Distance of each mean from its lane centerline (zero without a map).
    pub lane_offsets: Vec<f64>,
}

impl KdHypothesis {
    fn from_prior(path: LanePath, prior: &KdVariancePrior) -> Self {
        KdHypothesis {
            trajectory: GaussianTrajectory {
                variances: prior.world_variances(&path.headings),
                means: path.means,
            },
            headings: path.headings,
            track_variances: prior.table.clone(),
            lane_coords: path.lane_coords,
            lane_offsets: path.lane_offsets,
        }
    }
}

struct LanePath {
    means: Vec<Vec2>,
    headings: Vec<f64>,
    lane_coords: Vec<Vec2>,
    lane_offsets: Vec<f64>,
}

/// Coordinates along the straight line of the ego heading.
fn heading_line_coords(ego: &AgentHistory, means: &[Vec2]) -> Vec<Vec2> {
    let (o, h) = (ego.last(), ego.heading());
    means.iter().map(|p| (*p - o).rotate(-h)).collect()
}

/// Proportional gap-tracking speed law used by `kd2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeaderFollowerConfig {
    /// s⁻²
    pub k_gain: f64,
    pub d_desired: f64,
    pub v_max: f64,
}

impl Default for LeaderFollowerConfig {
    fn default() -> Self {
        LeaderFollowerConfig {
            k_gain: 0.5,
            d_desired: 8.0,
            v_max: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgePredictor {
    Lin,
    Cv,
    Kd1,
    Kd2(LeaderFollowerConfig),
}

impl KnowledgePredictor {
    pub fn name(&self) -> &'static str {
        match self {
            KnowledgePredictor::Lin => "lin",
            KnowledgePredictor::Cv => "cv",
            KnowledgePredictor::Kd1 => "kd1",
            KnowledgePredictor::Kd2(_) => "kd2",
        }
    }

    /// World-frame prediction.
    pub fn predict(&self, state: &ScenarioState, prior: &KdVariancePrior) -> GaussianTrajectory {
        self.hypothesis(state, prior).trajectory
    }

    pub fn hypothesis(&self, state: &ScenarioState, prior: &KdVariancePrior) -> KdHypothesis {
        match self {
            KnowledgePredictor::Lin => {
                let trajectory = predict_linear_kalman(&state.ego);
                let n = trajectory.len();
                // isotropic, so identical in every frame
                let track_variances = trajectory.variances.clone();
                KdHypothesis {
                    lane_coords: heading_line_coords(&state.ego, &trajectory.means),
                    lane_offsets: vec![0.0; n],
                    trajectory,
                    headings: vec![state.ego.heading(); n],
                    track_variances,
                }
            }
            KnowledgePredictor::Cv => cv_hypothesis(&state.ego, prior),
            KnowledgePredictor::Kd1 => kd1_hypothesis(state, prior, &ego_lane(state)),
            KnowledgePredictor::Kd2(cfg) => kd2_hypothesis(state, prior, cfg),
        }
    }
}

impl fmt::Display for KnowledgePredictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KnowledgePredictor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lin" => Ok(KnowledgePredictor::Lin),
            "cv" => Ok(KnowledgePredictor::Cv),
            "kd1" => Ok(KnowledgePredictor::Kd1),
            "kd2" => Ok(KnowledgePredictor::Kd2(LeaderFollowerConfig::default())),
            other => Err(Error::Config(format!(
                "unknown predictor '{other}' (expected lin | cv | kd1 | kd2)"
            ))),
        }
    }
}

pub fn predict_cv(ego: &AgentHistory, prior: &KdVariancePrior) -> GaussianTrajectory {
    cv_hypothesis(ego, prior).trajectory
}

fn cv_hypothesis(ego: &AgentHistory, prior: &KdVariancePrior) -> KdHypothesis {
    let last = ego.last();
    let step = ego.last_step();
    let n = prior.table.len();
    let means: Vec<Vec2> = (1..=n).map(|j| last + step * j as f64).collect();
    let path = LanePath {
        lane_coords: heading_line_coords(ego, &means),
        lane_offsets: vec![0.0; n],
        means,
        headings: vec![ego.heading(); n],
    };
    KdHypothesis::from_prior(path, prior)
}

/// Noise parameters of the constant-velocity Kalman filter.
const KALMAN_ACCEL_PSD: f64 = 0.5;
const KALMAN_MEAS_VAR: f64 = 0.05;

/// Per-axis constant-velocity Kalman filter over the history, then open-loop
/// prediction. Both axes share the same noise model, so the position
/// covariance is isotropic.
pub fn predict_linear_kalman(ego: &AgentHistory) -> GaussianTrajectory {
    let pts = ego.positions();
    let dt = FRAME_DT;
    let q = KALMAN_ACCEL_PSD;
    let r = KALMAN_MEAS_VAR;
    let q11 = q * dt.powi(3) / 3.0;
    let q12 = q * dt.powi(2) / 2.0;
    let q22 = q * dt;

    // two-point initialisation: exact for the first two observations
    let mut pos = pts[1];
    let mut vel = (pts[1] - pts[0]) * (1.0 / dt);
    let (mut p11, mut p12, mut p22) = (r, r / dt, 2.0 * r / (dt * dt));

    for z in &pts[2..] {
        // predict
        pos += vel * dt;
        let n11 = p11 + 2.0 * dt * p12 + dt * dt * p22 + q11;
        let n12 = p12 + dt * p22 + q12;
        let n22 = p22 + q22;
        // update
        let s = n11 + r;
        let (k1, k2) = (n11 / s, n12 / s);
        let innov = *z - pos;
        pos += innov * k1;
        vel += innov * k2;
        p11 = (1.0 - k1) * n11;
        p12 = (1.0 - k1) * n12;
        p22 = n22 - k2 * n12;
    }

    let mut means = Vec::with_capacity(PRED_LEN);
    let mut variances = Vec::with_capacity(PRED_LEN);
    for _ in 0..PRED_LEN {
        pos += vel * dt;
        let n11 = p11 + 2.0 * dt * p12 + dt * dt * p22 + q11;
        let n12 = p12 + dt * p22 + q12;
        let n22 = p22 + q22;
        (p11, p12, p22) = (n11, n12, n22);
        means.push(pos);
        let v = p11.max(VAR_FLOOR);
        variances.push(Vec2::new(v, v));
    }
    GaussianTrajectory { means, variances }
}

/// Lane-following path from a lane association and a per-step arc-length
/// advance. The initial lateral offset decays linearly to zero.
fn follow_lane(state: &ScenarioState, lane: &Projection, advances: &[f64]) -> LanePath {
    let c = state
        .map
        .centerline(lane.centerline_id)
        .expect("projection refers to a map centerline");
    let mut path = LanePath {
        means: Vec::with_capacity(advances.len()),
        headings: Vec::with_capacity(advances.len()),
        lane_coords: Vec::with_capacity(advances.len()),
        lane_offsets: Vec::with_capacity(advances.len()),
    };
    let mut s = lane.s;
    for (k, ds) in advances.iter().enumerate() {
        s += ds;
        let j = (k + 1) as f64;
        let d = lane.d * (1.0 - j / OFFSET_DECAY_STEPS).max(0.0);
        let t = c.tangent_at(s);
        path.means.push(c.point_at(s) + t.perp() * d);
        path.headings.push(t.angle());
        path.lane_coords.push(Vec2::new(s - lane.s, d - lane.d));
        path.lane_offsets.push(d.abs());
    }
    path
}

fn ego_lane(state: &ScenarioState) -> Projection {
    state
        .map
        .project_along(state.ego.last(), state.ego.heading_dir())
}

fn constant_speed_advances(ego: &AgentHistory, steps: usize) -> Vec<f64> {
    vec![ego.current_speed() * FRAME_DT; steps]
}

pub fn predict_kd1(state: &ScenarioState, prior: &KdVariancePrior) -> GaussianTrajectory {
    kd1_hypothesis(state, prior, &ego_lane(state)).trajectory
}

fn kd1_hypothesis(state: &ScenarioState, prior: &KdVariancePrior, lane: &Projection) -> KdHypothesis {
    let advances = constant_speed_advances(&state.ego, prior.table.len());
    KdHypothesis::from_prior(follow_lane(state, lane, &advances), prior)
}

/// Arc-length position and speed of the nearest agent ahead on the ego lane.
fn find_leader(state: &ScenarioState, lane: &Projection) -> Option<(f64, f64)> {
    let c = state.map.centerline(lane.centerline_id)?;
    state
        .others
        .iter()
        .filter_map(|o| {
            let (s, d, _) = c.project(o.last());
            (d.abs() <= LEADER_CORRIDOR && s > lane.s).then(|| (s, o.current_speed()))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Speed profile of the leader-follower law; without a leader the speed stays constant.
pub fn leader_follower_speeds(
    v0: f64,
    ego_s: f64,
    leader: Option<(f64, f64)>,
    cfg: &LeaderFollowerConfig,
    steps: usize,
) -> Vec<f64> {
    let Some((mut leader_s, leader_v)) = leader else {
        return vec![v0; steps];
    };
    let mut s = ego_s;
    let mut v = v0;
    (0..steps)
        .map(|_| {
            let gap = leader_s - s;
            v = (v + cfg.k_gain * (gap - cfg.d_desired) * FRAME_DT).clamp(0.0, cfg.v_max);
            s += v * FRAME_DT;
            leader_s += leader_v * FRAME_DT;
            v
        })
        .collect()
}

pub fn predict_kd2(
    state: &ScenarioState,
    prior: &KdVariancePrior,
    cfg: &LeaderFollowerConfig,
) -> GaussianTrajectory {
    kd2_hypothesis(state, prior, cfg).trajectory
}

fn kd2_hypothesis(
    state: &ScenarioState,
    prior: &KdVariancePrior,
    cfg: &LeaderFollowerConfig,
) -> KdHypothesis {
    let lane = ego_lane(state);
    let leader = find_leader(state, &lane);
    if leader.is_none() {
        return kd1_hypothesis(state, prior, &lane);
    }
    let speeds = leader_follower_speeds(
        state.ego.current_speed(),
        lane.s,
        leader,
        cfg,
        prior.table.len(),
    );
    let advances: Vec<f64> = speeds.iter().map(|v| v * FRAME_DT).collect();
    KdHypothesis::from_prior(follow_lane(state, &lane, &advances), prior)
}

/// One KD1-style trajectory per distinct lane continuation reachable within
/// the travel distance, ordered by initial lateral offset. Never empty; with
/// `max_modes == 1` this is exactly [`predict_kd1`].
pub fn enumerate_lane_branches(
    state: &ScenarioState,
    prior: &KdVariancePrior,
    max_modes: usize,
) -> Vec<KdHypothesis> {
    let best = ego_lane(state);
    let first = kd1_hypothesis(state, prior, &best);
    let mut modes = vec![first];
    let candidates = state.map.candidate_lanes(
        state.ego.last(),
        state.ego.heading_dir(),
        best.d.abs() + BRANCH_LANE_SLACK,
    );
    for lane in candidates {
        if modes.len() >= max_modes.max(1) {
            break;
        }
        if lane.centerline_id == best.centerline_id {
            continue;
        }
        let t = kd1_hypothesis(state, prior, &lane);
        let distinct = modes.iter().all(|m| {
            m.trajectory
                .means
                .iter()
                .zip(&t.trajectory.means)
                .any(|(a, b)| a.distance(*b) > BRANCH_MERGE_DISTANCE)
        });
        if distinct {
            modes.push(t);
        }
    }
    modes
}

/// Pool-adjacent-violators projection onto non-decreasing sequences.
pub fn isotonic_non_decreasing(values: &[f64]) -> Vec<f64> {
    // blocks of (mean, count)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let n = n1 + n2;
            *blocks.last_mut().unwrap() = ((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, n)| std::iter::repeat_n(m, n))
        .collect()
}

/// Empirical per-step variance of the KD error in each step's track frame,
/// projected to be non-decreasing in the horizon and floored at [`VAR_FLOOR`].
pub fn fit_kd_variance(
    training: &[ScenarioState],
    kd: &KnowledgePredictor,
) -> Result<KdVariancePrior> {
    let samples: Vec<&ScenarioState> = training
        .iter()
        .filter(|s| s.ground_truth.is_some())
        .collect();
    if samples.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "fitting KD variances needs at least 2 scenarios with ground truth, got {}",
            samples.len()
        )));
    }
    let placeholder = KdVariancePrior::default();
    let n = samples.len() as f64;
    let mut sum = vec![Vec2::ZERO; PRED_LEN];
    let mut sum_sq = vec![Vec2::ZERO; PRED_LEN];
    for s in &samples {
        let h = kd.hypothesis(s, &placeholder);
        for (j, gt) in s.ground_truth.as_ref().unwrap().iter().enumerate() {
            let e = (gt.pos() - h.trajectory.means[j]).rotate(-h.headings[j]);
            sum[j] += e;
            sum_sq[j] += Vec2::new(e.x * e.x, e.y * e.y);
        }
    }
    let var_axis = |axis: fn(Vec2) -> f64| -> Vec<f64> {
        let raw: Vec<f64> = (0..PRED_LEN)
            .map(|j| {
                let m = axis(sum[j]) / n;
                (axis(sum_sq[j]) / n - m * m).max(0.0)
            })
            .collect();
        isotonic_non_decreasing(&raw)
            .into_iter()
            .map(|v| v.max(VAR_FLOOR))
            .collect()
    };
    let lon = var_axis(|v| v.x);
    let lat = var_axis(|v| v.y);
    Ok(KdVariancePrior {
        table: lon.into_iter().zip(lat).map(|(a, b)| Vec2::new(a, b)).collect(),
    })
}
