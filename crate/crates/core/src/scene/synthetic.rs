//! Desk-scale synthetic scenes: template road geometries populated with
//! car-following traffic.
//!
//! Agents keep a constant lateral offset from their route centerline and
//! follow an intelligent-driver longitudinal law towards a personal desired
//! speed, with smooth (Ornstein–Uhlenbeck) acceleration noise. Agents react
//! to whichever vehicle is ahead of them on their route.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AgentHistory, Centerline, SceneMap, ScenarioState, TrackPoint, TrackRow};
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::{FRAME_DT, OBS_LEN, PRED_LEN};

const SUBSTEPS: usize = 5;
const VEHICLE_LENGTH: f64 = 4.5;
const IDM_MAX_ACCEL: f64 = 1.2;
const IDM_COMFORT_DECEL: f64 = 2.0;
const IDM_HEADWAY: f64 = 1.2;
const IDM_MIN_GAP: f64 = 4.0;
const NOISE_TAU: f64 = 2.0;
const NOISE_SIGMA: f64 = 0.3;
const MIN_SPAWN_DISTANCE: f64 = 14.0;
/// Lateral room kept between the largest agent offset and the raster-safe
/// lane edge; clipped measurement noise must fit inside it.
const EDGE_MARGIN: f64 = 0.25;
/// Measurement noise draws are clipped at this many standard deviations.
const NOISE_CLIP: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Straight,
    Curve,
    TIntersection,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::Straight, Template::Curve, Template::TIntersection];

    pub fn name(self) -> &'static str {
        match self {
            Template::Straight => "straight",
            Template::Curve => "curve",
            Template::TIntersection => "t_intersection",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown template '{s}' (expected straight | curve | t_intersection)"
                ))
            })
    }
}

/// How a synthetic scene sets its confinement parameter `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Confinement {
    Fixed(f64),
    Rule(ConfinementRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfinementRule {
    /// Half the minimum lane width.
    HalfWidth,
    /// Half the minimum lane width less half a raster cell diagonal: a point
    /// that close to a centerline always lands on a drivable cell.
    RasterSafe,
}

impl Default for Confinement {
    fn default() -> Self {
        Confinement::Rule(ConfinementRule::HalfWidth)
    }
}

impl Confinement {
    pub fn value(self, road_width: f64, cell_size: f64) -> f64 {
        match self {
            Confinement::Fixed(c) => c,
            Confinement::Rule(ConfinementRule::HalfWidth) => road_width / 2.0,
            Confinement::Rule(ConfinementRule::RasterSafe) => {
                road_width / 2.0 - cell_size * 0.5 * 2f64.sqrt()
            }
        }
    }
}

/// Parameters of one synthetic scene family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub template: String,
    /// Lane width in meters.
    pub road_width: f64,
    pub agent_count: usize,
    /// Initial speed range in m/s.
    pub speed_range: [f64; 2],
    /// Number of 0.5 s frames simulated per scene.
    pub frames: usize,
    /// Arc radius range for the curve template, meters.
    pub curve_radius: [f64; 2],
    /// Turning angle range for the curve template, degrees.
    pub curve_angle_deg: [f64; 2],
    /// Lateral offset magnitude range as a fraction of the largest offset that stays on-road.
    pub lateral_offset: [f64; 2],
    pub cell_size: f64,
    pub confinement: Confinement,
    /// Standard deviation of the measurement noise on recorded positions,
    /// meters. Draws are clipped at 2.5 σ.
    pub position_noise: f64,
    /// Optional default seed; callers usually pass the seed explicitly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            template: Template::Straight.name().to_string(),
            road_width: 4.0,
            agent_count: 3,
            speed_range: [5.0, 11.0],
            frames: OBS_LEN + PRED_LEN + 2,
            curve_radius: [60.0, 110.0],
            curve_angle_deg: [45.0, 90.0],
            lateral_offset: [0.0, 1.0],
            cell_size: super::DEFAULT_CELL_SIZE,
            confinement: Confinement::default(),
            position_noise: 0.0,
            seed: None,
        }
    }
}

impl SyntheticSpec {
    pub fn for_template(template: Template) -> Self {
        SyntheticSpec {
            template: template.name().to_string(),
            ..SyntheticSpec::default()
        }
    }

    pub fn template(&self) -> Result<Template> {
        self.template.parse()
    }

    pub fn validate(&self) -> Result<Template> {
        let template = self.template()?;
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        if !(self.road_width > 1.5) {
            return bad("road_width", "must be > 1.5 m");
        }
        if self.agent_count == 0 {
            return bad("agent_count", "must be >= 1");
        }
        if !(self.speed_range[0] >= 0.0 && self.speed_range[0] <= self.speed_range[1]) {
            return bad("speed_range", "must satisfy 0 <= min <= max");
        }
        if self.frames < OBS_LEN + PRED_LEN {
            return bad("frames", "must cover one observation window plus horizon");
        }
        if !(self.curve_radius[0] > 5.0 && self.curve_radius[0] <= self.curve_radius[1]) {
            return bad("curve_radius", "must satisfy 5 < min <= max");
        }
        if !(self.curve_angle_deg[0] >= 0.0 && self.curve_angle_deg[0] <= self.curve_angle_deg[1])
        {
            return bad("curve_angle_deg", "must satisfy 0 <= min <= max");
        }
        if !(self.lateral_offset[0] >= 0.0
            && self.lateral_offset[0] <= self.lateral_offset[1]
            && self.lateral_offset[1] <= 1.0)
        {
            return bad("lateral_offset", "must satisfy 0 <= min <= max <= 1");
        }
        if !(self.cell_size > 0.0) {
            return bad("cell_size", "must be > 0");
        }
        if !(self.position_noise >= 0.0 && NOISE_CLIP * self.position_noise <= EDGE_MARGIN) {
            return bad("position_noise", "must satisfy 0 <= σ <= 0.1 m");
        }
        let c = self.confinement.value(self.road_width, self.cell_size);
        if !(c > 0.0 && c.is_finite()) {
            return bad("confinement", "must resolve to a positive C");
        }
        Ok(template)
    }
}

/// Raw simulated tracks for one scene, all sampled on the same frames.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub map: Arc<SceneMap>,
    /// `(agent_id, points, headings)` sorted by agent id.
    pub tracks: Vec<(u64, Vec<TrackPoint>, Vec<f64>)>,
}

impl SyntheticScene {
    /// Every (ego, anchor) scenario, anchors outermost and agents by ascending id.
    pub fn scenarios(&self) -> Result<Vec<ScenarioState>> {
        let frames = self.tracks.first().map_or(0, |t| t.1.len());
        let mut out = Vec::new();
        for anchor in (OBS_LEN - 1)..frames.saturating_sub(PRED_LEN) {
            let start = anchor + 1 - OBS_LEN;
            let hist = |pts: &[TrackPoint]| pts[start..=anchor].to_vec();
            for (ego_id, pts, _) in &self.tracks {
                let others = self
                    .tracks
                    .iter()
                    .filter(|(id, _, _)| id != ego_id)
                    .map(|(id, p, _)| AgentHistory::new(*id, hist(p)))
                    .collect::<Result<Vec<_>>>()?;
                out.push(ScenarioState::new(
                    AgentHistory::new(*ego_id, hist(pts))?,
                    others,
                    self.map.clone(),
                    Some(pts[anchor + 1..=anchor + PRED_LEN].to_vec()),
                    anchor as u32,
                )?);
            }
        }
        Ok(out)
    }

    /// Track rows in the Interaction CSV layout (2 Hz, 500 ms timestamps).
    pub fn track_rows(&self) -> Vec<TrackRow> {
        let mut rows = Vec::new();
        for (id, pts, headings) in &self.tracks {
            for (k, p) in pts.iter().enumerate() {
                let prev = if k > 0 { pts[k - 1].pos() } else { p.pos() };
                let vel = (p.pos() - prev) * (1.0 / FRAME_DT);
                rows.push(TrackRow {
                    track_id: *id,
                    frame_id: k as u64 + 1,
                    timestamp_ms: k as i64 * 500,
                    x: p.x,
                    y: p.y,
                    vx: vel.x,
                    vy: vel.y,
                    psi_rad: headings[k],
                });
            }
        }
        rows
    }
}

/// Generates a map and all its (ego, anchor) scenarios. Deterministic per seed.
pub fn generate_synthetic_scene(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<(Arc<SceneMap>, Vec<ScenarioState>)> {
    let scene = simulate_scene(spec, seed)?;
    let scenarios = scene.scenarios()?;
    Ok((scene.map, scenarios))
}

/// Centerlines sharing a start segment; an agent spawned on the route picks one.
struct Route(Vec<u32>);

/// Simulates the raw tracks of one synthetic scene.
pub fn simulate_scene(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticScene> {
    let template = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = spec.road_width;

    let (local, routes) = match template {
        Template::Straight => straight_routes(w)?,
        Template::Curve => curve_routes(spec, &mut rng)?,
        Template::TIntersection => t_routes(w, &mut rng)?,
    };

    // random rigid placement in the world
    let theta = rng.random_range(-PI..PI);
    let shift = Vec2::new(rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0));
    let centerlines = local
        .into_iter()
        .map(|c| {
            Centerline::new(
                c.id,
                c.polyline.iter().map(|p| p.rotate(theta) + shift).collect(),
                c.widths.clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let map = Arc::new(SceneMap::new(
        format!("{template}-{seed}"),
        template.name(),
        centerlines,
        spec.cell_size,
    )?
    .with_confinement(spec.confinement.value(w, spec.cell_size))?);

    // largest lateral offset whose raster cell center is still within the lane
    let max_offset = (w / 2.0 - spec.cell_size * 0.5 * 2f64.sqrt() - EDGE_MARGIN).max(0.0);

    struct Agent {
        lane: u32,
        s: f64,
        v: f64,
        v_des: f64,
        d: f64,
        noise: f64,
    }
    let mut agents: Vec<Agent> = Vec::with_capacity(spec.agent_count);
    for _ in 0..spec.agent_count {
        let route = &routes[rng.random_range(0..routes.len())];
        let lane = route.0[rng.random_range(0..route.0.len())];
        let centerline = map.centerline(lane).expect("route centerline exists");
        let mut s = rng.random_range(5.0..70.0);
        for _ in 0..50 {
            let p = centerline.point_at(s);
            let clear = agents.iter().all(|a| {
                map.centerline(a.lane).unwrap().point_at(a.s).distance(p) >= MIN_SPAWN_DISTANCE
            });
            if clear {
                break;
            }
            s = rng.random_range(5.0..70.0);
        }
        let v = rng.random_range(spec.speed_range[0]..=spec.speed_range[1]);
        let v_des = (v + rng.random_range(-3.0..3.0)).clamp(2.0, spec.speed_range[1] + 2.0);
        let frac = rng.random_range(spec.lateral_offset[0]..=spec.lateral_offset[1]);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        agents.push(Agent {
            lane,
            s,
            v,
            v_des,
            d: sign * frac * max_offset,
            noise: 0.0,
        });
    }

    let position = |a: &Agent| {
        let c = map.centerline(a.lane).unwrap();
        c.point_at(a.s) + c.tangent_at(a.s).perp() * a.d
    };

    // separate stream, so the noise level leaves the motion itself unchanged
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut measure = |p: Vec2| {
        if spec.position_noise == 0.0 {
            return p;
        }
        let n = Vec2::new(noise_rng.sample(StandardNormal), noise_rng.sample(StandardNormal))
            * spec.position_noise;
        let limit = NOISE_CLIP * spec.position_noise;
        p + if n.norm() > limit { n * (limit / n.norm()) } else { n }
    };

    let dt = FRAME_DT / SUBSTEPS as f64;
    let mut tracks: Vec<(u64, Vec<TrackPoint>, Vec<f64>)> = (0..agents.len())
        .map(|k| (k as u64 + 1, Vec::with_capacity(spec.frames), Vec::new()))
        .collect();
    for frame in 0..spec.frames {
        for (k, a) in agents.iter().enumerate() {
            let p = measure(position(a));
            let heading = map.centerline(a.lane).unwrap().tangent_at(a.s).angle();
            tracks[k].1.push(TrackPoint {
                x: p.x,
                y: p.y,
                t: frame as f64 * FRAME_DT,
            });
            tracks[k].2.push(heading);
        }
        if frame + 1 == spec.frames {
            break;
        }
        for _ in 0..SUBSTEPS {
            let positions: Vec<Vec2> = agents.iter().map(position).collect();
            let mut accels = Vec::with_capacity(agents.len());
            for (i, a) in agents.iter().enumerate() {
                let c = map.centerline(a.lane).unwrap();
                let mut leader: Option<(f64, f64)> = None;
                for (j, b) in agents.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let (s_b, _, dist) = c.project(positions[j]);
                    if dist > w / 2.0 + 0.5 || s_b <= a.s {
                        continue;
                    }
                    let gap = s_b - a.s - VEHICLE_LENGTH;
                    if leader.is_none_or(|(g, _)| gap < g) {
                        leader = Some((gap, b.v));
                    }
                }
                let free = 1.0 - (a.v / a.v_des).powi(4);
                let interaction = leader.map_or(0.0, |(gap, v_lead)| {
                    let desired = IDM_MIN_GAP
                        + a.v * IDM_HEADWAY
                        + a.v * (a.v - v_lead) / (2.0 * (IDM_MAX_ACCEL * IDM_COMFORT_DECEL).sqrt());
                    (desired.max(0.0) / gap.max(0.5)).powi(2)
                });
                accels.push(IDM_MAX_ACCEL * (free - interaction));
            }
            for (a, acc) in agents.iter_mut().zip(accels) {
                let xi: f64 = rng.sample(StandardNormal);
                a.noise += -a.noise * dt / NOISE_TAU + NOISE_SIGMA * dt.sqrt() * xi;
                let acc = (acc + a.noise).clamp(-6.0, 3.0);
                a.v = (a.v + acc * dt).max(0.0);
                a.s += a.v * dt;
            }
        }
    }

    Ok(SyntheticScene { map, tracks })
}

/// Two-way road: east-bound lane at y = −w/2, west-bound at y = +w/2.
fn straight_routes(w: f64) -> Result<(Vec<Centerline>, Vec<Route>)> {
    let east = Centerline::uniform(0, vec![Vec2::new(0.0, -w / 2.0), Vec2::new(320.0, -w / 2.0)], w)?;
    let west = Centerline::uniform(1, vec![Vec2::new(320.0, w / 2.0), Vec2::new(0.0, w / 2.0)], w)?;
    Ok((vec![east, west], vec![Route(vec![0]), Route(vec![1])]))
}

/// Appends a circular arc of `angle` radians (positive = left turn) starting
/// at the last vertex of `poly`, heading `heading`.
fn push_arc(poly: &mut Vec<Vec2>, heading: f64, radius: f64, angle: f64) -> f64 {
    let start = *poly.last().unwrap();
    let turn = angle.signum();
    let center = start + Vec2::from_angle(heading).perp() * (radius * turn);
    let n = ((radius * angle.abs()) / 1.0).ceil().max(2.0) as usize;
    let start_angle = (start - center).angle();
    for k in 1..=n {
        let a = start_angle + angle * k as f64 / n as f64;
        poly.push(center + Vec2::from_angle(a) * radius);
    }
    heading + angle
}

/// Two-way road with one circular bend; both lanes share the arc center.
fn curve_routes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<Centerline>, Vec<Route>)> {
    let w = spec.road_width;
    let lead_in = rng.random_range(10.0..60.0);
    let radius = rng.random_range(spec.curve_radius[0]..=spec.curve_radius[1]);
    let angle = rng
        .random_range(spec.curve_angle_deg[0]..=spec.curve_angle_deg[1])
        .to_radians();
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let lane = |y: f64, r: f64| {
        let mut poly = vec![Vec2::new(0.0, y), Vec2::new(lead_in, y)];
        let heading = push_arc(&mut poly, 0.0, r, sign * angle);
        let end = *poly.last().unwrap();
        poly.push(end + Vec2::from_angle(heading) * 220.0);
        poly
    };
    let forward = lane(-w / 2.0, radius);
    // the left lane is the inner one on a left bend
    let mut backward = lane(w / 2.0, radius - sign * w);
    backward.reverse();
    Ok((
        vec![
            Centerline::uniform(0, forward, w)?,
            Centerline::uniform(1, backward, w)?,
        ],
        vec![Route(vec![0]), Route(vec![1])],
    ))
}

/// Two-lane main road along x (east-bound at y = −w/2, west-bound at y = +w/2)
/// and a north-bound stem at x = 0 that turns either right or left.
fn t_routes(w: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<Centerline>, Vec<Route>)> {
    let r_right = rng.random_range(8.0..12.0);
    let r_left = r_right + w;
    let split_y = -w / 2.0 - r_right;
    let east = Centerline::uniform(
        0,
        vec![Vec2::new(-130.0, -w / 2.0), Vec2::new(220.0, -w / 2.0)],
        w,
    )?;
    let mut right = vec![Vec2::new(0.0, -110.0), Vec2::new(0.0, split_y)];
    push_arc(&mut right, PI / 2.0, r_right, -PI / 2.0);
    let end = *right.last().unwrap();
    right.push(end + Vec2::new(220.0, 0.0));
    let mut left = vec![Vec2::new(0.0, -110.0), Vec2::new(0.0, split_y)];
    push_arc(&mut left, PI / 2.0, r_left, PI / 2.0);
    let end = *left.last().unwrap();
    left.push(end + Vec2::new(-220.0, 0.0));
    let west = Centerline::uniform(
        3,
        vec![Vec2::new(130.0, w / 2.0), Vec2::new(-220.0, w / 2.0)],
        w,
    )?;
    Ok((
        vec![
            east,
            Centerline::uniform(1, right, w)?,
            Centerline::uniform(2, left, w)?,
            west,
        ],
        vec![
            Route(vec![0]),
            Route(vec![1, 2]),
            Route(vec![3]),
        ],
    ))
}
