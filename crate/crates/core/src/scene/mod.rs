//! Scene data model: agent tracks, lane centerlines, the drivable-area raster
//! and the per-sample [`ScenarioState`].

mod interaction;
mod mapfile;
mod raster;
mod synthetic;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use interaction::{load_interaction_csv, load_tracks, write_interaction_csv, Ingested, TrackRow};
pub use mapfile::{load_map_document, write_map_document, MapDocument};
pub use raster::{rasterize_drivable, DrivableRaster};
pub use synthetic::{
    generate_synthetic_scene, simulate_scene, Confinement, ConfinementRule, SyntheticScene, SyntheticSpec,
    Template,
};

use crate::error::{Error, Result};
use crate::geometry::{point_at_arc_length, segment_param, Vec2};
use crate::{FRAME_DT, OBS_LEN, PRED_LEN};

/// Default raster resolution in meters.
pub const DEFAULT_CELL_SIZE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

impl TrackPoint {
    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// The last [`OBS_LEN`] observed points of one agent, spaced [`FRAME_DT`] apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentHistory {
    pub agent_id: u64,
    pub points: Vec<TrackPoint>,
}

impl AgentHistory {
    pub fn new(agent_id: u64, points: Vec<TrackPoint>) -> Result<Self> {
        if points.len() != OBS_LEN {
            return Err(Error::Dimension {
                context: "agent history",
                expected: OBS_LEN,
                actual: points.len(),
            });
        }
        for w in points.windows(2) {
            if ((w[1].t - w[0].t) - FRAME_DT).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "agent {agent_id}: history spacing {} s, expected {FRAME_DT} s",
                    w[1].t - w[0].t
                )));
            }
        }
        Ok(AgentHistory { agent_id, points })
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.points.iter().map(TrackPoint::pos).collect()
    }

    pub fn last(&self) -> Vec2 {
        self.points[self.points.len() - 1].pos()
    }

    /// Displacement of the last history step.
    pub fn last_step(&self) -> Vec2 {
        let n = self.points.len();
        self.points[n - 1].pos() - self.points[n - 2].pos()
    }

    /// Heading of the last step in radians; 0 when the agent did not move.
    pub fn heading(&self) -> f64 {
        let step = self.last_step();
        if step.norm() == 0.0 {
            0.0
        } else {
            step.angle()
        }
    }

    /// Unit direction of the last step, or zero when the agent did not move.
    pub fn heading_dir(&self) -> Vec2 {
        let step = self.last_step();
        let n = step.norm();
        if n == 0.0 {
            Vec2::ZERO
        } else {
            step * (1.0 / n)
        }
    }

    /// Mean of the last two per-step speeds, m/s.
    pub fn current_speed(&self) -> f64 {
        let p = &self.points;
        let n = p.len();
        let a = p[n - 1].pos().distance(p[n - 2].pos());
        let b = p[n - 2].pos().distance(p[n - 3].pos());
        (a + b) / (2.0 * FRAME_DT)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centerline {
    pub id: u32,
    pub polyline: Vec<Vec2>,
    /// One width per segment, in meters.
    pub widths: Vec<f64>,
    cumulative: Vec<f64>,
}

impl Centerline {
    pub fn new(id: u32, polyline: Vec<Vec2>, widths: Vec<f64>) -> Result<Self> {
        if polyline.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "centerline {id} has {} vertices, need at least 2",
                polyline.len()
            )));
        }
        if widths.len() != polyline.len() - 1 {
            return Err(Error::Dimension {
                context: "centerline segment widths",
                expected: polyline.len() - 1,
                actual: widths.len(),
            });
        }
        if let Some(w) = widths.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "centerline {id} has non-positive width {w}"
            )));
        }
        let mut cumulative = Vec::with_capacity(polyline.len());
        cumulative.push(0.0);
        for (k, w) in polyline.windows(2).enumerate() {
            let len = w[0].distance(w[1]);
            if !(len > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "centerline {id} has a zero-length segment at index {k}"
                )));
            }
            cumulative.push(cumulative[k] + len);
        }
        Ok(Centerline {
            id,
            polyline,
            widths,
            cumulative,
        })
    }

    pub fn uniform(id: u32, polyline: Vec<Vec2>, width: f64) -> Result<Self> {
        let n = polyline.len().saturating_sub(1);
        Centerline::new(id, polyline, vec![width; n])
    }

    pub fn length(&self) -> f64 {
        self.cumulative[self.cumulative.len() - 1]
    }

    /// Arc length from the start to vertex `k`.
    pub fn vertex_arc_length(&self, k: usize) -> f64 {
        self.cumulative[k]
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        point_at_arc_length(&self.polyline, s)
    }

    /// Index of the segment containing arc length `s` (clamped to the ends).
    pub fn segment_at(&self, s: f64) -> usize {
        let n = self.polyline.len() - 1;
        match self.cumulative[1..].iter().position(|&c| c >= s) {
            Some(k) => k.min(n - 1),
            None => n - 1,
        }
    }

    /// Unit tangent at arc length `s`.
    pub fn tangent_at(&self, s: f64) -> Vec2 {
        let k = self.segment_at(s);
        let d = self.polyline[k + 1] - self.polyline[k];
        d * (1.0 / d.norm())
    }

    pub fn min_width(&self) -> f64 {
        self.widths.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Nearest point on this polyline: (arc length, signed lateral offset, distance).
    pub fn project(&self, p: Vec2) -> (f64, f64, f64) {
        let mut best = (0.0, 0.0, f64::INFINITY);
        for (k, w) in self.polyline.windows(2).enumerate() {
            let t = segment_param(p, w[0], w[1]);
            let seg = w[1] - w[0];
            let foot = w[0] + seg * t;
            let dist = p.distance(foot);
            if dist < best.2 {
                let side = seg.cross(p - foot);
                let d = if side < 0.0 { -dist } else { dist };
                best = (self.cumulative[k] + t * seg.norm(), d, dist);
            }
        }
        best
    }
}

/// Result of associating a point with the lane network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub centerline_id: u32,
    /// Arc length from the polyline start to the foot of the perpendicular.
    pub s: f64,
    /// Signed lateral offset, positive to the left of the travel direction.
    pub d: f64,
}

#[derive(Debug, Clone)]
pub struct SceneMap {
    pub scene_id: String,
    /// Scene category used for per-category metric averaging.
    pub category: String,
    /// Sorted by ascending id.
    pub centerlines: Vec<Centerline>,
    pub raster: DrivableRaster,
    pub confinement_c: f64,
}

impl SceneMap {
    /// Builds a map, rasterizing the drivable area at `cell_size` and setting
    /// `C` to half the minimum lane width.
    pub fn new(
        scene_id: impl Into<String>,
        category: impl Into<String>,
        mut centerlines: Vec<Centerline>,
        cell_size: f64,
    ) -> Result<Self> {
        let scene_id = scene_id.into();
        centerlines.sort_by_key(|c| c.id);
        if centerlines.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidInput(format!(
                "scene {scene_id}: duplicate centerline ids"
            )));
        }
        let raster = rasterize_drivable(&centerlines, cell_size)?;
        for c in &centerlines {
            if let Some(v) = c.polyline.iter().find(|v| !raster.is_drivable(**v)) {
                return Err(Error::InvalidInput(format!(
                    "scene {scene_id}: centerline {} vertex ({}, {}) is not on a drivable cell",
                    c.id, v.x, v.y
                )));
            }
        }
        let confinement_c = compute_confinement_c(&centerlines)?;
        Ok(SceneMap {
            scene_id,
            category: category.into(),
            centerlines,
            raster,
            confinement_c,
        })
    }

    /// Overrides the confinement parameter for this scene.
    pub fn with_confinement(mut self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Config(format!("confinement_c must be > 0, got {c}")));
        }
        self.confinement_c = c;
        Ok(self)
    }

    pub fn centerline(&self, id: u32) -> Option<&Centerline> {
        self.centerlines
            .binary_search_by_key(&id, |c| c.id)
            .ok()
            .map(|k| &self.centerlines[k])
    }

    pub fn is_drivable(&self, p: Vec2) -> bool {
        self.raster.is_drivable(p)
    }

    /// Nearest centerline by |lateral offset|; exact ties go to the smaller id.
    pub fn project_to_centerline(&self, p: Vec2) -> Projection {
        self.project_filtered(p, |_, _| true)
            .expect("scene map has at least one centerline")
    }

    /// Like [`Self::project_to_centerline`] but only considers centerlines whose
    /// tangent at the foot point has a positive component along `heading`.
    /// Falls back to the unfiltered projection if no centerline qualifies.
    pub fn project_along(&self, p: Vec2, heading: Vec2) -> Projection {
        if heading.norm() == 0.0 {
            return self.project_to_centerline(p);
        }
        self.project_filtered(p, |c, s| c.tangent_at(s).dot(heading) > 0.0)
            .unwrap_or_else(|| self.project_to_centerline(p))
    }

    /// All centerlines whose projection of `p` is heading-compatible and within
    /// `max_offset` laterally, ordered by (|d|, id).
    pub fn candidate_lanes(&self, p: Vec2, heading: Vec2, max_offset: f64) -> Vec<Projection> {
        let mut out: Vec<(f64, Projection)> = self
            .centerlines
            .iter()
            .filter_map(|c| {
                let (s, d, dist) = c.project(p);
                let aligned = heading.norm() == 0.0 || c.tangent_at(s).dot(heading) > 0.0;
                (aligned && dist <= max_offset).then_some((
                    dist,
                    Projection {
                        centerline_id: c.id,
                        s,
                        d,
                    },
                ))
            })
            .collect();
        out.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(a.1.centerline_id.cmp(&b.1.centerline_id))
        });
        out.into_iter().map(|(_, p)| p).collect()
    }

    fn project_filtered(
        &self,
        p: Vec2,
        keep: impl Fn(&Centerline, f64) -> bool,
    ) -> Option<Projection> {
        let mut best: Option<(f64, Projection)> = None;
        for c in &self.centerlines {
            let (s, d, dist) = c.project(p);
            if !keep(c, s) {
                continue;
            }
            // strict `<` keeps the smaller id on exact ties (centerlines are id-sorted)
            if best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
                best = Some((
                    dist,
                    Projection {
                        centerline_id: c.id,
                        s,
                        d,
                    },
                ));
            }
        }
        best.map(|(_, p)| p)
    }

    /// Point at arc length `s0 + ds` along a centerline, extrapolating past the end.
    pub fn walk_centerline(&self, centerline_id: u32, s0: f64, ds: f64) -> Result<Vec2> {
        let c = self.centerline(centerline_id).ok_or_else(|| {
            Error::InvalidInput(format!("unknown centerline id {centerline_id}"))
        })?;
        Ok(c.point_at(s0 + ds))
    }
}

/// Half of the minimum segment width across all centerlines.
pub fn compute_confinement_c(centerlines: &[Centerline]) -> Result<f64> {
    if centerlines.is_empty() {
        return Err(Error::InvalidInput(
            "confinement needs at least one centerline".into(),
        ));
    }
    Ok(centerlines
        .iter()
        .map(Centerline::min_width)
        .fold(f64::INFINITY, f64::min)
        / 2.0)
}

/// Full model input for one (ego agent, anchor frame) pair.
#[derive(Debug, Clone)]
pub struct ScenarioState {
    pub ego: AgentHistory,
    pub others: Vec<AgentHistory>,
    pub map: Arc<SceneMap>,
    pub ground_truth: Option<Vec<TrackPoint>>,
    /// Index of the last observed frame on the resampled time axis.
    pub anchor_frame: u32,
}

impl ScenarioState {
    pub fn new(
        ego: AgentHistory,
        others: Vec<AgentHistory>,
        map: Arc<SceneMap>,
        ground_truth: Option<Vec<TrackPoint>>,
        anchor_frame: u32,
    ) -> Result<Self> {
        if others.iter().any(|o| o.agent_id == ego.agent_id) {
            return Err(Error::InvalidInput(format!(
                "ego agent {} also listed among other agents",
                ego.agent_id
            )));
        }
        if let Some(gt) = &ground_truth {
            if gt.len() != PRED_LEN {
                return Err(Error::Dimension {
                    context: "ground truth",
                    expected: PRED_LEN,
                    actual: gt.len(),
                });
            }
        }
        Ok(ScenarioState {
            ego,
            others,
            map,
            ground_truth,
            anchor_frame,
        })
    }

    pub fn ground_truth_positions(&self) -> Option<Vec<Vec2>> {
        self.ground_truth
            .as_ref()
            .map(|gt| gt.iter().map(TrackPoint::pos).collect())
    }

    /// Stable identifier `scene/ego/anchor` used for ordering and splitting.
    pub fn key(&self) -> String {
        format!(
            "{}/{}/{}",
            self.map.scene_id, self.ego.agent_id, self.anchor_frame
        )
    }

    /// Structural equality ignoring map identity (compares scene ids).
    pub fn same_as(&self, other: &ScenarioState) -> bool {
        self.ego == other.ego
            && self.others == other.others
            && self.ground_truth == other.ground_truth
            && self.anchor_frame == other.anchor_frame
            && self.map.scene_id == other.map.scene_id
    }
}
