//! ADE / FDE / RV / CT metrics and the per-category report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_at_arc_length, polyline_length, Vec2};
use crate::scene::{ScenarioState, SceneMap};
use crate::trajectory::MultiModalPrediction;

/// Average and final displacement of one trajectory.
pub fn displacement(means: &[Vec2], gt: &[Vec2]) -> Result<(f64, f64)> {
    if means.len() != gt.len() || gt.is_empty() {
        return Err(Error::Dimension {
            context: "displacement metric",
            expected: gt.len(),
            actual: means.len(),
        });
    }
    let d: Vec<f64> = means.iter().zip(gt).map(|(a, b)| a.distance(*b)).collect();
    Ok((d.iter().sum::<f64>() / d.len() as f64, d[d.len() - 1]))
}

/// ADE and FDE of the mode closest to the ground truth.
pub fn metric_ade_fde(pred: &MultiModalPrediction, gt: &[Vec2]) -> Result<(f64, f64)> {
    displacement(&pred.modes[pred.closest_mode(gt)].means, gt)
}

/// Percentage of predicted mean points on non-drivable cells, weighted across
/// modes by their probabilities.
pub fn metric_rv(pred: &MultiModalPrediction, map: &SceneMap) -> f64 {
    pred.modes
        .iter()
        .zip(&pred.probabilities)
        .map(|(mode, p)| {
            let off = mode.means.iter().filter(|m| !map.is_drivable(**m)).count();
            p * 100.0 * off as f64 / mode.means.len().max(1) as f64
        })
        .sum()
}

/// Cross-track error: the prediction, anchored at `anchor`, is walked to the
/// arc length the ground truth covers, extrapolating past its last segment,
/// and the distance of that point to the true destination is returned.
pub fn metric_ct(anchor: Vec2, means: &[Vec2], gt: &[Vec2]) -> Result<f64> {
    if means.len() != gt.len() || gt.is_empty() {
        return Err(Error::Dimension {
            context: "cross-track metric",
            expected: gt.len(),
            actual: means.len(),
        });
    }
    let mut gt_path = vec![anchor];
    gt_path.extend_from_slice(gt);
    let target = polyline_length(&gt_path);

    // repeated points carry no direction; drop them so extrapolation is defined
    let mut path = vec![anchor];
    for &m in means {
        if m.distance(*path.last().unwrap()) > 1e-12 {
            path.push(m);
        }
    }
    let end = if path.len() < 2 {
        anchor
    } else {
        point_at_arc_length(&path, target)
    };
    Ok(end.distance(gt[gt.len() - 1]))
}

/// Metrics of one scenario under one pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub key: String,
    pub category: String,
    pub ade: f64,
    pub fde: f64,
    pub rv: f64,
    pub ct: f64,
}

/// Scores a world-frame prediction against the scenario's ground truth.
pub fn score(pred: &MultiModalPrediction, state: &ScenarioState) -> Result<ScenarioMetrics> {
    let gt = state
        .ground_truth_positions()
        .ok_or_else(|| Error::InvalidInput(format!("scenario {} has no ground truth", state.key())))?;
    let best = pred.closest_mode(&gt);
    let (ade, fde) = displacement(&pred.modes[best].means, &gt)?;
    Ok(ScenarioMetrics {
        key: state.key(),
        category: state.map.category.clone(),
        ade,
        fde,
        rv: metric_rv(pred, &state.map),
        ct: metric_ct(state.ego.last(), &pred.modes[best].means, &gt)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    pub ade: f64,
    pub fde: f64,
    pub rv: f64,
    pub ct: f64,
    pub samples: usize,
}

impl MetricValues {
    fn mean_of(scores: &[&ScenarioMetrics]) -> Self {
        let n = scores.len() as f64;
        let avg = |f: fn(&ScenarioMetrics) -> f64| scores.iter().map(|s| f(s)).sum::<f64>() / n;
        MetricValues {
            ade: avg(|s| s.ade),
            fde: avg(|s| s.fde),
            rv: avg(|s| s.rv),
            ct: avg(|s| s.ct),
            samples: scores.len(),
        }
    }
}

/// One pipeline's metrics: the headline values are the unweighted mean of the
/// per-category means, so every scene category counts equally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pipeline: String,
    pub overall: MetricValues,
    pub categories: BTreeMap<String, MetricValues>,
}

impl MetricsReport {
    pub fn from_scores(pipeline: impl Into<String>, scores: &[ScenarioMetrics]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidInput("cannot report metrics of an empty dataset".into()));
        }
        let mut groups: BTreeMap<String, Vec<&ScenarioMetrics>> = BTreeMap::new();
        for s in scores {
            groups.entry(s.category.clone()).or_default().push(s);
        }
        let categories: BTreeMap<String, MetricValues> = groups
            .iter()
            .map(|(k, v)| (k.clone(), MetricValues::mean_of(v)))
            .collect();
        let k = categories.len() as f64;
        let avg = |f: fn(&MetricValues) -> f64| categories.values().map(f).sum::<f64>() / k;
        let overall = MetricValues {
            ade: avg(|c| c.ade),
            fde: avg(|c| c.fde),
            rv: avg(|c| c.rv),
            ct: avg(|c| c.ct),
            samples: scores.len(),
        };
        Ok(MetricsReport {
            pipeline: pipeline.into(),
            overall,
            categories,
        })
    }
}

/// Reports of several pipelines on the same split.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub split: String,
    pub rows: Vec<MetricsReport>,
}

impl ComparisonTable {
    pub fn get(&self, pipeline: &str) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.pipeline == pipeline)
    }

    /// Fixed-width text table: overall rows first, then one block per category.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "split: {}", self.split);
        let header = |out: &mut String, title: &str| {
            let _ = writeln!(
                out,
                "\n[{title}]\n{:<14} {:>8} {:>8} {:>8} {:>8} {:>8}",
                "pipeline", "ADE", "FDE", "RV%", "CT", "n"
            );
        };
        let row = |out: &mut String, name: &str, v: &MetricValues| {
            let _ = writeln!(
                out,
                "{:<14} {:>8.3} {:>8.3} {:>8.2} {:>8.3} {:>8}",
                name, v.ade, v.fde, v.rv, v.ct, v.samples
            );
        };
        header(&mut out, "category-averaged");
        for r in &self.rows {
            row(&mut out, &r.pipeline, &r.overall);
        }
        let cats: std::collections::BTreeSet<&String> =
            self.rows.iter().flat_map(|r| r.categories.keys()).collect();
        for c in cats {
            header(&mut out, c);
            for r in &self.rows {
                if let Some(v) = r.categories.get(c) {
                    row(&mut out, &r.pipeline, v);
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::trajectory::GaussianTrajectory;

    fn traj(means: Vec<Vec2>) -> GaussianTrajectory {
        GaussianTrajectory::with_constant_variance(means, 1.0)
    }

    fn line(n: usize, step: f64) -> Vec<Vec2> {
        (1..=n).map(|k| Vec2::new(k as f64 * step, 0.0)).collect()
    }

    #[test]
    fn ade_fde_examples() {
        let gt = line(10, 1.0);
        let exact = MultiModalPrediction::single(traj(gt.clone()));
        assert_eq!(metric_ade_fde(&exact, &gt).unwrap(), (0.0, 0.0));
        let shifted: Vec<Vec2> = gt.iter().map(|p| *p + Vec2::new(0.0, 1.0)).collect();
        assert_eq!(
            metric_ade_fde(&MultiModalPrediction::single(traj(shifted)), &gt).unwrap(),
            (1.0, 1.0)
        );
        let growing: Vec<Vec2> = gt
            .iter()
            .enumerate()
            .map(|(k, p)| *p + Vec2::new(0.0, (k + 1) as f64))
            .collect();
        let (ade, fde) = metric_ade_fde(&MultiModalPrediction::single(traj(growing)), &gt).unwrap();
        assert!((ade - 5.5).abs() < 1e-9 && (fde - 10.0).abs() < 1e-9);
    }

    #[test]
    fn ade_uses_closest_mode() {
        let gt = line(10, 1.0);
        let far: Vec<Vec2> = gt.iter().map(|p| *p + Vec2::new(0.0, 5.0)).collect();
        let near: Vec<Vec2> = gt.iter().map(|p| *p + Vec2::new(0.0, 0.5)).collect();
        let pred = MultiModalPrediction::uniform(vec![traj(far), traj(near)]).unwrap();
        assert_eq!(metric_ade_fde(&pred, &gt).unwrap(), (0.5, 0.5));
    }

    fn corridor() -> SceneMap {
        let c = crate::scene::Centerline::uniform(
            0,
            vec![Vec2::new(-5.0, 0.0), Vec2::new(30.0, 0.0)],
            4.0,
        )
        .unwrap();
        SceneMap::new("c", "straight", vec![c], 0.5).unwrap()
    }

    #[test]
    fn rv_examples() {
        let map = corridor();
        let on = line(10, 2.0);
        assert_eq!(metric_rv(&MultiModalPrediction::single(traj(on.clone())), &map), 0.0);
        let mut one_off = on.clone();
        one_off[4].y = 10.0;
        let single = MultiModalPrediction::single(traj(one_off.clone()));
        assert!((metric_rv(&single, &map) - 10.0).abs() < 1e-9);
        let mut two_off = one_off;
        two_off[5].y = -10.0;
        let pair = MultiModalPrediction::uniform(vec![traj(on), traj(two_off)]).unwrap();
        assert!((metric_rv(&pair, &map) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn ct_extrapolates_short_prediction() {
        let gt = line(10, 1.0);
        let short = line(10, 0.6);
        assert!(metric_ct(Vec2::ZERO, &short, &gt).unwrap() < 1e-12);
    }

    #[test]
    fn ct_chord_for_rotated_ray() {
        let gt = line(10, 1.0);
        for theta in [0.1f64, 0.5, 1.2] {
            let rotated: Vec<Vec2> = gt.iter().map(|p| p.rotate(theta)).collect();
            let ct = metric_ct(Vec2::ZERO, &rotated, &gt).unwrap();
            assert!((ct - 2.0 * 10.0 * (theta / 2.0).sin()).abs() < 1e-9);
        }
    }

    #[test]
    fn ct_stationary_prediction_measures_from_anchor() {
        let gt = line(10, 1.0);
        let still = vec![Vec2::ZERO; 10];
        assert!((metric_ct(Vec2::ZERO, &still, &gt).unwrap() - 10.0).abs() < 1e-12);
    }

    fn score_of(cat: &str, ade: f64) -> ScenarioMetrics {
        ScenarioMetrics {
            key: format!("{cat}/{ade}"),
            category: cat.into(),
            ade,
            fde: 2.0 * ade,
            rv: 0.0,
            ct: ade,
        }
    }

    #[test]
    fn categories_weigh_equally() {
        let scores = vec![score_of("a", 1.0), score_of("b", 3.0), score_of("b", 3.0), score_of("b", 3.0)];
        let r = MetricsReport::from_scores("x", &scores).unwrap();
        assert_eq!(r.overall.ade, 2.0);
        assert_eq!(r.overall.samples, 4);
        assert_eq!(r.categories["b"].samples, 3);
        assert!(MetricsReport::from_scores("x", &[]).is_err());
    }

    #[test]
    fn table_renders_every_pipeline() {
        let t = ComparisonTable {
            split: "random".into(),
            rows: vec![
                MetricsReport::from_scores("kd1", &[score_of("a", 1.0)]).unwrap(),
                MetricsReport::from_scores("rrb", &[score_of("a", 0.5)]).unwrap(),
            ],
        };
        let text = t.to_text();
        assert!(text.contains("kd1") && text.contains("rrb") && text.contains("RV%"));
        let back: ComparisonTable = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn ade_bounded_and_fde_is_last(
            pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -3.0f64..3.0, -3.0f64..3.0), 10)
        ) {
            let gt: Vec<Vec2> = pts.iter().map(|p| Vec2::new(p.0, p.1)).collect();
            let pred: Vec<Vec2> = pts.iter().map(|p| Vec2::new(p.0 + p.2, p.1 + p.3)).collect();
            let (ade, fde) = displacement(&pred, &gt).unwrap();
            let max = pred.iter().zip(&gt).map(|(a, b)| a.distance(*b)).fold(0.0, f64::max);
            prop_assert!(ade <= max + 1e-12);
            prop_assert_eq!(fde, pred[9].distance(gt[9]));
        }

        #[test]
        fn ct_ignores_retiming(
            steps in prop::collection::vec(0.1f64..3.0, 10),
            turn_a in -1.0f64..1.0,
            turn_b in -1.0f64..1.0,
            extra in prop::collection::vec(0.0f64..1.0, 7),
        ) {
            // gt bends only at its 3rd and 7th points; the prediction samples the
            // same polyline at arbitrary monotone arc lengths keeping the corners
            let mut heading: f64 = 0.0;
            let mut gt = Vec::new();
            let mut last = Vec2::ZERO;
            let mut arc = Vec::new();
            let mut s = 0.0;
            for (k, d) in steps.iter().enumerate() {
                if k == 3 { heading += turn_a; }
                if k == 7 { heading += turn_b; }
                last = last + Vec2::from_angle(heading) * *d;
                s += d;
                gt.push(last);
                arc.push(s);
            }
            let mut path = vec![Vec2::ZERO];
            path.extend_from_slice(&gt);
            let mut samples: Vec<f64> = extra.iter().map(|u| u * s).collect();
            samples.extend([arc[2], arc[6], s]);
            samples.sort_by(f64::total_cmp);
            let retimed: Vec<Vec2> = samples.iter().map(|a| point_at_arc_length(&path, *a)).collect();
            let ct = metric_ct(Vec2::ZERO, &retimed, &gt).unwrap();
            prop_assert!(ct < 1e-9, "ct {}", ct);
            prop_assert!(metric_ct(Vec2::ZERO, &gt, &gt).unwrap() < 1e-9);
        }
    }
}
