//! Interaction-dataset track CSV ingestion.
//!
//! Tracks are resampled to the 0.5 s frame interval by keeping rows whose
//! `timestamp_ms` is a multiple of 500 (every 5th frame of a 10 Hz recording).
//! A track whose kept rows are not evenly spaced is skipped and counted.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use log::warn;

use super::{AgentHistory, SceneMap, ScenarioState, TrackPoint};
use crate::error::{Error, Result};
use crate::{OBS_LEN, PRED_LEN};

const FRAME_MS: i64 = 500;

pub const TRACK_HEADER: [&str; 11] = [
    "track_id",
    "frame_id",
    "timestamp_ms",
    "agent_type",
    "x",
    "y",
    "vx",
    "vy",
    "psi_rad",
    "length",
    "width",
];

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub scenarios: Vec<ScenarioState>,
    /// Tracks dropped because their timestamps could not be resampled.
    pub skipped_tracks: usize,
}

/// Loads every (ego, anchor) scenario from a track CSV.
///
/// The scene is looked up in the map document by the track file stem; a
/// document with a single scene is used regardless of name.
pub fn load_interaction_csv(track_file: &Path, map_file: &Path) -> Result<Ingested> {
    let doc = super::load_map_document(map_file)?;
    let stem = track_file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let entry = match doc.scene(&stem) {
        Some(e) => e,
        None if doc.scenes.len() == 1 => &doc.scenes[0],
        None => {
            return Err(Error::Config(format!(
                "map file {} has no scene '{stem}'",
                map_file.display()
            )))
        }
    };
    let map = Arc::new(entry.to_map()?);
    load_tracks(track_file, map)
}

/// Parses a track CSV against an already-built map.
pub fn load_tracks(track_file: &Path, map: Arc<SceneMap>) -> Result<Ingested> {
    let file = File::open(track_file)
        .map_err(|e| Error::io(format!("opening {}", track_file.display()), e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(file);
    let parse_err = |row: usize, message: String| Error::Parse {
        path: track_file.to_path_buf(),
        row,
        message,
    };

    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(Ingested::default());
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column '{name}'")))
    };
    let (c_track, c_ts, c_x, c_y) = (
        column("track_id")?,
        column("timestamp_ms")?,
        column("x")?,
        column("y")?,
    );
    column("frame_id")?;

    // track id -> timestamp -> position
    let mut tracks: BTreeMap<u64, BTreeMap<i64, (f64, f64)>> = BTreeMap::new();
    for (k, record) in reader.records().enumerate() {
        let row = record
            .as_ref()
            .ok()
            .and_then(|r| r.position())
            .map_or(k + 2, |p| p.line() as usize);
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        let field = |c: usize, name: &str| {
            record
                .get(c)
                .ok_or_else(|| parse_err(row, format!("missing field '{name}'")))
        };
        let track_id: u64 = field(c_track, "track_id")?
            .parse()
            .map_err(|e| parse_err(row, format!("track_id: {e}")))?;
        let ts: i64 = field(c_ts, "timestamp_ms")?
            .parse()
            .map_err(|e| parse_err(row, format!("timestamp_ms: {e}")))?;
        let x: f64 = field(c_x, "x")?
            .parse()
            .map_err(|e| parse_err(row, format!("x: {e}")))?;
        let y: f64 = field(c_y, "y")?
            .parse()
            .map_err(|e| parse_err(row, format!("y: {e}")))?;
        if !(x.is_finite() && y.is_finite()) {
            return Err(parse_err(row, "non-finite coordinate".into()));
        }
        tracks.entry(track_id).or_default().insert(ts, (x, y));
    }

    let mut skipped = 0;
    let mut resampled: BTreeMap<u64, BTreeMap<i64, TrackPoint>> = BTreeMap::new();
    for (id, rows) in tracks {
        let kept: Vec<(i64, (f64, f64))> = rows
            .into_iter()
            .filter(|(ts, _)| ts.rem_euclid(FRAME_MS) == 0)
            .collect();
        if kept.windows(2).any(|w| w[1].0 - w[0].0 != FRAME_MS) {
            skipped += 1;
            continue;
        }
        let points = kept
            .into_iter()
            .map(|(ts, (x, y))| {
                (
                    ts / FRAME_MS,
                    TrackPoint {
                        x,
                        y,
                        t: ts as f64 / 1000.0,
                    },
                )
            })
            .collect();
        resampled.insert(id, points);
    }
    if skipped > 0 {
        warn!(
            "{}: skipped {skipped} track(s) with irregular timestamps",
            track_file.display()
        );
    }

    let Some(first_frame) = resampled.values().filter_map(|t| t.keys().next()).min().copied()
    else {
        return Ok(Ingested {
            scenarios: Vec::new(),
            skipped_tracks: skipped,
        });
    };
    let last_frame = resampled
        .values()
        .filter_map(|t| t.keys().next_back())
        .max()
        .copied()
        .unwrap_or(first_frame);

    let window = |track: &BTreeMap<i64, TrackPoint>, from: i64, len: usize| {
        (0..len as i64)
            .map(|k| track.get(&(from + k)).copied())
            .collect::<Option<Vec<_>>>()
    };

    let mut scenarios = Vec::new();
    for anchor in first_frame..=last_frame {
        let obs_start = anchor - (OBS_LEN as i64 - 1);
        for (&ego_id, track) in &resampled {
            let Some(history) = window(track, obs_start, OBS_LEN) else {
                continue;
            };
            let Some(future) = window(track, anchor + 1, PRED_LEN) else {
                continue;
            };
            let others = resampled
                .iter()
                .filter(|(id, _)| **id != ego_id)
                .filter_map(|(&id, t)| {
                    window(t, obs_start, OBS_LEN).map(|pts| AgentHistory {
                        agent_id: id,
                        points: pts,
                    })
                })
                .collect();
            scenarios.push(ScenarioState::new(
                AgentHistory::new(ego_id, history)?,
                others,
                map.clone(),
                Some(future),
                (anchor - first_frame) as u32,
            )?);
        }
    }
    Ok(Ingested {
        scenarios,
        skipped_tracks: skipped,
    })
}

/// One row of a track CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRow {
    pub track_id: u64,
    pub frame_id: u64,
    pub timestamp_ms: i64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub psi_rad: f64,
}

/// Writes rows in the Interaction track format; floats use shortest round-trip form.
pub fn write_interaction_csv(path: &Path, rows: &[TrackRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&TRACK_HEADER.join(","));
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},car,{},{},{},{},{},4.5,1.8\n",
            r.track_id, r.frame_id, r.timestamp_ms, r.x, r.y, r.vx, r.vy, r.psi_rad
        ));
    }
    let mut f =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
