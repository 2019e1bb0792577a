//! JSON polyline map document.
//!
//! ```json
//! {
//!   "format": "rrb-map/1",
//!   "scenes": [
//!     { "id": "straight-7", "category": "straight", "cell_size": 0.5,
//!       "centerlines": [[0, 4.0, [[0.0, 0.0], [50.0, 0.0]]]] }
//!   ]
//! }
//! ```
//!
//! Each centerline is `[id, width_m, [[x, y], ...]]`; `width_m` may also be a
//! per-segment array. `category`, `cell_size` and `confinement_c` are optional.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Centerline, SceneMap, DEFAULT_CELL_SIZE};
use crate::error::{Error, Result};
use crate::geometry::Vec2;

pub const MAP_FORMAT: &str = "rrb-map/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapDocument {
    pub format: String,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confinement_c: Option<f64>,
    pub centerlines: Vec<(u32, Width, Vec<[f64; 2]>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Width {
    Uniform(f64),
    PerSegment(Vec<f64>),
}

impl SceneEntry {
    pub fn from_map(map: &SceneMap) -> Self {
        SceneEntry {
            id: map.scene_id.clone(),
            category: Some(map.category.clone()),
            cell_size: Some(map.raster.cell_size),
            // only overrides of the half-width rule are stored
            confinement_c: (super::compute_confinement_c(&map.centerlines).ok() != Some(map.confinement_c))
                .then_some(map.confinement_c),
            centerlines: map
                .centerlines
                .iter()
                .map(|c| {
                    let width = if c.widths.iter().all(|w| *w == c.widths[0]) {
                        Width::Uniform(c.widths[0])
                    } else {
                        Width::PerSegment(c.widths.clone())
                    };
                    (c.id, width, c.polyline.iter().map(|p| [p.x, p.y]).collect())
                })
                .collect(),
        }
    }

    pub fn to_map(&self) -> Result<SceneMap> {
        let centerlines = self
            .centerlines
            .iter()
            .map(|(id, width, pts)| {
                let poly: Vec<Vec2> = pts.iter().map(|p| Vec2::from(*p)).collect();
                match width {
                    Width::Uniform(w) => Centerline::uniform(*id, poly, *w),
                    Width::PerSegment(ws) => Centerline::new(*id, poly, ws.clone()),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let category = self.category.clone().unwrap_or_else(|| self.id.clone());
        let map = SceneMap::new(
            self.id.clone(),
            category,
            centerlines,
            self.cell_size.unwrap_or(DEFAULT_CELL_SIZE),
        )?;
        match self.confinement_c {
            Some(c) => map.with_confinement(c),
            None => Ok(map),
        }
    }
}

impl MapDocument {
    pub fn from_maps<'a>(maps: impl IntoIterator<Item = &'a SceneMap>) -> Self {
        MapDocument {
            format: MAP_FORMAT.to_string(),
            scenes: maps.into_iter().map(SceneEntry::from_map).collect(),
        }
    }

    pub fn scene(&self, id: &str) -> Option<&SceneEntry> {
        self.scenes.iter().find(|s| s.id == id)
    }
}

pub fn load_map_document(path: &Path) -> Result<MapDocument> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading map file {}", path.display()), e))?;
    let doc: MapDocument = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        row: e.line(),
        message: e.to_string(),
    })?;
    if doc.format != MAP_FORMAT {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            message: format!("unsupported map format '{}', expected '{MAP_FORMAT}'", doc.format),
        });
    }
    Ok(doc)
}

pub fn write_map_document(path: &Path, doc: &MapDocument) -> Result<()> {
    let text = serde_json::to_string_pretty(doc)?;
    fs::write(path, text + "\n")
        .map_err(|e| Error::io(format!("writing map file {}", path.display()), e))
}
