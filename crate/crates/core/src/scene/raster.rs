use crate::error::{Error, Result};
use crate::geometry::{point_segment_distance, Vec2};

use super::Centerline;

/// Margin added around the centerline bounding box, in meters.
const RASTER_MARGIN: f64 = 10.0;

/// Boolean drivable-area grid. Cell `(col, row)` covers
/// `origin + [col, col+1) × [row, row+1)` scaled by `cell_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivableRaster {
    pub origin: Vec2,
    pub cell_size: f64,
    pub cols: usize,
    pub rows: usize,
    cells: Vec<bool>,
}

impl DrivableRaster {
    pub fn cell_center(&self, col: usize, row: usize) -> Vec2 {
        Vec2::new(
            self.origin.x + (col as f64 + 0.5) * self.cell_size,
            self.origin.y + (row as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let fx = ((p.x - self.origin.x) / self.cell_size).floor();
        let fy = ((p.y - self.origin.y) / self.cell_size).floor();
        if !(fx >= 0.0 && fy >= 0.0) || fx >= self.cols as f64 || fy >= self.rows as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    /// Points outside the grid are never drivable.
    pub fn is_drivable(&self, p: Vec2) -> bool {
        self.cell_of(p).is_some_and(|(c, r)| self.get(c, r))
    }

    pub fn drivable_count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }
}

/// Marks every cell whose center lies within half the segment width of a centerline.
pub fn rasterize_drivable(centerlines: &[Centerline], cell_size: f64) -> Result<DrivableRaster> {
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "cell_size must be > 0, got {cell_size}"
        )));
    }
    if centerlines.is_empty() {
        return Err(Error::InvalidInput(
            "cannot rasterize an empty centerline list".into(),
        ));
    }
    let (mut lo, mut hi) = (
        Vec2::new(f64::INFINITY, f64::INFINITY),
        Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
    );
    for v in centerlines.iter().flat_map(|c| c.polyline.iter()) {
        lo = Vec2::new(lo.x.min(v.x), lo.y.min(v.y));
        hi = Vec2::new(hi.x.max(v.x), hi.y.max(v.y));
    }
    let origin = lo - Vec2::new(RASTER_MARGIN, RASTER_MARGIN);
    let cols = ((hi.x - lo.x + 2.0 * RASTER_MARGIN) / cell_size).ceil() as usize;
    let rows = ((hi.y - lo.y + 2.0 * RASTER_MARGIN) / cell_size).ceil() as usize;
    let mut raster = DrivableRaster {
        origin,
        cell_size,
        cols,
        rows,
        cells: vec![false; cols * rows],
    };

    for c in centerlines {
        for (seg, w) in c.polyline.windows(2).zip(&c.widths) {
            let half = w / 2.0;
            let (a, b) = (seg[0], seg[1]);
            let bx0 = a.x.min(b.x) - half;
            let bx1 = a.x.max(b.x) + half;
            let by0 = a.y.min(b.y) - half;
            let by1 = a.y.max(b.y) + half;
            let to_index = |v: f64, o: f64, n: usize| {
                (((v - o) / cell_size).floor().max(0.0) as usize).min(n.saturating_sub(1))
            };
            let (c0, c1) = (to_index(bx0, origin.x, cols), to_index(bx1, origin.x, cols));
            let (r0, r1) = (to_index(by0, origin.y, rows), to_index(by1, origin.y, rows));
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let idx = row * cols + col;
                    if raster.cells[idx] {
                        continue;
                    }
                    if point_segment_distance(raster.cell_center(col, row), a, b) <= half {
                        raster.cells[idx] = true;
                    }
                }
            }
        }
    }
    Ok(raster)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(centerlines: &[Centerline], p: Vec2) -> bool {
        centerlines.iter().any(|c| {
            c.polyline
                .windows(2)
                .zip(&c.widths)
                .any(|(s, w)| point_segment_distance(p, s[0], s[1]) <= w / 2.0)
        })
    }

    #[test]
    fn straight_band_matches_brute_force() {
        let c = Centerline::uniform(0, vec![Vec2::new(0.0, 0.0), Vec2::new(20.0, 0.0)], 4.0)
            .unwrap();
        let r = rasterize_drivable(std::slice::from_ref(&c), 0.5).unwrap();
        for row in 0..r.rows {
            for col in 0..r.cols {
                let center = r.cell_center(col, row);
                assert_eq!(r.get(col, row), brute_force(std::slice::from_ref(&c), center));
            }
        }
        // cross-section at x = 10: true cells span exactly 4 m
        let col = r.cell_of(Vec2::new(10.1, 0.0)).unwrap().0;
        let band: usize = (0..r.rows).filter(|&row| r.get(col, row)).count();
        assert_eq!(band as f64 * 0.5, 4.0);
        assert!(!r.is_drivable(Vec2::new(10.0, 100.0)));
        assert!(r.is_drivable(Vec2::new(10.0, 0.0)));
    }

    #[test]
    fn bounds_include_margin() {
        let c = Centerline::uniform(0, vec![Vec2::new(0.0, 0.0), Vec2::new(20.0, 0.0)], 4.0)
            .unwrap();
        let r = rasterize_drivable(&[c], 0.5).unwrap();
        assert!(r.origin.x <= -10.0 && r.origin.y <= -10.0);
        assert!(r.origin.x + r.cols as f64 * 0.5 >= 30.0);
        assert!(r.origin.y + r.rows as f64 * 0.5 >= 10.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(rasterize_drivable(&[], 0.5).is_err());
        let c = Centerline::uniform(0, vec![Vec2::new(0.0, 0.0), Vec2::new(2.0, 0.0)], 4.0)
            .unwrap();
        assert!(rasterize_drivable(&[c], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn raster_matches_brute_force_on_random_polylines(
            pts in prop::collection::vec((-30.0f64..30.0, -30.0f64..30.0), 2..5),
            width in 1.0f64..6.0,
            qx in -40.0f64..40.0,
            qy in -40.0f64..40.0,
        ) {
            let poly: Vec<Vec2> = pts.iter().map(|&(x, y)| Vec2::new(x, y)).collect();
            prop_assume!(poly.windows(2).all(|w| w[0].distance(w[1]) > 1e-3));
            let c = Centerline::uniform(0, poly, width).unwrap();
            let r = rasterize_drivable(std::slice::from_ref(&c), 0.5).unwrap();
            let q = Vec2::new(qx, qy);
            if let Some((col, row)) = r.cell_of(q) {
                prop_assert_eq!(
                    r.get(col, row),
                    brute_force(std::slice::from_ref(&c), r.cell_center(col, row))
                );
            }
        }

        #[test]
        fn raster_translation_invariant(
            tx in -500.0f64..500.0,
            ty in -500.0f64..500.0,
            qx in -5.0f64..25.0,
            qy in -5.0f64..5.0,
        ) {
            let poly = vec![Vec2::new(0.0, 0.0), Vec2::new(10.0, 3.0), Vec2::new(20.0, 0.0)];
            let t = Vec2::new(tx, ty);
            let base = Centerline::uniform(0, poly.clone(), 4.0).unwrap();
            let moved = Centerline::uniform(0, poly.iter().map(|p| *p + t).collect(), 4.0).unwrap();
            let r0 = rasterize_drivable(&[base], 0.5).unwrap();
            let r1 = rasterize_drivable(&[moved], 0.5).unwrap();
            let q = Vec2::new(qx, qy);
            // snap the query to a cell center so rounding at cell borders cannot flip it
            let (c, r) = r0.cell_of(q).unwrap();
            let center = r0.cell_center(c, r);
            prop_assert_eq!(r0.is_drivable(center), r1.is_drivable(center + t));
        }
    }
}
