//! Projection-guided matching of map points to keypoints in a local window.

use crate::descriptor::{Descriptor, Keypoint, MatchParams};
use crate::geometry::Pixel;

use super::MapPointId;

/// Matching window radius at octave 0, in pixels.
pub const DEFAULT_WINDOW: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridMatchParams {
    /// Window radius in pixels at octave 0; grows by 1.2 per keypoint octave.
    pub window: f64,
    pub descriptor: MatchParams,
}

impl Default for GridMatchParams {
    fn default() -> Self {
        Self { window: DEFAULT_WINDOW, descriptor: MatchParams::default() }
    }
}

/// A map point projected into the current image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub point: MapPointId,
    pub pixel: Pixel,
    pub descriptor: Descriptor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridMatch {
    pub point: MapPointId,
    pub keypoint: usize,
    pub distance: u32,
}

/// Uniform bucket grid over keypoint positions.
#[derive(Clone, Debug)]
pub struct KeypointGrid {
    cell: f64,
    cols: usize,
    rows: usize,
    cells: Vec<Vec<usize>>,
    max_scale: f64,
}

impl KeypointGrid {
    pub fn new(keypoints: &[Keypoint], width: u32, height: u32, cell: f64) -> Self {
        let cols = ((width as f64 / cell).ceil() as usize).max(1);
        let rows = ((height as f64 / cell).ceil() as usize).max(1);
        let mut cells = vec![Vec::new(); cols * rows];
        let mut max_scale: f64 = 1.0;
        for (i, kp) in keypoints.iter().enumerate() {
            let (cx, cy) = Self::cell_of(cell, cols, rows, kp.position);
            cells[cy * cols + cx].push(i);
            max_scale = max_scale.max(kp.scale());
        }
        Self { cell, cols, rows, cells, max_scale }
    }

    fn cell_of(cell: f64, cols: usize, rows: usize, p: Pixel) -> (usize, usize) {
        let cx = (p.u / cell).floor().clamp(0.0, (cols - 1) as f64) as usize;
        let cy = (p.v / cell).floor().clamp(0.0, (rows - 1) as f64) as usize;
        (cx, cy)
    }

    /// Keypoint indices whose bucket intersects the disk of `radius` around `p`
    /// (a superset of the keypoints inside it), ascending.
    pub fn candidates(&self, p: Pixel, radius: f64) -> Vec<usize> {
        let x0 = ((p.u - radius) / self.cell).floor().max(0.0) as i64;
        let x1 = (((p.u + radius) / self.cell).floor() as i64).min(self.cols as i64 - 1);
        let y0 = ((p.v - radius) / self.cell).floor().max(0.0) as i64;
        let y1 = (((p.v + radius) / self.cell).floor() as i64).min(self.rows as i64 - 1);
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                out.extend_from_slice(&self.cells[y as usize * self.cols + x as usize]);
            }
        }
        out.sort_unstable();
        out
    }

    pub fn max_scale(&self) -> f64 {
        self.max_scale
    }
}

/// Matches projected points to keypoints inside the octave-scaled window.
///
/// Each point takes its nearest-descriptor keypoint among those in the window
/// (skipping keypoints marked unavailable) if it passes the ratio test. A
/// keypoint claimed by several points keeps the smallest distance, ties going
/// to the earlier point. Output is ordered by keypoint index.
pub fn local_grid_match(
    points: &[ProjectedPoint],
    keypoints: &[Keypoint],
    descriptors: &[Descriptor],
    grid: &KeypointGrid,
    available: Option<&[bool]>,
    params: &GridMatchParams,
) -> Vec<GridMatch> {
    let mut claimed: Vec<Option<(usize, u32)>> = vec![None; keypoints.len()];
    let reach = params.window * grid.max_scale();
    for (pi, pp) in points.iter().enumerate() {
        let mut best: Option<(usize, u32)> = None;
        let mut second: Option<u32> = None;
        for k in grid.candidates(pp.pixel, reach) {
            if available.is_some_and(|a| !a[k]) {
                continue;
            }
            let kp = &keypoints[k];
            if kp.position.distance(&pp.pixel) > params.window * kp.scale() {
                continue;
            }
            let d = descriptors[k].hamming(&pp.descriptor);
            match best {
                Some((_, bd)) if d >= bd => {
                    if second.is_none_or(|s| d < s) {
                        second = Some(d);
                    }
                }
                _ => {
                    second = best.map(|(_, bd)| bd);
                    best = Some((k, d));
                }
            }
        }
        let Some((k, d)) = best else { continue };
        if !params.descriptor.accepts(d, second) {
            continue;
        }
        if claimed[k].is_none_or(|(_, cd)| d < cd) {
            claimed[k] = Some((pi, d));
        }
    }
    claimed
        .iter()
        .enumerate()
        .filter_map(|(k, c)| c.map(|(pi, d)| GridMatch { point: points[pi].point, keypoint: k, distance: d }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(u: f64, v: f64, octave: u8) -> Keypoint {
        Keypoint { position: Pixel::new(u, v), size: 15.0, octave }
    }

    fn desc(bits: &[usize]) -> Descriptor {
        let mut d = Descriptor::default();
        bits.iter().for_each(|&b| d.flip_bit(b));
        d
    }

    fn run(points: &[ProjectedPoint], kps: &[Keypoint], descs: &[Descriptor]) -> Vec<GridMatch> {
        let grid = KeypointGrid::new(kps, 100, 100, 16.0);
        local_grid_match(points, kps, descs, &grid, None, &GridMatchParams::default())
    }

    #[test]
    fn keypoint_at_projection_is_matched() {
        let d = desc(&[1, 2, 3]);
        let pts = [ProjectedPoint { point: MapPointId(4), pixel: Pixel::new(50.0, 50.0), descriptor: d }];
        let m = run(&pts, &[kp(50.0, 50.0, 0)], &[d]);
        assert_eq!(m, vec![GridMatch { point: MapPointId(4), keypoint: 0, distance: 0 }]);
    }

    #[test]
    fn keypoint_outside_window_is_ignored() {
        let d = desc(&[1]);
        let pts = [ProjectedPoint { point: MapPointId(0), pixel: Pixel::new(10.0, 10.0), descriptor: d }];
        assert!(run(&pts, &[kp(10.0, 25.5, 0)], &[d]).is_empty());
        // the same offset is inside the window of an octave-1 keypoint (18 px)
        assert_eq!(run(&pts, &[kp(10.0, 25.5, 1)], &[d]).len(), 1);
    }

    #[test]
    fn ratio_test_inside_window() {
        let d = desc(&[]);
        let pts = [ProjectedPoint { point: MapPointId(0), pixel: Pixel::new(50.0, 50.0), descriptor: d }];
        let kps = [kp(48.0, 50.0, 0), kp(52.0, 50.0, 0)];
        assert!(run(&pts, &kps, &[desc(&[1, 2]), desc(&[3, 4])]).is_empty());
        assert_eq!(run(&pts, &kps, &[desc(&[1]), desc(&[3, 4, 5, 6])])[0].keypoint, 0);
    }

    #[test]
    fn keypoint_claimed_once() {
        let k = desc(&[]);
        let pts = [
            ProjectedPoint { point: MapPointId(0), pixel: Pixel::new(50.0, 50.0), descriptor: desc(&[1, 2]) },
            ProjectedPoint { point: MapPointId(1), pixel: Pixel::new(52.0, 50.0), descriptor: desc(&[9]) },
        ];
        let m = run(&pts, &[kp(51.0, 50.0, 0)], &[k]);
        assert_eq!(m, vec![GridMatch { point: MapPointId(1), keypoint: 0, distance: 1 }]);
    }

    #[test]
    fn grid_candidates_cover_brute_force() {
        let kps: Vec<Keypoint> = (0..200).map(|i| kp((i * 37 % 100) as f64 + 0.3, (i * 53 % 100) as f64 + 0.7, (i % 3) as u8)).collect();
        let grid = KeypointGrid::new(&kps, 100, 100, 16.0);
        for (u, v, r) in [(0.0, 0.0, 20.0), (50.0, 50.0, 15.0), (99.0, 10.0, 30.0), (-5.0, 120.0, 40.0)] {
            let p = Pixel::new(u, v);
            let cand = grid.candidates(p, r);
            for (i, k) in kps.iter().enumerate() {
                if k.position.distance(&p) <= r {
                    assert!(cand.contains(&i));
                }
            }
        }
    }
}
