use std::collections::BTreeSet;

use super::{SurfelId, SurfelMap};
use crate::descriptor::Keypoint;
use crate::geometry::{PinholeCamera, Pose};

/// Surfels closer than this to the camera plane are not rendered (meters).
pub const Z_NEAR: f64 = 0.05;

const EMPTY: u32 = u32::MAX;

/// Per-pixel nearest-surfel ids and their camera-frame depths.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfelIndexMap {
    width: u32,
    height: u32,
    ids: Vec<u32>,
    depth: Vec<f64>,
}

impl SurfelIndexMap {
    pub fn empty(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            ids: vec![EMPTY; n],
            depth: vec![f64::INFINITY; n],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> Option<(SurfelId, f64)> {
        if x >= self.width || y >= self.height {
            return None;
        }
        let i = (y * self.width + x) as usize;
        (self.ids[i] != EMPTY).then(|| (SurfelId(self.ids[i]), self.depth[i]))
    }

    pub fn rendered_pixels(&self) -> usize {
        self.ids.iter().filter(|&&id| id != EMPTY).count()
    }

    pub fn is_blank(&self) -> bool {
        self.ids.iter().all(|&id| id == EMPTY)
    }

    fn splat(&mut self, x: u32, y: u32, id: u32, z: f64) {
        let i = (y * self.width + x) as usize;
        let (cur_id, cur_z) = (self.ids[i], self.depth[i]);
        if z < cur_z || (z == cur_z && id < cur_id) {
            self.ids[i] = id;
            self.depth[i] = z;
        }
    }
}

/// Renders the global surfel index map seen from `pose`.
///
/// Each front-facing surfel with depth above [`Z_NEAR`] covers the pixels whose
/// centers lie within `max(1, fx * radius / z)` of its projected center. The
/// smallest depth wins; equal depths go to the smaller id.
pub fn render_index_map(map: &SurfelMap, pose: &Pose, cam: &PinholeCamera) -> SurfelIndexMap {
    let mut out = SurfelIndexMap::empty(cam.width, cam.height);
    let (w, h) = (cam.width as i64, cam.height as i64);
    let cam_center = pose.translation();
    for s in map.surfels() {
        if s.normal.dot(&(s.center - cam_center)) >= 0.0 {
            continue;
        }
        let pc = pose.inverse_transform_point(&s.center);
        let z = pc.z;
        if !(z > Z_NEAR) {
            continue;
        }
        let u = cam.fx * pc.x / z + cam.cx;
        let v = cam.fy * pc.y / z + cam.cy;
        let r = (cam.fx * s.radius / z).max(1.0);
        let r2 = r * r;
        // One-pixel slack; the disk test below is authoritative.
        let y0 = ((v - r).floor() as i64 - 1).max(0);
        let y1 = ((v + r).ceil() as i64 + 1).min(h - 1);
        let x0 = ((u - r).floor() as i64 - 1).max(0);
        let x1 = ((u + r).ceil() as i64 + 1).min(w - 1);
        if y0 > y1 || x0 > x1 {
            continue;
        }
        for y in y0..=y1 {
            let dy = y as f64 - v;
            let dy2 = dy * dy;
            if dy2 > r2 {
                continue;
            }
            for x in x0..=x1 {
                let dx = x as f64 - u;
                if dx * dx + dy2 <= r2 {
                    out.splat(x as u32, y as u32, s.id.0, z);
                }
            }
        }
    }
    out
}

/// Surfel association of one keypoint.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Association {
    pub surfel: Option<SurfelId>,
    /// Distinct surfels within the keypoint size, excluding `surfel`, ascending.
    pub neighbors: Vec<SurfelId>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AssociationReport {
    /// `None` for keypoints outside the image.
    pub associations: Vec<Option<Association>>,
    pub out_of_bounds: usize,
}

impl AssociationReport {
    pub fn associated(&self) -> usize {
        self.associations
            .iter()
            .filter(|a| a.as_ref().is_some_and(|a| a.surfel.is_some()))
            .count()
    }
}

/// Associates keypoints with the surfel rendered at their rounded pixel and
/// collects the other surfels inside the keypoint's size radius.
pub fn associate_keypoints(index_map: &SurfelIndexMap, keypoints: &[Keypoint]) -> AssociationReport {
    let mut report = AssociationReport::default();
    let (w, h) = (index_map.width as f64, index_map.height as f64);
    for kp in keypoints {
        let p = kp.position;
        let (px, py) = (p.u.round(), p.v.round());
        if !p.is_finite() || px < 0.0 || py < 0.0 || px >= w || py >= h {
            report.associations.push(None);
            report.out_of_bounds += 1;
            continue;
        }
        let surfel = index_map.get(px as u32, py as u32).map(|(id, _)| id);
        let r = kp.size.max(0.0);
        let r2 = r * r;
        let y0 = (p.v - r).ceil().max(0.0) as u32;
        let y1 = (p.v + r).floor().min(h - 1.0) as i64;
        let x0 = (p.u - r).ceil().max(0.0) as u32;
        let x1 = (p.u + r).floor().min(w - 1.0) as i64;
        let mut neighbors = BTreeSet::new();
        for y in y0 as i64..=y1 {
            let dy = y as f64 - p.v;
            for x in x0 as i64..=x1 {
                let dx = x as f64 - p.u;
                if dx * dx + dy * dy > r2 {
                    continue;
                }
                if let Some((id, _)) = index_map.get(x as u32, y as u32) {
                    if Some(id) != surfel {
                        neighbors.insert(id);
                    }
                }
            }
        }
        report.associations.push(Some(Association {
            surfel,
            neighbors: neighbors.into_iter().collect(),
        }));
    }
    report
}
