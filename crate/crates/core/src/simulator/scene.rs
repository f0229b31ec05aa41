use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sub_rng, SimError};
use crate::descriptor::Descriptor;
use crate::geometry::Vec3;
use crate::surfel_map::SurfelMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SceneKind {
    /// Closed box `[0,x] × [0,y] × [0,z]`.
    Room { size: Vec3 },
    /// Long closed box along x.
    Corridor { length: f64, width: f64, height: f64 },
    /// Ground plane with a facade on each side, open above and at both ends.
    TwoLane { length: f64, width: f64, facade_height: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub surfel_radius: f64,
    /// Landmarks per square meter of surface.
    pub landmark_density: f64,
    pub seed: u64,
    /// Number of side-by-side instances of the scene along x.
    pub copies: u32,
    /// Gap between copies (m).
    pub copy_gap: f64,
    /// Bits flipped in each copied landmark descriptor (0 = exact replicas).
    pub copy_descriptor_flips: u32,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, surfel_radius: f64, landmark_density: f64, seed: u64) -> Self {
        Self { kind, surfel_radius, landmark_density, seed, copies: 1, copy_gap: 1.0, copy_descriptor_flips: 0 }
    }

    fn validate(&self) -> Result<(), SimError> {
        let extents_ok = match self.kind {
            SceneKind::Room { size } => size.iter().all(|&v| v > 0.0 && v.is_finite()),
            SceneKind::Corridor { length, width, height } => [length, width, height].iter().all(|&v| v > 0.0 && v.is_finite()),
            SceneKind::TwoLane { length, width, facade_height } => [length, width, facade_height].iter().all(|&v| v > 0.0 && v.is_finite()),
        };
        if !extents_ok {
            return Err(SimError::InvalidSpec("scene extents must be positive".into()));
        }
        if !(self.surfel_radius > 0.0) || !(self.landmark_density > 0.0) {
            return Err(SimError::InvalidSpec("surfel radius and landmark density must be positive".into()));
        }
        if self.copies == 0 || !(self.copy_gap >= 0.0) {
            return Err(SimError::InvalidSpec("copies must be at least 1 with a non-negative gap".into()));
        }
        Ok(())
    }

    /// Extent along x of one copy.
    fn copy_length(&self) -> f64 {
        match self.kind {
            SceneKind::Room { size } => size.x,
            SceneKind::Corridor { length, .. } => length,
            SceneKind::TwoLane { length, .. } => length,
        }
    }

    /// Shift along x of copy `c`.
    pub fn copy_offset(&self, c: u32) -> f64 {
        c as f64 * (self.copy_length() + self.copy_gap)
    }

    /// Grid pitch of the surfel tessellation.
    pub fn surfel_pitch(&self) -> f64 {
        1.5 * self.surfel_radius
    }
}

/// Rectangle `origin + a·u + b·v`, `a ∈ [0, u_len]`, `b ∈ [0, v_len]`, facing `normal`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneRect {
    pub origin: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub u_len: f64,
    pub v_len: f64,
    pub normal: Vec3,
    /// Index of the scene copy this rectangle belongs to.
    pub copy: u32,
}

impl PlaneRect {
    fn new(origin: Vec3, u: Vec3, v: Vec3, u_len: f64, v_len: f64, inward: Vec3, copy: u32) -> Self {
        Self { origin, u, v, u_len, v_len, normal: inward, copy }
    }

    pub fn point(&self, a: f64, b: f64) -> Vec3 {
        self.origin + self.u * a + self.v * b
    }

    pub fn area(&self) -> f64 {
        self.u_len * self.v_len
    }

    /// Plane offset `d` in `n·x + d = 0`.
    pub fn offset(&self) -> f64 {
        -self.normal.dot(&self.origin)
    }

    /// Parameter `t ∈ (0,1)` where segment `p → q` crosses the rectangle, if it does.
    pub fn segment_hit(&self, p: &Vec3, q: &Vec3) -> Option<f64> {
        let dir = q - p;
        let den = self.normal.dot(&dir);
        if den.abs() < 1e-15 {
            return None;
        }
        let t = -(self.normal.dot(p) + self.offset()) / den;
        if !(t > 1e-9 && t < 1.0 - 1e-9) {
            return None;
        }
        let x = p + dir * t - self.origin;
        let (a, b) = (x.dot(&self.u), x.dot(&self.v));
        (a >= 0.0 && a <= self.u_len && b >= 0.0 && b <= self.v_len).then_some(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmark {
    pub id: u32,
    pub position: Vec3,
    /// Index into [`Scene::planes`].
    pub plane: u32,
    pub descriptor: Descriptor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub planes: Vec<PlaneRect>,
    pub landmarks: Vec<Landmark>,
    pub map: SurfelMap,
    /// Generating plane of each surfel, by surfel id.
    pub surfel_planes: Vec<u32>,
}

fn base_planes(kind: SceneKind, dx: f64, copy: u32) -> Vec<PlaneRect> {
    let (x, y, z) = (Vec3::x(), Vec3::y(), Vec3::z());
    let o = Vec3::new(dx, 0.0, 0.0);
    let boxed = |sx: f64, sy: f64, sz: f64| {
        vec![
            PlaneRect::new(o, x, y, sx, sy, z, copy),
            PlaneRect::new(o + z * sz, x, y, sx, sy, -z, copy),
            PlaneRect::new(o, y, z, sy, sz, x, copy),
            PlaneRect::new(o + x * sx, y, z, sy, sz, -x, copy),
            PlaneRect::new(o, x, z, sx, sz, y, copy),
            PlaneRect::new(o + y * sy, x, z, sx, sz, -y, copy),
        ]
    };
    match kind {
        SceneKind::Room { size } => boxed(size.x, size.y, size.z),
        SceneKind::Corridor { length, width, height } => boxed(length, width, height),
        SceneKind::TwoLane { length, width, facade_height } => vec![
            PlaneRect::new(o, x, y, length, width, z, copy),
            PlaneRect::new(o, x, z, length, facade_height, y, copy),
            PlaneRect::new(o + y * width, x, z, length, facade_height, -y, copy),
        ],
    }
}

fn random_descriptor(rng: &mut ChaCha8Rng) -> Descriptor {
    Descriptor::from_words(rng.random())
}

/// Flips exactly `k` distinct random bits.
pub fn flip_bits(d: &Descriptor, k: u32, rng: &mut ChaCha8Rng) -> Descriptor {
    let mut out = *d;
    for i in rand::seq::index::sample(rng, Descriptor::BITS, (k as usize).min(Descriptor::BITS)) {
        out.flip_bit(i);
    }
    out
}

const PROTOTYPES: usize = 256;
const PROTOTYPE_FLIP_PROBABILITY: f64 = 0.1;

/// Builds planes, surfels and landmarks. Deterministic per `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, SimError> {
    spec.validate()?;
    let planes0 = base_planes(spec.kind, 0.0, 0);
    let pitch = spec.surfel_pitch();
    let margin = (3.0 * spec.surfel_radius).max(0.05);

    // Landmarks of the first copy, with descriptors clustered around prototypes.
    let mut rng = sub_rng(spec.seed, 1);
    let prototypes: Vec<Descriptor> = (0..PROTOTYPES).map(|_| random_descriptor(&mut rng)).collect();
    let mut landmarks0 = Vec::new();
    for (pi, p) in planes0.iter().enumerate() {
        let (ua, va) = (p.u_len - 2.0 * margin, p.v_len - 2.0 * margin);
        if ua <= 0.0 || va <= 0.0 {
            continue;
        }
        let n = (spec.landmark_density * p.area()).round() as usize;
        for _ in 0..n {
            let a = margin + rng.random::<f64>() * ua;
            let b = margin + rng.random::<f64>() * va;
            let mut d = prototypes[rng.random_range(0..PROTOTYPES)];
            for bit in 0..Descriptor::BITS {
                if rng.random_bool(PROTOTYPE_FLIP_PROBABILITY) {
                    d.flip_bit(bit);
                }
            }
            landmarks0.push((p.point(a, b), pi, d));
        }
    }

    let mut planes = Vec::new();
    let mut landmarks = Vec::new();
    let mut records = Vec::new();
    let mut surfel_planes = Vec::new();
    let mut copy_rng = sub_rng(spec.seed, 2);
    for c in 0..spec.copies {
        let dx = spec.copy_offset(c);
        let base = planes.len();
        planes.extend(base_planes(spec.kind, dx, c));
        for (pi, p) in planes[base..].iter().enumerate() {
            let nu = (p.u_len / pitch).round().max(1.0) as usize;
            let nv = (p.v_len / pitch).round().max(1.0) as usize;
            let (su, sv) = (p.u_len / nu as f64, p.v_len / nv as f64);
            for i in 0..nu {
                for j in 0..nv {
                    records.push((p.point((i as f64 + 0.5) * su, (j as f64 + 0.5) * sv), p.normal, spec.surfel_radius));
                    surfel_planes.push((base + pi) as u32);
                }
            }
        }
        for (x, pi, d) in &landmarks0 {
            let descriptor = if c == 0 { *d } else { flip_bits(d, spec.copy_descriptor_flips, &mut copy_rng) };
            landmarks.push(Landmark {
                id: landmarks.len() as u32,
                position: x + Vec3::new(dx, 0.0, 0.0),
                plane: (base + pi) as u32,
                descriptor,
            });
        }
    }
    let map = SurfelMap::from_records(records).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    Ok(Scene { spec: *spec, planes, landmarks, map, surfel_planes })
}

impl Scene {
    /// True when `p` lies strictly inside the free space of some copy, at
    /// least `margin` from its bounding surfaces.
    pub fn contains(&self, p: &Vec3, margin: f64) -> bool {
        (0..self.spec.copies).any(|c| {
            let q = p - Vec3::new(self.spec.copy_offset(c), 0.0, 0.0);
            let (lx, ly, lz) = match self.spec.kind {
                SceneKind::Room { size } => (size.x, size.y, size.z),
                SceneKind::Corridor { length, width, height } => (length, width, height),
                SceneKind::TwoLane { length, width, .. } => (length, width, f64::INFINITY),
            };
            q.x > margin && q.x < lx - margin && q.y > margin && q.y < ly - margin && q.z > margin && q.z < lz - margin
        })
    }

    /// Ground-truth plane of a landmark as `(n, d)`.
    pub fn landmark_plane(&self, id: u32) -> &PlaneRect {
        &self.planes[self.landmarks[id as usize].plane as usize]
    }

    /// Total surface area of all planes.
    pub fn area(&self) -> f64 {
        self.planes.iter().map(|p| p.area()).sum()
    }

    pub fn descriptor_sample(&self, n: usize, seed: u64) -> Vec<Descriptor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n.min(self.landmarks.len());
        rand::seq::index::sample(&mut rng, self.landmarks.len(), n)
            .into_iter()
            .map(|i| self.landmarks[i].descriptor)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec::new(SceneKind::Room { size: Vec3::new(4.0, 4.0, 3.0) }, 0.1, 5.0, 21)
    }

    #[test]
    fn surfel_count_matches_area_over_pitch_squared() {
        let scene = generate_scene(&spec()).unwrap();
        let area = 2.0 * (4.0 * 4.0 + 4.0 * 3.0 + 4.0 * 3.0);
        let expect = area / (0.15f64 * 0.15);
        let n = scene.map.len() as f64;
        assert!((n - expect).abs() <= 0.1 * expect, "{n} vs {expect}");
        assert_eq!(scene.surfel_planes.len(), scene.map.len());
    }

    #[test]
    fn same_seed_same_scene_bytes() {
        let bytes = |s: &Scene| {
            let mut b = Vec::new();
            s.map.write_to(&mut b).unwrap();
            b
        };
        let a = generate_scene(&spec()).unwrap();
        let b = generate_scene(&spec()).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(a.landmarks, b.landmarks);
        let mut other = spec();
        other.seed = 22;
        assert_ne!(generate_scene(&other).unwrap().landmarks, a.landmarks);
    }

    #[test]
    fn landmarks_lie_on_exactly_one_plane() {
        let scene = generate_scene(&spec()).unwrap();
        assert_eq!(scene.landmarks.len(), (scene.area() * 5.0).round() as usize);
        for lm in &scene.landmarks {
            let on: Vec<usize> = scene
                .planes
                .iter()
                .enumerate()
                .filter(|(_, p)| {
                    let rel = lm.position - p.origin;
                    (p.normal.dot(&lm.position) + p.offset()).abs() < 1e-12
                        && (0.0..=p.u_len).contains(&rel.dot(&p.u))
                        && (0.0..=p.v_len).contains(&rel.dot(&p.v))
                })
                .map(|(i, _)| i)
                .collect();
            assert_eq!(on, vec![lm.plane as usize]);
        }
    }

    #[test]
    fn surfels_lie_on_their_generating_plane() {
        let scene = generate_scene(&spec()).unwrap();
        for (s, &pi) in scene.map.surfels().iter().zip(&scene.surfel_planes) {
            let p = &scene.planes[pi as usize];
            assert!((p.normal.dot(&s.center) + p.offset()).abs() < 1e-12);
            assert_eq!(s.normal, p.normal);
        }
    }

    #[test]
    fn copies_carry_perturbed_descriptors() {
        let mut s = spec();
        s.copies = 2;
        s.copy_descriptor_flips = 6;
        let scene = generate_scene(&s).unwrap();
        let half = scene.landmarks.len() / 2;
        for i in 0..half {
            let (a, b) = (&scene.landmarks[i], &scene.landmarks[i + half]);
            assert_eq!(a.descriptor.hamming(&b.descriptor), 6);
            assert!((b.position.x - a.position.x - s.copy_offset(1)).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec();
        s.surfel_radius = 0.0;
        assert!(generate_scene(&s).is_err());
        let mut s = spec();
        s.copies = 0;
        assert!(generate_scene(&s).is_err());
    }
}
