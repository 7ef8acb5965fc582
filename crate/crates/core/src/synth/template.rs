//! The procedural head template: an ellipsoid with nose and ear bumps,
//! per-vertex canonical coordinates, region labels and landmark vertices.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{Rotation3, Vector3};

use crate::grid::CanonPoint;
use crate::losses::LandmarkAnchors;
use crate::matcher::RegionSpec;
use crate::scalar::Real;

pub const REGION_COUNT: usize = 6;
pub const LANDMARK_COUNT: usize = 70;

const RADII: [f64; 3] = [0.8, 1.0, 0.9];
const LAT_RINGS: usize = 48;
const LON_SEGMENTS: usize = 96;
/// Canonical coordinates occupy `[MARGIN, 1 − MARGIN]` on every axis.
const MARGIN: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Region {
    Skin = 0,
    Hair = 1,
    LeftEar = 2,
    RightEar = 3,
    Nose = 4,
    Neck = 5,
}

impl Region {
    pub const ALL: [Region; REGION_COUNT] = [
        Region::Skin,
        Region::Hair,
        Region::LeftEar,
        Region::RightEar,
        Region::Nose,
        Region::Neck,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

struct Bump {
    theta: f64,
    phi: f64,
    amplitude: f64,
    width: f64,
}

const NOSE: Bump = Bump {
    theta: 0.56 * PI,
    phi: 0.0,
    amplitude: 0.16,
    width: 0.12,
};
const LEFT_EAR: Bump = Bump {
    theta: 0.52 * PI,
    phi: 0.5 * PI,
    amplitude: 0.14,
    width: 0.12,
};
const RIGHT_EAR: Bump = Bump {
    theta: 0.52 * PI,
    phi: -0.5 * PI,
    amplitude: 0.14,
    width: 0.12,
};

/// Unit direction for polar angle `theta` (from +y) and azimuth `phi`
/// (0 = facing −z, the frontal direction).
fn direction(theta: f64, phi: f64) -> Vector3<f64> {
    Vector3::new(theta.sin() * phi.sin(), theta.cos(), -theta.sin() * phi.cos())
}

fn surface_point(dir: &Vector3<f64>) -> Vector3<f64> {
    let mut scale = 1.0;
    for b in [&NOSE, &LEFT_EAR, &RIGHT_EAR] {
        let angle = dir.angle(&direction(b.theta, b.phi));
        scale += b.amplitude * (-(angle * angle) / (2.0 * b.width * b.width)).exp();
    }
    Vector3::new(RADII[0] * dir.x, RADII[1] * dir.y, RADII[2] * dir.z) * scale
}

/// Ear and nose balls in canonical space, radius in cube units.
const EAR_RADIUS: f64 = 0.11;
const NOSE_RADIUS: f64 = 0.09;

#[derive(Clone, Debug)]
pub struct HeadTemplate {
    pub rest: Vec<Vector3<f64>>,
    pub canon: Vec<[f64; 3]>,
    pub labels: Vec<u8>,
    pub triangles: Vec<[u32; 3]>,
    pub landmarks: Vec<usize>,
    bbox_min: Vector3<f64>,
    bbox_max: Vector3<f64>,
    region_balls: [(Region, [f64; 3], f64); 3],
}

impl HeadTemplate {
    /// The shared template (built once).
    pub fn standard() -> &'static HeadTemplate {
        static TEMPLATE: OnceLock<HeadTemplate> = OnceLock::new();
        TEMPLATE.get_or_init(HeadTemplate::build)
    }

    fn build() -> Self {
        let mut dirs = vec![Vector3::y()];
        for i in 1..LAT_RINGS {
            let theta = PI * i as f64 / LAT_RINGS as f64;
            for j in 0..LON_SEGMENTS {
                let phi = 2.0 * PI * j as f64 / LON_SEGMENTS as f64;
                dirs.push(direction(theta, phi));
            }
        }
        dirs.push(-Vector3::y());
        let rest: Vec<Vector3<f64>> = dirs.iter().map(surface_point).collect();

        let ring = |i: usize, j: usize| (1 + (i - 1) * LON_SEGMENTS + j % LON_SEGMENTS) as u32;
        let south = (rest.len() - 1) as u32;
        let mut triangles = Vec::new();
        for j in 0..LON_SEGMENTS {
            triangles.push([0, ring(1, j + 1), ring(1, j)]);
        }
        for i in 1..LAT_RINGS - 1 {
            for j in 0..LON_SEGMENTS {
                let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
                triangles.push([a, b, d]);
                triangles.push([a, d, c]);
            }
        }
        for j in 0..LON_SEGMENTS {
            triangles.push([south, ring(LAT_RINGS - 1, j), ring(LAT_RINGS - 1, j + 1)]);
        }

        let mut bbox_min = Vector3::repeat(f64::INFINITY);
        let mut bbox_max = Vector3::repeat(f64::NEG_INFINITY);
        for p in &rest {
            bbox_min = bbox_min.inf(p);
            bbox_max = bbox_max.sup(p);
        }
        let mut t = Self {
            rest,
            canon: Vec::new(),
            labels: Vec::new(),
            triangles,
            landmarks: Vec::new(),
            bbox_min,
            bbox_max,
            region_balls: [(Region::Skin, [0.0; 3], 0.0); 3],
        };
        let tip = |b: &Bump, t: &Self| t.canonical_of(&surface_point(&direction(b.theta, b.phi)));
        t.region_balls = [
            (Region::LeftEar, tip(&LEFT_EAR, &t), EAR_RADIUS),
            (Region::RightEar, tip(&RIGHT_EAR, &t), EAR_RADIUS),
            (Region::Nose, tip(&NOSE, &t), NOSE_RADIUS),
        ];
        t.canon = t.rest.iter().map(|p| t.canonical_of(p)).collect();
        t.labels = t.canon.iter().map(|c| t.region_of(c) as u8).collect();
        t.landmarks = select_landmarks(&dirs);
        t
    }

    /// Normalizes a rest-space position into the cube.
    pub fn canonical_of(&self, p: &Vector3<f64>) -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..3 {
            let t = (p[a] - self.bbox_min[a]) / (self.bbox_max[a] - self.bbox_min[a]);
            c[a] = MARGIN + (1.0 - 2.0 * MARGIN) * t;
        }
        c
    }

    /// Semantic region of a canonical location.
    pub fn region_of(&self, c: &[f64; 3]) -> Region {
        for (region, center, radius) in &self.region_balls {
            let d2: f64 = (0..3).map(|a| (c[a] - center[a]).powi(2)).sum();
            if d2 <= radius * radius {
                return *region;
            }
        }
        let (v, w) = (c[1], c[2]);
        if v < 0.14 {
            Region::Neck
        } else if v > 0.74 || (w > 0.62 && v > 0.35) {
            Region::Hair
        } else {
            Region::Skin
        }
    }

    /// Canonical-space region used to select `region`, when it is compact.
    pub fn region_spec(&self, region: Region) -> Option<RegionSpec> {
        self.region_balls
            .iter()
            .find(|(r, _, _)| *r == region)
            .map(|&(_, center, radius)| RegionSpec::Ball { center, radius })
    }

    pub fn anchors<T: Real>(&self) -> LandmarkAnchors<T> {
        let pts = self
            .landmarks
            .iter()
            .map(|&v| {
                let c = self.canon[v];
                CanonPoint::new(T::lit(c[0]), T::lit(c[1]), T::lit(c[2])).expect("canonical coords lie in the cube")
            })
            .collect();
        LandmarkAnchors::new(pts).expect("landmark vertices are distinct")
    }

    /// Vertices after a rigid similarity `x ↦ s·R·x + t`.
    pub fn transformed(&self, rotation: &Rotation3<f64>, scale: f64, translation: &Vector3<f64>) -> Vec<Vector3<f64>> {
        self.rest.iter().map(|p| rotation * (p * scale) + translation).collect()
    }
}

/// Seventy frontal target directions: face border, brows, eyes, nose, mouth
/// and pupils. Each maps to the nearest unused vertex.
fn landmark_targets() -> Vec<(f64, f64)> {
    let mut t = Vec::with_capacity(LANDMARK_COUNT);
    for i in 0..17 {
        let s = i as f64 / 16.0;
        t.push((0.35 * PI + 0.43 * PI * (PI * s).sin(), -0.42 * PI + 0.84 * PI * s));
    }
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            t.push((0.36 * PI, side * (0.08 + 0.05 * i as f64) * PI));
        }
    }
    for side in [-1.0, 1.0] {
        for i in 0..6 {
            let a = 2.0 * PI * i as f64 / 6.0;
            t.push((0.42 * PI + 0.025 * PI * a.sin(), side * 0.17 * PI + 0.05 * PI * a.cos()));
        }
    }
    for i in 0..4 {
        t.push((0.42 * PI + 0.045 * PI * i as f64, 0.0));
    }
    for i in 0..5 {
        t.push((0.6 * PI, (-0.08 + 0.04 * i as f64) * PI));
    }
    for i in 0..12 {
        let a = 2.0 * PI * i as f64 / 12.0;
        t.push((0.68 * PI + 0.04 * PI * a.sin(), 0.12 * PI * a.cos()));
    }
    for i in 0..8 {
        let a = 2.0 * PI * i as f64 / 8.0;
        t.push((0.68 * PI + 0.015 * PI * a.sin(), 0.07 * PI * a.cos()));
    }
    t.push((0.42 * PI, -0.17 * PI));
    t.push((0.42 * PI, 0.17 * PI));
    debug_assert_eq!(t.len(), LANDMARK_COUNT);
    t
}

fn select_landmarks(dirs: &[Vector3<f64>]) -> Vec<usize> {
    let mut used = vec![false; dirs.len()];
    landmark_targets()
        .into_iter()
        .map(|(theta, phi)| {
            let target = direction(theta, phi);
            let best = (0..dirs.len())
                .filter(|&i| !used[i])
                .min_by(|&a, &b| {
                    dirs[a]
                        .angle(&target)
                        .partial_cmp(&dirs[b].angle(&target))
                        .unwrap()
                        .then(a.cmp(&b))
                })
                .expect("enough vertices");
            used[best] = true;
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_invariants() {
        let t = HeadTemplate::standard();
        assert_eq!(t.rest.len(), 2 + (LAT_RINGS - 1) * LON_SEGMENTS);
        assert_eq!(t.canon.len(), t.rest.len());
        assert_eq!(t.labels.len(), t.rest.len());
        for c in &t.canon {
            assert!(c.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        assert_eq!(t.landmarks.len(), LANDMARK_COUNT);
        let mut ids = t.landmarks.clone();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), LANDMARK_COUNT);
        for tri in &t.triangles {
            assert!(tri.iter().all(|&v| (v as usize) < t.rest.len()));
        }
        // every region is represented
        for r in Region::ALL {
            assert!(t.labels.iter().any(|&l| l == r as u8), "{r:?} missing");
        }
        // landmarks are frontal
        for &v in &t.landmarks {
            assert!(t.rest[v].z < 0.0);
        }
        let anchors = t.anchors::<f64>();
        assert_eq!(anchors.len(), LANDMARK_COUNT);
    }

    #[test]
    fn mesh_is_closed_and_consistently_wound() {
        use std::collections::HashMap;
        let t = HeadTemplate::standard();
        let mut edges: HashMap<(u32, u32), i32> = HashMap::new();
        for tri in &t.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *edges.entry((a, b)).or_default() += 1;
            }
        }
        for (&(a, b), &n) in &edges {
            assert_eq!(n, 1);
            assert_eq!(edges.get(&(b, a)), Some(&1), "edge {a}-{b} unmatched");
        }
    }
}
