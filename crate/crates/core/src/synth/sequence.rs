//! Animated renders of the template with exact per-pixel ground truth.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::camera::Camera;
use super::raster::{labels_from_raster, rasterize, uvw_from_raster, Raster};
use super::template::HeadTemplate;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::uvw::UvwMap;

/// Minimum and maximum track counts for a usable frame pair.
pub const MIN_TRACKS: usize = 80;
pub const MAX_TRACKS: usize = 400;
pub const DEFAULT_TRACK_BUDGET: usize = 256;

/// Rigid head pose plus the strength of the "expression" deformation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FramePose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub translation: [f64; 3],
    pub deform: f64,
}

impl FramePose {
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::y_axis(), self.yaw)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), self.pitch)
            * Rotation3::from_axis_angle(&Vector3::z_axis(), self.roll)
    }

    pub fn posed_vertices(&self, template: &HeadTemplate) -> Vec<Vector3<f64>> {
        let r = self.rotation();
        let t = Vector3::from(self.translation);
        template
            .rest
            .iter()
            .map(|p| r * (p + deformation(p, self.deform)) + t)
            .collect()
    }
}

/// Jaw-like displacement of the lower front of the head.
fn deformation(p: &Vector3<f64>, strength: f64) -> Vector3<f64> {
    if strength == 0.0 {
        return Vector3::zeros();
    }
    let s = ((-p.y - 0.05) / 0.55).clamp(0.0, 1.0);
    let lower = s * s * (3.0 - 2.0 * s);
    let front = (-p.z / 0.9).max(0.0).powi(2);
    Vector3::new(0.0, -0.2, -0.05) * (strength * lower * front)
}

/// Procedural albedo as a function of canonical location only.
pub fn texture(c: &[f64; 3]) -> [u8; 3] {
    let (u, v, w) = (c[0], c[1], c[2]);
    let ch = [
        0.12 + 0.72 * u + 0.08 * (11.0 * v + 4.0 * w).sin(),
        0.12 + 0.72 * v + 0.08 * (9.0 * w + 5.0 * u + 1.0).sin(),
        0.12 + 0.72 * w + 0.08 * (10.0 * u + 6.0 * v + 2.0).sin(),
    ];
    ch.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Motion amplitudes (radians / world units).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionParams {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub translation: f64,
    pub deform: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self {
            yaw: 0.5,
            pitch: 0.2,
            roll: 0.1,
            translation: 0.1,
            deform: 0.8,
        }
    }
}

impl MotionParams {
    pub fn still() -> Self {
        Self {
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
            translation: 0.0,
            deform: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub rgb: RgbImage,
    pub uvw: UvwMap,
    pub labels: Vec<u8>,
    /// Integer pixel of each landmark vertex, `None` when occluded or off-frame.
    pub landmarks: Vec<Option<[usize; 2]>>,
    pub pose: FramePose,
    pub vertices: Vec<Vector3<f64>>,
    pub raster: Raster,
}

impl Frame {
    pub fn mask(&self) -> &[bool] {
        &self.uvw.valid
    }
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub camera: Camera,
    pub frames: Vec<Frame>,
}

/// Renders one frame of the template under `pose`.
pub fn render_frame(template: &HeadTemplate, pose: &FramePose, camera: &Camera) -> Frame {
    let vertices = pose.posed_vertices(template);
    let raster = rasterize(&vertices, &template.triangles, camera);
    let uvw = uvw_from_raster(template, &raster);
    let labels = labels_from_raster(template, &raster);
    let mut rgb = RgbImage::new(camera.width, camera.height);
    for i in uvw.valid_indices() {
        rgb.data[i] = texture(&uvw.coords[i]);
    }
    let landmarks = template
        .landmarks
        .iter()
        .map(|&v| visible_pixel(&vertices[v], camera, &raster))
        .collect();
    Frame {
        rgb,
        uvw,
        labels,
        landmarks,
        pose: *pose,
        vertices,
        raster,
    }
}

const DEPTH_TOLERANCE: f64 = 0.04;

fn visible_pixel(p: &Vector3<f64>, camera: &Camera, raster: &Raster) -> Option<[usize; 2]> {
    let (px, z) = camera.project(p)?;
    if !(px[0] >= 0.0 && px[1] >= 0.0) {
        return None;
    }
    let (x, y) = (px[0] as usize, px[1] as usize);
    if x >= camera.width || y >= camera.height {
        return None;
    }
    let i = y * camera.width + x;
    (raster.covered(i) && raster.depth[i] > z - DEPTH_TOLERANCE).then_some([x, y])
}

/// Generates `frames` renders of the template under smooth seeded motion.
pub fn generate_sequence(
    seed: u64,
    frames: usize,
    size: usize,
    camera: &Camera,
    motion: &MotionParams,
) -> Result<Sequence> {
    if frames < 2 {
        return Err(Error::arg("a sequence needs at least 2 frames"));
    }
    if size < 32 {
        return Err(Error::arg(format!("image size must be >= 32, got {size}")));
    }
    if camera.width != size || camera.height != size {
        return Err(Error::arg("camera image size does not match the requested size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wave = |amp: f64| {
        let freq: f64 = rng.random_range(0.5..1.5);
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        move |t: f64| amp * (2.0 * PI * freq * t + phase).sin()
    };
    let yaw = wave(motion.yaw);
    let pitch = wave(motion.pitch);
    let roll = wave(motion.roll);
    let tx = wave(motion.translation);
    let ty = wave(motion.translation);
    let deform = wave(motion.deform);

    let template = HeadTemplate::standard();
    let poses: Vec<FramePose> = (0..frames)
        .map(|k| {
            let t = k as f64 / (frames - 1) as f64;
            FramePose {
                yaw: yaw(t),
                pitch: pitch(t),
                roll: roll(t),
                translation: [tx(t), ty(t), 0.0],
                deform: deform(t),
            }
        })
        .collect();
    sequence_from_poses(template, &poses, camera)
}

/// Renders an explicit list of poses.
pub fn sequence_from_poses(template: &HeadTemplate, poses: &[FramePose], camera: &Camera) -> Result<Sequence> {
    let frames: Vec<Frame> = poses.iter().map(|p| render_frame(template, p, camera)).collect();
    if frames.iter().any(|f| f.uvw.valid_count() == 0) {
        return Err(Error::EmptyFrame);
    }
    Ok(Sequence {
        camera: camera.clone(),
        frames,
    })
}

/// Matched integer pixels between two frames.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrackPairs {
    pub pixels_a: Vec<[usize; 2]>,
    pub pixels_b: Vec<[usize; 2]>,
    /// Linear index of the source pixel in frame `a` that seeded each track.
    pub ids: Vec<u32>,
}

impl TrackPairs {
    pub fn len(&self) -> usize {
        self.pixels_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels_a.is_empty()
    }

    pub fn push(&mut self, a: [usize; 2], b: [usize; 2], id: u32) {
        self.pixels_a.push(a);
        self.pixels_b.push(b);
        self.ids.push(id);
    }

    /// The same tracks seen from the other frame.
    pub fn swapped(&self) -> Self {
        Self {
            pixels_a: self.pixels_b.clone(),
            pixels_b: self.pixels_a.clone(),
            ids: self.ids.clone(),
        }
    }
}

/// Minimum `|cos|` between surface normal and view ray for a track endpoint.
const GRAZING_COS: f64 = 0.2;

fn facing(frame: &Frame, template: &HeadTemplate, tri: usize, point: &Vector3<f64>, camera: &Camera) -> bool {
    let t = template.triangles[tri];
    let v = |k: usize| frame.vertices[t[k] as usize];
    let n = (v(1) - v(0)).cross(&(v(2) - v(0)));
    let view = camera.center() - point;
    let denom = n.norm() * view.norm();
    denom > 0.0 && (n.dot(&view) / denom).abs() > GRAZING_COS
}

/// Samples foreground pixels of frame `i`, follows their surface points to
/// frame `j` and keeps those visible in both. At most `budget` (capped at
/// 400) pairs; fewer than 80 is an error.
pub fn sample_track_pairs(seq: &Sequence, i: usize, j: usize, budget: usize, seed: u64) -> Result<TrackPairs> {
    if i == j || i >= seq.frames.len() || j >= seq.frames.len() {
        return Err(Error::arg(format!("invalid frame pair ({i}, {j})")));
    }
    let template = HeadTemplate::standard();
    let camera = &seq.camera;
    let (fa, fb) = (&seq.frames[i], &seq.frames[j]);
    let budget = budget.min(MAX_TRACKS);
    let mut candidates: Vec<usize> = fa.uvw.valid_indices().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);

    let mut out = TrackPairs::default();
    for idx in candidates {
        if out.len() >= budget {
            break;
        }
        let tri_id = fa.raster.triangle[idx] as usize;
        let tri = template.triangles[tri_id];
        let b = fa.raster.bary[idx];
        let at = |verts: &[Vector3<f64>]| (0..3).map(|k| verts[tri[k] as usize] * b[k]).sum::<Vector3<f64>>();
        let pa = at(&fa.vertices);
        if !facing(fa, template, tri_id, &pa, camera) {
            continue;
        }
        let pb = at(&fb.vertices);
        let Some(pix) = visible_pixel(&pb, camera, &fb.raster) else {
            continue;
        };
        if !facing(fb, template, tri_id, &pb, camera) {
            continue;
        }
        let w = fa.uvw.width;
        out.push([idx % w, idx / w], pix, idx as u32);
    }
    if out.len() < MIN_TRACKS {
        return Err(Error::TooFewTracks {
            found: out.len(),
            min: MIN_TRACKS,
        });
    }
    Ok(out)
}
