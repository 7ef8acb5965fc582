//! Rigid-plus-scale pose of the template recovered from a canonical map by
//! Levenberg-Marquardt on rendered-minus-observed coordinates.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Rotation3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::synth::camera::Camera;
use crate::synth::raster::render_uvw;
use crate::synth::template::HeadTemplate;
use crate::uvw::UvwMap;

pub const HUBER_DELTA: f64 = 0.05;
pub const JACOBIAN_STEP: f64 = 1e-4;

/// `x ↦ exp(log_scale)·R·x + t` with `R` from an axis-angle vector.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RigidPose {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub log_scale: f64,
}

impl RigidPose {
    pub fn from_params(p: &[f64; 7]) -> Self {
        Self {
            rotation: [p[0], p[1], p[2]],
            translation: [p[3], p[4], p[5]],
            log_scale: p[6],
        }
    }

    pub fn params(&self) -> [f64; 7] {
        let [a, b, c] = self.rotation;
        let [x, y, z] = self.translation;
        [a, b, c, x, y, z, self.log_scale]
    }

    pub fn from_rotation(r: &Rotation3<f64>, translation: [f64; 3], log_scale: f64) -> Self {
        let v = r.scaled_axis();
        Self {
            rotation: [v.x, v.y, v.z],
            translation,
            log_scale,
        }
    }

    pub fn rotation_matrix(&self) -> Rotation3<f64> {
        Rotation3::new(Vector3::from(self.rotation))
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn vertices(&self, template: &HeadTemplate) -> Vec<Vector3<f64>> {
        template.transformed(&self.rotation_matrix(), self.scale(), &Vector3::from(self.translation))
    }

    /// Geodesic angle between the two rotations, radians.
    pub fn rotation_error(&self, other: &RigidPose) -> f64 {
        self.rotation_matrix().angle_to(&other.rotation_matrix())
    }

    pub fn translation_error(&self, other: &RigidPose) -> f64 {
        (Vector3::from(self.translation) - Vector3::from(other.translation)).norm()
    }

    /// `ax ay az tx ty tz log_s` followed by `cost iters`.
    pub fn write_line<W: Write>(&self, w: &mut W, cost: f64, iters: usize) -> Result<()> {
        let [a, b, c] = self.rotation;
        let [x, y, z] = self.translation;
        writeln!(w, "{a} {b} {c} {x} {y} {z} {} {cost} {iters}", self.log_scale)?;
        Ok(())
    }
}

/// Square-root Huber: `e²/2` equals the Huber loss of `r`, and `e = r` for
/// `|r| ≤ δ`.
#[inline]
pub fn huber_residual(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        r
    } else {
        r.signum() * (delta * (2.0 * a - delta)).sqrt()
    }
}

/// Huber-weighted residuals on every pixel, zero where the rendering and
/// the observation do not overlap, plus the overlap size.
fn dense_residuals(pose: &RigidPose, template: &HeadTemplate, camera: &Camera, observed: &UvwMap) -> (Vec<f64>, usize) {
    let rendered = render_uvw(template, &pose.vertices(template), camera);
    let mut out = vec![0.0; 3 * observed.coords.len()];
    let mut overlap = 0;
    for i in 0..observed.coords.len() {
        if rendered.valid[i] && observed.valid[i] {
            overlap += 1;
            for k in 0..3 {
                out[3 * i + k] = huber_residual(rendered.coords[i][k] - observed.coords[i][k], HUBER_DELTA);
            }
        }
    }
    (out, overlap)
}

fn check_sizes(camera: &Camera, observed: &UvwMap) -> Result<()> {
    if camera.width != observed.width || camera.height != observed.height {
        return Err(Error::arg("camera and observed map sizes differ"));
    }
    Ok(())
}

/// Three Huber residuals per pixel valid in both the rendering and the
/// observation, in scan order. Empty when they do not overlap.
pub fn residuals(pose: &RigidPose, template: &HeadTemplate, camera: &Camera, observed: &UvwMap) -> Result<Vec<f64>> {
    check_sizes(camera, observed)?;
    let rendered = render_uvw(template, &pose.vertices(template), camera);
    let mut out = Vec::new();
    for i in 0..observed.coords.len() {
        if rendered.valid[i] && observed.valid[i] {
            for k in 0..3 {
                out.push(huber_residual(rendered.coords[i][k] - observed.coords[i][k], HUBER_DELTA));
            }
        }
    }
    Ok(out)
}

fn half_sq(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|x| x * x).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    /// Cost after this iteration (the previous cost when the step was
    /// rejected).
    pub cost: f64,
    pub lambda: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseFit {
    pub pose: RigidPose,
    pub cost: f64,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
}

/// Levenberg-Marquardt from `init` with a central-difference Jacobian.
/// Cost is `½ Σ e²` over the Huber residuals. `log_scale` stays at its
/// initial value; see [`fit_pose_masked`].
pub fn fit_pose(
    template: &HeadTemplate,
    camera: &Camera,
    observed: &UvwMap,
    init: &RigidPose,
    iters: usize,
) -> Result<PoseFit> {
    fit_pose_masked(template, camera, observed, init, iters, RIGID_ONLY)
}

/// Parameters optimized by [`fit_pose`]: rotation and translation.
pub const RIGID_ONLY: [bool; 7] = [true, true, true, true, true, true, false];
pub const ALL_PARAMETERS: [bool; 7] = [true; 7];

/// Scaling the posed head about the camera center leaves its UVW rendering
/// unchanged, so freeing `log_scale` makes depth and scale trade off along
/// a flat valley of the cost.
pub fn scale_about_camera(pose: &RigidPose, camera: &Camera, k: f64) -> RigidPose {
    let c = camera.center();
    let t = c + (Vector3::from(pose.translation) - c) * k;
    RigidPose {
        rotation: pose.rotation,
        translation: t.into(),
        log_scale: pose.log_scale + k.ln(),
    }
}

/// [`fit_pose`] over the parameters flagged in `free`, in
/// `ax ay az tx ty tz log_s` order.
pub fn fit_pose_masked(
    template: &HeadTemplate,
    camera: &Camera,
    observed: &UvwMap,
    init: &RigidPose,
    iters: usize,
    free: [bool; 7],
) -> Result<PoseFit> {
    if iters == 0 {
        return Err(Error::arg("iters must be >= 1"));
    }
    check_sizes(camera, observed)?;
    let active: Vec<usize> = (0..7).filter(|&j| free[j]).collect();
    if active.is_empty() {
        return Err(Error::arg("no free pose parameters"));
    }
    let n = active.len();
    let mut params = init.params();
    let (mut r, overlap) = dense_residuals(init, template, camera, observed);
    if overlap == 0 {
        return Err(Error::EmptyResidual);
    }
    let mut cost = half_sq(&r);
    let mut lambda = 1e-3;
    let mut trace = Vec::new();
    let mut it = 0;
    while it < iters && cost > 0.0 {
        it += 1;
        let columns: Vec<Vec<f64>> = active
            .par_iter()
            .map(|&j| {
                let mut plus = params;
                let mut minus = params;
                plus[j] += JACOBIAN_STEP;
                minus[j] -= JACOBIAN_STEP;
                let (rp, _) = dense_residuals(&RigidPose::from_params(&plus), template, camera, observed);
                let (rm, _) = dense_residuals(&RigidPose::from_params(&minus), template, camera, observed);
                rp.iter()
                    .zip(&rm)
                    .map(|(a, b)| (a - b) / (2.0 * JACOBIAN_STEP))
                    .collect()
            })
            .collect();
        let jac = DMatrix::from_fn(r.len(), n, |i, j| columns[j][i]);
        let jtr = jac.transpose() * DVector::from_column_slice(&r);
        let mut a = jac.transpose() * &jac;
        for d in 0..n {
            a[(d, d)] += lambda;
        }
        let mut accepted = false;
        let mut previous = cost;
        if let Some(step) = a.lu().solve(&(-&jtr)) {
            let mut trial = params;
            for (d, &j) in active.iter().enumerate() {
                trial[j] += step[d];
            }
            let (rt, ov) = dense_residuals(&RigidPose::from_params(&trial), template, camera, observed);
            let ct = half_sq(&rt);
            if ov > 0 && ct.is_finite() && ct < cost {
                previous = cost;
                params = trial;
                r = rt;
                cost = ct;
                lambda *= 0.1;
                accepted = true;
            }
        }
        if !accepted {
            lambda *= 10.0;
        }
        trace.push(TraceEntry { cost, lambda, accepted });
        if accepted && (previous - cost) / previous < 1e-8 {
            break;
        }
        if lambda > 1e12 {
            break;
        }
    }
    Ok(PoseFit {
        pose: RigidPose::from_params(&params),
        cost,
        iterations: it,
        trace,
    })
}
