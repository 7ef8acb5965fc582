#![allow(dead_code)]

use densemarks::synth::{render_frame, Camera, Frame, FramePose, HeadTemplate};
use nalgebra::Vector3;

/// Closest point on triangle `abc` to `p`.
pub fn closest_on_triangle(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Exhaustive distance from `p` to a triangle mesh.
pub fn distance_to_mesh(p: &Vector3<f64>, vertices: &[Vector3<f64>], triangles: &[[u32; 3]]) -> f64 {
    triangles
        .iter()
        .map(|t| {
            let q = closest_on_triangle(
                p,
                &vertices[t[0] as usize],
                &vertices[t[1] as usize],
                &vertices[t[2] as usize],
            );
            (p - q).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Cameras on a horizontal arc around the head.
pub fn arc_rig(size: usize, yaws: &[f64]) -> Vec<Camera> {
    yaws.iter().map(|&y| Camera::orbit(size, y, 4.0)).collect()
}

pub fn render_rig(pose: &FramePose, cameras: &[Camera]) -> Vec<Frame> {
    cameras
        .iter()
        .map(|c| render_frame(HeadTemplate::standard(), pose, c))
        .collect()
}

pub mod fd;
