//! Z-buffered triangle rasterization with perspective-correct barycentrics.
//!
//! Coverage is tested at pixel centers. Pixels exactly on a shared edge go to
//! exactly one of the two triangles, and the depth test is strict, so the
//! output does not depend on anything but triangle order.

use nalgebra::Vector3;

use super::camera::Camera;
use super::template::HeadTemplate;
use crate::uvw::UvwMap;

pub const NO_TRIANGLE: u32 = u32::MAX;
const NEAR: f64 = 1e-3;

/// Per-pixel visible triangle, its perspective-correct barycentrics in the
/// triangle's vertex order, and the camera-space depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub triangle: Vec<u32>,
    pub bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl Raster {
    #[inline]
    pub fn covered(&self, i: usize) -> bool {
        self.triangle[i] != NO_TRIANGLE
    }

    pub fn covered_count(&self) -> usize {
        self.triangle.iter().filter(|&&t| t != NO_TRIANGLE).count()
    }
}

#[inline]
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

#[inline]
fn owns_edge(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

pub fn rasterize(vertices: &[Vector3<f64>], triangles: &[[u32; 3]], camera: &Camera) -> Raster {
    let (w, h) = (camera.width, camera.height);
    let mut out = Raster {
        width: w,
        height: h,
        triangle: vec![NO_TRIANGLE; w * h],
        bary: vec![[0.0; 3]; w * h],
        depth: vec![f64::INFINITY; w * h],
    };
    let projected: Vec<Option<([f64; 2], f64)>> = vertices
        .iter()
        .map(|v| {
            let c = camera.to_camera(v);
            (c.z > NEAR).then(|| ([camera.fx * c.x / c.z + camera.cx, camera.fy * c.y / c.z + camera.cy], c.z))
        })
        .collect();

    for (t, tri) in triangles.iter().enumerate() {
        let (Some(p0), Some(p1), Some(p2)) = (
            projected[tri[0] as usize],
            projected[tri[1] as usize],
            projected[tri[2] as usize],
        ) else {
            continue;
        };
        // order[k] = which original corner sits at position k after orienting
        let mut order = [0usize, 1, 2];
        let mut s = [p0, p1, p2];
        let area = edge(s[0].0, s[1].0, s[2].0);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            s.swap(1, 2);
            order.swap(1, 2);
        }
        let area = area.abs();
        let xs = [s[0].0[0], s[1].0[0], s[2].0[0]];
        let ys = [s[0].0[1], s[1].0[1], s[2].0[1]];
        let min_x = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max_x = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min_y = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let max_y = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max_x < 0.0 || max_y < 0.0 || min_x > w as f64 || min_y > h as f64 {
            continue;
        }
        let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let x1 = ((max_x - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
        let y1 = ((max_y - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        let own = [
            owns_edge(s[1].0, s[2].0),
            owns_edge(s[2].0, s[0].0),
            owns_edge(s[0].0, s[1].0),
        ];
        for py in y0..=y1 {
            for px in x0..=x1 {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                let e = [edge(s[1].0, s[2].0, p), edge(s[2].0, s[0].0, p), edge(s[0].0, s[1].0, p)];
                if (0..3).any(|k| e[k] < 0.0 || (e[k] == 0.0 && !own[k])) {
                    continue;
                }
                let mut persp = [0.0; 3];
                let mut inv_z = 0.0;
                for k in 0..3 {
                    persp[k] = e[k] / area / s[k].1;
                    inv_z += persp[k];
                }
                let depth = 1.0 / inv_z;
                let i = py * w + px;
                if depth < out.depth[i] {
                    out.depth[i] = depth;
                    out.triangle[i] = t as u32;
                    let mut b = [0.0; 3];
                    for k in 0..3 {
                        b[order[k]] = persp[k] * depth;
                    }
                    out.bary[i] = b;
                }
            }
        }
    }
    out
}

/// Canonical coordinates of the visible surface, interpolated from the
/// template's per-vertex values.
pub fn uvw_from_raster(template: &HeadTemplate, raster: &Raster) -> UvwMap {
    let mut map = UvwMap::new(raster.width, raster.height);
    for i in 0..raster.triangle.len() {
        if !raster.covered(i) {
            continue;
        }
        let tri = template.triangles[raster.triangle[i] as usize];
        let b = raster.bary[i];
        let mut c = [0.0; 3];
        for k in 0..3 {
            let v = template.canon[tri[k] as usize];
            for a in 0..3 {
                c[a] += b[k] * v[a];
            }
        }
        map.coords[i] = c;
        map.valid[i] = true;
    }
    map
}

/// Renders the template's canonical coordinates for posed vertices.
pub fn render_uvw(template: &HeadTemplate, vertices: &[Vector3<f64>], camera: &Camera) -> UvwMap {
    uvw_from_raster(template, &rasterize(vertices, &template.triangles, camera))
}

/// Region label of the visible triangle's dominant vertex.
pub fn labels_from_raster(template: &HeadTemplate, raster: &Raster) -> Vec<u8> {
    (0..raster.triangle.len())
        .map(|i| {
            if !raster.covered(i) {
                return 0;
            }
            let tri = template.triangles[raster.triangle[i] as usize];
            let b = raster.bary[i];
            let k = (0..3).fold(0, |best, k| if b[k] > b[best] { k } else { best });
            template.labels[tri[k] as usize]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_edge_pixels_are_covered_once() {
        let cam = Camera::new(
            [10.0, 10.0, 4.0, 4.0],
            nalgebra::Matrix3::identity(),
            Vector3::zeros(),
            8,
            8,
        )
        .unwrap();
        // a square split along its diagonal, which passes through pixel centers
        let z = 1.0;
        let v = |x: f64, y: f64| Vector3::new((x - 4.0) / 10.0 * z, (y - 4.0) / 10.0 * z, z);
        let verts = vec![v(0.5, 0.5), v(6.5, 0.5), v(6.5, 6.5), v(0.5, 6.5)];
        let tris = [[0u32, 1, 2], [0, 2, 3]];
        let r = rasterize(&verts, &tris, &cam);
        let mut hits = 0;
        for py in 0..8 {
            for px in 0..8 {
                let inside = (0.5..=6.5).contains(&(px as f64 + 0.5)) && (0.5..=6.5).contains(&(py as f64 + 0.5));
                let i = py * 8 + px;
                if r.covered(i) {
                    hits += 1;
                }
                if inside && px < 6 && py < 6 {
                    assert!(r.covered(i), "({px},{py}) missed");
                }
            }
        }
        // brute force: count pixel centers inside the closed square, with the
        // shared rule deciding the boundary; each must be hit once, which the
        // z-buffer alone cannot guarantee.
        assert!(hits >= 36);
        let mut per_triangle = [0; 2];
        for &t in &r.triangle {
            if t != NO_TRIANGLE {
                per_triangle[t as usize] += 1;
            }
        }
        assert_eq!(per_triangle[0] + per_triangle[1], hits);
    }

    #[test]
    fn barycentrics_are_perspective_correct() {
        let cam = Camera::frontal(64);
        // slanted triangle
        let verts = vec![
            Vector3::new(-1.0, -1.0, 0.0),
            Vector3::new(1.0, -1.0, 1.0),
            Vector3::new(0.0, 1.0, -0.5),
        ];
        let r = rasterize(&verts, &[[0, 1, 2]], &cam);
        assert!(r.covered_count() > 50);
        for i in 0..r.triangle.len() {
            if !r.covered(i) {
                continue;
            }
            let b = r.bary[i];
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let p = verts[0] * b[0] + verts[1] * b[1] + verts[2] * b[2];
            let (px, z) = cam.project(&p).unwrap();
            let (x, y) = (i % 64, i / 64);
            assert!((px[0] - (x as f64 + 0.5)).abs() < 1e-9);
            assert!((px[1] - (y as f64 + 0.5)).abs() < 1e-9);
            assert!((z - r.depth[i]).abs() < 1e-9);
        }
    }
}
