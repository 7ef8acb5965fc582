//! Multi-view reconstruction from canonical maps: tracks of pixels sharing a
//! canonical coordinate across views, DLT triangulation and a reprojection
//! gate.

use std::io::Write;

use nalgebra::{DMatrix, Matrix3x4, RealField, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::CanonPoint;
use crate::image::RgbImage;
use crate::matcher::BinnedIndex;
use crate::synth::camera::Camera;
use crate::uvw::UvwMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoConfig {
    pub downsample_factor: f64,
    pub min_track_len: usize,
    /// L∞ tolerance for extending a track into another view.
    pub uvw_tol: f64,
    /// L∞ tolerance for validating a finished track.
    pub track_tol: f64,
    pub reproj_thresh_px: f64,
}

impl Default for StereoConfig {
    fn default() -> Self {
        Self {
            downsample_factor: 4.0,
            min_track_len: 2,
            uvw_tol: 0.05,
            track_tol: 0.1,
            reproj_thresh_px: 10.0,
        }
    }
}

impl StereoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.downsample_factor >= 1.0) || !self.downsample_factor.is_finite() {
            return Err(Error::arg("downsample_factor must be >= 1"));
        }
        if self.min_track_len < 2 {
            return Err(Error::arg("min_track_len must be >= 2"));
        }
        if !(self.uvw_tol >= 0.0) || !(self.track_tol >= self.uvw_tol) {
            return Err(Error::arg("tolerances must satisfy 0 <= uvw_tol <= track_tol"));
        }
        if !(self.reproj_thresh_px >= 0.0) {
            return Err(Error::arg("reproj_thresh_px must be >= 0"));
        }
        Ok(())
    }
}

/// A canonical point and where each view observes it (continuous full
/// resolution pixel coordinates).
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewTrack {
    pub key: CanonPoint<f64>,
    pub observations: Vec<(usize, [f64; 2])>,
}

/// Block-center samples of a map; a block is valid when all its pixels are.
struct Downsampled {
    /// Full-resolution pixel sampled by each block.
    centers: Vec<[usize; 2]>,
    valid: Vec<bool>,
}

fn block_range(b: usize, f: f64, limit: usize) -> (usize, usize) {
    let lo = (b as f64 * f).floor() as usize;
    let hi = (((b + 1) as f64 * f).ceil() as usize).min(limit);
    (lo, hi)
}

fn downsample(map: &UvwMap, f: f64) -> Downsampled {
    let width = ((map.width as f64 / f).floor() as usize).max(1);
    let height = ((map.height as f64 / f).floor() as usize).max(1);
    let mut centers = Vec::with_capacity(width * height);
    let mut valid = Vec::with_capacity(width * height);
    for by in 0..height {
        for bx in 0..width {
            let c = [
                (((bx as f64 + 0.5) * f).floor() as usize).min(map.width - 1),
                (((by as f64 + 0.5) * f).floor() as usize).min(map.height - 1),
            ];
            let (x0, x1) = block_range(bx, f, map.width);
            let (y0, y1) = block_range(by, f, map.height);
            let all = (y0..y1).all(|y| (x0..x1).all(|x| map.valid[map.index(x, y)]));
            centers.push(c);
            valid.push(all);
        }
    }
    Downsampled { centers, valid }
}

#[inline]
fn linf(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max)
}

/// Best full-resolution location of `key` near pixel `start`: the nearest
/// valid pixel in a small window, then Gauss-Newton on the bilinear
/// interpolant. Returns the location and its canonical value.
fn refine(map: &UvwMap, key: &[f64; 3], start: [usize; 2], radius: usize) -> ([f64; 2], [f64; 3]) {
    let mut best: Option<(f64, usize)> = None;
    let (x0, x1) = (start[0].saturating_sub(radius), (start[0] + radius).min(map.width - 1));
    let (y0, y1) = (start[1].saturating_sub(radius), (start[1] + radius).min(map.height - 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let i = map.index(x, y);
            if !map.valid[i] {
                continue;
            }
            let c = &map.coords[i];
            let d: f64 = (0..3).map(|k| (c[k] - key[k]).powi(2)).sum();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
    }
    let i = best.map_or(map.index(start[0], start[1]), |(_, i)| i);
    let pixel = [(i % map.width) as f64 + 0.5, (i / map.width) as f64 + 0.5];
    let value = map.coords[i];

    if map.bilinear_with_gradient(pixel[0], pixel[1]).is_none() {
        return plane_refine(map, key, i).unwrap_or((pixel, value));
    }
    let mut p = pixel;
    let mut cost = (0..3).map(|k| (value[k] - key[k]).powi(2)).sum::<f64>();
    let mut out = (pixel, value);
    for _ in 0..10 {
        let Some((v, d)) = map.bilinear_with_gradient(p[0], p[1]) else {
            break;
        };
        let r: [f64; 3] = [v[0] - key[0], v[1] - key[1], v[2] - key[2]];
        let (mut a, mut b, mut c, mut gx, mut gy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 0..3 {
            a += d[0][k] * d[0][k];
            b += d[0][k] * d[1][k];
            c += d[1][k] * d[1][k];
            gx += d[0][k] * r[k];
            gy += d[1][k] * r[k];
        }
        let det = a * c - b * b;
        if !(det.abs() > 1e-18) {
            break;
        }
        let step = [-(c * gx - b * gy) / det, -(a * gy - b * gx) / det];
        let next = [
            (p[0] + step[0]).clamp(pixel[0] - 1.0, pixel[0] + 1.0),
            (p[1] + step[1]).clamp(pixel[1] - 1.0, pixel[1] + 1.0),
        ];
        let Some(nv) = map.sample_bilinear(next[0], next[1]) else {
            break;
        };
        let ncost: f64 = (0..3).map(|k| (nv[k] - key[k]).powi(2)).sum();
        if ncost >= cost {
            break;
        }
        cost = ncost;
        p = next;
        out = (next, nv);
        if step[0].abs() + step[1].abs() < 1e-10 {
            break;
        }
    }
    out
}

/// Sub-pixel location near silhouettes, where the bilinear interpolant is
/// unavailable: fits an affine model to the valid 3×3 neighborhood of pixel
/// `i` and solves it for `key`. `None` when the fit is ill-posed or the
/// solution leaves the neighborhood or the foreground.
fn plane_refine(map: &UvwMap, key: &[f64; 3], i: usize) -> Option<([f64; 2], [f64; 3])> {
    let (cx, cy) = ((i % map.width) as i64, (i / map.width) as i64);
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [[0.0; 3]; 3];
    let mut n = 0;
    for dy in -1..=1i64 {
        for dx in -1..=1i64 {
            let (x, y) = (cx + dx, cy + dy);
            if x < 0 || y < 0 || x >= map.width as i64 || y >= map.height as i64 {
                continue;
            }
            let Some(c) = map.get(x as usize, y as usize) else { continue };
            let row = [1.0, dx as f64, dy as f64];
            for r in 0..3 {
                for q in 0..3 {
                    ata[r][q] += row[r] * row[q];
                }
                for k in 0..3 {
                    atb[r][k] += row[r] * c[k];
                }
            }
            n += 1;
        }
    }
    if n < 4 {
        return None;
    }
    let m = nalgebra::Matrix3::from_fn(|r, q| ata[r][q]);
    let inv = m.try_inverse()?;
    // coefficient[r][k]: offset, d/dx, d/dy for channel k
    let mut coef = [[0.0; 3]; 3];
    for r in 0..3 {
        for k in 0..3 {
            coef[r][k] = (0..3).map(|q| inv[(r, q)] * atb[q][k]).sum();
        }
    }
    let res: Vec<f64> = (0..3).map(|k| coef[0][k] - key[k]).collect();
    let (mut a, mut b, mut c, mut gx, mut gy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..3 {
        a += coef[1][k] * coef[1][k];
        b += coef[1][k] * coef[2][k];
        c += coef[2][k] * coef[2][k];
        gx += coef[1][k] * res[k];
        gy += coef[2][k] * res[k];
    }
    let det = a * c - b * b;
    if !(det.abs() > 1e-18) {
        return None;
    }
    let d = [-(c * gx - b * gy) / det, -(a * gy - b * gx) / det];
    if d[0].abs() > 1.0 || d[1].abs() > 1.0 {
        return None;
    }
    let p = [cx as f64 + 0.5 + d[0], cy as f64 + 0.5 + d[1]];
    map.get(p[0] as usize, p[1] as usize)?;
    let value = [0, 1, 2].map(|k| coef[0][k] + coef[1][k] * d[0] + coef[2][k] * d[1]);
    Some((p, value))
}

/// Seeds a track at every valid block of view 0 and extends it greedily to
/// the other views.
pub fn build_tracks(maps: &[UvwMap], cfg: &StereoConfig) -> Result<Vec<MultiViewTrack>> {
    Ok(build_tracks_with_stats(maps, cfg)?.0)
}

fn build_tracks_with_stats(maps: &[UvwMap], cfg: &StereoConfig) -> Result<(Vec<MultiViewTrack>, usize, usize)> {
    if maps.len() < 2 {
        return Err(Error::arg(format!("stereo needs at least 2 views, got {}", maps.len())));
    }
    cfg.validate()?;
    let f = cfg.downsample_factor;
    let radius = f.ceil() as usize;
    let small: Vec<Downsampled> = maps.iter().map(|m| downsample(m, f)).collect();
    let indices: Vec<Option<BinnedIndex>> = small
        .iter()
        .zip(maps)
        .map(|(d, m)| {
            let ids: Vec<usize> = (0..d.valid.len()).filter(|&b| d.valid[b]).collect();
            let points = ids
                .iter()
                .map(|&b| {
                    let [x, y] = d.centers[b];
                    m.coords[m.index(x, y)]
                })
                .collect();
            BinnedIndex::new(points, ids).ok()
        })
        .collect();
    let seed = &small[0];
    let seeds: Vec<usize> = (0..seed.valid.len()).filter(|&b| seed.valid[b]).collect();
    let built: Vec<Option<(MultiViewTrack, bool)>> = seeds
        .par_iter()
        .map(|&b| {
            let [sx, sy] = seed.centers[b];
            let key = maps[0].coords[maps[0].index(sx, sy)];
            let mut obs = vec![(0usize, [sx as f64 + 0.5, sy as f64 + 0.5])];
            let mut values = vec![key];
            for v in 1..maps.len() {
                let Some(index) = &indices[v] else { continue };
                let (block, _) = index.nearest(&key);
                let start = small[v].centers[block];
                let (pixel, value) = refine(&maps[v], &key, start, radius);
                if linf(&value, &key) <= cfg.uvw_tol {
                    obs.push((v, pixel));
                    values.push(value);
                }
            }
            if obs.len() < cfg.min_track_len {
                return None;
            }
            let valid = values.iter().all(|c| linf(c, &key) <= cfg.track_tol);
            Some((
                MultiViewTrack {
                    key: CanonPoint::clamped(key),
                    observations: obs,
                },
                valid,
            ))
        })
        .collect();
    let built_count = built.iter().flatten().count();
    let tracks: Vec<MultiViewTrack> = built.into_iter().flatten().filter(|(_, ok)| *ok).map(|(t, _)| t).collect();
    Ok((tracks, seeds.len(), built_count))
}

/// Homogeneous DLT: two unit-norm rows per observation, solved by SVD.
pub fn triangulate_dlt<T: RealField + Copy>(observations: &[([T; 2], Matrix3x4<T>)]) -> Result<Vector3<T>> {
    if observations.len() < 2 {
        return Err(Error::arg("triangulation needs at least 2 observations"));
    }
    let mut a = DMatrix::<T>::zeros(2 * observations.len(), 4);
    for (k, (px, p)) in observations.iter().enumerate() {
        for (r, coord) in [(0usize, px[0]), (1, px[1])] {
            let mut row = p.row(2) * coord - p.row(r);
            let n = row.norm();
            if n > T::zero() {
                row /= n;
            }
            a.row_mut(2 * k + r).copy_from(&row);
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let s = |k: usize| svd.singular_values[order[k]];
    let tiny = nalgebra::convert::<f64, T>(1e-9);
    if order.len() < 4 || s(2) <= tiny * s(0) {
        return Err(Error::Degenerate("observation rays do not constrain a point".into()));
    }
    let x = v_t.row(order[3]).transpose();
    let norm = x.norm();
    let w = x[3] / norm;
    if w.abs() < nalgebra::convert::<f64, T>(1e-12) {
        return Err(Error::PointAtInfinity(nalgebra::try_convert::<T, f64>(w.abs()).unwrap_or(0.0)));
    }
    Ok(Vector3::new(x[0] / x[3], x[1] / x[3], x[2] / x[3]))
}

/// Triangulates a track with the cameras of its observing views.
pub fn triangulate_track(track: &MultiViewTrack, cameras: &[Camera]) -> Result<Vector3<f64>> {
    let obs: Vec<([f64; 2], Matrix3x4<f64>)> = track
        .observations
        .iter()
        .map(|&(v, px)| {
            cameras
                .get(v)
                .map(|c| (px, c.projection_matrix()))
                .ok_or_else(|| Error::arg(format!("no camera for view {v}")))
        })
        .collect::<Result<_>>()?;
    triangulate_dlt(&obs)
}

/// Largest pixel distance between an observation and the reprojected point;
/// infinite when the point is behind an observing camera.
pub fn max_reprojection_error(point: &Vector3<f64>, track: &MultiViewTrack, cameras: &[Camera]) -> f64 {
    track
        .observations
        .iter()
        .map(|&(v, px)| match cameras[v].project(point) {
            Some((q, _)) => ((q[0] - px[0]).powi(2) + (q[1] - px[1]).powi(2)).sqrt(),
            None => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StereoStats {
    pub seeds: usize,
    pub tracks_built: usize,
    pub tracks_validated: usize,
    pub triangulated: usize,
    pub filtered: usize,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloudPoint {
    pub position: [f64; 3],
    pub color: [u8; 3],
    pub track: MultiViewTrack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
    pub stats: StereoStats,
}

impl PointCloud {
    pub fn write_ply<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", self.points.len())?;
        for name in ["x", "y", "z"] {
            writeln!(w, "property double {name}")?;
        }
        for name in ["red", "green", "blue"] {
            writeln!(w, "property uchar {name}")?;
        }
        writeln!(w, "end_header")?;
        for p in &self.points {
            let [x, y, z] = p.position;
            let [r, g, b] = p.color;
            writeln!(w, "{x} {y} {z} {r} {g} {b}")?;
        }
        Ok(())
    }

    pub fn write_stats<W: Write>(&self, w: &mut W) -> Result<()> {
        let s = &self.stats;
        writeln!(w, "seeds {}", s.seeds)?;
        writeln!(w, "tracks_built {}", s.tracks_built)?;
        writeln!(w, "tracks_validated {}", s.tracks_validated)?;
        writeln!(w, "triangulated {}", s.triangulated)?;
        writeln!(w, "filtered {}", s.filtered)?;
        writeln!(w, "points {}", s.points)?;
        Ok(())
    }
}

/// Tracks, triangulation and the reprojection gate. Per-track failures are
/// logged and skipped. `images` may be empty, in which case points are
/// gray.
pub fn reconstruct(maps: &[UvwMap], images: &[RgbImage], cameras: &[Camera], cfg: &StereoConfig) -> Result<PointCloud> {
    if cameras.len() != maps.len() {
        return Err(Error::arg(format!("{} maps but {} cameras", maps.len(), cameras.len())));
    }
    if !images.is_empty() && images.len() != maps.len() {
        return Err(Error::arg(format!("{} maps but {} images", maps.len(), images.len())));
    }
    for (m, c) in maps.iter().zip(cameras) {
        if m.width != c.width || m.height != c.height {
            return Err(Error::arg("map and camera image sizes differ"));
        }
    }
    let (tracks, seeds, built) = build_tracks_with_stats(maps, cfg)?;
    let mut stats = StereoStats {
        seeds,
        tracks_built: built,
        tracks_validated: tracks.len(),
        ..Default::default()
    };
    let solved: Vec<Result<Vector3<f64>>> = tracks.par_iter().map(|t| triangulate_track(t, cameras)).collect();
    let mut points = Vec::new();
    for (track, res) in tracks.into_iter().zip(solved) {
        let x = match res {
            Ok(x) => x,
            Err(e) => {
                log::debug!("track at {:?} skipped: {e}", track.key.to_array());
                continue;
            }
        };
        stats.triangulated += 1;
        for &(v, _) in &track.observations {
            if cameras[v].to_camera(&x).z <= 0.0 {
                log::warn!("point {:?} lies behind camera {v}", x.as_slice());
            }
        }
        if !(max_reprojection_error(&x, &track, cameras) <= cfg.reproj_thresh_px) {
            stats.filtered += 1;
            continue;
        }
        let color = if images.is_empty() {
            [128; 3]
        } else {
            let mut sum = [0u32; 3];
            for &(v, px) in &track.observations {
                let img = &images[v];
                let x = (px[0].floor().max(0.0) as usize).min(img.width - 1);
                let y = (px[1].floor().max(0.0) as usize).min(img.height - 1);
                let c = img.get(x, y);
                for k in 0..3 {
                    sum[k] += c[k] as u32;
                }
            }
            let n = track.observations.len() as u32;
            sum.map(|s| ((s + n / 2) / n) as u8)
        };
        points.push(CloudPoint {
            position: [x.x, x.y, x.z],
            color,
            track,
        });
    }
    stats.points = points.len();
    Ok(PointCloud { points, stats })
}
