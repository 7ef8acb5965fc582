//! The canonical unit cube and its learnable latent feature grid.
//!
//! Features live on an `N × N × N` voxel lattice whose corners coincide with
//! the cube corners (cube coordinate `c` maps to voxel coordinate `c·(N−1)`).
//! The trainable tensor is the raw grid; queries read a Gaussian-smoothed copy
//! that is rebuilt after every update. Storage is channel-major with `x`
//! varying fastest, which is also the checkpoint order.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::binio::{put_f32, put_f64, put_u32, OffsetReader};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const GRID_MAGIC: &[u8; 8] = b"DMGRID01";

/// A location in the canonical unit cube.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanonPoint<T> {
    pub u: T,
    pub v: T,
    pub w: T,
}

impl<T: Real> CanonPoint<T> {
    pub fn new(u: T, v: T, w: T) -> Result<Self> {
        let p = Self { u, v, w };
        if p.in_cube() {
            Ok(p)
        } else {
            Err(Error::OutOfCube {
                u: u.as_f64(),
                v: v.as_f64(),
                w: w.as_f64(),
            })
        }
    }

    pub fn from_array(a: [T; 3]) -> Result<Self> {
        Self::new(a[0], a[1], a[2])
    }

    /// Clamps each coordinate into `[0, 1]`. NaN maps to 0.
    pub fn clamped(a: [T; 3]) -> Self {
        let c = |x: T| {
            if x.is_nan() {
                T::zero()
            } else {
                x.max(T::zero()).min(T::one())
            }
        };
        Self {
            u: c(a[0]),
            v: c(a[1]),
            w: c(a[2]),
        }
    }

    pub fn in_cube(&self) -> bool {
        let ok = |x: T| x >= T::zero() && x <= T::one();
        ok(self.u) && ok(self.v) && ok(self.w)
    }

    pub fn to_array(self) -> [T; 3] {
        [self.u, self.v, self.w]
    }

    pub fn distance(&self, other: &Self) -> T {
        let d = [self.u - other.u, self.v - other.v, self.w - other.w];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

/// Normalized 1D Gaussian taps, truncated at radius `ceil(3·sigma)`.
/// `sigma == 0` yields the single tap `[1]`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    taps
}

/// Applies the 1D filter `taps` along one axis of a cubic single-channel
/// field, replicating edge voxels. With `transpose` set, applies the adjoint:
/// taps scatter into a padded line whose overhang folds back onto the edge
/// voxels.
fn filter_axis<T: Real>(src: &[T], dst: &mut [T], n: usize, axis: usize, taps: &[T], transpose: bool) {
    let r = taps.len() / 2;
    let stride = n.pow(axis as u32);
    let mut line = vec![T::zero(); n + 2 * r];
    // Every line along `axis` starts at an index whose `axis` digit is zero.
    for l in 0..n * n {
        let (a, b) = (l % n, l / n);
        let base = match axis {
            0 => a * n + b * n * n,
            1 => a + b * n * n,
            _ => a + b * n,
        };
        if transpose {
            line.iter_mut().for_each(|x| *x = T::zero());
            for i in 0..n {
                let v = src[base + i * stride];
                for (k, &t) in taps.iter().enumerate() {
                    line[i + k] += t * v;
                }
            }
            for j in 0..n {
                dst[base + j * stride] = line[j + r];
            }
            for p in 0..r {
                dst[base] += line[p];
                dst[base + (n - 1) * stride] += line[n + r + p];
            }
        } else {
            for (p, x) in line.iter_mut().enumerate() {
                let j = p.saturating_sub(r).min(n - 1);
                *x = src[base + j * stride];
            }
            for i in 0..n {
                dst[base + i * stride] = taps.iter().zip(&line[i..]).map(|(&t, &x)| t * x).sum();
            }
        }
    }
}

/// Separable 3D Gaussian filter with clamp-to-edge boundaries, applied
/// independently to each channel of a channel-major `n³ × channels` field.
pub fn gaussian_filter_3d<T: Real>(field: &[T], n: usize, channels: usize, sigma: f64) -> Vec<T> {
    let taps: Vec<T> = gaussian_taps(sigma).into_iter().map(T::lit).collect();
    separable(field, n, channels, &taps, false)
}

/// Adjoint of [`gaussian_filter_3d`].
pub fn gaussian_filter_3d_transpose<T: Real>(
    field: &[T],
    n: usize,
    channels: usize,
    sigma: f64,
) -> Vec<T> {
    let taps: Vec<T> = gaussian_taps(sigma).into_iter().map(T::lit).collect();
    separable(field, n, channels, &taps, true)
}

fn separable<T: Real>(field: &[T], n: usize, channels: usize, taps: &[T], transpose: bool) -> Vec<T> {
    assert_eq!(field.len(), n * n * n * channels, "field shape mismatch");
    if taps.len() == 1 {
        return field.to_vec();
    }
    let axes: [usize; 3] = if transpose { [2, 1, 0] } else { [0, 1, 2] };
    let mut out = field.to_vec();
    out.par_chunks_mut(n * n * n).for_each(|a| {
        let mut b = vec![T::zero(); a.len()];
        for (k, &axis) in axes.iter().enumerate() {
            if k % 2 == 0 {
                filter_axis(a, &mut b, n, axis, taps, transpose);
            } else {
                filter_axis(&b, a, n, axis, taps, transpose);
            }
        }
        a.copy_from_slice(&b);
    });
    out
}

/// The eight lattice corners around a query point with their trilinear weights.
///
/// Corner `c` sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)` from the
/// lower corner of the cell.
#[derive(Clone, Copy, Debug)]
pub struct Stencil<T> {
    pub voxels: [usize; 8],
    pub weights: [T; 8],
    frac: [T; 3],
    scale: T,
}

impl<T: Real> Stencil<T> {
    pub fn new(resolution: usize, p: &CanonPoint<T>) -> Result<Self> {
        if !p.in_cube() {
            return Err(Error::OutOfCube {
                u: p.u.as_f64(),
                v: p.v.as_f64(),
                w: p.w.as_f64(),
            });
        }
        let scale = T::from_usize(resolution - 1).unwrap();
        let mut lo = [0usize; 3];
        let mut frac = [T::zero(); 3];
        for (axis, c) in p.to_array().into_iter().enumerate() {
            let s = c * scale;
            let i = s.floor().to_usize().unwrap_or(0).min(resolution - 2);
            lo[axis] = i;
            frac[axis] = s - T::from_usize(i).unwrap();
        }
        let n = resolution;
        let mut voxels = [0usize; 8];
        let mut weights = [T::zero(); 8];
        for c in 0..8 {
            let d = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            voxels[c] = (lo[2] + d[2]) * n * n + (lo[1] + d[1]) * n + lo[0] + d[0];
            weights[c] = (0..3)
                .map(|a| if d[a] == 1 { frac[a] } else { T::one() - frac[a] })
                .fold(T::one(), |acc, w| acc * w);
        }
        Ok(Self {
            voxels,
            weights,
            frac,
            scale,
        })
    }

    /// Partial derivatives of each corner weight with respect to `(u, v, w)`.
    pub fn weight_derivatives(&self) -> [[T; 3]; 8] {
        let f = self.frac;
        let mut out = [[T::zero(); 3]; 8];
        for (c, row) in out.iter_mut().enumerate() {
            let d = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let lin = |a: usize| if d[a] == 1 { f[a] } else { T::one() - f[a] };
            let sign = |a: usize| if d[a] == 1 { T::one() } else { -T::one() };
            row[0] = sign(0) * lin(1) * lin(2) * self.scale;
            row[1] = lin(0) * sign(1) * lin(2) * self.scale;
            row[2] = lin(0) * lin(1) * sign(2) * self.scale;
        }
        out
    }
}

/// Sparse gradient of `upstream · query(p)`.
#[derive(Clone, Debug)]
pub struct QueryGrad<T> {
    /// Derivative with respect to the cube coordinates `(u, v, w)`.
    pub point: [T; 3],
    /// Gradient with respect to the eight participating smoothed voxels.
    pub corners: Vec<(usize, Vec<T>)>,
}

/// Learnable feature grid over the canonical cube.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid<T> {
    resolution: usize,
    feature_dim: usize,
    sigma: f64,
    raw: Vec<T>,
    smoothed: Vec<T>,
}

impl<T: Real> LatentGrid<T> {
    /// Grid with raw features drawn i.i.d. from `N(0, 1)`.
    pub fn new(resolution: usize, feature_dim: usize, sigma: f64, seed: u64) -> Result<Self> {
        check_dims(resolution, feature_dim, sigma)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = resolution.pow(3) * feature_dim;
        let raw = (0..len)
            .map(|_| T::lit(StandardNormal.sample(&mut rng)))
            .collect();
        Self::from_raw(resolution, feature_dim, sigma, raw)
    }

    pub fn from_raw(resolution: usize, feature_dim: usize, sigma: f64, raw: Vec<T>) -> Result<Self> {
        check_dims(resolution, feature_dim, sigma)?;
        if raw.len() != resolution.pow(3) * feature_dim {
            return Err(Error::arg(format!(
                "raw grid has {} values, expected {}",
                raw.len(),
                resolution.pow(3) * feature_dim
            )));
        }
        let mut grid = Self {
            resolution,
            feature_dim,
            sigma,
            raw,
            smoothed: Vec::new(),
        };
        grid.smooth()?;
        Ok(grid)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn raw(&self) -> &[T] {
        &self.raw
    }

    pub fn smoothed(&self) -> &[T] {
        &self.smoothed
    }

    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        let n = self.resolution;
        (z * n + y) * n + x
    }

    /// Smoothed feature `channel` at a voxel.
    pub fn feature(&self, voxel: usize, channel: usize) -> T {
        self.smoothed[channel * self.voxel_count() + voxel]
    }

    /// Rebuilds the smoothed grid from the raw one.
    pub fn smooth(&mut self) -> Result<()> {
        self.smoothed = self.smooth_field(&self.raw);
        if self.smoothed.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent grid"));
        }
        Ok(())
    }

    /// Applies this grid's filter to an arbitrary field of the same shape.
    pub fn smooth_field(&self, field: &[T]) -> Vec<T> {
        gaussian_filter_3d(field, self.resolution, self.feature_dim, self.sigma)
    }

    /// Pulls a gradient on the smoothed grid back onto the raw grid.
    pub fn raw_gradient(&self, grad_smoothed: &[T]) -> Vec<T> {
        gaussian_filter_3d_transpose(grad_smoothed, self.resolution, self.feature_dim, self.sigma)
    }

    /// Mutates the raw grid, then re-smooths and checks finiteness.
    pub fn update_raw(&mut self, f: impl FnOnce(&mut [T])) -> Result<()> {
        f(&mut self.raw);
        if self.raw.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent grid"));
        }
        self.smooth()
    }

    /// Trilinear interpolation of the smoothed grid.
    pub fn query(&self, p: &CanonPoint<T>) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.feature_dim];
        self.query_into(p, &mut out)?;
        Ok(out)
    }

    pub fn query_into(&self, p: &CanonPoint<T>, out: &mut [T]) -> Result<Stencil<T>> {
        let st = Stencil::new(self.resolution, p)?;
        let nv = self.voxel_count();
        for (ch, o) in out.iter_mut().enumerate() {
            let plane = &self.smoothed[ch * nv..(ch + 1) * nv];
            *o = st
                .voxels
                .iter()
                .zip(st.weights.iter())
                .map(|(&v, &w)| w * plane[v])
                .sum();
        }
        Ok(st)
    }

    pub fn query_grad(&self, p: &CanonPoint<T>, upstream: &[T]) -> Result<QueryGrad<T>> {
        self.check_upstream(upstream)?;
        let st = Stencil::new(self.resolution, p)?;
        let point = self.point_grad(&st, upstream);
        let corners = st
            .voxels
            .iter()
            .zip(st.weights.iter())
            .map(|(&v, &w)| (v, upstream.iter().map(|&g| g * w).collect()))
            .collect();
        Ok(QueryGrad { point, corners })
    }

    /// Backward pass of [`Self::query`] that accumulates the voxel gradient
    /// into a dense smoothed-grid buffer and returns the point gradient.
    pub fn backprop_query(
        &self,
        p: &CanonPoint<T>,
        upstream: &[T],
        grad_smoothed: &mut [T],
    ) -> Result<[T; 3]> {
        self.check_upstream(upstream)?;
        let st = Stencil::new(self.resolution, p)?;
        let nv = self.voxel_count();
        for (ch, &g) in upstream.iter().enumerate() {
            for (&v, &w) in st.voxels.iter().zip(st.weights.iter()) {
                grad_smoothed[ch * nv + v] += w * g;
            }
        }
        Ok(self.point_grad(&st, upstream))
    }

    fn point_grad(&self, st: &Stencil<T>, upstream: &[T]) -> [T; 3] {
        let nv = self.voxel_count();
        let dw = st.weight_derivatives();
        let mut grad = [T::zero(); 3];
        for (c, &v) in st.voxels.iter().enumerate() {
            let dot: T = upstream
                .iter()
                .enumerate()
                .map(|(ch, &g)| g * self.smoothed[ch * nv + v])
                .sum();
            for a in 0..3 {
                grad[a] += dw[c][a] * dot;
            }
        }
        grad
    }

    fn check_upstream(&self, upstream: &[T]) -> Result<()> {
        if upstream.len() != self.feature_dim {
            return Err(Error::arg(format!(
                "upstream has {} channels, grid has {}",
                upstream.len(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Writes the `DMGRID01` checkpoint. Only the raw grid is stored.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        put_u32(w, self.resolution as u32)?;
        put_u32(w, self.feature_dim as u32)?;
        put_f64(w, self.sigma)?;
        for &x in &self.raw {
            put_f32(w, x.to_f32().unwrap())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut rd = OffsetReader::new(r, "grid checkpoint");
        Self::read_from(&mut rd)
    }

    pub(crate) fn read_from<R: Read>(rd: &mut OffsetReader<R>) -> Result<Self> {
        rd.expect_magic(GRID_MAGIC)?;
        let at = rd.offset();
        let n = rd.u32()? as usize;
        let d = rd.u32()? as usize;
        let sigma = rd.f64()?;
        if n < 2 || d < 1 || !(sigma >= 0.0) || n > 1024 || d > 4096 {
            return Err(Error::format(
                "grid checkpoint",
                at,
                format!("invalid header N={n} D={d} sigma={sigma}"),
            ));
        }
        let mut raw = Vec::with_capacity(n.pow(3) * d);
        for _ in 0..n.pow(3) * d {
            let x = rd.f32()?;
            if !x.is_finite() {
                return Err(rd.error("non-finite grid value"));
            }
            raw.push(T::lit(x as f64));
        }
        Self::from_raw(n, d, sigma, raw)
    }
}

fn check_dims(resolution: usize, feature_dim: usize, sigma: f64) -> Result<()> {
    if resolution < 2 {
        return Err(Error::arg(format!("grid resolution must be >= 2, got {resolution}")));
    }
    if feature_dim < 1 {
        return Err(Error::arg("feature dimension must be >= 1"));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::arg(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_filter(field: &[f64], n: usize, sigma: f64) -> Vec<f64> {
        let taps = gaussian_taps(sigma);
        let r = (taps.len() / 2) as isize;
        let cl = |i: isize| i.clamp(0, n as isize - 1) as usize;
        let mut out = vec![0.0; n * n * n];
        for z in 0..n as isize {
            for y in 0..n as isize {
                for x in 0..n as isize {
                    let mut acc = 0.0;
                    for (k, wz) in taps.iter().enumerate() {
                        for (j, wy) in taps.iter().enumerate() {
                            for (i, wx) in taps.iter().enumerate() {
                                let sx = cl(x + i as isize - r);
                                let sy = cl(y + j as isize - r);
                                let sz = cl(z + k as isize - r);
                                acc += wx * wy * wz * field[(sz * n + sy) * n + sx];
                            }
                        }
                    }
                    out[((z as usize) * n + y as usize) * n + x as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn sigma_zero_is_identity() {
        let g = LatentGrid::<f64>::new(2, 1, 0.0, 7).unwrap();
        assert_eq!(g.raw().len(), 8);
        assert_eq!(g.raw(), g.smoothed());
    }

    #[test]
    fn same_seed_same_grid() {
        let a = LatentGrid::<f64>::new(6, 3, 1.0, 11).unwrap();
        let b = LatentGrid::<f64>::new(6, 3, 1.0, 11).unwrap();
        assert_eq!(a, b);
        let mut c = a.clone();
        c.smooth().unwrap();
        assert_eq!(a.smoothed(), c.smoothed());
    }

    #[test]
    fn init_moments() {
        let g = LatentGrid::<f64>::new(32, 16, 1.0, 0).unwrap();
        let n = g.raw().len() as f64;
        assert_eq!(g.raw().len(), 524_288);
        let mean = g.raw().iter().sum::<f64>() / n;
        let var = g.raw().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(LatentGrid::<f64>::new(1, 4, 1.0, 0).is_err());
        assert!(LatentGrid::<f64>::new(4, 0, 1.0, 0).is_err());
        assert!(LatentGrid::<f64>::new(4, 2, -1.0, 0).is_err());
    }

    #[test]
    fn taps_are_normalized_and_truncated() {
        let t = gaussian_taps(1.0);
        assert_eq!(t.len(), 7);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(gaussian_taps(0.4).len(), 5);
    }

    #[test]
    fn constant_field_survives_smoothing() {
        for sigma in [0.0, 0.5, 1.0, 2.3] {
            let f = vec![3.25f64; 5 * 5 * 5 * 2];
            let s = gaussian_filter_3d(&f, 5, 2, sigma);
            assert!(s.iter().all(|x| (x - 3.25).abs() < 1e-14), "sigma {sigma}");
        }
    }

    #[test]
    fn impulse_matches_brute_force() {
        let n = 9;
        let mut f = vec![0.0f64; n * n * n];
        f[(4 * n + 4) * n + 4] = 1.0;
        let fast = gaussian_filter_3d(&f, n, 1, 1.0);
        let slow = brute_force_filter(&f, n, 1.0);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_field_near_boundary_matches_brute_force() {
        let n = 5;
        let g = LatentGrid::<f64>::new(n, 1, 1.5, 3).unwrap();
        let slow = brute_force_filter(g.raw(), n, 1.5);
        for (a, b) in g.smoothed().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn corner_and_center_queries() {
        let g = LatentGrid::<f64>::new(4, 3, 1.0, 5).unwrap();
        let f = g.query(&CanonPoint::new(0.0, 0.0, 0.0).unwrap()).unwrap();
        for ch in 0..3 {
            assert_eq!(f[ch], g.feature(0, ch));
        }
        let f = g.query(&CanonPoint::new(1.0, 1.0, 1.0).unwrap()).unwrap();
        for ch in 0..3 {
            assert_eq!(f[ch], g.feature(g.voxel_count() - 1, ch));
        }
        // center of cell (1,1,1)-(2,2,2)
        let c = 1.5 / 3.0;
        let f = g.query(&CanonPoint::new(c, c, c).unwrap()).unwrap();
        for ch in 0..3 {
            let mut mean = 0.0;
            for z in 1..3 {
                for y in 1..3 {
                    for x in 1..3 {
                        mean += g.feature(g.voxel_index(x, y, z), ch) / 8.0;
                    }
                }
            }
            assert!((f[ch] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn multilinear_field_is_reproduced() {
        let n = 5;
        let mut raw = vec![0.0f64; n * n * n];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    raw[(z * n + y) * n + x] = x as f64 + 2.0 * y as f64 + 3.0 * z as f64;
                }
            }
        }
        let g = LatentGrid::from_raw(n, 1, 0.0, raw).unwrap();
        let f = g.query(&CanonPoint::new(0.25, 0.5, 0.75).unwrap()).unwrap();
        // voxel coordinates (1, 2, 3)
        assert!((f[0] - (1.0 + 4.0 + 9.0)).abs() < 1e-13);
    }

    #[test]
    fn out_of_cube_is_rejected() {
        let g = LatentGrid::<f64>::new(4, 2, 0.0, 0).unwrap();
        let p = CanonPoint {
            u: 1.01,
            v: 0.5,
            w: 0.5,
        };
        assert!(matches!(g.query(&p), Err(Error::OutOfCube { .. })));
        assert!(CanonPoint::new(0.5, -1e-9, 0.2).is_err());
        assert!(CanonPoint::new(f64::NAN, 0.5, 0.2).is_err());
    }

    #[test]
    fn constant_grid_has_zero_point_gradient() {
        let g = LatentGrid::from_raw(4, 2, 1.0, vec![0.7f64; 128]).unwrap();
        let p = CanonPoint::new(0.3, 0.61, 0.07).unwrap();
        let qg = g.query_grad(&p, &[1.3, -0.4]).unwrap();
        for a in qg.point {
            assert!(a.abs() < 1e-13);
        }
    }

    #[test]
    fn corner_query_concentrates_gradient() {
        let g = LatentGrid::<f64>::new(4, 2, 1.0, 9).unwrap();
        let p = CanonPoint::new(1.0 / 3.0, 2.0 / 3.0, 0.0).unwrap();
        let qg = g.query_grad(&p, &[2.0, -1.0]).unwrap();
        let target = g.voxel_index(1, 2, 0);
        for (v, grad) in &qg.corners {
            if *v == target {
                assert_eq!(grad, &vec![2.0, -1.0]);
            } else {
                assert!(grad.iter().all(|x| *x == 0.0));
            }
        }
    }

    #[test]
    fn point_gradient_matches_central_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let g = LatentGrid::<f64>::new(6, 4, 1.0, trial).unwrap();
            let p = [
                rng.random_range(0.02..0.98),
                rng.random_range(0.02..0.98),
                rng.random_range(0.02..0.98),
            ];
            let up: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let qg = g.query_grad(&CanonPoint::from_array(p).unwrap(), &up).unwrap();
            let f = |q: [f64; 3]| -> f64 {
                let v = g.query(&CanonPoint::from_array(q).unwrap()).unwrap();
                v.iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let h = 1e-5;
            for a in 0..3 {
                let mut hi = p;
                let mut lo = p;
                hi[a] += h;
                lo[a] -= h;
                let fd = (f(hi) - f(lo)) / (2.0 * h);
                let rel = (fd - qg.point[a]).abs() / fd.abs().max(qg.point[a].abs()).max(1e-8);
                assert!(rel < 1e-6, "trial {trial} axis {a}: fd {fd} vs {}", qg.point[a]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let g = LatentGrid::<f64>::new(3, 2, 0.5, 1).unwrap();
        let mut buf = Vec::new();
        g.write_checkpoint(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 4 + 8 + 27 * 2 * 4);
        let back = LatentGrid::<f64>::read_checkpoint(&mut buf.as_slice()).unwrap();
        for (a, b) in g.raw().iter().zip(back.raw()) {
            assert_eq!(*a as f32, *b as f32);
        }
        let err = LatentGrid::<f64>::read_checkpoint(&mut &buf[..30]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 28, .. }), "{err}");
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            LatentGrid::<f64>::read_checkpoint(&mut bad.as_slice()),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn works_in_single_precision() {
        let g = LatentGrid::<f32>::new(5, 3, 1.0, 2).unwrap();
        let f = g.query(&CanonPoint::new(0.5f32, 0.5, 0.5).unwrap()).unwrap();
        let c = g.voxel_index(2, 2, 2);
        for ch in 0..3 {
            assert_eq!(f[ch], g.feature(c, ch));
        }
    }
}
