//! Correspondence tools over embedding maps: dense nearest-neighbor warping,
//! point querying, region selection and pixel-error metrics.
//!
//! All searches return the minimum squared Euclidean distance; equal
//! distances go to the lowest linear pixel index.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::binio::{put_f32, put_i32, put_u32, OffsetReader};
use crate::error::{Error, Result};
use crate::grid::CanonPoint;
use crate::image::RgbImage;
use crate::synth::sequence::TrackPairs;
use crate::uvw::UvwMap;

pub const CORRESPONDENCE_MAGIC: &[u8; 7] = b"DMCOR01";

/// A volume of the unit cube.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegionSpec {
    Box { min: [f64; 3], max: [f64; 3] },
    Ball { center: [f64; 3], radius: f64 },
}

impl RegionSpec {
    pub fn whole_cube() -> Self {
        RegionSpec::Box {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |p: &[f64; 3]| p.iter().all(|v| (0.0..=1.0).contains(v));
        match self {
            RegionSpec::Box { min, max } => {
                if !inside(min) || !inside(max) || (0..3).any(|a| min[a] > max[a]) {
                    return Err(Error::arg("box region must be ordered and inside the cube"));
                }
            }
            RegionSpec::Ball { center, radius } => {
                if !(*radius >= 0.0) || (0..3).any(|a| center[a] - radius < 0.0 || center[a] + radius > 1.0) {
                    return Err(Error::arg("ball region must lie inside the cube"));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, c: &[f64; 3]) -> bool {
        match self {
            RegionSpec::Box { min, max } => (0..3).all(|a| min[a] <= c[a] && c[a] <= max[a]),
            RegionSpec::Ball { center, radius } => sq_dist(center, c) <= radius * radius,
        }
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-pixel embedding vectors of any dimension with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl EmbeddingMap {
    pub fn new(width: usize, height: usize, dim: usize) -> Self {
        Self {
            width,
            height,
            dim,
            values: vec![0.0; width * height * dim],
            valid: vec![false; width * height],
        }
    }

    pub fn from_uvw(map: &UvwMap) -> Self {
        Self {
            width: map.width,
            height: map.height,
            dim: 3,
            values: map.coords.iter().flatten().copied().collect(),
            valid: map.valid.clone(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Exact nearest-neighbor index over 3-vectors using uniform bins and ring
/// expansion.
#[derive(Clone, Debug)]
pub struct BinnedIndex {
    points: Vec<[f64; 3]>,
    ids: Vec<usize>,
    lo: [f64; 3],
    cell: f64,
    bins: usize,
    /// `starts[b]..starts[b + 1]` indexes `order` for bin `b`.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl BinnedIndex {
    /// Builds an index over `points` labelled by `ids` (ascending ids give
    /// the lowest-index tie rule).
    pub fn new(points: Vec<[f64; 3]>, ids: Vec<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyForeground);
        }
        if points.len() != ids.len() {
            return Err(Error::arg("points and ids differ in length"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let bins = ((points.len() as f64).cbrt().ceil() as usize).clamp(1, 64);
        let cell = if extent > 0.0 { extent / bins as f64 } else { 1.0 };
        let mut index = Self {
            points,
            ids,
            lo,
            cell,
            bins,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let keys: Vec<usize> = index.points.iter().map(|p| index.bin_of(p)).collect();
        let mut counts = vec![0usize; bins * bins * bins + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for b in 0..bins * bins * bins {
            counts[b + 1] += counts[b];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; keys.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        index.starts = counts;
        index.order = order;
        Ok(index)
    }

    pub fn from_map(map: &UvwMap) -> Result<Self> {
        let ids: Vec<usize> = map.valid_indices().collect();
        let points = ids.iter().map(|&i| map.coords[i]).collect();
        Self::new(points, ids)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn cell_coords(&self, p: &[f64; 3]) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let t = ((p[a] - self.lo[a]) / self.cell).floor();
            c[a] = if t.is_nan() || t < 0.0 {
                0
            } else {
                (t as usize).min(self.bins - 1)
            };
        }
        c
    }

    fn bin_of(&self, p: &[f64; 3]) -> usize {
        let c = self.cell_coords(p);
        (c[2] * self.bins + c[1]) * self.bins + c[0]
    }

    /// `(id, squared distance)` of the nearest stored point.
    pub fn nearest(&self, q: &[f64; 3]) -> (usize, f64) {
        let c = self.cell_coords(q);
        let n = self.bins as isize;
        let mut best = (usize::MAX, f64::INFINITY);
        for r in 0..self.bins as isize {
            for z in (c[2] as isize - r).max(0)..=(c[2] as isize + r).min(n - 1) {
                for y in (c[1] as isize - r).max(0)..=(c[1] as isize + r).min(n - 1) {
                    let on_shell_yz = (z - c[2] as isize).abs() == r || (y - c[1] as isize).abs() == r;
                    let xs: Vec<isize> = if on_shell_yz {
                        ((c[0] as isize - r).max(0)..=(c[0] as isize + r).min(n - 1)).collect()
                    } else {
                        [c[0] as isize - r, c[0] as isize + r]
                            .into_iter()
                            .filter(|x| (0..n).contains(x))
                            .collect()
                    };
                    for x in xs {
                        let b = ((z * n + y) * n + x) as usize;
                        for &k in &self.order[self.starts[b]..self.starts[b + 1]] {
                            let d = sq_dist(&self.points[k], q);
                            let id = self.ids[k];
                            if d < best.1 || (d == best.1 && id < best.0) {
                                best = (id, d);
                            }
                        }
                        if r == 0 {
                            break;
                        }
                    }
                }
            }
            // every unexplored point is at least r cells away along some axis
            let bound = r as f64 * self.cell * (1.0 - 1e-9);
            if best.1 < bound * bound {
                break;
            }
        }
        best
    }
}

/// Brute-force nearest neighbor with the lowest-index tie rule.
pub fn nearest_brute(map: &EmbeddingMap, q: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..map.valid.len() {
        if !map.valid[i] {
            continue;
        }
        let d = sq_dist(map.get(i), q);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best
}

/// For each valid target pixel, the matched source pixel and the embedding
/// distance.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceField {
    pub width: usize,
    pub height: usize,
    pub matches: Vec<Option<([usize; 2], f64)>>,
}

impl CorrespondenceField {
    pub fn get(&self, x: usize, y: usize) -> Option<([usize; 2], f64)> {
        self.matches[y * self.width + x]
    }

    pub fn matched_count(&self) -> usize {
        self.matches.iter().filter(|m| m.is_some()).count()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CORRESPONDENCE_MAGIC)?;
        put_u32(w, self.width as u32)?;
        put_u32(w, self.height as u32)?;
        for m in &self.matches {
            match m {
                Some(([sx, sy], d)) => {
                    put_i32(w, *sx as i32)?;
                    put_i32(w, *sy as i32)?;
                    put_f32(w, *d as f32)?;
                }
                None => {
                    put_i32(w, -1)?;
                    put_i32(w, -1)?;
                    put_f32(w, 0.0)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut rd = OffsetReader::new(r, "correspondence file");
        rd.expect_magic(CORRESPONDENCE_MAGIC)?;
        let width = rd.u32()? as usize;
        let height = rd.u32()? as usize;
        let mut matches = Vec::with_capacity(width * height);
        for _ in 0..width * height {
            let at = rd.offset();
            let (sx, sy, d) = (rd.i32()?, rd.i32()?, rd.f32()?);
            matches.push(match (sx, sy) {
                (-1, -1) => None,
                (x, y) if x >= 0 && y >= 0 => Some(([x as usize, y as usize], d as f64)),
                _ => return Err(Error::format("correspondence file", at, "negative source pixel")),
            });
        }
        rd.expect_eof()?;
        Ok(Self { width, height, matches })
    }
}

/// Target→source nearest neighbors in embedding space. Uses the binned
/// index for 3-vectors and a parallel exhaustive scan otherwise.
pub fn match_embeddings(source: &EmbeddingMap, target: &EmbeddingMap) -> Result<CorrespondenceField> {
    if source.dim != target.dim {
        return Err(Error::arg("source and target embeddings differ in dimension"));
    }
    if source.valid_count() == 0 {
        return Err(Error::EmptyForeground);
    }
    let sw = source.width;
    let matches: Vec<Option<([usize; 2], f64)>> = if source.dim == 3 {
        let ids: Vec<usize> = (0..source.valid.len()).filter(|&i| source.valid[i]).collect();
        let points = ids
            .iter()
            .map(|&i| {
                let v = source.get(i);
                [v[0], v[1], v[2]]
            })
            .collect();
        let index = BinnedIndex::new(points, ids)?;
        (0..target.valid.len())
            .into_par_iter()
            .map(|i| {
                target.valid[i].then(|| {
                    let v = target.get(i);
                    let (s, d) = index.nearest(&[v[0], v[1], v[2]]);
                    ([s % sw, s / sw], d.sqrt())
                })
            })
            .collect()
    } else {
        (0..target.valid.len())
            .into_par_iter()
            .map(|i| {
                if !target.valid[i] {
                    return None;
                }
                nearest_brute(source, target.get(i)).map(|(s, d)| ([s % sw, s / sw], d.sqrt()))
            })
            .collect()
    };
    Ok(CorrespondenceField {
        width: target.width,
        height: target.height,
        matches,
    })
}

/// Exhaustive reference for [`match_embeddings`].
pub fn match_embeddings_brute(source: &EmbeddingMap, target: &EmbeddingMap) -> Result<CorrespondenceField> {
    if source.valid_count() == 0 {
        return Err(Error::EmptyForeground);
    }
    let sw = source.width;
    let matches = (0..target.valid.len())
        .map(|i| {
            if !target.valid[i] {
                return None;
            }
            nearest_brute(source, target.get(i)).map(|(s, d)| ([s % sw, s / sw], d.sqrt()))
        })
        .collect();
    Ok(CorrespondenceField {
        width: target.width,
        height: target.height,
        matches,
    })
}

/// Copies source colors onto the target through the UVW nearest-neighbor
/// field. Unmatched target pixels stay black.
pub fn nn_warp(source: &UvwMap, source_rgb: &RgbImage, target: &UvwMap) -> Result<(RgbImage, CorrespondenceField)> {
    if source_rgb.width != source.width || source_rgb.height != source.height {
        return Err(Error::arg("source image and map sizes differ"));
    }
    let field = match_embeddings(&EmbeddingMap::from_uvw(source), &EmbeddingMap::from_uvw(target))?;
    Ok((warp_colors(source_rgb, &field), field))
}

pub fn warp_colors(source_rgb: &RgbImage, field: &CorrespondenceField) -> RgbImage {
    let mut out = RgbImage::new(field.width, field.height);
    for (i, m) in field.matches.iter().enumerate() {
        if let Some(([sx, sy], _)) = m {
            out.data[i] = source_rgb.get(*sx, *sy);
        }
    }
    out
}

/// Mean canonical location of annotated pixels over several maps, clamped to
/// the cube.
pub fn query_point(refs: &[(&UvwMap, [usize; 2])]) -> Result<CanonPoint<f64>> {
    if refs.is_empty() {
        return Err(Error::arg("no reference annotations"));
    }
    let mut sum = [0.0; 3];
    for (map, [x, y]) in refs {
        if *x >= map.width || *y >= map.height {
            return Err(Error::arg(format!("annotation ({x}, {y}) outside the map")));
        }
        let c = map
            .get(*x, *y)
            .ok_or_else(|| Error::arg(format!("annotation ({x}, {y}) is on an invalid pixel")))?;
        for a in 0..3 {
            sum[a] += c[a];
        }
    }
    Ok(CanonPoint::clamped(sum.map(|s| s / refs.len() as f64)))
}

/// The valid pixel whose embedding is nearest to `target` and the distance.
pub fn find_point(map: &UvwMap, target: &CanonPoint<f64>) -> Result<([usize; 2], f64)> {
    let (i, d) = nearest_brute(&EmbeddingMap::from_uvw(map), &target.to_array()).ok_or(Error::EmptyForeground)?;
    Ok(([i % map.width, i / map.width], d.sqrt()))
}

/// Valid pixels whose embedding lies in `region`.
pub fn region_select(map: &UvwMap, region: &RegionSpec) -> Vec<bool> {
    map.coords
        .iter()
        .zip(&map.valid)
        .map(|(c, &v)| v && region.contains(c))
        .collect()
}

/// Ball around the mean of all annotated points, with the 90th-percentile
/// (nearest rank) distance as radius.
pub fn region_from_votes(clusters: &[Vec<[f64; 3]>]) -> Result<RegionSpec> {
    let points: Vec<&[f64; 3]> = clusters.iter().flatten().collect();
    if points.is_empty() {
        return Err(Error::arg("no votes"));
    }
    let mut center = [0.0; 3];
    for p in &points {
        for a in 0..3 {
            center[a] += p[a] / points.len() as f64;
        }
    }
    let mut dists: Vec<f64> = points.iter().map(|p| sq_dist(&p[..], &center).sqrt()).collect();
    dists.sort_by(f64::total_cmp);
    let rank = ((0.9 * dists.len() as f64).ceil() as usize).clamp(1, dists.len());
    Ok(RegionSpec::Ball {
        center,
        radius: dists[rank - 1],
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

/// Pixel error of predicted matches against ground-truth pairs, where
/// `pixels_a` lie in the target and `pixels_b` in the source.
pub fn match_metrics(field: &CorrespondenceField, gt: &TrackPairs) -> Result<MatchMetrics> {
    if gt.is_empty() {
        return Err(Error::arg("no ground-truth pairs"));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for (a, b) in gt.pixels_a.iter().zip(&gt.pixels_b) {
        if a[0] >= field.width || a[1] >= field.height {
            return Err(Error::arg(format!("pair pixel {a:?} outside the field")));
        }
        let ([sx, sy], _) = field
            .get(a[0], a[1])
            .ok_or_else(|| Error::arg(format!("target pixel {a:?} has no match")))?;
        let e = ((sx as f64 - b[0] as f64).powi(2) + (sy as f64 - b[1] as f64).powi(2)).sqrt();
        sum += e;
        sum_sq += e * e;
    }
    let n = gt.len() as f64;
    Ok(MatchMetrics {
        mae: sum / n,
        rmse: (sum_sq / n).sqrt(),
        count: gt.len(),
    })
}

/// Fraction of matched target pixels whose forward match maps back within
/// `radius` pixels under `backward`.
pub fn cycle_consistency(forward: &CorrespondenceField, backward: &CorrespondenceField, radius: f64) -> f64 {
    let mut total = 0usize;
    let mut ok = 0usize;
    for (i, m) in forward.matches.iter().enumerate() {
        let Some(([sx, sy], _)) = m else { continue };
        total += 1;
        if let Some(([bx, by], _)) = backward.get(*sx, *sy) {
            let (x, y) = (i % forward.width, i / forward.width);
            if ((bx as f64 - x as f64).powi(2) + (by as f64 - y as f64).powi(2)).sqrt() <= radius {
                ok += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        ok as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize, shift: usize) -> UvwMap {
        let mut m = UvwMap::new(w, h);
        for y in 0..h {
            for x in shift..w {
                m.set(x, y, [(x - shift) as f64 / w as f64, y as f64 / h as f64, 0.5]);
            }
        }
        m
    }

    #[test]
    fn self_match_is_identity() {
        let m = ramp(20, 12, 0);
        let rgb = RgbImage::new(20, 12);
        let (_, f) = nn_warp(&m, &rgb, &m).unwrap();
        for y in 0..12 {
            for x in 0..20 {
                assert_eq!(f.get(x, y), Some(([x, y], 0.0)));
            }
        }
    }

    #[test]
    fn shifted_ramp_gives_uniform_shift() {
        let src = ramp(20, 12, 0);
        let tgt = ramp(20, 12, 1);
        let (_, f) = nn_warp(&src, &RgbImage::new(20, 12), &tgt).unwrap();
        for y in 0..12 {
            assert_eq!(f.get(0, y), None);
            for x in 1..20 {
                assert_eq!(f.get(x, y).unwrap().0, [x - 1, y]);
            }
        }
    }

    #[test]
    fn binned_search_equals_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut src = UvwMap::new(30, 30);
        let mut tgt = UvwMap::new(30, 30);
        for i in 0..900 {
            if rng.random_bool(0.7) {
                // coarse values create many exact ties
                src.coords[i] = [0; 3].map(|_| rng.random_range(0..6) as f64 / 5.0);
                src.valid[i] = true;
            }
            if rng.random_bool(0.7) {
                tgt.coords[i] = [0; 3].map(|_| rng.random::<f64>());
                tgt.valid[i] = true;
            }
        }
        let (s, t) = (EmbeddingMap::from_uvw(&src), EmbeddingMap::from_uvw(&tgt));
        assert_eq!(match_embeddings(&s, &t).unwrap(), match_embeddings_brute(&s, &t).unwrap());
    }

    #[test]
    fn empty_source_is_an_error() {
        let m = UvwMap::new(4, 4);
        assert!(matches!(
            nn_warp(&m, &RgbImage::new(4, 4), &ramp(4, 4, 0)),
            Err(Error::EmptyForeground)
        ));
    }

    #[test]
    fn point_query_and_find() {
        let m = ramp(10, 10, 0);
        assert_eq!(query_point(&[(&m, [3, 4])]).unwrap().to_array(), [0.3, 0.4, 0.5]);
        let mid = query_point(&[(&m, [2, 2]), (&m, [6, 4])]).unwrap().to_array();
        assert!((mid[0] - 0.4).abs() < 1e-15 && (mid[1] - 0.3).abs() < 1e-15);
        assert!(query_point(&[]).is_err());
        let (p, d) = find_point(&m, &CanonPoint::new(0.7, 0.2, 0.5).unwrap()).unwrap();
        assert_eq!(p, [7, 2]);
        assert!(d < 1e-15);
        let mut lone = UvwMap::new(5, 5);
        lone.set(4, 1, [0.9, 0.9, 0.9]);
        assert_eq!(find_point(&lone, &CanonPoint::new(0.0, 0.0, 0.0).unwrap()).unwrap().0, [4, 1]);
    }

    #[test]
    fn regions() {
        let m = ramp(10, 10, 3);
        assert_eq!(region_select(&m, &RegionSpec::whole_cube()), m.valid);
        let empty = RegionSpec::Ball {
            center: [0.9, 0.9, 0.05],
            radius: 0.0,
        };
        assert!(region_select(&m, &empty).iter().all(|&v| !v));
        let r = region_from_votes(&[vec![[0.4, 0.5, 0.5], [0.6, 0.5, 0.5]], vec![[0.5, 0.5, 0.5]]]).unwrap();
        match r {
            RegionSpec::Ball { center, radius } => {
                assert!((center[0] - 0.5).abs() < 1e-15);
                assert!((radius - 0.1).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
        assert!(RegionSpec::Ball {
            center: [0.05, 0.5, 0.5],
            radius: 0.1
        }
        .validate()
        .is_err());
    }

    #[test]
    fn metrics_examples() {
        let m = ramp(10, 10, 0);
        let (_, f) = nn_warp(&m, &RgbImage::new(10, 10), &m).unwrap();
        let mut gt = TrackPairs::default();
        gt.push([1, 1], [1, 1], 0);
        gt.push([5, 2], [5, 2], 1);
        let r = match_metrics(&f, &gt).unwrap();
        assert_eq!((r.mae, r.rmse), (0.0, 0.0));
        let mut off = TrackPairs::default();
        off.push([1, 1], [4, 5], 0);
        off.push([6, 6], [3, 2], 1);
        let r = match_metrics(&f, &off).unwrap();
        assert_eq!((r.mae, r.rmse), (5.0, 5.0));
        assert_eq!(cycle_consistency(&f, &f, 0.0), 1.0);
    }

    #[test]
    fn correspondence_file_round_trip() {
        let src = ramp(6, 5, 0);
        let (_, f) = nn_warp(&src, &RgbImage::new(6, 5), &ramp(6, 5, 2)).unwrap();
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 7 + 8 + 30 * 12);
        let back = CorrespondenceField::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.matches.len(), 30);
        for (a, b) in back.matches.iter().zip(&f.matches) {
            assert_eq!(a.map(|m| m.0), b.map(|m| m.0));
        }
        let err = CorrespondenceField::read_from(&buf[..20]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 19, .. }), "{err}");
    }
}
