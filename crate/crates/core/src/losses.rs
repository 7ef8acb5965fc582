//! Training objectives: cross-image contrastive loss on queried features,
//! L1 landmark anchoring in the cube, and per-pixel segmentation
//! cross-entropy, combined into the weighted total.
//!
//! Every loss returns its value together with the analytic gradient of that
//! value with respect to its inputs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::CanonPoint;
use crate::scalar::Real;

/// Row-major `count × dim` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch<T> {
    count: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureBatch<T> {
    pub fn new(count: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != count * dim {
            return Err(Error::arg(format!(
                "feature batch has {} values, expected {count}x{dim}",
                data.len()
            )));
        }
        Ok(Self { count, dim, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::arg("ragged feature rows"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn zeros(count: usize, dim: usize) -> Self {
        Self {
            count,
            dim,
            data: vec![T::zero(); count * dim],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// Loss value with the gradient for each of two feature batches.
#[derive(Clone, Debug)]
pub struct ContrastiveOutput<T> {
    pub loss: T,
    pub grad_a: FeatureBatch<T>,
    pub grad_b: FeatureBatch<T>,
}

fn normalize_rows<T: Real>(f: &FeatureBatch<T>) -> Result<(FeatureBatch<T>, Vec<T>)> {
    let mut out = f.clone();
    let mut norms = Vec::with_capacity(f.count);
    for i in 0..f.count {
        let norm = f.row(i).iter().map(|&x| x * x).sum::<T>().sqrt();
        if !(norm >= T::lit(1e-12)) {
            return Err(Error::DegenerateFeature {
                row: i,
                norm: norm.as_f64(),
            });
        }
        out.row_mut(i).iter_mut().for_each(|x| *x /= norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// `‖norm(a)·norm(b)ᵀ − I‖_F` where `norm` L2-normalizes each row.
pub fn contrastive_loss<T: Real>(a: &FeatureBatch<T>, b: &FeatureBatch<T>) -> Result<ContrastiveOutput<T>> {
    if a.count != b.count || a.dim != b.dim {
        return Err(Error::arg(format!(
            "contrastive batches differ in shape: {}x{} vs {}x{}",
            a.count, a.dim, b.count, b.dim
        )));
    }
    if a.count < 2 {
        return Err(Error::arg("contrastive loss needs at least 2 pairs"));
    }
    let p = a.count;
    let (na, norms_a) = normalize_rows(a)?;
    let (nb, norms_b) = normalize_rows(b)?;

    // residual R = G - I with G_ij = <na_i, nb_j>
    let mut resid = vec![T::zero(); p * p];
    for i in 0..p {
        let ra = na.row(i);
        for j in 0..p {
            let g: T = ra.iter().zip(nb.row(j)).map(|(&x, &y)| x * y).sum();
            resid[i * p + j] = if i == j { g - T::one() } else { g };
        }
    }
    let loss = resid.iter().map(|&r| r * r).sum::<T>().sqrt();

    let mut grad_na = FeatureBatch::zeros(p, a.dim);
    let mut grad_nb = FeatureBatch::zeros(p, a.dim);
    if loss > T::zero() {
        for i in 0..p {
            for j in 0..p {
                let s = resid[i * p + j] / loss;
                if s == T::zero() {
                    continue;
                }
                for k in 0..a.dim {
                    grad_na.data[i * a.dim + k] += s * nb.data[j * a.dim + k];
                    grad_nb.data[j * a.dim + k] += s * na.data[i * a.dim + k];
                }
            }
        }
    }
    Ok(ContrastiveOutput {
        loss,
        grad_a: normalization_backward(&na, &norms_a, &grad_na),
        grad_b: normalization_backward(&nb, &norms_b, &grad_nb),
    })
}

/// Gradient through `x ↦ x / ‖x‖` given the normalized rows and their norms.
fn normalization_backward<T: Real>(
    normalized: &FeatureBatch<T>,
    norms: &[T],
    upstream: &FeatureBatch<T>,
) -> FeatureBatch<T> {
    let mut out = FeatureBatch::zeros(normalized.count, normalized.dim);
    for i in 0..normalized.count {
        let n = normalized.row(i);
        let g = upstream.row(i);
        let proj: T = n.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for (o, (&gk, &nk)) in out.row_mut(i).iter_mut().zip(g.iter().zip(n)) {
            *o = (gk - nk * proj) / norms[i];
        }
    }
    out
}

/// Predefined anchor locations for the supervised landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkAnchors<T> {
    points: Vec<CanonPoint<T>>,
}

impl<T: Real> LandmarkAnchors<T> {
    pub fn new(points: Vec<CanonPoint<T>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::arg("no landmark anchors"));
        }
        if let Some(p) = points.iter().find(|p| !p.in_cube()) {
            return Err(Error::OutOfCube {
                u: p.u.as_f64(),
                v: p.v.as_f64(),
                w: p.w.as_f64(),
            });
        }
        for i in 0..points.len() {
            for j in 0..i {
                if points[i] == points[j] {
                    return Err(Error::arg(format!("anchors {j} and {i} coincide")));
                }
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, k: usize) -> &CanonPoint<T> {
        &self.points[k]
    }

    pub fn points(&self) -> &[CanonPoint<T>] {
        &self.points
    }
}

#[inline]
fn sign_or_zero<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `Σ_k ‖predicted_k − anchor_k‖₁`, with gradient with respect to the
/// predictions. The subgradient at zero is zero.
pub fn landmark_loss<T: Real>(predicted: &[[T; 3]], anchors: &[CanonPoint<T>]) -> Result<(T, Vec<[T; 3]>)> {
    if predicted.len() != anchors.len() {
        return Err(Error::arg(format!(
            "{} predicted landmarks for {} anchors",
            predicted.len(),
            anchors.len()
        )));
    }
    let mut loss = T::zero();
    let mut grads = Vec::with_capacity(predicted.len());
    for (p, a) in predicted.iter().zip(anchors) {
        let a = a.to_array();
        let mut g = [T::zero(); 3];
        for c in 0..3 {
            let d = p[c] - a[c];
            loss += d.abs();
            g[c] = sign_or_zero(d);
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Linear (1×1 convolution) classifier over per-pixel features.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationHead<T> {
    classes: usize,
    dim: usize,
    /// `classes × dim`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> SegmentationHead<T> {
    pub fn new(classes: usize, dim: usize, weight: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::arg("segmentation head needs at least 2 classes"));
        }
        if weight.len() != classes * dim || bias.len() != classes {
            return Err(Error::arg("segmentation head parameter shape mismatch"));
        }
        Ok(Self {
            classes,
            dim,
            weight,
            bias,
        })
    }

    pub fn zeros(classes: usize, dim: usize) -> Result<Self> {
        Self::new(classes, dim, vec![T::zero(); classes * dim], vec![T::zero(); classes])
    }

    /// Uniform `±1/√dim` weights, zero bias.
    pub fn random<R: Rng>(classes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let weight = (0..classes * dim)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        Self::new(classes, dim, weight, vec![T::zero(); classes])
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn param_count(&self) -> usize {
        self.classes * (self.dim + 1)
    }

    /// Parameters flattened as weight then bias.
    pub fn flat(&self) -> Vec<T> {
        let mut v = self.weight.clone();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        let nw = self.weight.len();
        self.weight.copy_from_slice(&flat[..nw]);
        self.bias.copy_from_slice(&flat[nw..]);
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|x| x.is_finite())
    }
}

/// `logits = feats · weightᵀ + bias`, one row per pixel.
pub fn seg_forward<T: Real>(head: &SegmentationHead<T>, feats: &FeatureBatch<T>) -> Result<FeatureBatch<T>> {
    if feats.dim != head.dim {
        return Err(Error::arg(format!(
            "features have dim {}, head expects {}",
            feats.dim, head.dim
        )));
    }
    let mut out = FeatureBatch::zeros(feats.count, head.classes);
    for i in 0..feats.count {
        let f = feats.row(i);
        for (c, o) in out.row_mut(i).iter_mut().enumerate() {
            let w = &head.weight[c * head.dim..(c + 1) * head.dim];
            *o = head.bias[c] + w.iter().zip(f).map(|(&a, &b)| a * b).sum::<T>();
        }
    }
    Ok(out)
}

/// Backward pass of [`seg_forward`]: accumulates parameter gradients into
/// `grad_head` (weight then bias) and returns the gradient on the features.
pub fn seg_backward<T: Real>(
    head: &SegmentationHead<T>,
    feats: &FeatureBatch<T>,
    grad_logits: &FeatureBatch<T>,
    grad_head: &mut [T],
) -> FeatureBatch<T> {
    let nw = head.classes * head.dim;
    let mut grad_feats = FeatureBatch::zeros(feats.count, head.dim);
    for i in 0..feats.count {
        let f = feats.row(i);
        let gl = grad_logits.row(i);
        for (c, &g) in gl.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            grad_head[nw + c] += g;
            let w = &head.weight[c * head.dim..(c + 1) * head.dim];
            for k in 0..head.dim {
                grad_head[c * head.dim + k] += g * f[k];
                grad_feats.data[i * head.dim + k] += g * w[k];
            }
        }
    }
    grad_feats
}

/// Mean softmax cross-entropy over rows, with gradient `(softmax − onehot)/P`.
pub fn segmentation_loss<T: Real>(logits: &FeatureBatch<T>, classes: &[usize]) -> Result<(T, FeatureBatch<T>)> {
    if classes.len() != logits.count {
        return Err(Error::arg(format!(
            "{} labels for {} logit rows",
            classes.len(),
            logits.count
        )));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= logits.dim) {
        return Err(Error::arg(format!(
            "class index {bad} out of range for {} classes",
            logits.dim
        )));
    }
    let p = T::from_usize(logits.count.max(1)).unwrap();
    let mut grad = FeatureBatch::zeros(logits.count, logits.dim);
    let mut loss = T::zero();
    for (i, &cls) in classes.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&x| (x - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[cls];
        for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
            let soft = (row[k] - lse).exp();
            *g = (soft - if k == cls { T::one() } else { T::zero() }) / p;
        }
    }
    Ok((loss / p, grad))
}

/// Weights of the auxiliary terms in the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_lmks: f64,
    pub lambda_segm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_lmks: 50.0,
            lambda_segm: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lmks >= 0.0 && self.lambda_segm >= 0.0) {
            return Err(Error::arg("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// `contr + λ_lmks·(lmk1 + lmk2) + λ_segm·(seg1 + seg2)`.
pub fn total_loss<T: Real>(contr: T, lmk1: T, lmk2: T, seg1: T, seg2: T, w: &LossWeights) -> T {
    contr + T::lit(w.lambda_lmks) * (lmk1 + lmk2) + T::lit(w.lambda_segm) * (seg1 + seg2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, p: usize, d: usize) -> FeatureBatch<f64> {
        FeatureBatch::new(p, d, (0..p * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Scalar oracle: explicit cosine per pair.
    fn oracle_loss(a: &FeatureBatch<f64>, b: &FeatureBatch<f64>) -> f64 {
        let p = a.count();
        let mut acc = 0.0;
        for i in 0..p {
            for j in 0..p {
                let (ra, rb) = (a.row(i), b.row(j));
                let mut dot = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for k in 0..a.dim() {
                    dot += ra[k] * rb[k];
                    na += ra[k] * ra[k];
                    nb += rb[k] * rb[k];
                }
                let cos = dot / (na.sqrt() * nb.sqrt());
                let t = if i == j { 1.0 } else { 0.0 };
                acc += (cos - t) * (cos - t);
            }
        }
        acc.sqrt()
    }

    #[test]
    fn identity_cross_gram_is_zero() {
        let d = 4;
        let rows: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let f = FeatureBatch::from_rows(&rows).unwrap();
        let out = contrastive_loss(&f, &f).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_a.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn all_equal_rows_give_sqrt_p_p_minus_one() {
        for p in [2usize, 5, 17] {
            let f = FeatureBatch::new(p, 3, [0.6, 0.0, 0.8].repeat(p)).unwrap();
            let out = contrastive_loss(&f, &f).unwrap();
            let expect = ((p * (p - 1)) as f64).sqrt();
            assert!((out.loss - expect).abs() < 1e-12, "p={p}");
        }
    }

    #[test]
    fn contrastive_matches_scalar_oracle_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_batch(&mut rng, 5, 3);
        let b = random_batch(&mut rng, 5, 3);
        let out = contrastive_loss(&a, &b).unwrap();
        assert!((out.loss - oracle_loss(&a, &b)).abs() < 1e-12);
        let h = 1e-6;
        for (which, grad) in [(0, &out.grad_a), (1, &out.grad_b)] {
            for idx in 0..15 {
                let mut hi = [a.clone(), b.clone()];
                let mut lo = [a.clone(), b.clone()];
                hi[which].data[idx] += h;
                lo[which].data[idx] -= h;
                let fd = (oracle_loss(&hi[0], &hi[1]) - oracle_loss(&lo[0], &lo[1])) / (2.0 * h);
                let g = grad.as_slice()[idx];
                let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
                assert!(rel < 1e-6, "batch {which} idx {idx}: fd {fd} analytic {g}");
            }
        }
    }

    #[test]
    fn contrastive_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_batch(&mut rng, 6, 4);
        let b = random_batch(&mut rng, 6, 4);
        let ab = contrastive_loss(&a, &b).unwrap();
        let ba = contrastive_loss(&b, &a).unwrap();
        assert!((ab.loss - ba.loss).abs() < 1e-13);
    }

    #[test]
    fn zero_row_is_an_error() {
        let a = FeatureBatch::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = FeatureBatch::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            contrastive_loss(&a, &b),
            Err(Error::DegenerateFeature { row: 1, .. })
        ));
        let c = FeatureBatch::new(3, 2, vec![1.0; 6]).unwrap();
        assert!(contrastive_loss(&a, &c).is_err());
    }

    fn cp(u: f64, v: f64, w: f64) -> CanonPoint<f64> {
        CanonPoint::new(u, v, w).unwrap()
    }

    #[test]
    fn landmark_basics() {
        let anchors = vec![cp(0.2, 0.3, 0.4), cp(0.5, 0.5, 0.5)];
        let pred: Vec<[f64; 3]> = anchors.iter().map(|a| a.to_array()).collect();
        let (l, g) = landmark_loss(&pred, &anchors).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().flatten().all(|&x| x == 0.0));

        let (l, g) = landmark_loss(&[[0.3, 0.3, 0.4]], &anchors[..1]).unwrap();
        assert!((l - 0.1).abs() < 1e-15);
        assert_eq!(g[0], [1.0, 0.0, 0.0]);

        assert!(landmark_loss(&pred[..1], &anchors).is_err());
    }

    #[test]
    fn landmark_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let anchors: Vec<_> = (0..70)
            .map(|_| cp(rng.random(), rng.random(), rng.random()))
            .collect();
        let pred: Vec<[f64; 3]> = (0..70).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let (l, g) = landmark_loss(&pred, &anchors).unwrap();
        let mut expect = 0.0;
        for k in 0..70 {
            let a = anchors[k].to_array();
            for c in 0..3 {
                expect += (pred[k][c] - a[c]).abs();
                assert_eq!(g[k][c], (pred[k][c] - a[c]).signum());
            }
        }
        assert_eq!(l, expect);
    }

    #[test]
    fn anchors_validated() {
        assert!(LandmarkAnchors::new(vec![cp(0.1, 0.1, 0.1), cp(0.1, 0.1, 0.1)]).is_err());
        assert!(LandmarkAnchors::<f64>::new(vec![]).is_err());
        assert!(LandmarkAnchors::new(vec![cp(0.1, 0.1, 0.1), cp(0.2, 0.1, 0.1)]).is_ok());
    }

    #[test]
    fn seg_forward_cases() {
        let feats = FeatureBatch::new(2, 3, vec![0.1, -0.2, 0.3, 1.0, 2.0, 3.0]).unwrap();
        let zero = SegmentationHead::zeros(4, 3).unwrap();
        assert!(seg_forward(&zero, &feats).unwrap().as_slice().iter().all(|&x| x == 0.0));

        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let id = SegmentationHead::new(3, 3, eye, vec![0.0; 3]).unwrap();
        assert_eq!(seg_forward(&id, &feats).unwrap(), feats);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = SegmentationHead::<f64>::random(6, 3, &mut rng).unwrap();
        let head = SegmentationHead::new(6, 3, head.weight.clone(), (0..6).map(|i| i as f64 * 0.1).collect()).unwrap();
        let out = seg_forward(&head, &feats).unwrap();
        for i in 0..2 {
            for c in 0..6 {
                let mut acc = head.bias[c];
                for k in 0..3 {
                    acc += feats.row(i)[k] * head.weight[c * 3 + k];
                }
                assert!((out.row(i)[c] - acc).abs() < 1e-15);
            }
        }
        let wrong = FeatureBatch::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(seg_forward(&head, &wrong).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut logits = FeatureBatch::zeros(3, 6);
        for (i, c) in [0usize, 3, 5].into_iter().enumerate() {
            logits.row_mut(i)[c] = 100.0;
        }
        let (l, _) = segmentation_loss(&logits, &[0, 3, 5]).unwrap();
        assert!(l < 1e-30);

        let uniform = FeatureBatch::<f64>::zeros(4, 6);
        let (l, g) = segmentation_loss(&uniform, &[0, 1, 2, 5]).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-15);
        for i in 0..4 {
            assert!(g.row(i).iter().sum::<f64>().abs() < 1e-12);
        }
        assert!(segmentation_loss(&uniform, &[0, 1, 2, 6]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random_batch(&mut rng, 7, 6);
        let labels: Vec<usize> = (0..7).map(|_| rng.random_range(0..6)).collect();
        let (_, g) = segmentation_loss(&logits, &labels).unwrap();
        let h = 1e-6;
        for idx in 0..42 {
            let mut hi = logits.clone();
            let mut lo = logits.clone();
            hi.data[idx] += h;
            lo.data[idx] -= h;
            let fd = (segmentation_loss(&hi, &labels).unwrap().0 - segmentation_loss(&lo, &labels).unwrap().0)
                / (2.0 * h);
            let a = g.as_slice()[idx];
            assert!((fd - a).abs() / fd.abs().max(a.abs()).max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.0, &w), 0.0);
        assert!((total_loss(1.0f64, 0.1, 0.1, 0.5, 0.5, &w) - 12.0).abs() < 1e-12);
        let w = LossWeights {
            lambda_lmks: 3.5,
            lambda_segm: 0.25,
        };
        let v = [0.7, 0.11, 0.23, 1.9, 0.4];
        let direct = v[0] + 3.5 * (v[1] + v[2]) + 0.25 * (v[3] + v[4]);
        assert_eq!(total_loss(v[0], v[1], v[2], v[3], v[4], &w), direct);
    }
}
