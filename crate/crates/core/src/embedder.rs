//! Per-pixel embedding network: positional encoding, pixel color and a
//! local mean color through two tanh layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::matcher::EmbeddingMap;
use crate::scalar::Real;
use crate::uvw::UvwMap;

pub const DEFAULT_FREQUENCIES: usize = 6;
pub const DEFAULT_HIDDEN: usize = 64;

/// What the network emits per pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbedMode {
    /// Three logistic outputs: a point in the canonical cube, looked up in
    /// the latent grid.
    Canonical,
    /// The grid is bypassed and the network emits features directly.
    DirectFeature,
}

impl EmbedMode {
    pub fn flag(self) -> u32 {
        match self {
            EmbedMode::Canonical => 0,
            EmbedMode::DirectFeature => 1,
        }
    }

    pub fn from_flag(flag: u32) -> Option<Self> {
        match flag {
            0 => Some(EmbedMode::Canonical),
            1 => Some(EmbedMode::DirectFeature),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EmbedMode::Canonical => "canonical",
            EmbedMode::DirectFeature => "direct_feature",
        }
    }
}

impl std::str::FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(EmbedMode::Canonical),
            "direct_feature" => Ok(EmbedMode::DirectFeature),
            _ => Err(Error::arg(format!("unknown mode {s:?} (canonical | direct_feature)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub frequencies: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl Architecture {
    pub fn new(frequencies: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        if hidden == 0 || out_dim == 0 {
            return Err(Error::arg("hidden width and output size must be positive"));
        }
        if frequencies > 16 {
            return Err(Error::arg(format!("at most 16 frequencies, got {frequencies}")));
        }
        Ok(Self {
            frequencies,
            hidden,
            out_dim,
        })
    }

    /// Sine and cosine per frequency and axis, RGB, local mean RGB.
    pub fn input_dim(&self) -> usize {
        4 * self.frequencies + 6
    }

    fn layer_shapes(&self) -> [(usize, usize); 3] {
        [
            (self.hidden, self.input_dim()),
            (self.hidden, self.hidden),
            (self.out_dim, self.hidden),
        ]
    }

    /// `(weight offset, bias offset)` of each layer in the flat vector.
    fn offsets(&self) -> [(usize, usize); 3] {
        let mut at = 0;
        self.layer_shapes().map(|(rows, cols)| {
            let w = at;
            at += rows * cols;
            let b = at;
            at += rows;
            (w, b)
        })
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c + r).sum()
    }
}

/// MLP weights in declaration order `w1 b1 w2 b2 w3 b3`, each weight
/// row-major `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderParams<T> {
    arch: Architecture,
    mode: EmbedMode,
    pub values: Vec<T>,
}

/// Per-pixel activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct PixelCache<T> {
    input: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
    /// Network output after the logistic in canonical mode.
    pub output: Vec<T>,
}

impl<T: Real> EmbedderParams<T> {
    pub fn zeros(arch: Architecture, mode: EmbedMode) -> Self {
        Self {
            arch,
            mode,
            values: vec![T::zero(); arch.param_count()],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random(arch: Architecture, mode: EmbedMode, seed: u64) -> Self {
        let mut p = Self::zeros(arch, mode);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ((rows, cols), (w, _)) in arch.layer_shapes().into_iter().zip(arch.offsets()) {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            for x in &mut p.values[w..w + rows * cols] {
                *x = T::lit(rng.random_range(-limit..limit));
            }
        }
        p
    }

    pub fn from_values(arch: Architecture, mode: EmbedMode, values: Vec<T>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::arg(format!(
                "{} embedder values, architecture needs {}",
                values.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, mode, values })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn mode(&self) -> EmbedMode {
        self.mode
    }

    /// `true` for weight entries, `false` for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.values.len()];
        for ((rows, cols), (w, _)) in self.arch.layer_shapes().into_iter().zip(self.arch.offsets()) {
            mask[w..w + rows * cols].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    pub fn forward(&self, input: Vec<T>) -> PixelCache<T> {
        let [(w1, b1), (w2, b2), (w3, b3)] = self.arch.offsets();
        let [s1, s2, s3] = self.arch.layer_shapes();
        let h1 = dense(&self.values, w1, b1, s1, &input, true);
        let h2 = dense(&self.values, w2, b2, s2, &h1, true);
        let mut output = dense(&self.values, w3, b3, s3, &h2, false);
        if self.mode == EmbedMode::Canonical {
            output.iter_mut().for_each(|z| *z = logistic(*z));
        }
        PixelCache { input, h1, h2, output }
    }

    /// Accumulates parameter gradients for one pixel given the gradient on
    /// its output (after the logistic in canonical mode).
    pub fn backward(&self, cache: &PixelCache<T>, grad_output: &[T], grad: &mut [T]) {
        let [(w1, b1), (w2, b2), (w3, b3)] = self.arch.offsets();
        let [s1, s2, s3] = self.arch.layer_shapes();
        let dz: Vec<T> = match self.mode {
            EmbedMode::Canonical => cache
                .output
                .iter()
                .zip(grad_output)
                .map(|(&y, &g)| g * y * (T::one() - y))
                .collect(),
            EmbedMode::DirectFeature => grad_output.to_vec(),
        };
        let d2 = dense_backward(&self.values, w3, b3, s3, &cache.h2, &dz, grad);
        let d2: Vec<T> = d2.iter().zip(&cache.h2).map(|(&g, &h)| g * (T::one() - h * h)).collect();
        let d1 = dense_backward(&self.values, w2, b2, s2, &cache.h1, &d2, grad);
        let d1: Vec<T> = d1.iter().zip(&cache.h1).map(|(&g, &h)| g * (T::one() - h * h)).collect();
        dense_backward(&self.values, w1, b1, s1, &cache.input, &d1, grad);
    }
}

#[inline]
fn logistic<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

fn dense<T: Real>(p: &[T], w: usize, b: usize, (rows, cols): (usize, usize), x: &[T], act: bool) -> Vec<T> {
    (0..rows)
        .map(|r| {
            let row = &p[w + r * cols..w + (r + 1) * cols];
            let z = p[b + r] + row.iter().zip(x).map(|(&a, &v)| a * v).sum::<T>();
            if act {
                z.tanh()
            } else {
                z
            }
        })
        .collect()
}

/// Adds `dz xᵀ` and `dz` to the layer gradients, returns `Wᵀ dz`.
fn dense_backward<T: Real>(
    p: &[T],
    w: usize,
    b: usize,
    (rows, cols): (usize, usize),
    x: &[T],
    dz: &[T],
    grad: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); cols];
    for r in 0..rows {
        let g = dz[r];
        if g == T::zero() {
            continue;
        }
        grad[b + r] += g;
        let row = w + r * cols;
        for c in 0..cols {
            grad[row + c] += g * x[c];
            dx[c] += g * p[row + c];
        }
    }
    dx
}

/// Mean color over the 4×4 window `[x−2, x+1] × [y−2, y+1]`, clamped to
/// the image, for every pixel.
pub fn local_mean(image: &RgbImage) -> Vec<[f64; 3]> {
    let (w, h) = (image.width, image.height);
    (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let mut sum = [0.0; 3];
            let mut n = 0.0;
            for yy in y.saturating_sub(2)..(y + 2).min(h) {
                for xx in x.saturating_sub(2)..(x + 2).min(w) {
                    let c = image.get(xx, yy);
                    for k in 0..3 {
                        sum[k] += c[k] as f64;
                    }
                    n += 1.0;
                }
            }
            sum.map(|s| s / (255.0 * n))
        })
        .collect()
}

/// Network input for pixel `(x, y)`.
pub fn pixel_input<T: Real>(
    arch: &Architecture,
    image: &RgbImage,
    means: &[[f64; 3]],
    x: usize,
    y: usize,
) -> Vec<T> {
    let mut v = Vec::with_capacity(arch.input_dim());
    let pos = [
        (x as f64 + 0.5) / image.width as f64,
        (y as f64 + 0.5) / image.height as f64,
    ];
    for f in 0..arch.frequencies {
        let scale = std::f64::consts::PI * (1u32 << f) as f64;
        for p in pos {
            v.push(T::lit((scale * p).sin()));
            v.push(T::lit((scale * p).cos()));
        }
    }
    let c = image.get(x, y);
    v.extend(c.iter().map(|&c| T::lit(c as f64 / 255.0)));
    v.extend(means[y * image.width + x].iter().map(|&m| T::lit(m)));
    v
}

fn check_mask(image: &RgbImage, mask: &[bool]) -> Result<()> {
    if mask.len() != image.width * image.height {
        return Err(Error::arg(format!(
            "mask has {} entries for a {}x{} image",
            mask.len(),
            image.width,
            image.height
        )));
    }
    Ok(())
}

fn embed_pixels<T: Real>(params: &EmbedderParams<T>, image: &RgbImage, mask: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
    check_mask(image, mask)?;
    let means = local_mean(image);
    let arch = params.architecture();
    Ok((0..mask.len())
        .into_par_iter()
        .map(|i| {
            mask[i].then(|| {
                let input = pixel_input(&arch, image, &means, i % image.width, i / image.width);
                params.forward(input).output
            })
        })
        .collect())
}

/// Canonical map of a foreground-masked image. Requires canonical mode.
pub fn embed_image<T: Real>(params: &EmbedderParams<T>, image: &RgbImage, mask: &[bool]) -> Result<UvwMap> {
    if params.mode() != EmbedMode::Canonical {
        return Err(Error::arg("embed_image needs a canonical-mode embedder"));
    }
    let out = embed_pixels(params, image, mask)?;
    let mut map = UvwMap::new(image.width, image.height);
    for (i, o) in out.into_iter().enumerate() {
        if let Some(o) = o {
            let c = [o[0].as_f64(), o[1].as_f64(), o[2].as_f64()];
            if c.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("embedding"));
            }
            map.coords[i] = c;
            map.valid[i] = true;
        }
    }
    Ok(map)
}

/// Raw network outputs per foreground pixel, L2-normalized when
/// `normalize` is set.
pub fn embed_features<T: Real>(
    params: &EmbedderParams<T>,
    image: &RgbImage,
    mask: &[bool],
    normalize: bool,
) -> Result<EmbeddingMap> {
    let dim = params.architecture().out_dim;
    let out = embed_pixels(params, image, mask)?;
    let mut map = EmbeddingMap::new(image.width, image.height, dim);
    for (i, o) in out.into_iter().enumerate() {
        if let Some(o) = o {
            let mut v: Vec<f64> = o.iter().map(|x| x.as_f64()).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("embedding"));
            }
            if normalize {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    v.iter_mut().for_each(|x| *x /= n);
                }
            }
            map.values[i * dim..(i + 1) * dim].copy_from_slice(&v);
            map.valid[i] = true;
        }
    }
    Ok(map)
}
