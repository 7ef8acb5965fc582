//! Random shift / scale / rotation applied consistently to every per-frame
//! layer and to point annotations.

use rand::Rng;

use crate::image::RgbImage;
use crate::uvw::UvwMap;

/// `q = m·p + t` in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine2 {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        m: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * p[0] + self.m[0][1] * p[1] + self.t[0],
            self.m[1][0] * p[0] + self.m[1][1] * p[1] + self.t[1],
        ]
    }

    pub fn inverse(&self) -> Affine2 {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        let m = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(m[0][0] * self.t[0] + m[0][1] * self.t[1]),
            -(m[1][0] * self.t[0] + m[1][1] * self.t[1]),
        ];
        Affine2 { m, t }
    }

    /// Scale and rotate about the image center, then shift by a fraction of
    /// the image size.
    pub fn from_params(width: usize, height: usize, params: &AugmentParams) -> Affine2 {
        let s = params.scale.unwrap_or(1.0);
        let r = params.rotation.unwrap_or(0.0);
        let sh = params.shift.unwrap_or([0.0, 0.0]);
        let (sin, cos) = r.sin_cos();
        let m = [[s * cos, -s * sin], [s * sin, s * cos]];
        let c = [width as f64 / 2.0, height as f64 / 2.0];
        let t = [
            c[0] - (m[0][0] * c[0] + m[0][1] * c[1]) + sh[0] * width as f64,
            c[1] - (m[1][0] * c[0] + m[1][1] * c[1]) + sh[1] * height as f64,
        ];
        Affine2 { m, t }
    }

    /// Destination pixel of the source pixel's center; `None` off-frame.
    pub fn map_pixel(&self, width: usize, height: usize, p: [usize; 2]) -> Option<[usize; 2]> {
        let q = self.apply([p[0] as f64 + 0.5, p[1] as f64 + 0.5]);
        if !(q[0] >= 0.0 && q[1] >= 0.0) {
            return None;
        }
        let (x, y) = (q[0].floor() as usize, q[1].floor() as usize);
        (x < width && y < height).then_some([x, y])
    }
}

/// One augmentation draw. `None` components are not applied.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentParams {
    /// Fractions of width and height.
    pub shift: Option<[f64; 2]>,
    /// Multiplicative factor.
    pub scale: Option<f64>,
    /// Radians.
    pub rotation: Option<f64>,
}

pub const SHIFT_RANGE: f64 = 0.1;
pub const SCALE_RANGE: f64 = 0.1;
pub const ROTATION_RANGE_DEG: f64 = 18.0;
pub const APPLY_PROBABILITY: f64 = 0.5;

impl AugmentParams {
    pub fn is_identity(&self) -> bool {
        self.shift.is_none() && self.scale.is_none() && self.rotation.is_none()
    }

    /// Shift in ±10 %, scale in ±10 %, rotation in ±18°, each drawn with
    /// probability 1/2.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let shift = rng.random_bool(APPLY_PROBABILITY).then(|| {
            [
                rng.random_range(-SHIFT_RANGE..=SHIFT_RANGE),
                rng.random_range(-SHIFT_RANGE..=SHIFT_RANGE),
            ]
        });
        let scale = rng
            .random_bool(APPLY_PROBABILITY)
            .then(|| 1.0 + rng.random_range(-SCALE_RANGE..=SCALE_RANGE));
        let rotation = rng
            .random_bool(APPLY_PROBABILITY)
            .then(|| rng.random_range(-ROTATION_RANGE_DEG..=ROTATION_RANGE_DEG).to_radians());
        Self { shift, scale, rotation }
    }
}

/// Everything the trainer reads from one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub rgb: RgbImage,
    pub uvw: UvwMap,
    pub labels: Vec<u8>,
    pub landmarks: Vec<Option<[usize; 2]>>,
}

impl FrameBundle {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn mask(&self) -> &[bool] {
        &self.uvw.valid
    }
}

/// Warps every layer by the affine map drawn from `params`. Images are
/// resampled bilinearly (background outside), masks and labels by nearest
/// pixel, canonical coordinates bilinearly where all four contributors are
/// valid and by nearest pixel otherwise.
pub fn augment(bundle: &FrameBundle, params: &AugmentParams) -> (FrameBundle, Affine2) {
    if params.is_identity() {
        return (bundle.clone(), Affine2::IDENTITY);
    }
    let (w, h) = (bundle.width(), bundle.height());
    let fwd = Affine2::from_params(w, h, params);
    let inv = fwd.inverse();
    let mut rgb = RgbImage::new(w, h);
    let mut uvw = UvwMap::new(w, h);
    let mut labels = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = inv.apply([x as f64 + 0.5, y as f64 + 0.5]);
            let o = y * w + x;
            rgb.data[o] = bilinear_rgb(&bundle.rgb, p);
            if !(p[0] >= 0.0 && p[1] >= 0.0) {
                continue;
            }
            let (nx, ny) = (p[0].floor() as usize, p[1].floor() as usize);
            if nx >= w || ny >= h {
                continue;
            }
            let n = ny * w + nx;
            labels[o] = bundle.labels[n];
            if bundle.uvw.valid[n] {
                let c = bundle.uvw.sample_bilinear(p[0], p[1]).unwrap_or(bundle.uvw.coords[n]);
                uvw.coords[o] = c;
                uvw.valid[o] = true;
            }
        }
    }
    let landmarks = bundle
        .landmarks
        .iter()
        .map(|lm| lm.and_then(|p| fwd.map_pixel(w, h, p)))
        .collect();
    (
        FrameBundle {
            rgb,
            uvw,
            labels,
            landmarks,
        },
        fwd,
    )
}

fn bilinear_rgb(img: &RgbImage, p: [f64; 2]) -> [u8; 3] {
    let fx = p[0] - 0.5;
    let fy = p[1] - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let (tx, ty) = (fx - x0, fy - y0);
    let fetch = |x: f64, y: f64| -> [f64; 3] {
        if x < 0.0 || y < 0.0 || x >= img.width as f64 || y >= img.height as f64 {
            [0.0; 3]
        } else {
            img.get(x as usize, y as usize).map(f64::from)
        }
    };
    let c00 = fetch(x0, y0);
    let c10 = fetch(x0 + 1.0, y0);
    let c01 = fetch(x0, y0 + 1.0);
    let c11 = fetch(x0 + 1.0, y0 + 1.0);
    let mut out = [0u8; 3];
    for k in 0..3 {
        let v = (1.0 - ty) * ((1.0 - tx) * c00[k] + tx * c10[k]) + ty * ((1.0 - tx) * c01[k] + tx * c11[k]);
        out[k] = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}
