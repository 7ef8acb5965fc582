//! Siamese training of embedder, latent grid and segmentation head, plus
//! the held-out matching evaluation.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{put_f32, put_u32, OffsetReader};
use crate::embedder::{
    embed_features, embed_image, local_mean, pixel_input, Architecture, EmbedMode, EmbedderParams,
    DEFAULT_FREQUENCIES, DEFAULT_HIDDEN,
};
use crate::error::{Error, Result};
use crate::grid::{CanonPoint, LatentGrid};
use crate::losses::{
    contrastive_loss, landmark_loss, seg_backward, seg_forward, segmentation_loss, total_loss, FeatureBatch,
    LandmarkAnchors, LossWeights, SegmentationHead,
};
use crate::matcher::{nearest_brute, BinnedIndex, EmbeddingMap, MatchMetrics};
use crate::optim::{cosine_lr, AdamW};
use crate::scalar::Real;
use crate::synth::{augment, AugmentParams, FrameBundle, HeadTemplate, SequenceData, TrackPairs, REGION_COUNT};
use crate::uvw::UvwMap;

pub const NET_MAGIC: &[u8; 7] = b"DMNET01";

/// Shapes of the three parameter groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub frequencies: usize,
    pub hidden: usize,
    pub grid_resolution: usize,
    pub feature_dim: usize,
    pub sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frequencies: DEFAULT_FREQUENCIES,
            hidden: DEFAULT_HIDDEN,
            grid_resolution: 32,
            feature_dim: 16,
            sigma: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_pairs: usize,
    pub lr_embedder: f64,
    pub lr_grid: f64,
    pub lr_seghead: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: EmbedMode,
    pub weights: LossWeights,
    /// Random shift, scale and rotation of each frame.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_pairs: 2,
            lr_embedder: 1e-2,
            lr_grid: 4e-2,
            lr_seghead: 2e-3,
            warmup_steps: 100,
            weight_decay: 1e-4,
            seed: 0,
            mode: EmbedMode::Canonical,
            weights: LossWeights::default(),
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.steps {
            return Err(Error::arg("warmup_steps must not exceed steps"));
        }
        if self.batch_pairs == 0 {
            return Err(Error::arg("batch_pairs must be >= 1"));
        }
        for (name, lr) in [
            ("lr_embedder", self.lr_embedder),
            ("lr_grid", self.lr_grid),
            ("lr_seghead", self.lr_seghead),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::arg(format!("{name} must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::arg("weight_decay must be nonnegative"));
        }
        self.weights.validate()
    }
}

/// Embedder, latent grid and segmentation head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub embedder: EmbedderParams<T>,
    pub grid: LatentGrid<T>,
    pub seg: SegmentationHead<T>,
}

/// Flat gradients matching the three parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub embedder: Vec<T>,
    pub grid_raw: Vec<T>,
    /// Weight then bias.
    pub seg: Vec<T>,
}

impl<T: Real> Gradients<T> {
    fn zeros_like(model: &Model<T>) -> Self {
        Self {
            embedder: vec![T::zero(); model.embedder.values.len()],
            grid_raw: vec![T::zero(); model.grid.raw().len()],
            seg: vec![T::zero(); model.seg.param_count()],
        }
    }

    fn add_scaled(&mut self, other: &Self, s: T) {
        for (a, b) in [
            (&mut self.embedder, &other.embedder),
            (&mut self.grid_raw, &other.grid_raw),
            (&mut self.seg, &other.seg),
        ] {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += s * y);
        }
    }
}

impl<T: Real> Model<T> {
    pub fn new(cfg: &ModelConfig, mode: EmbedMode, seed: u64) -> Result<Self> {
        let out_dim = match mode {
            EmbedMode::Canonical => 3,
            EmbedMode::DirectFeature => cfg.feature_dim,
        };
        let arch = Architecture::new(cfg.frequencies, cfg.hidden, out_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5E6);
        Ok(Self {
            embedder: EmbedderParams::random(arch, mode, seed),
            grid: LatentGrid::new(cfg.grid_resolution, cfg.feature_dim, cfg.sigma, seed.wrapping_add(1))?,
            seg: SegmentationHead::random(REGION_COUNT, cfg.feature_dim, &mut rng)?,
        })
    }

    pub fn mode(&self) -> EmbedMode {
        self.embedder.mode()
    }

    pub fn feature_dim(&self) -> usize {
        self.grid.feature_dim()
    }

    /// Canonical map of an image (canonical mode only).
    pub fn embed(&self, image: &crate::image::RgbImage, mask: &[bool]) -> Result<UvwMap> {
        embed_image(&self.embedder, image, mask)
    }

    /// The space nearest-neighbour matching runs in: canonical coordinates,
    /// or normalized direct features.
    pub fn matching_map(&self, image: &crate::image::RgbImage, mask: &[bool]) -> Result<EmbeddingMap> {
        match self.mode() {
            EmbedMode::Canonical => Ok(EmbeddingMap::from_uvw(&self.embed(image, mask)?)),
            EmbedMode::DirectFeature => embed_features(&self.embedder, image, mask, true),
        }
    }

    pub fn apply_gradients(&mut self, g: &Gradients<T>, step: f64) -> Result<()> {
        let s = T::lit(step);
        self.embedder.values.iter_mut().zip(&g.embedder).for_each(|(x, &d)| *x -= s * d);
        self.grid.update_raw(|raw| raw.iter_mut().zip(&g.grid_raw).for_each(|(x, &d)| *x -= s * d))?;
        let mut flat = self.seg.flat();
        flat.iter_mut().zip(&g.seg).for_each(|(x, &d)| *x -= s * d);
        self.seg.set_flat(&flat);
        Ok(())
    }

    /// `DMNET01`: architecture, embedder weights, then the grid checkpoint
    /// and the segmentation head.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let arch = self.embedder.architecture();
        w.write_all(NET_MAGIC)?;
        for v in [arch.frequencies, arch.hidden, arch.out_dim] {
            put_u32(w, v as u32)?;
        }
        put_u32(w, self.mode().flag())?;
        for x in &self.embedder.values {
            put_f32(w, x.as_f64() as f32)?;
        }
        self.grid.write_checkpoint(w)?;
        put_u32(w, self.seg.classes() as u32)?;
        put_u32(w, self.seg.dim() as u32)?;
        for x in self.seg.flat() {
            put_f32(w, x.as_f64() as f32)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let mut rd = OffsetReader::new(r, "network checkpoint");
        rd.expect_magic(NET_MAGIC)?;
        let at = rd.offset();
        let (f, h, out) = (rd.u32()? as usize, rd.u32()? as usize, rd.u32()? as usize);
        let flag = rd.u32()?;
        let mode = EmbedMode::from_flag(flag).ok_or_else(|| Error::format("network checkpoint", at + 12, "unknown mode flag"))?;
        if h > 4096 || out > 4096 {
            return Err(Error::format("network checkpoint", at, "implausible architecture"));
        }
        let arch = Architecture::new(f, h, out).map_err(|e| Error::format("network checkpoint", at, e.to_string()))?;
        if mode == EmbedMode::Canonical && out != 3 {
            return Err(Error::format("network checkpoint", at, "canonical mode needs 3 outputs"));
        }
        let mut values = Vec::with_capacity(arch.param_count());
        for _ in 0..arch.param_count() {
            values.push(T::lit(rd.f32()? as f64));
        }
        let embedder = EmbedderParams::from_values(arch, mode, values)?;
        let grid = LatentGrid::read_from(&mut rd)?;
        let at = rd.offset();
        let (classes, dim) = (rd.u32()? as usize, rd.u32()? as usize);
        if dim != grid.feature_dim() || classes > 4096 || (mode == EmbedMode::DirectFeature && dim != out) {
            return Err(Error::format("network checkpoint", at, "segmentation head shape mismatch"));
        }
        let mut flat = Vec::with_capacity(classes * dim + classes);
        for _ in 0..classes * dim + classes {
            flat.push(T::lit(rd.f32()? as f64));
        }
        let seg = SegmentationHead::new(classes, dim, flat[..classes * dim].to_vec(), flat[classes * dim..].to_vec())
            .map_err(|e| Error::format("network checkpoint", at, e.to_string()))?;
        rd.expect_eof()?;
        if !embedder.is_finite() || !seg.is_finite() {
            return Err(Error::NonFinite("network checkpoint"));
        }
        Ok(Self { embedder, grid, seg })
    }
}

/// Two frames and their matched pixels (`pixels_a` in `a`).
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub a: FrameBundle,
    pub b: FrameBundle,
    pub tracks: TrackPairs,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub contrastive: f64,
    /// Sum over both frames, unweighted.
    pub landmark: f64,
    /// Sum over both frames, unweighted.
    pub segmentation: f64,
    pub tracks: usize,
    /// Tracks dropped for landing on background.
    pub dropped: usize,
}

struct SideForward<T> {
    caches: Vec<crate::embedder::PixelCache<T>>,
    feats: FeatureBatch<T>,
    n_tracks: usize,
    landmark_ids: Vec<usize>,
}

fn forward_side<T: Real>(
    model: &Model<T>,
    frame: &FrameBundle,
    pixels: &[[usize; 2]],
    with_landmarks: bool,
) -> Result<SideForward<T>> {
    let arch = model.embedder.architecture();
    let means = local_mean(&frame.rgb);
    let mask = frame.mask();
    let mut all: Vec<[usize; 2]> = pixels.to_vec();
    let mut landmark_ids = Vec::new();
    if with_landmarks {
        for (k, lm) in frame.landmarks.iter().enumerate() {
            if let Some(p) = lm {
                if mask[p[1] * frame.width() + p[0]] {
                    landmark_ids.push(k);
                    all.push(*p);
                }
            }
        }
    }
    let caches: Vec<_> = all
        .iter()
        .map(|&[x, y]| model.embedder.forward(pixel_input(&arch, &frame.rgb, &means, x, y)))
        .collect();
    let d = model.feature_dim();
    let mut feats = FeatureBatch::zeros(pixels.len(), d);
    for (i, c) in caches[..pixels.len()].iter().enumerate() {
        match model.mode() {
            EmbedMode::Canonical => {
                let p = CanonPoint::from_array([c.output[0], c.output[1], c.output[2]])?;
                model.grid.query_into(&p, feats.row_mut(i))?;
            }
            EmbedMode::DirectFeature => feats.row_mut(i).copy_from_slice(&c.output),
        }
    }
    Ok(SideForward {
        caches,
        feats,
        n_tracks: pixels.len(),
        landmark_ids,
    })
}

/// Loss of one augmented pair and exact gradients for all three parameter
/// groups. Tracks on background pixels are dropped; fewer than two
/// surviving tracks is [`Error::TooFewTracks`]. Landmarks apply in
/// canonical mode only.
pub fn forward_backward<T: Real>(
    model: &Model<T>,
    pair: &PairBatch,
    anchors: &LandmarkAnchors<T>,
    w: &LossWeights,
) -> Result<(LossParts, Gradients<T>)> {
    let (parts, mut g) = forward_backward_smoothed(model, pair, anchors, w)?;
    if model.mode() == EmbedMode::Canonical {
        g.grid_raw = model.grid.raw_gradient(&g.grid_raw);
    }
    Ok((parts, g))
}

/// [`forward_backward`] with the grid gradient left on the smoothed grid.
fn forward_backward_smoothed<T: Real>(
    model: &Model<T>,
    pair: &PairBatch,
    anchors: &LandmarkAnchors<T>,
    w: &LossWeights,
) -> Result<(LossParts, Gradients<T>)> {
    let (wa, ha) = (pair.a.width(), pair.a.height());
    let (wb, hb) = (pair.b.width(), pair.b.height());
    let (ma, mb) = (pair.a.mask(), pair.b.mask());
    let mut pa = Vec::new();
    let mut pb = Vec::new();
    for (a, b) in pair.tracks.pixels_a.iter().zip(&pair.tracks.pixels_b) {
        if a[0] >= wa || a[1] >= ha || b[0] >= wb || b[1] >= hb {
            return Err(Error::arg(format!("track {a:?} -> {b:?} outside the frames")));
        }
        if ma[a[1] * wa + a[0]] && mb[b[1] * wb + b[0]] {
            pa.push(*a);
            pb.push(*b);
        }
    }
    let dropped = pair.tracks.len() - pa.len();
    if pa.len() < 2 {
        return Err(Error::TooFewTracks {
            found: pa.len(),
            min: 2,
        });
    }
    let canonical = model.mode() == EmbedMode::Canonical;
    let sides = [
        forward_side(model, &pair.a, &pa, canonical)?,
        forward_side(model, &pair.b, &pb, canonical)?,
    ];
    let contr = contrastive_loss(&sides[0].feats, &sides[1].feats)?;
    let mut grads = Gradients::zeros_like(model);
    let mut grad_smoothed = std::mem::take(&mut grads.grid_raw);
    let lam_l = T::lit(w.lambda_lmks);
    let lam_s = T::lit(w.lambda_segm);
    let mut lmk = [T::zero(); 2];
    let mut seg = [T::zero(); 2];
    let frames = [(&pair.a, &pa, &contr.grad_a), (&pair.b, &pb, &contr.grad_b)];
    for (s, ((frame, pixels, grad_contr), side)) in frames.into_iter().zip(&sides).enumerate() {
        let mut grad_feats = grad_contr.clone();
        let labels: Vec<usize> = pixels
            .iter()
            .map(|p| frame.labels[p[1] * frame.width() + p[0]] as usize)
            .collect();
        let logits = seg_forward(&model.seg, &side.feats)?;
        let (seg_loss, mut grad_logits) = segmentation_loss(&logits, &labels)?;
        seg[s] = seg_loss;
        grad_logits.as_mut_slice().iter_mut().for_each(|g| *g *= lam_s);
        let gf = seg_backward(&model.seg, &side.feats, &grad_logits, &mut grads.seg);
        grad_feats.as_mut_slice().iter_mut().zip(gf.as_slice()).for_each(|(a, &b)| *a += b);

        let mut grad_out: Vec<Vec<T>> = side.caches.iter().map(|c| vec![T::zero(); c.output.len()]).collect();
        for i in 0..side.n_tracks {
            match model.mode() {
                EmbedMode::Canonical => {
                    let o = &side.caches[i].output;
                    let p = CanonPoint::from_array([o[0], o[1], o[2]])?;
                    let g = model.grid.backprop_query(&p, grad_feats.row(i), &mut grad_smoothed)?;
                    grad_out[i].copy_from_slice(&g);
                }
                EmbedMode::DirectFeature => grad_out[i].copy_from_slice(grad_feats.row(i)),
            }
        }
        if !side.landmark_ids.is_empty() {
            let predicted: Vec<[T; 3]> = side.caches[side.n_tracks..]
                .iter()
                .map(|c| [c.output[0], c.output[1], c.output[2]])
                .collect();
            let targets: Vec<CanonPoint<T>> = side.landmark_ids.iter().map(|&k| *anchors.get(k)).collect();
            let (loss, g) = landmark_loss(&predicted, &targets)?;
            lmk[s] = loss;
            for (k, gk) in g.iter().enumerate() {
                for c in 0..3 {
                    grad_out[side.n_tracks + k][c] += lam_l * gk[c];
                }
            }
        }
        for (cache, go) in side.caches.iter().zip(&grad_out) {
            model.embedder.backward(cache, go, &mut grads.embedder);
        }
    }
    grads.grid_raw = grad_smoothed;
    let total = total_loss(contr.loss, lmk[0], lmk[1], seg[0], seg[1], w);
    if !total.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    Ok((
        LossParts {
            total: total.as_f64(),
            contrastive: contr.loss.as_f64(),
            landmark: (lmk[0] + lmk[1]).as_f64(),
            segmentation: (seg[0] + seg[1]).as_f64(),
            tracks: pa.len(),
            dropped,
        },
        grads,
    ))
}

/// Augments both frames independently and carries tracks and landmarks
/// through; tracks leaving either frame are removed.
pub fn augment_pair<R: Rng>(a: &FrameBundle, b: &FrameBundle, tracks: &TrackPairs, rng: &mut R) -> PairBatch {
    let pa = AugmentParams::sample(rng);
    let pb = AugmentParams::sample(rng);
    let (fa, ta) = augment(a, &pa);
    let (fb, tb) = augment(b, &pb);
    let mut kept = TrackPairs::default();
    for ((x, y), &id) in tracks.pixels_a.iter().zip(&tracks.pixels_b).zip(&tracks.ids) {
        if let (Some(x), Some(y)) = (
            ta.map_pixel(fa.width(), fa.height(), *x),
            tb.map_pixel(fb.width(), fb.height(), *y),
        ) {
            kept.push(x, y, id);
        }
    }
    PairBatch {
        a: fa,
        b: fb,
        tracks: kept,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Loss terms are means over the pairs used this step (NaN when every
    /// pair was skipped); `tracks` and `dropped` are totals.
    pub loss: LossParts,
    pub pairs: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<StepRecord>,
    /// Pairs skipped for having fewer than two surviving tracks.
    pub skipped_pairs: usize,
    pub dropped_tracks: usize,
}

impl TrainReport {
    /// Mean contrastive loss over steps `range` that used at least one
    /// pair.
    pub fn mean_contrastive(&self, range: std::ops::Range<usize>) -> f64 {
        let v: Vec<f64> = self.curve[range]
            .iter()
            .filter(|r| r.pairs > 0)
            .map(|r| r.loss.contrastive)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "step,lr,total,contrastive,landmark,segmentation,tracks,pairs")?;
        for r in &self.curve {
            let l = &r.loss;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.step, r.lr, l.total, l.contrastive, l.landmark, l.segmentation, l.tracks, r.pairs
            )?;
        }
        Ok(())
    }
}

/// Per-step draws: sequence, frame pair, order and augmentations.
fn draw_pair<'a, R: Rng>(data: &'a [SequenceData], rng: &mut R, with_augment: bool) -> PairBatch {
    let seq = &data[rng.random_range(0..data.len())];
    let ((i, j), tracks) = &seq.tracks[rng.random_range(0..seq.tracks.len())];
    let (a, b, t) = if rng.random_bool(0.5) {
        (&seq.frames[*i], &seq.frames[*j], tracks.clone())
    } else {
        (&seq.frames[*j], &seq.frames[*i], tracks.swapped())
    };
    if with_augment {
        augment_pair(a, b, &t, rng)
    } else {
        PairBatch {
            a: a.clone(),
            b: b.clone(),
            tracks: t,
        }
    }
}

/// Runs the siamese loop from a fresh model. Deterministic in
/// `(data, model_cfg, cfg)`.
pub fn train<T: Real>(data: &[SequenceData], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(Model<T>, TrainReport)> {
    let model = Model::new(model_cfg, cfg.mode, cfg.seed)?;
    train_from(model, data, cfg)
}

pub fn train_from<T: Real>(mut model: Model<T>, data: &[SequenceData], cfg: &TrainConfig) -> Result<(Model<T>, TrainReport)> {
    cfg.validate()?;
    if cfg.mode != model.mode() {
        return Err(Error::arg("training mode differs from the model's mode"));
    }
    let usable: Vec<SequenceData> = data.iter().filter(|s| !s.tracks.is_empty()).cloned().collect();
    if usable.is_empty() {
        return Err(Error::arg("training data holds no frame pairs with tracks"));
    }
    let anchors = HeadTemplate::standard().anchors::<T>();
    let mut opt_embed = AdamW::new(
        model.embedder.values.len(),
        cfg.weight_decay,
        Some(model.embedder.weight_mask()),
    )?;
    let mut opt_grid = AdamW::new(model.grid.raw().len(), 0.0, None)?;
    let seg_mask: Vec<bool> = (0..model.seg.param_count())
        .map(|i| i < model.seg.classes() * model.seg.dim())
        .collect();
    let mut opt_seg = AdamW::new(model.seg.param_count(), cfg.weight_decay, Some(seg_mask))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();

    for step in 0..cfg.steps {
        let pairs: Vec<PairBatch> = (0..cfg.batch_pairs)
            .map(|_| draw_pair(&usable, &mut rng, cfg.augment))
            .collect();
        let results: Vec<Result<(LossParts, Gradients<T>)>> = pairs
            .par_iter()
            .map(|p| forward_backward_smoothed(&model, p, &anchors, &cfg.weights))
            .collect();
        let mut used = Vec::new();
        for r in results {
            match r {
                Ok(v) => used.push(v),
                Err(Error::TooFewTracks { .. }) => report.skipped_pairs += 1,
                Err(e) => return Err(e),
            }
        }
        let lr = cosine_lr(step, cfg.steps, cfg.warmup_steps, 1.0);
        let mut mean = LossParts::default();
        if used.is_empty() {
            mean = LossParts {
                total: f64::NAN,
                contrastive: f64::NAN,
                landmark: f64::NAN,
                segmentation: f64::NAN,
                ..mean
            };
        } else {
            let n = used.len() as f64;
            let mut g = Gradients::zeros_like(&model);
            let inv = T::lit(1.0 / n);
            for (parts, grads) in &used {
                g.add_scaled(grads, inv);
                mean.total += parts.total / n;
                mean.contrastive += parts.contrastive / n;
                mean.landmark += parts.landmark / n;
                mean.segmentation += parts.segmentation / n;
                mean.tracks += parts.tracks;
                mean.dropped += parts.dropped;
            }
            report.dropped_tracks += mean.dropped;
            if model.mode() == EmbedMode::Canonical {
                g.grid_raw = model.grid.raw_gradient(&g.grid_raw);
            }
            opt_embed.step(&mut model.embedder.values, &g.embedder, lr * cfg.lr_embedder)?;
            if model.mode() == EmbedMode::Canonical {
                let mut res = Ok(());
                model
                    .grid
                    .update_raw(|raw| res = opt_grid.step(raw, &g.grid_raw, lr * cfg.lr_grid))?;
                res?;
            }
            let mut flat = model.seg.flat();
            opt_seg.step(&mut flat, &g.seg, lr * cfg.lr_seghead)?;
            model.seg.set_flat(&flat);
            if !model.embedder.is_finite() || !model.seg.is_finite() {
                return Err(Error::NonFinite("model parameters"));
            }
        }
        report.curve.push(StepRecord {
            step,
            lr: lr * cfg.lr_embedder,
            loss: mean,
            pairs: used.len(),
        });
        if step % 100 == 0 {
            log::debug!(
                "step {step}: total {:.4} contrastive {:.4} landmark {:.4} segmentation {:.4}",
                mean.total,
                mean.contrastive,
                mean.landmark,
                mean.segmentation
            );
        }
    }
    Ok((model, report))
}

/// Nearest-neighbour matching error over every ground-truth track pair:
/// each `pixels_a` pixel of frame `i` is matched into frame `j` and
/// compared with its `pixels_b` partner. Frames are embedded under their
/// ground-truth foreground masks.
pub fn evaluate_matching<T: Real>(model: &Model<T>, data: &[SequenceData]) -> Result<MatchMetrics> {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for seq in data {
        let maps: Vec<EmbeddingMap> = seq
            .frames
            .iter()
            .map(|f| model.matching_map(&f.rgb, f.mask()))
            .collect::<Result<_>>()?;
        for ((i, j), tracks) in &seq.tracks {
            let (src, tgt) = (&maps[*j], &maps[*i]);
            let index = if src.dim == 3 {
                let ids: Vec<usize> = (0..src.valid.len()).filter(|&k| src.valid[k]).collect();
                let pts = ids.iter().map(|&k| [src.get(k)[0], src.get(k)[1], src.get(k)[2]]).collect();
                Some(BinnedIndex::new(pts, ids)?)
            } else {
                None
            };
            let errs: Vec<f64> = tracks
                .pixels_a
                .par_iter()
                .zip(&tracks.pixels_b)
                .map(|(a, b)| {
                    let k = a[1] * tgt.width + a[0];
                    let q = tgt.get(k);
                    let id = match &index {
                        Some(ix) => ix.nearest(&[q[0], q[1], q[2]]).0,
                        None => nearest_brute(src, q).map(|(id, _)| id).unwrap_or(0),
                    };
                    let (x, y) = ((id % src.width) as f64, (id / src.width) as f64);
                    ((x - b[0] as f64).powi(2) + (y - b[1] as f64).powi(2)).sqrt()
                })
                .collect();
            for e in errs {
                sum += e;
                sum_sq += e * e;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::arg("no ground-truth pairs to evaluate"));
    }
    Ok(MatchMetrics {
        mae: sum / count as f64,
        rmse: (sum_sq / count as f64).sqrt(),
        count,
    })
}
