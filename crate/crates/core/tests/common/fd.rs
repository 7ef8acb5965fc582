//! Central finite-difference oracles for every differentiable stage.

use densemarks::losses::{
    contrastive_loss, landmark_loss, seg_backward, seg_forward, segmentation_loss, FeatureBatch, LossWeights,
    SegmentationHead,
};
use densemarks::synth::{generate_sequence, Camera, HeadTemplate, MotionParams, SequenceData, TrackPairs};
use densemarks::train::{augment_pair, forward_backward, Gradients, Model, ModelConfig, PairBatch};
use densemarks::{CanonPoint, EmbedMode, LatentGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;

pub fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn shifted(x: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    x.iter().zip(v).map(|(a, b)| a + h * b).collect()
}

/// Worst directional relative error of the contrastive gradient.
pub fn contrastive(configs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let p = rng.random_range(2..12);
        let d = rng.random_range(2..8);
        let a = random_vec(&mut rng, p * d);
        let b = random_vec(&mut rng, p * d);
        let (va, vb) = (random_vec(&mut rng, p * d), random_vec(&mut rng, p * d));
        let f = |a: &[f64], b: &[f64]| {
            contrastive_loss(
                &FeatureBatch::new(p, d, a.to_vec()).unwrap(),
                &FeatureBatch::new(p, d, b.to_vec()).unwrap(),
            )
            .unwrap()
            .loss
        };
        let out = contrastive_loss(
            &FeatureBatch::new(p, d, a.clone()).unwrap(),
            &FeatureBatch::new(p, d, b.clone()).unwrap(),
        )
        .unwrap();
        let an = dot(out.grad_a.as_slice(), &va) + dot(out.grad_b.as_slice(), &vb);
        let fd = (f(&shifted(&a, &va, STEP), &shifted(&b, &vb, STEP))
            - f(&shifted(&a, &va, -STEP), &shifted(&b, &vb, -STEP)))
            / (2.0 * STEP);
        worst = worst.max(rel_err(fd, an));
    }
    worst
}

pub fn landmark(configs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let n = rng.random_range(1..20);
        let anchors: Vec<CanonPoint<f64>> = (0..n)
            .map(|_| CanonPoint::new(rng.random(), rng.random(), rng.random()).unwrap())
            .collect();
        let pred: Vec<[f64; 3]> = anchors
            .iter()
            .map(|a| {
                let a = a.to_array();
                // stay at least 1e-3 away from the kink
                a.map(|x| x + rng.random_range(1e-3..0.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            })
            .collect();
        let v: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let at = |h: f64| -> Vec<[f64; 3]> {
            pred.iter()
                .zip(&v)
                .map(|(p, d)| [p[0] + h * d[0], p[1] + h * d[1], p[2] + h * d[2]])
                .collect()
        };
        let (_, g) = landmark_loss(&pred, &anchors).unwrap();
        let an: f64 = g.iter().zip(&v).map(|(g, d)| dot(g, d)).sum();
        let fd = (landmark_loss(&at(STEP), &anchors).unwrap().0 - landmark_loss(&at(-STEP), &anchors).unwrap().0)
            / (2.0 * STEP);
        worst = worst.max(rel_err(fd, an));
    }
    worst
}

/// Segmentation head plus cross-entropy, differentiated with respect to
/// both the head parameters and the features.
pub fn segmentation(configs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let (p, d, c) = (rng.random_range(1..10), rng.random_range(1..6), rng.random_range(2..7));
        let head = SegmentationHead::random(c, d, &mut rng).unwrap();
        let feats = random_vec(&mut rng, p * d);
        let labels: Vec<usize> = (0..p).map(|_| rng.random_range(0..c)).collect();
        let (vh, vf) = (random_vec(&mut rng, head.param_count()), random_vec(&mut rng, p * d));
        let loss = |flat: &[f64], feats: &[f64]| {
            let mut h = head.clone();
            h.set_flat(flat);
            let logits = seg_forward(&h, &FeatureBatch::new(p, d, feats.to_vec()).unwrap()).unwrap();
            segmentation_loss(&logits, &labels).unwrap().0
        };
        let fb = FeatureBatch::new(p, d, feats.clone()).unwrap();
        let logits = seg_forward(&head, &fb).unwrap();
        let (_, gl) = segmentation_loss(&logits, &labels).unwrap();
        let mut gh = vec![0.0; head.param_count()];
        let gf = seg_backward(&head, &fb, &gl, &mut gh);
        let an = dot(&gh, &vh) + dot(gf.as_slice(), &vf);
        let flat = head.flat();
        let fd = (loss(&shifted(&flat, &vh, STEP), &shifted(&feats, &vf, STEP))
            - loss(&shifted(&flat, &vh, -STEP), &shifted(&feats, &vf, -STEP)))
            / (2.0 * STEP);
        worst = worst.max(rel_err(fd, an));
    }
    worst
}

/// `Σ u·query(p)` over random points, differentiated with respect to the
/// raw grid (through the filter transpose) and the points.
pub fn grid_query(configs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..configs {
        let n = rng.random_range(2..7);
        let d = rng.random_range(1..5);
        let sigma = [0.0, 0.5, 1.0, 1.5][k % 4];
        let grid = LatentGrid::<f64>::new(n, d, sigma, rng.random()).unwrap();
        let m = rng.random_range(1..6);
        let pts: Vec<[f64; 3]> = (0..m).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let ups: Vec<Vec<f64>> = (0..m).map(|_| random_vec(&mut rng, d)).collect();
        let vr = random_vec(&mut rng, grid.raw().len());
        let vp: Vec<[f64; 3]> = (0..m).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let eval = |raw: Vec<f64>, h: f64| {
            let g = LatentGrid::from_raw(n, d, sigma, raw).unwrap();
            pts.iter()
                .zip(&vp)
                .zip(&ups)
                .map(|((p, v), u)| {
                    let q = CanonPoint::new(p[0] + h * v[0], p[1] + h * v[1], p[2] + h * v[2]).unwrap();
                    dot(&g.query(&q).unwrap(), u)
                })
                .sum::<f64>()
        };
        let mut gs = vec![0.0; grid.raw().len()];
        let mut an = 0.0;
        for ((p, v), u) in pts.iter().zip(&vp).zip(&ups) {
            let q = CanonPoint::from_array(*p).unwrap();
            let gp = grid.backprop_query(&q, u, &mut gs).unwrap();
            an += dot(&gp, v);
        }
        an += dot(&grid.raw_gradient(&gs), &vr);
        let raw = grid.raw();
        let fd = (eval(shifted(raw, &vr, STEP), STEP) - eval(shifted(raw, &vr, -STEP), -STEP)) / (2.0 * STEP);
        worst = worst.max(rel_err(fd, an));
    }
    worst
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        frequencies: 2,
        hidden: 6,
        grid_resolution: 5,
        feature_dim: 4,
        sigma: 1.0,
    }
}

/// An augmented 32×32 pair with at most `tracks` tracks.
pub fn tiny_pair(seed: u64, tracks: usize) -> PairBatch {
    let seq = generate_sequence(seed, 2, 32, &Camera::frontal(32), &MotionParams::default()).unwrap();
    let data = SequenceData::from_sequence(&seq, 96, seed).unwrap();
    let ((i, j), t) = &data.tracks[0];
    let mut sub = TrackPairs::default();
    for k in 0..t.len().min(tracks) {
        sub.push(t.pixels_a[k], t.pixels_b[k], t.ids[k]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    augment_pair(&data.frames[*i], &data.frames[*j], &sub, &mut rng)
}

fn random_direction(model: &Model<f64>, rng: &mut ChaCha8Rng, groups: [bool; 3]) -> Gradients<f64> {
    let mut v = |n: usize, on: bool| if on { random_vec(rng, n) } else { vec![0.0; n] };
    Gradients {
        embedder: v(model.embedder.values.len(), groups[0]),
        grid_raw: v(model.grid.raw().len(), groups[1]),
        seg: v(model.seg.param_count(), groups[2]),
    }
}

fn grad_dot(a: &Gradients<f64>, b: &Gradients<f64>) -> f64 {
    dot(&a.embedder, &b.embedder) + dot(&a.grid_raw, &b.grid_raw) + dot(&a.seg, &b.seg)
}

/// Total training loss of one augmented pair, differentiated along random
/// directions in all three parameter groups together and one at a time.
pub fn full_chain(configs: usize, seed: u64, mode: EmbedMode) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = HeadTemplate::standard().anchors::<f64>();
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for k in 0..configs {
        let model = Model::<f64>::new(&tiny_model_config(), mode, rng.random()).unwrap();
        let pair = tiny_pair(k as u64 % 5, 12);
        let groups = match k % 4 {
            0 => [true, true, true],
            1 => [true, false, false],
            2 => [false, true, false],
            _ => [false, false, true],
        };
        let dir = random_direction(&model, &mut rng, groups);
        let (_, g) = forward_backward(&model, &pair, &anchors, &w).unwrap();
        let an = grad_dot(&g, &dir);
        let loss_at = |h: f64| {
            let mut m = model.clone();
            m.apply_gradients(&dir, -h).unwrap();
            forward_backward(&m, &pair, &anchors, &w).unwrap().0.total
        };
        let fd = (loss_at(STEP) - loss_at(-STEP)) / (2.0 * STEP);
        let e = rel_err(fd, an);
        if mode == EmbedMode::DirectFeature && groups == [false, true, false] {
            assert_eq!(an, 0.0);
            assert_eq!(fd, 0.0);
            continue;
        }
        worst = worst.max(e);
    }
    worst
}
