use densemarks::grid::{gaussian_filter_3d, gaussian_filter_3d_transpose, CanonPoint, Stencil};
use densemarks::losses::{contrastive_loss, FeatureBatch};
use densemarks::matcher::{match_metrics, nearest_brute, region_select, BinnedIndex, CorrespondenceField, EmbeddingMap, RegionSpec};
use densemarks::optim::cosine_lr;
use densemarks::pose::huber_residual;
use densemarks::synth::TrackPairs;
use densemarks::UvwMap;
use proptest::prelude::*;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit_rows(p: usize, d: usize, raw: &[f64]) -> Option<FeatureBatch<f64>> {
    let mut f = FeatureBatch::new(p, d, raw.to_vec()).ok()?;
    for i in 0..p {
        let n = dot(f.row(i), f.row(i)).sqrt();
        if n < 1e-3 {
            return None;
        }
        f.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    Some(f)
}

fn field(n: usize, channels: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, n * n * n * channels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trilinear_weights_are_a_partition_of_unity(
        n in 2usize..12,
        u in 0.0..=1.0f64,
        v in 0.0..=1.0f64,
        w in 0.0..=1.0f64,
    ) {
        let s = Stencil::new(n, &CanonPoint::new(u, v, w).unwrap()).unwrap();
        prop_assert!(s.weights.iter().all(|&x| x >= 0.0));
        prop_assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.voxels.iter().all(|&i| i < n * n * n));
    }

    #[test]
    fn filter_is_linear(
        (n, x, y) in (2usize..7).prop_flat_map(|n| (Just(n), field(n, 2), field(n, 2))),
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
        sigma in 0.0..2.0f64,
    ) {
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = gaussian_filter_3d(&mix, n, 2, sigma);
        let (fx, fy) = (gaussian_filter_3d(&x, n, 2, sigma), gaussian_filter_3d(&y, n, 2, sigma));
        for k in 0..lhs.len() {
            prop_assert!((lhs[k] - (a * fx[k] + b * fy[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_transpose_is_the_adjoint(
        (n, x, y) in (2usize..7).prop_flat_map(|n| (Just(n), field(n, 3), field(n, 3))),
        sigma in 0.0..2.5f64,
    ) {
        let lhs = dot(&gaussian_filter_3d(&x, n, 3, sigma), &y);
        let rhs = dot(&x, &gaussian_filter_3d_transpose(&y, n, 3, sigma));
        prop_assert!((lhs - rhs).abs() < 1e-11 * (1.0 + lhs.abs()));
    }

    #[test]
    fn contrastive_is_invariant_to_row_scale(
        (p, d, a, b, ka, kb) in (2usize..12, 2usize..6).prop_flat_map(|(p, d)| (
            Just(p),
            Just(d),
            prop::collection::vec(-1.0..1.0f64, p * d),
            prop::collection::vec(-1.0..1.0f64, p * d),
            prop::collection::vec(0.01..50.0f64, p),
            prop::collection::vec(0.01..50.0f64, p),
        )),
    ) {
        let (Some(fa), Some(fb)) = (unit_rows(p, d, &a), unit_rows(p, d, &b)) else {
            return Ok(());
        };
        let base = contrastive_loss(&fa, &fb).unwrap().loss;
        let (mut sa, mut sb) = (fa.clone(), fb.clone());
        for i in 0..p {
            sa.row_mut(i).iter_mut().for_each(|x| *x *= ka[i]);
            sb.row_mut(i).iter_mut().for_each(|x| *x *= kb[i]);
        }
        prop_assert!((contrastive_loss(&sa, &sb).unwrap().loss - base).abs() < 1e-10);
    }

    /// For identical embeddings the Gram matrix is PSD of rank at most D
    /// with unit diagonal, so `‖G − I‖_F ≥ sqrt(P²/D − P)` once P > D. For
    /// distinct embeddings only the rank bound `sqrt(P − D)` holds.
    #[test]
    fn contrastive_respects_the_rank_floors(
        (p, d, a, b) in (2usize..40, 1usize..8).prop_flat_map(|(p, d)| (
            Just(p),
            Just(d),
            prop::collection::vec(-1.0..1.0f64, p * d),
            prop::collection::vec(-1.0..1.0f64, p * d),
        )),
    ) {
        let (Some(fa), Some(fb)) = (unit_rows(p, d, &a), unit_rows(p, d, &b)) else {
            return Ok(());
        };
        let (pf, df) = (p as f64, d as f64);
        let same = contrastive_loss(&fa, &fa).unwrap().loss;
        let cross = contrastive_loss(&fa, &fb).unwrap().loss;
        if p > d {
            prop_assert!(same >= (pf * pf / df - pf).sqrt() - 1e-9, "{same}");
            prop_assert!(cross >= (pf - df).sqrt() - 1e-9, "{cross}");
        }
        prop_assert!(same >= 0.0 && cross >= 0.0);
    }

    #[test]
    fn binned_search_agrees_with_brute_force(
        pts in prop::collection::vec(prop::array::uniform3(0.0..=1.0f64), 1..200),
        queries in prop::collection::vec(prop::array::uniform3(-0.2..1.2f64), 1..20),
    ) {
        let ids: Vec<usize> = (0..pts.len()).collect();
        let index = BinnedIndex::new(pts.clone(), ids).unwrap();
        let map = EmbeddingMap {
            width: pts.len(),
            height: 1,
            dim: 3,
            values: pts.iter().flatten().copied().collect(),
            valid: vec![true; pts.len()],
        };
        for q in &queries {
            let (id, d) = index.nearest(q);
            let (bid, bd) = nearest_brute(&map, q).unwrap();
            prop_assert_eq!(d, bd);
            prop_assert_eq!(id, bid);
        }
    }

    #[test]
    fn rmse_is_at_least_mae(
        matches in prop::collection::vec((0usize..16, 0usize..16), 16 * 16),
        gt in prop::collection::vec(((0usize..16, 0usize..16), (0usize..16, 0usize..16)), 1..50),
    ) {
        let field = CorrespondenceField {
            width: 16,
            height: 16,
            matches: matches.iter().map(|&(x, y)| Some(([x, y], 0.0))).collect(),
        };
        let mut pairs = TrackPairs::default();
        for (k, ((ax, ay), (bx, by))) in gt.iter().enumerate() {
            pairs.push([*ax, *ay], [*bx, *by], k as u32);
        }
        let m = match_metrics(&field, &pairs).unwrap();
        prop_assert!(m.rmse >= m.mae - 1e-12);
        prop_assert!(m.mae >= 0.0);
    }

    #[test]
    fn larger_balls_select_supersets(
        coords in prop::collection::vec(prop::array::uniform3(0.0..=1.0f64), 64),
        center in prop::array::uniform3(0.0..=1.0f64),
        r1 in 0.0..0.5f64,
        grow in 0.0..0.5f64,
    ) {
        let mut map = UvwMap::new(8, 8);
        for (i, c) in coords.iter().enumerate() {
            map.set(i % 8, i / 8, *c);
        }
        let small = region_select(&map, &RegionSpec::Ball { center, radius: r1 });
        let large = region_select(&map, &RegionSpec::Ball { center, radius: r1 + grow });
        prop_assert!(small.iter().zip(&large).all(|(&s, &l)| !s || l));
        let all = region_select(&map, &RegionSpec::whole_cube());
        prop_assert!(all.iter().all(|&b| b));
    }

    #[test]
    fn huber_residual_squares_to_twice_the_huber_loss(r in -10.0..10.0f64, delta in 0.01..2.0f64) {
        let e = huber_residual(r, delta);
        let rho = if r.abs() <= delta { 0.5 * r * r } else { delta * (r.abs() - 0.5 * delta) };
        prop_assert!((0.5 * e * e - rho).abs() < 1e-12 * (1.0 + rho));
        prop_assert!(e * r >= 0.0);
    }

    #[test]
    fn learning_rate_stays_in_range(step in 0usize..3000, warmup in 0usize..200, base in 1e-5..1.0f64) {
        let total = 2000;
        let lr = cosine_lr(step, total, warmup, base);
        prop_assert!((0.0..=base).contains(&lr));
    }
}
