mod common;

use common::{cloud, d2, rows_f64};
use pointformer::autograd::Var;
use pointformer::point_ops::{
    ball_query, farthest_point_sample, group_features, idw_interpolate, FpsStart, PointCloud,
};
use pointformer::Tensor;
use proptest::prelude::*;

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    a.partial_cmp(b) == Some(std::cmp::Ordering::Less)
}

/// Recomputes every candidate's distance to the chosen set at each step.
fn fps_oracle(pts: &[Vec<f64>], n_out: usize) -> Vec<usize> {
    let mut start = 0;
    for i in 1..pts.len() {
        if lex_less(&pts[i], &pts[start]) {
            start = i;
        }
    }
    let mut chosen = vec![start];
    while chosen.len() < n_out {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..pts.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| d2(&pts[i], &pts[c])).fold(f64::INFINITY, f64::min);
            let better = match best {
                None => true,
                Some((bd, b)) => d > bd || (d == bd && (lex_less(&pts[i], &pts[b]) || (pts[i] == pts[b] && i < b))),
            };
            if better {
                best = Some((d, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

#[test]
fn fps_matches_brute_force_oracle() {
    for seed in 0..50 {
        let c = cloud::<f64>(seed, 200, 0);
        let got = farthest_point_sample(&c.coords, 32, FpsStart::Lexicographic).unwrap();
        assert_eq!(got, fps_oracle(&rows_f64(&c.coords), 32), "cloud {seed}");
    }
}

#[test]
fn fps_square_with_center() {
    let coords = Tensor::from_rows(&[
        vec![0.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![1.0, 1.0, 0.0],
        vec![0.5, 0.5, 0.0],
    ])
    .unwrap();
    assert_eq!(farthest_point_sample(&coords, 2, FpsStart::FirstIndex).unwrap(), vec![0, 3]);
    let all = farthest_point_sample(&coords, 5, FpsStart::Lexicographic).unwrap();
    let mut sorted = all.clone();
    sorted.sort();
    assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    assert!(farthest_point_sample(&coords, 6, FpsStart::Lexicographic).is_err());
    assert!(farthest_point_sample(&coords, 0, FpsStart::Lexicographic).is_err());
}

#[test]
fn fps_coverage_shrinks_with_more_samples() {
    let c = cloud::<f64>(3, 120, 0);
    let pts = rows_f64(&c.coords);
    let full = farthest_point_sample(&c.coords, 40, FpsStart::Lexicographic).unwrap();
    let mut prev = f64::INFINITY;
    for m in 1..=40 {
        let ids = farthest_point_sample(&c.coords, m, FpsStart::Lexicographic).unwrap();
        assert_eq!(ids[..], full[..m]);
        let cover = pts
            .iter()
            .map(|p| ids.iter().map(|&j| d2(p, &pts[j])).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max);
        assert!(cover <= prev);
        prev = cover;
    }
}

#[test]
fn ball_query_matches_exhaustive_scan() {
    for seed in 0..10 {
        let c = cloud::<f64>(100 + seed, 150, 0);
        let pts = rows_f64(&c.coords);
        let ids = farthest_point_sample(&c.coords, 20, FpsStart::Lexicographic).unwrap();
        for (radius, k) in [(0.15, 8), (0.3, 16), (0.05, 4), (2.0, 200)] {
            let nbr = ball_query(&c.coords, &ids, radius, k).unwrap();
            for (t, &ctr) in ids.iter().enumerate() {
                let row = nbr.row(t);
                let mut inside: Vec<usize> = (0..pts.len())
                    .filter(|&i| i != ctr && d2(&pts[i], &pts[ctr]) <= radius * radius)
                    .collect();
                if inside.len() > k - 1 {
                    inside.sort_by(|&a, &b| {
                        d2(&pts[a], &pts[ctr])
                            .partial_cmp(&d2(&pts[b], &pts[ctr]))
                            .unwrap()
                            .then_with(|| pts[a].partial_cmp(&pts[b]).unwrap())
                            .then(a.cmp(&b))
                    });
                    inside.truncate(k - 1);
                    inside.sort();
                }
                let mut expect = vec![ctr];
                expect.extend(&inside);
                expect.resize(k, ctr);
                assert_eq!(row, &expect[..]);
                assert_eq!(nbr.valid_counts[t], 1 + inside.len());
            }
        }
    }
}

#[test]
fn ball_query_isolated_centroid_pads_with_itself() {
    let coords = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![5.0, 0.0, 0.0]]).unwrap();
    let nbr = ball_query(&coords, &[0], 0.1, 4).unwrap();
    assert_eq!(nbr.row(0), &[0, 0, 0, 0]);
    assert_eq!(nbr.valid_counts, vec![1]);
    assert!(ball_query(&coords, &[0], 0.0, 4).is_err());
    assert!(ball_query(&coords, &[0], 0.1, 0).is_err());
    assert!(ball_query(&coords, &[2], 0.1, 2).is_err());
}

#[test]
fn grouping_matches_direct_indexing() {
    let c = cloud::<f64>(9, 60, 4);
    let ids = farthest_point_sample(&c.coords, 8, FpsStart::Lexicographic).unwrap();
    let nbr = ball_query(&c.coords, &ids, 0.3, 5).unwrap();
    let g = group_features(&Var::constant(c.coords.clone()), &Var::constant(c.feats.clone()), &nbr).unwrap();
    for t in 0..8 {
        for (s, &j) in nbr.row(t).iter().enumerate() {
            let r = t * 5 + s;
            assert_eq!(g.feats.value().row(r), c.feats.row(j));
            assert_eq!(g.coords.value().row(r), c.coords.row(j));
            for d in 0..3 {
                assert_eq!(g.rel_coords.value().at(r, d), c.coords.at(j, d) - c.coords.at(ids[t], d));
            }
        }
        assert_eq!(g.rel_coords.value().row(t * 5), &[0.0, 0.0, 0.0]);
    }
}

fn idw_oracle(low: &[Vec<f64>], feats: &[Vec<f64>], q: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..low.len()).collect();
    order.sort_by(|&a, &b| d2(&low[a], q).partial_cmp(&d2(&low[b], q)).unwrap().then(a.cmp(&b)));
    order.truncate(3);
    if d2(&low[order[0]], q) == 0.0 {
        return feats[order[0]].clone();
    }
    let w: Vec<f64> = order.iter().map(|&j| 1.0 / d2(&low[j], q)).collect();
    let total: f64 = w.iter().sum();
    let mut out = vec![0.0; feats[0].len()];
    for (&j, &wj) in order.iter().zip(&w) {
        for (o, f) in out.iter_mut().zip(&feats[j]) {
            *o += wj / total * f;
        }
    }
    out
}

#[test]
fn interpolation_matches_three_nn_oracle() {
    let low = cloud::<f64>(5, 12, 4);
    let high = cloud::<f64>(6, 40, 0);
    let out = idw_interpolate(
        &Var::constant(low.coords.clone()),
        &Var::constant(low.feats.clone()),
        &Var::constant(high.coords.clone()),
    )
    .unwrap();
    let (lc, lf) = (rows_f64(&low.coords), rows_f64(&low.feats));
    for (i, q) in rows_f64(&high.coords).iter().enumerate() {
        let expect = idw_oracle(&lc, &lf, q);
        for (a, b) in out.value().row(i).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn interpolation_exact_match_and_equidistant_cases() {
    let low = Tensor::<f64>::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![5.0, 5.0, 5.0]]).unwrap();
    let feats = Tensor::from_rows(&[vec![3.0], vec![6.0], vec![9.0], vec![100.0]]).unwrap();
    let high = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
    let out = idw_interpolate(&Var::constant(low), &Var::constant(feats), &Var::constant(high)).unwrap();
    assert_eq!(out.value().at(0, 0), 6.0);
    assert!((out.value().at(1, 0) - 6.0).abs() < 1e-12);
}

#[test]
fn interpolation_with_fewer_than_three_points() {
    let low = Tensor::<f64>::from_rows(&[vec![0.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]]).unwrap();
    let feats = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
    let high = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
    let out = idw_interpolate(&Var::constant(low), &Var::constant(feats), &Var::constant(high)).unwrap();
    assert!((out.value().at(0, 0) - 2.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fps_picks_same_coordinates_under_permutation(seed in 0u64..1000, n in 10usize..80) {
        let c = cloud::<f64>(seed, n, 0);
        let perm = common::permutation(seed + 1, n);
        let p = c.permuted(&perm);
        let m = n / 3 + 1;
        let a = farthest_point_sample(&c.coords, m, FpsStart::Lexicographic).unwrap();
        let b = farthest_point_sample(&p.coords, m, FpsStart::Lexicographic).unwrap();
        let ca: Vec<&[f64]> = a.iter().map(|&i| c.coords.row(i)).collect();
        let cb: Vec<&[f64]> = b.iter().map(|&i| p.coords.row(i)).collect();
        prop_assert_eq!(ca, cb);
    }

    #[test]
    fn ball_rows_are_in_radius_and_start_with_centroid(seed in 0u64..1000, radius in 0.05f64..0.8, k in 1usize..12) {
        let c: PointCloud<f64> = cloud(seed, 50, 0);
        let pts = rows_f64(&c.coords);
        let ids = farthest_point_sample(&c.coords, 10, FpsStart::Lexicographic).unwrap();
        let nbr = ball_query(&c.coords, &ids, radius, k).unwrap();
        for (t, &ctr) in ids.iter().enumerate() {
            let row = nbr.row(t);
            prop_assert_eq!(row[0], ctr);
            prop_assert!(row.iter().all(|&j| d2(&pts[j], &pts[ctr]) <= radius * radius));
            let valid = nbr.valid_counts[t];
            prop_assert!(row[1..valid].windows(2).all(|w| w[0] < w[1]));
            prop_assert!(row[valid..].iter().all(|&j| j == ctr));
        }
    }

    #[test]
    fn relative_coords_ignore_translation(seed in 0u64..1000, tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0) {
        let c: PointCloud<f64> = cloud(seed, 40, 1);
        let ids = farthest_point_sample(&c.coords, 6, FpsStart::Lexicographic).unwrap();
        let nbr = ball_query(&c.coords, &ids, 0.4, 6).unwrap();
        let s = c.translated([tx, ty, tz]);
        let a = group_features(&Var::constant(c.coords.clone()), &Var::constant(c.feats.clone()), &nbr).unwrap();
        let b = group_features(&Var::constant(s.coords.clone()), &Var::constant(s.feats.clone()), &nbr).unwrap();
        prop_assert!(a.rel_coords.value().max_abs_diff(b.rel_coords.value()) < 1e-12);
    }
}
