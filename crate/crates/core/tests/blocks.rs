mod common;

use common::oracle::*;
use common::{cloud, max_abs, sorted_pairs, uniform};
use pointformer::attention::Transblock;
use pointformer::autograd::Var;
use pointformer::blocks::{refine_centroids, BlockConfig, PointformerBlock, Readout};
use pointformer::nn::{ParamBuilder, RunCtx};
use pointformer::point_ops::{ball_query, farthest_point_sample, PointCloud};
use pointformer::{ops, Real, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn small_config() -> BlockConfig {
    let mut cfg = BlockConfig::new(8, 0.35, 6, [8, 8, 8], 2);
    cfg.use_lgt = true;
    cfg.pe_hidden = 6;
    cfg
}

fn build<T: Real>(cfg: &BlockConfig, c_in: usize, seed: u64) -> PointformerBlock<T> {
    let mut pb = ParamBuilder::new(seed);
    PointformerBlock::new(&mut pb, "b", cfg, c_in).unwrap()
}

fn run<T: Real>(block: &PointformerBlock<T>, c: &PointCloud<T>) -> pointformer::blocks::BlockOutput<T> {
    block
        .forward(&Var::constant(c.coords.clone()), &Var::constant(c.feats.clone()), &RunCtx::inference())
        .unwrap()
}

fn transblock_oracle(tb: &Transblock<f64>, x: &M, xq: &M, kv: Option<(&M, &M)>) -> M {
    let mut h = x.clone();
    for layer in &tb.layers {
        let (keys, kc) = kv.unwrap_or((&h, xq));
        let (y, _) = attention_oracle(layer, tb.pe.as_ref(), &h, &keys.clone(), xq, &kc.clone(), 1);
        h = y.iter().zip(ffn(&y, &layer.ffn)).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
    }
    h
}

#[test]
fn local_transformer_matches_per_group_oracle() {
    for readout in [Readout::Centroid, Readout::MaxPool] {
        let mut cfg = small_config();
        cfg.readout = readout;
        let block = build::<f64>(&cfg, 3, 1);
        let c = cloud::<f64>(2, 48, 3);
        let lt = block
            .local_transformer(&Var::constant(c.coords.clone()), &Var::constant(c.feats.clone()), &RunCtx::inference())
            .unwrap();
        let ids = farthest_point_sample(&c.coords, 8, cfg.fps_start).unwrap();
        let nbr = ball_query(&c.coords, &ids, cfg.radius, cfg.k_samples).unwrap();
        assert_eq!(lt.neighborhood, nbr);
        let (pts, feats) = (mat(&c.coords), mat(&c.feats));
        for (t, &ctr) in ids.iter().enumerate() {
            let members = nbr.row(t);
            let x: M = members.iter().map(|&j| feats[j].clone()).collect();
            let rel: M = members.iter().map(|&j| (0..3).map(|d| pts[j][d] - pts[ctr][d]).collect()).collect();
            let h = transblock_oracle(&block.lt, &ffn(&x, &block.lt_embed), &rel, None);
            let expect: Vec<f64> = match readout {
                Readout::Centroid => h[0].clone(),
                Readout::MaxPool => (0..8).map(|ch| h.iter().map(|r| r[ch]).fold(f64::NEG_INFINITY, f64::max)).collect(),
            };
            assert!(max_abs(lt.feats.value().row(t), &expect) < 1e-12);
        }
    }
}

#[test]
fn local_global_matches_cross_attention_oracle() {
    let block = build::<f64>(&small_config(), 3, 3);
    let c = cloud::<f64>(4, 40, 3);
    let mut r = common::rng(5);
    let low_f = uniform::<f64>(&mut r, 8, 8, -1.0, 1.0);
    let low_c = uniform::<f64>(&mut r, 8, 3, 0.0, 1.0);
    let (got, rec) = block
        .local_global_transformer(
            &Var::constant(low_f.clone()),
            &Var::constant(low_c.clone()),
            &Var::constant(c.feats.clone()),
            &Var::constant(c.coords.clone()),
            &RunCtx::inference().retaining(),
        )
        .unwrap();
    let lgt = block.lgt.as_ref().unwrap();
    let q = ffn(&mat(&low_f), &lgt.q_embed);
    let kv = ffn(&mat(&c.feats), &lgt.kv_embed);
    let expect = transblock_oracle(&lgt.tb, &q, &mat(&low_c), Some((&kv, &mat(&c.coords))));
    assert!(max_diff(&mat(got.value()), &expect) < 1e-12);
    let rec = rec.unwrap();
    assert_eq!(rec.matrix(0, 0, 0).shape(), &[8, 40]);
    assert!(rec.max_stochastic_error() < 1e-12);
}

#[test]
fn ablated_block_is_global_of_local() {
    let mut cfg = small_config();
    cfg.use_lgt = false;
    cfg.use_refinement = false;
    let block = build::<f64>(&cfg, 3, 6);
    let c = cloud::<f64>(7, 40, 3);
    let out = run(&block, &c);
    let ctx = RunCtx::inference();
    let coords = Var::constant(c.coords.clone());
    let lt = block.local_transformer(&coords, &Var::constant(c.feats.clone()), &ctx).unwrap();
    let raw = c.coords.select_rows(&lt.neighborhood.centroid_ids);
    assert_eq!(out.centroids.value(), &raw);
    assert_eq!(out.pre_refinement_centroids, raw);
    let (gt, _) = block.global_transformer(&lt.feats, &Var::constant(raw), &ctx).unwrap();
    assert_eq!(out.feats.value(), gt.value());
}

#[test]
fn disabling_refinement_keeps_fps_centroids_bit_exact() {
    let mut cfg = small_config();
    cfg.use_refinement = false;
    let c = cloud::<f32>(8, 50, 3);
    let out = run(&build::<f32>(&cfg, 3, 9), &c);
    let ids = farthest_point_sample(&c.coords, 8, cfg.fps_start).unwrap();
    assert_eq!(out.centroids.value(), &c.coords.select_rows(&ids));
}

#[test]
fn refined_centroids_match_weighted_group_average() {
    let cfg = small_config();
    let block = build::<f64>(&cfg, 3, 10);
    let c = cloud::<f64>(11, 48, 3);
    let ctx = RunCtx::inference().retaining();
    let out = block
        .forward(&Var::constant(c.coords.clone()), &Var::constant(c.feats.clone()), &ctx)
        .unwrap();
    let rec = out.lt_records.as_ref().unwrap();
    let last = rec.n_layers() - 1;
    let pts = mat(&c.coords);
    for t in 0..8 {
        let members = out.neighborhood.row(t);
        let mut expect = [0.0; 3];
        for m in 0..rec.n_heads() {
            let a = rec.matrix(last, m, t);
            for (s, &j) in members.iter().enumerate() {
                for d in 0..3 {
                    expect[d] += a.at(0, s) * pts[j][d] / rec.n_heads() as f64;
                }
            }
        }
        assert!(max_abs(out.centroids.value().row(t), &expect) < 1e-12);
    }
}

#[test]
fn full_block_shapes_and_records() {
    let cfg = small_config();
    let block = build::<f64>(&cfg, 3, 12);
    let c = cloud::<f64>(13, 64, 3);
    let out = block
        .forward(&Var::constant(c.coords.clone()), &Var::constant(c.feats.clone()), &RunCtx::inference().retaining())
        .unwrap();
    assert_eq!(out.feats.shape(), &[8, 8]);
    assert_eq!(out.centroids.shape(), &[8, 3]);
    for rec in [&out.lt_records, &out.lgt_records, &out.gt_records] {
        let rec = rec.as_ref().unwrap();
        assert!(rec.max_stochastic_error() < 1e-12);
        for l in 0..rec.n_layers() {
            let m = rec.head_mean(l);
            for i in 0..m.rows() {
                assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
    assert_eq!(out.lt_records.as_ref().unwrap().groups, 8);
    assert_eq!(out.gt_records.as_ref().unwrap().matrix(0, 0, 0).shape(), &[8, 8]);
}

#[test]
fn block_rejects_wrong_inputs() {
    let mut cfg = small_config();
    cfg.n_in = Some(30);
    let block = build::<f64>(&cfg, 3, 14);
    let ctx = RunCtx::inference();
    let c = cloud::<f64>(15, 40, 3);
    let coords = Var::constant(c.coords.clone());
    assert!(block.forward(&coords, &Var::constant(c.feats.clone()), &ctx).is_err());
    assert!(block.forward(&coords, &Var::constant(Tensor::zeros(&[40, 2])), &ctx).is_err());
    let few = cloud::<f64>(16, 5, 3);
    let block = build::<f64>(&small_config(), 3, 14);
    let err = block
        .forward(&Var::constant(few.coords.clone()), &Var::constant(few.feats.clone()), &ctx)
        .err()
        .unwrap();
    assert!(err.to_string().contains('5'), "{err}");
}

#[test]
fn dropout_only_acts_in_training() {
    let mut cfg = small_config();
    cfg.dropout = 0.4;
    let block = build::<f64>(&cfg, 3, 17);
    let c = cloud::<f64>(18, 40, 3);
    let a = run(&block, &c);
    let b = run(&block, &c);
    assert_eq!(a.feats.value(), b.feats.value());
    let t = block
        .forward(&Var::constant(c.coords.clone()), &Var::constant(c.feats.clone()), &RunCtx::training(1))
        .unwrap();
    assert!(t.feats.value().max_abs_diff(a.feats.value()) > 0.0);
}

fn random_group_weights(rng: &mut rand_chacha::ChaCha8Rng, groups: usize, k: usize, heads: usize) -> Vec<Var<f64>> {
    (0..heads)
        .map(|_| {
            let spread = rng.gen_range(0.1..20.0);
            let logits = uniform::<f64>(rng, groups * k, k, -spread, spread);
            ops::softmax_rows(&Var::constant(logits))
        })
        .collect()
}

#[test]
fn refinement_stays_in_group_box() {
    let mut r = common::rng(19);
    let (groups, k) = (1000, 7);
    let w = random_group_weights(&mut r, groups, k, 3);
    let coords = uniform::<f64>(&mut r, groups * k, 3, -4.0, 4.0);
    let out = refine_centroids(&w, &Var::constant(coords.clone()), groups).unwrap();
    for t in 0..groups {
        for d in 0..3 {
            let vals: Vec<f64> = (0..k).map(|s| coords.at(t * k + s, d)).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = out.value().at(t, d);
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}

fn permutation_case<T: Real>(seed: u64) -> f64 {
    let block = build::<T>(&small_config(), 3, seed);
    let c = cloud::<T>(seed + 1000, 48, 3);
    let p = c.permuted(&common::permutation(seed + 2000, 48));
    let (a, b) = (run(&block, &c), run(&block, &p));
    let (pa, pb) = (
        sorted_pairs(a.centroids.value(), a.feats.value()),
        sorted_pairs(b.centroids.value(), b.feats.value()),
    );
    pa.iter()
        .zip(&pb)
        .map(|(x, y)| max_abs(&x.0, &y.0).max(max_abs(&x.1, &y.1)))
        .fold(0.0, f64::max)
}

fn translation_case<T: Real>(seed: u64, t: [f64; 3]) -> (f64, f64) {
    let block = build::<T>(&small_config(), 3, seed);
    let c = cloud::<T>(seed + 3000, 48, 3);
    let s = c.translated(t.map(T::from_f64_lossy));
    let (a, b) = (run(&block, &c), run(&block, &s));
    let mut shift = 0.0f64;
    for i in 0..a.centroids.rows() {
        for d in 0..3 {
            let moved = b.centroids.value().at(i, d).to_f64_lossy() - a.centroids.value().at(i, d).to_f64_lossy();
            shift = shift.max((moved - t[d]).abs());
        }
    }
    let feat = a.feats.value().cast::<f64>().max_abs_diff(&b.feats.value().cast::<f64>());
    (shift, feat)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn block_is_permutation_invariant(seed in 0u64..10_000) {
        prop_assert!(permutation_case::<f64>(seed) < 1e-10);
        prop_assert!(permutation_case::<f32>(seed) < 1e-5);
    }

    #[test]
    fn block_is_translation_equivariant(seed in 0u64..10_000, t in prop::array::uniform3(-3.0f64..3.0)) {
        let (shift, feat) = translation_case::<f64>(seed, t);
        prop_assert!(shift < 1e-10 && feat < 1e-10, "{} {}", shift, feat);
    }

    #[test]
    fn uniform_attention_refines_to_group_mean(seed in 0u64..10_000, k in 1usize..10) {
        let mut r = common::rng(seed);
        let coords = uniform::<f64>(&mut r, 4 * k, 3, -2.0, 2.0);
        let w = Var::constant(Tensor::full(&[4 * k, k], 1.0 / k as f64));
        let out = refine_centroids(&[w.clone(), w], &Var::constant(coords.clone()), 4).unwrap();
        for t in 0..4 {
            for d in 0..3 {
                let mean = (0..k).map(|s| coords.at(t * k + s, d)).sum::<f64>() / k as f64;
                prop_assert!((out.value().at(t, d) - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn block_config_rejects_bad_combinations() {
    let mut cfg = small_config();
    cfg.linformer_r.lt = 2;
    assert!(cfg.validate("b").is_err());
    cfg.use_refinement = false;
    assert!(cfg.validate("b").is_ok());
    let mut cfg = small_config();
    cfg.heads = 3;
    let mut pb = ParamBuilder::<f64>::new(0);
    assert!(PointformerBlock::new(&mut pb, "b", &cfg, 3).is_err());
}
