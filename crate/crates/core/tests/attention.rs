mod common;

use common::oracle::*;

use common::uniform;
use pointformer::attention::{
    multi_head_attention, projected_len, relative_pe, score_meter, AttentionLayer, AttentionMode, LayerSpec,
    Transblock,
};
use pointformer::autograd::Var;
use pointformer::nn::{FeedForward, ParamBuilder, RunCtx};
use pointformer::Tensor;
use proptest::prelude::*;

fn spec(d: usize, heads: usize) -> LayerSpec {
    LayerSpec {
        d_model: d,
        heads,
        ffn_hidden: 2 * d,
        dropout: 0.0,
        linformer: None,
        layernorm: false,
    }
}

#[test]
fn pe_matches_pairwise_oracle() {
    let mut pb = ParamBuilder::<f64>::new(1);
    let pe = FeedForward::new(&mut pb, "pe", 3, 7, 3, 0.0).unwrap();
    let b = pe.inner.bias.as_ref().unwrap();
    b.set_value(uniform(&mut common::rng(2), 1, 7, -0.3, 0.3)).unwrap();
    let mut r = common::rng(3);
    let (xq, xk) = (uniform::<f64>(&mut r, 8, 3, 0.0, 1.0), uniform::<f64>(&mut r, 10, 3, 0.0, 1.0));
    let out = relative_pe(&pe, &Var::constant(xq.clone()), &Var::constant(xk.clone()), 2).unwrap();
    assert_eq!(out.shape(), &[3 * 8, 5]);
    let (q, k) = (mat(&xq), mat(&xk));
    for m in 0..3 {
        for g in 0..2 {
            for i in 0..4 {
                for j in 0..5 {
                    let expect = pe_pair(&pe, &q[g * 4 + i], &k[g * 5 + j])[m];
                    assert!((out.value().at(m * 8 + g * 4 + i, j) - expect).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn grouped_attention_matches_double_loop_oracle() {
    let mut pb = ParamBuilder::<f64>::new(4);
    let layer = AttentionLayer::new(&mut pb, "att", spec(8, 2)).unwrap();
    let pe = FeedForward::new(&mut pb, "pe", 3, 6, 2, 0.0).unwrap();
    let mut r = common::rng(5);
    let (q, kv) = (uniform::<f64>(&mut r, 3 * 4, 8, -1.0, 1.0), uniform::<f64>(&mut r, 3 * 5, 8, -1.0, 1.0));
    let (xq, xk) = (uniform::<f64>(&mut r, 12, 3, 0.0, 1.0), uniform::<f64>(&mut r, 15, 3, 0.0, 1.0));
    let bias = relative_pe(&pe, &Var::constant(xq.clone()), &Var::constant(xk.clone()), 3).unwrap();
    let got = layer
        .forward(&Var::constant(q.clone()), &Var::constant(kv.clone()), Some(&bias), 3, &RunCtx::inference())
        .unwrap();
    let (y, w) = attention_oracle(&layer, Some(&pe), &mat(&q), &mat(&kv), &mat(&xq), &mat(&xk), 3);
    let expect = add(&y, &ffn(&y, &layer.ffn));
    assert!(max_diff(&mat(got.out.value()), &expect) < 1e-12);
    for m in 0..2 {
        assert!(max_diff(&mat(got.weights[m].value()), &w[m]) < 1e-12);
    }
}

#[test]
fn single_call_records_one_layer_of_stochastic_rows() {
    let mut pb = ParamBuilder::<f64>::new(6);
    let layer = AttentionLayer::new(&mut pb, "att", spec(4, 2)).unwrap();
    let pe = FeedForward::new(&mut pb, "pe", 3, 4, 2, 0.0).unwrap();
    let mut r = common::rng(7);
    let x = Var::constant(uniform::<f64>(&mut r, 6, 4, -1.0, 1.0));
    let c = Var::constant(uniform::<f64>(&mut r, 6, 3, 0.0, 1.0));
    let (out, rec) = multi_head_attention(&layer, &pe, &x, &x, &c, &c, AttentionMode::Full).unwrap();
    assert_eq!(out.shape(), &[6, 4]);
    assert_eq!((rec.n_layers(), rec.n_heads()), (1, 2));
    assert!(rec.max_stochastic_error() < 1e-12);
    assert!(multi_head_attention(&layer, &pe, &x, &x, &c, &c, AttentionMode::Linformer).is_err());
}

#[test]
fn two_layers_compose_as_sequential_oracle() {
    let mut pb = ParamBuilder::<f64>::new(8);
    let tb = Transblock::new(&mut pb, "tb", 2, spec(6, 3), 5).unwrap();
    let mut r = common::rng(9);
    let x = uniform::<f64>(&mut r, 2 * 5, 6, -1.0, 1.0);
    let c = uniform::<f64>(&mut r, 2 * 5, 3, 0.0, 1.0);
    let got = tb
        .forward(&Var::constant(x.clone()), &Var::constant(c.clone()), None, 2, &RunCtx::inference().retaining())
        .unwrap();
    let (cm, mut h) = (mat(&c), mat(&x));
    for layer in &tb.layers {
        let (y, _) = attention_oracle(layer, tb.pe.as_ref(), &h, &h, &cm, &cm, 2);
        h = add(&y, &ffn(&y, &layer.ffn));
    }
    assert!(max_diff(&mat(got.feats.value()), &h) < 1e-12);
    let rec = got.record.unwrap();
    assert_eq!((rec.n_layers(), rec.n_heads(), rec.groups), (2, 3, 2));
    assert_eq!(rec.matrix(1, 2, 1).shape(), &[5, 5]);
    assert!(rec.max_stochastic_error() < 1e-12);
}

#[test]
fn linformer_identity_with_r1_equals_full_attention() {
    let n = 12;
    let mut pb = ParamBuilder::<f64>::new(10);
    let full = AttentionLayer::new(&mut pb, "full", spec(8, 4)).unwrap();
    let mut lspec = spec(8, 4);
    lspec.linformer = Some((1, n));
    let mut pb2 = ParamBuilder::<f64>::new(10);
    let lin = AttentionLayer::new(&mut pb2, "full", lspec).unwrap();
    lin.linformer.as_ref().unwrap().set_identity().unwrap();
    let mut pairs = vec![
        (&full.wq.weight, &lin.wq.weight),
        (&full.wk.weight, &lin.wk.weight),
        (&full.wv.weight, &lin.wv.weight),
    ];
    let (fp, lp) = (full.ffn.params(), lin.ffn.params());
    pairs.extend(fp.iter().zip(&lp));
    for (src, dst) in pairs {
        dst.set_value(src.value()).unwrap();
    }
    assert_eq!(lin.mode(), AttentionMode::Linformer);
    let mut r = common::rng(11);
    let x = Var::constant(uniform::<f64>(&mut r, n, 8, -1.0, 1.0));
    let bias = Var::constant(uniform::<f64>(&mut r, 4 * n, n, -0.5, 0.5));
    let ctx = RunCtx::inference();
    let a = full.forward(&x, &x, Some(&bias), 1, &ctx).unwrap();
    let b = lin.forward(&x, &x, Some(&bias), 1, &ctx).unwrap();
    assert!(a.out.value().max_abs_diff(b.out.value()) < 1e-12);
}

#[test]
fn linformer_projects_keys_to_fixed_length() {
    let mut s = spec(8, 2);
    s.linformer = Some((4, 32));
    let mut pb = ParamBuilder::<f64>::new(12);
    let layer = AttentionLayer::new(&mut pb, "lin", s).unwrap();
    assert_eq!(layer.linformer.as_ref().unwrap().k_proj(), projected_len(32, 4));
    let mut r = common::rng(13);
    for n in [32, 20] {
        let x = Var::constant(uniform::<f64>(&mut r, n, 8, -1.0, 1.0));
        score_meter::reset();
        let att = layer.attend(&x, &x, None, 1).unwrap();
        assert_eq!(att.weights[0].shape(), &[n, 8]);
        assert_eq!(score_meter::bytes(), 2 * n * 8 * 8);
    }
    let x = Var::constant(uniform::<f64>(&mut r, 33, 8, -1.0, 1.0));
    assert!(layer.attend(&x, &x, None, 1).is_err());
}

#[test]
fn score_memory_scales_with_reduction_factor() {
    let n = 64;
    let mut r = common::rng(14);
    let x = Var::constant(uniform::<f32>(&mut r, n, 8, -1.0, 1.0));
    let mut pb = ParamBuilder::<f32>::new(15);
    let full = AttentionLayer::new(&mut pb, "f", spec(8, 2)).unwrap();
    let mut s = spec(8, 2);
    s.linformer = Some((8, n));
    let lin = AttentionLayer::new(&mut pb, "l", s).unwrap();
    score_meter::reset();
    full.attend(&x, &x, None, 1).unwrap();
    let full_bytes = score_meter::bytes();
    score_meter::reset();
    lin.attend(&x, &x, None, 1).unwrap();
    assert_eq!(full_bytes, 2 * n * n * 4);
    assert_eq!(score_meter::bytes() * 8, full_bytes);
}

#[test]
fn width_mismatch_is_rejected() {
    let mut pb = ParamBuilder::<f64>::new(16);
    let layer = AttentionLayer::new(&mut pb, "a", spec(4, 2)).unwrap();
    let q = Var::constant(Tensor::zeros(&[3, 4]));
    let kv = Var::constant(Tensor::zeros(&[3, 5]));
    assert!(layer.attend(&q, &kv, None, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..10_000, n in 1usize..12, heads in 1usize..4, scale in 0.1f64..50.0) {
        let d = 2 * heads;
        let mut pb = ParamBuilder::<f64>::new(seed);
        let layer = AttentionLayer::new(&mut pb, "a", spec(d, heads)).unwrap();
        let mut r = common::rng(seed);
        let x = Var::constant(uniform::<f64>(&mut r, n, d, -scale, scale));
        let att = layer.attend(&x, &x, None, 1).unwrap();
        for w in &att.weights {
            for i in 0..n {
                let row = w.value().row(i);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pe_ignores_common_translation(seed in 0u64..10_000, t in prop::array::uniform3(-10.0f64..10.0)) {
        let mut pb = ParamBuilder::<f64>::new(seed);
        let pe = FeedForward::new(&mut pb, "pe", 3, 5, 2, 0.0).unwrap();
        let mut r = common::rng(seed);
        let c = uniform::<f64>(&mut r, 6, 3, 0.0, 1.0);
        let mut s = c.clone();
        for row in s.data_mut().chunks_mut(3) {
            for (v, d) in row.iter_mut().zip(t) { *v += d; }
        }
        let a = relative_pe(&pe, &Var::constant(c.clone()), &Var::constant(c), 1).unwrap();
        let b = relative_pe(&pe, &Var::constant(s.clone()), &Var::constant(s), 1).unwrap();
        prop_assert!(a.value().max_abs_diff(b.value()) < 1e-9);
    }
}
