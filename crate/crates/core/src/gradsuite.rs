//! Fixed tiny instances for the finite-difference suite, grouped by scope.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{relative_pe, AttentionLayer, LayerSpec, Transblock};
use crate::autograd::Var;
use crate::backbone::{Backbone, BackboneConfig, FpStage};
use crate::blocks::{refine_centroids, BlockConfig, PointformerBlock, Readout};
use crate::error::{Error, Result};
use crate::gradcheck::{check_params, GradReport};
use crate::nn::{FeedForward, Linear, Param, ParamBuilder, RunCtx};
use crate::ops;
use crate::point_ops::{idw_interpolate, FeaturePropagation, PointCloud};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Op,
    Block,
    Backbone,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "block" => Ok(Scope::Block),
            "backbone" => Ok(Scope::Backbone),
            other => Err(Error::Argument(format!("unknown scope {other}; expected op, block or backbone"))),
        }
    }
}

/// Scalar probe `Σ out ⊙ R` with a fixed random `R`, so every output
/// element contributes a distinct weight.
pub fn probe_loss(out: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r: Vec<f64> = (0..out.value().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(ops::sum(&ops::mul_const(out, &Tensor::new(out.shape().to_vec(), r)?)?))
}

struct Fixture {
    pb: ParamBuilder<f64>,
    rng: ChaCha8Rng,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        Self {
            pb: ParamBuilder::new(seed),
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
        }
    }

    fn uniform(&mut self, name: &str, rows: usize, cols: usize, lo: f64, hi: f64) -> Result<Param<f64>> {
        let p = self.pb.zeros(name, rows, cols)?;
        let data = (0..rows * cols).map(|_| self.rng.gen_range(lo..hi)).collect();
        p.set_value(Tensor::matrix(rows, cols, data)?)?;
        Ok(p)
    }

    fn input(&mut self, name: &str, rows: usize, cols: usize) -> Result<Param<f64>> {
        self.uniform(name, rows, cols, -1.0, 1.0)
    }

    fn coords(&mut self, name: &str, rows: usize) -> Result<Param<f64>> {
        self.uniform(name, rows, 3, 0.0, 1.0)
    }
}

struct Case {
    name: &'static str,
    params: Vec<Param<f64>>,
    forward: Box<dyn Fn() -> Result<Var<f64>>>,
}

fn case(name: &'static str, params: Vec<Param<f64>>, f: impl Fn() -> Result<Var<f64>> + 'static) -> Case {
    Case {
        name,
        params,
        forward: Box::new(f),
    }
}

macro_rules! vars {
    ($($p:ident),*) => { $(let $p = $p.var();)* };
}

fn op_cases() -> Result<Vec<Case>> {
    let mut fx = Fixture::new(11);
    let mut out = Vec::new();

    let (a, b) = (fx.input("a", 3, 4)?, fx.input("b", 4, 5)?);
    out.push(case("matmul", vec![a.clone(), b.clone()], {
        let (a, b) = (a.clone(), b.clone());
        move || {
            vars!(a, b);
            ops::matmul(&a, &b)
        }
    }));
    let (a, b) = (fx.input("ba", 6, 2)?, fx.input("bb", 4, 5)?);
    out.push(case("bmm", vec![a.clone(), b.clone()], move || {
        vars!(a, b);
        ops::bmm(&a, &b, 2)
    }));
    let (a, b) = (fx.input("na", 6, 3)?, fx.input("nb", 8, 3)?);
    out.push(case("bmm_nt", vec![a.clone(), b.clone()], move || {
        vars!(a, b);
        ops::bmm_nt(&a, &b, 2)
    }));
    let (a, b) = (fx.input("ma", 3, 4)?, fx.input("mb", 5, 4)?);
    out.push(case("matmul_nt", vec![a.clone(), b.clone()], move || {
        vars!(a, b);
        ops::matmul_nt(&a, &b)
    }));
    let (e, x) = (fx.input("e", 2, 4)?, fx.input("x", 8, 3)?);
    out.push(case("left_project", vec![e.clone(), x.clone()], move || {
        vars!(e, x);
        ops::left_project(&e, &x, 2)
    }));
    let (a, b, r) = (fx.input("ea", 3, 4)?, fx.input("eb", 3, 4)?, fx.input("er", 1, 4)?);
    out.push(case("elementwise", vec![a.clone(), b.clone(), r.clone()], move || {
        vars!(a, b, r);
        let c = Tensor::full(&[3, 4], 0.7);
        let s = ops::sub(&ops::add(&a, &b)?, &ops::scale(&b, 0.3))?;
        let m = ops::mul_const(&ops::mul(&s, &a)?, &c)?;
        ops::add_row(&m, &r)
    }));
    let a = fx.input("relu", 4, 5)?;
    out.push(case("relu", vec![a.clone()], move || Ok(ops::relu(&a.var()))));
    let a = fx.uniform("softmax", 4, 6, -3.0, 3.0)?;
    out.push(case("softmax_rows", vec![a.clone()], move || Ok(ops::softmax_rows(&a.var()))));
    let a = fx.input("reduce", 3, 3)?;
    out.push(case("sum_mean", vec![a.clone()], move || {
        let a = a.var();
        ops::add(&ops::sum(&ops::mul(&a, &a)?), &ops::mean(&ops::relu(&a)))
    }));
    let a = fx.input("gather", 5, 3)?;
    out.push(case("gather_rows", vec![a.clone()], move || {
        ops::gather_rows(&a.var(), &[4, 0, 0, 2, 4, 4])
    }));
    let (a, b) = (fx.input("ca", 4, 2)?, fx.input("cb", 4, 3)?);
    out.push(case("concat_slice", vec![a.clone(), b.clone()], move || {
        vars!(a, b);
        let c = ops::concat_cols(&[a.clone(), b.clone()])?;
        let r = ops::concat_rows(&[c.clone(), ops::scale(&c, 2.0)])?;
        let s = ops::slice_cols(&r, 1, 3)?;
        ops::slice_rows(&s, 2, 5)
    }));
    let a = fx.input("heads", 3, 6)?;
    out.push(case("split_merge_heads", vec![a.clone()], move || {
        let h = ops::split_heads(&a.var(), 3)?;
        let h = ops::mul(&h, &h)?;
        ops::merge_heads(&h, 3)
    }));
    let a = fx.input("pool", 8, 3)?;
    out.push(case("max_pool_groups", vec![a.clone()], move || ops::max_pool_groups(&a.var(), 2)));
    let a = fx.input("ln", 4, 5)?;
    out.push(case("layer_norm_rows", vec![a.clone()], move || Ok(ops::layer_norm_rows(&a.var(), 1e-5))));

    let x = fx.input("lin.x", 5, 3)?;
    let lin = Linear::new(&mut fx.pb, "lin", 3, 4)?;
    let mut p = vec![x.clone(), lin.weight.clone()];
    p.extend(lin.bias.clone());
    out.push(case("linear", p, move || lin.forward(&x.var())));

    let x = fx.input("ffn.x", 5, 4)?;
    let ffn = FeedForward::new(&mut fx.pb, "ffn", 4, 6, 3, 0.0)?;
    let mut p = ffn.params();
    p.push(x.clone());
    out.push(case("feed_forward", p, move || ffn.forward(&x.var(), &RunCtx::inference())));

    let (xq, xk) = (fx.coords("pe.xq", 6)?, fx.coords("pe.xk", 8)?);
    let pe = FeedForward::new(&mut fx.pb, "pe", 3, 5, 2, 0.0)?;
    let mut p = pe.params();
    p.extend([xq.clone(), xk.clone()]);
    out.push(case("relative_pe", p, move || relative_pe(&pe, &xq.var(), &xk.var(), 2)));

    for (name, linformer, layernorm) in [
        ("attention", None, false),
        ("attention_linformer", Some((2, 5)), false),
        ("attention_layernorm", None, true),
    ] {
        let spec = LayerSpec {
            d_model: 4,
            heads: 2,
            ffn_hidden: 8,
            dropout: 0.0,
            linformer,
            layernorm,
        };
        let layer = AttentionLayer::new(&mut fx.pb, name, spec)?;
        let pe = FeedForward::new(&mut fx.pb, &format!("{name}.pe"), 3, 4, 2, 0.0)?;
        let (q, kv) = (fx.input(&format!("{name}.q"), 6, 4)?, fx.input(&format!("{name}.kv"), 10, 4)?);
        let (xq, xk) = (fx.coords(&format!("{name}.xq"), 6)?, fx.coords(&format!("{name}.xk"), 10)?);
        if let Some(l) = &layer.linformer {
            for e in [&l.e, &l.f] {
                let mut v = e.value();
                v.data_mut().iter_mut().for_each(|x| *x += fx.rng.gen_range(-0.5..0.5));
                e.set_value(v)?;
            }
        }
        let mut p = vec![
            layer.wq.weight.clone(),
            layer.wk.weight.clone(),
            layer.wv.weight.clone(),
            q.clone(),
            kv.clone(),
            xq.clone(),
            xk.clone(),
        ];
        p.extend(layer.ffn.params());
        p.extend(pe.params());
        if let Some(l) = &layer.linformer {
            p.extend([l.e.clone(), l.f.clone()]);
        }
        out.push(case(name, p, move || {
            let bias = relative_pe(&pe, &xq.var(), &xk.var(), 2)?;
            let o = layer.forward(&q.var(), &kv.var(), Some(&bias), 2, &RunCtx::inference())?;
            Ok(o.out)
        }));
    }

    let spec = LayerSpec {
        d_model: 4,
        heads: 2,
        ffn_hidden: 8,
        dropout: 0.0,
        linformer: None,
        layernorm: false,
    };
    let tb = Transblock::new(&mut fx.pb, "tb", 2, spec, 4)?;
    let (q, kv) = (fx.input("tb.q", 3, 4)?, fx.input("tb.kv", 7, 4)?);
    let (xq, xk) = (fx.coords("tb.xq", 3)?, fx.coords("tb.xk", 7)?);
    let mut p = tb.params();
    p.extend([q.clone(), kv.clone(), xq.clone(), xk.clone()]);
    out.push(case("transblock_cross", p, move || {
        let kv = kv.var();
        let xk = xk.var();
        Ok(tb.forward(&q.var(), &xq.var(), Some((&kv, &xk)), 1, &RunCtx::inference())?.feats)
    }));

    let logits = fx.uniform("refine.logits", 2 * 3 * 4, 4, -2.0, 2.0)?;
    let gc = fx.coords("refine.coords", 3 * 4)?;
    out.push(case("refinement", vec![logits.clone(), gc.clone()], move || {
        let w = ops::softmax_rows(&logits.var());
        let heads = [ops::slice_rows(&w, 0, 12)?, ops::slice_rows(&w, 12, 12)?];
        refine_centroids(&heads, &gc.var(), 3)
    }));

    let (lc, lf, hc) = (fx.coords("idw.low", 5)?, fx.input("idw.feats", 5, 3)?, fx.coords("idw.high", 7)?);
    out.push(case("idw_interpolate", vec![lc.clone(), lf.clone(), hc.clone()], move || {
        idw_interpolate(&lc.var(), &lf.var(), &hc.var())
    }));

    let (lc, lf, hc) = (fx.coords("fp.low", 4)?, fx.input("fp.feats", 4, 3)?, fx.coords("fp.high", 9)?);
    let skip = fx.input("fp.skip", 9, 2)?;
    let fp = FeaturePropagation::new(&mut fx.pb, "fp", 3, 2, 4)?;
    let mut p = fp.ffn.params();
    p.extend([lc.clone(), lf.clone(), hc.clone(), skip.clone()]);
    out.push(case("feature_propagation", p, move || {
        fp.forward(&lc.var(), &lf.var(), &hc.var(), &skip.var(), &RunCtx::inference())
    }));

    let (used, frozen) = (fx.input("used", 3, 3)?, fx.input("frozen", 3, 3)?);
    out.push(case("frozen_parameter", vec![frozen], move || Ok(ops::relu(&used.var()))));
    Ok(out)
}

/// The block instance of the suite: N=24, N′=4, K=6, width 8, 2 heads,
/// one layer per stage.
pub fn tiny_block_config() -> BlockConfig {
    let mut cfg = BlockConfig::new(4, 0.5, 6, [8, 8, 8], 2);
    cfg.n_in = Some(24);
    cfg.layers_lt = 1;
    cfg.layers_gt = 1;
    cfg.layers_lgt = 1;
    cfg.use_lgt = true;
    cfg.pe_hidden = 4;
    cfg
}

fn block_cases() -> Result<Vec<Case>> {
    let mut out = Vec::new();
    let variants: [(&'static str, fn(&mut BlockConfig)); 4] = [
        ("pointformer_block", |_| {}),
        ("block_max_pool", |c| c.readout = Readout::MaxPool),
        ("block_gt_linformer", |c| c.linformer_r.gt = 2),
        ("block_without_lgt_refinement", |c| {
            c.use_lgt = false;
            c.use_refinement = false;
        }),
    ];
    for (i, (name, tweak)) in variants.into_iter().enumerate() {
        let mut fx = Fixture::new(21 + i as u64);
        let mut cfg = tiny_block_config();
        tweak(&mut cfg);
        let coords = fx.coords("coords", 24)?;
        let feats = fx.input("feats", 24, 3)?;
        let block = PointformerBlock::new(&mut fx.pb, "block", &cfg, 3)?;
        let mut p = block.params();
        p.extend([coords.clone(), feats.clone()]);
        out.push(case(name, p, move || {
            let o = block.forward(&coords.var(), &feats.var(), &RunCtx::inference())?;
            ops::concat_cols(&[o.feats, o.centroids])
        }));
    }
    Ok(out)
}

/// Backbone instance of the suite: two blocks and two upsampling stages.
pub fn tiny_backbone_config() -> BackboneConfig {
    let mut b0 = BlockConfig::new(6, 0.6, 4, [8, 8, 8], 2);
    b0.n_in = Some(24);
    let mut b1 = BlockConfig::new(2, 0.9, 3, [8, 8, 8], 2);
    b1.n_in = Some(6);
    for b in [&mut b0, &mut b1] {
        b.layers_lt = 1;
        b.layers_gt = 1;
        b.use_lgt = true;
        b.pe_hidden = 4;
    }
    BackboneConfig {
        name: Some("grad_tiny".into()),
        input_channels: 2,
        blocks: vec![b0, b1],
        fp_stages: vec![FpStage { target: 6, width: 8 }, FpStage { target: 24, width: 6 }],
        seed: 5,
        precision: crate::tensor::Precision::F64,
    }
}

fn backbone_cases() -> Result<Vec<Case>> {
    let cfg = tiny_backbone_config();
    let mut pb = ParamBuilder::<f64>::new(cfg.seed);
    let model = Backbone::new(&mut pb, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords = (0..24 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let feats = (0..24 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cloud = PointCloud::new(Tensor::matrix(24, 3, coords)?, Tensor::matrix(24, 2, feats)?)?;
    let params = model.params();
    Ok(vec![case("backbone", params, move || {
        let out = model.forward(&cloud, &RunCtx::inference())?;
        Ok(out.last().feats.clone())
    })])
}

/// Moves every value off its initial point (zero biases would otherwise
/// leave ReLU inputs exactly on the kink for coincident coordinates).
fn jitter(params: &[Param<f64>], seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params {
        let mut v = p.value();
        v.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.1..0.1));
        p.set_value(v)?;
    }
    Ok(())
}

/// Runs every component of `scope` and reports one line each.
pub fn run(scope: Scope, eps: f64, tol: f64) -> Result<Vec<GradReport>> {
    let cases = match scope {
        Scope::Op => op_cases()?,
        Scope::Block => block_cases()?,
        Scope::Backbone => backbone_cases()?,
    };
    cases
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            jitter(&c.params, 100 + i as u64)?;
            let f = c.forward;
            check_params(c.name, &c.params, || probe_loss(&f()?, i as u64), eps, tol)
        })
        .collect()
}
