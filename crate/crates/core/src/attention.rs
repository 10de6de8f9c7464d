//! Multi-head attention with relative positional bias, stacked transformer
//! layers (self or cross), and low-rank key/value projection.
//!
//! Sequences are processed in batches of `groups` equal-length row blocks,
//! so one call covers every local region of a block (or one global set
//! with `groups = 1`). Heads are computed one at a time; only the matrices
//! that are asked for are kept.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{dim_err, Error, Result};
use crate::nn::{FeedForward, Linear, Param, ParamBuilder, RunCtx};
use crate::ops;
use crate::tensor::{Real, Tensor};

thread_local! {
    static SCORE_BYTES: Cell<usize> = const { Cell::new(0) };
}

/// Accounting of attention score-matrix allocations on this thread.
pub mod score_meter {
    use super::SCORE_BYTES;

    pub fn reset() {
        SCORE_BYTES.with(|c| c.set(0));
    }

    /// Bytes of score matrices allocated since the last reset.
    pub fn bytes() -> usize {
        SCORE_BYTES.with(|c| c.get())
    }

    pub(super) fn add(n: usize) {
        SCORE_BYTES.with(|c| c.set(c.get() + n));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Full,
    Linformer,
}

/// Projected key count for `n_max` keys and reduction factor `r`.
pub fn projected_len(n_max: usize, r: usize) -> usize {
    n_max.div_ceil(r.max(1))
}

/// Per-pair positional bias `pe_net(x_q[i] − x_k[j])`, one scalar per head.
///
/// `x_q` is `[g·n_q × 3]`, `x_k` is `[g·n_k × 3]`; pairs only form within a
/// group. The result is `[M·g·n_q × n_k]` with head `m` in row block `m`,
/// matching the layout of [`ops::split_heads`]. Hidden activations are
/// recomputed in the backward pass instead of stored.
pub fn relative_pe<T: Real>(
    pe: &FeedForward<T>,
    x_q: &Var<T>,
    x_k: &Var<T>,
    groups: usize,
) -> Result<Var<T>> {
    if x_q.cols() != 3 || x_k.cols() != 3 || pe.d_in() != 3 {
        return dim_err("relative_pe", x_q.shape(), x_k.shape());
    }
    if groups == 0 || !x_q.rows().is_multiple_of(groups) || !x_k.rows().is_multiple_of(groups) {
        return Err(Error::Argument(format!(
            "relative_pe: {}/{} rows do not split into {groups} groups",
            x_q.rows(),
            x_k.rows()
        )));
    }
    let nq = x_q.rows() / groups;
    let nk = x_k.rows() / groups;
    let hidden = pe.inner.d_out();
    let heads = pe.d_out();
    let w1 = pe.inner.weight.var();
    let b1 = pe.inner.bias.as_ref().expect("pe bias").var();
    let w2 = pe.outer.weight.var();
    let b2 = pe.outer.bias.as_ref().expect("pe bias").var();

    let rows = groups * nq;
    let mut out = vec![T::zero(); heads * rows * nk];
    let mut h = vec![T::zero(); hidden];
    {
        let (xq, xk) = (x_q.value(), x_k.value());
        let (w1v, b1v, w2v, b2v) = (w1.value().data(), b1.value().data(), w2.value().data(), b2.value().data());
        for g in 0..groups {
            for i in 0..nq {
                let qi = xq.row(g * nq + i);
                let r = g * nq + i;
                for j in 0..nk {
                    let kj = xk.row(g * nk + j);
                    let d = [qi[0] - kj[0], qi[1] - kj[1], qi[2] - kj[2]];
                    pe_hidden(&d, w1v, b1v, &mut h);
                    for m in 0..heads {
                        let mut acc = b2v[m];
                        for (a, &hv) in h.iter().enumerate() {
                            acc = acc + hv * w2v[a * heads + m];
                        }
                        out[(m * rows + r) * nk + j] = acc;
                    }
                }
            }
        }
    }
    Ok(Var::from_op(
        Tensor::matrix(heads * rows, nk, out)?,
        vec![x_q.clone(), x_k.clone(), w1, b1, w2, b2],
        Box::new(move |gout, _, p, needs| {
            let (xq, xk) = (p[0].value(), p[1].value());
            let (w1v, b1v, w2v) = (p[2].value().data(), p[3].value().data(), p[4].value().data());
            let mut gxq = vec![T::zero(); xq.len()];
            let mut gxk = vec![T::zero(); xk.len()];
            let mut gw1 = vec![T::zero(); w1v.len()];
            let mut gb1 = vec![T::zero(); hidden];
            let mut gw2 = vec![T::zero(); w2v.len()];
            let mut gb2 = vec![T::zero(); heads];
            let mut h = vec![T::zero(); hidden];
            let mut dh = vec![T::zero(); hidden];
            let mut gm = vec![T::zero(); heads];
            for g in 0..groups {
                for i in 0..nq {
                    let r = g * nq + i;
                    let qi = xq.row(r);
                    for j in 0..nk {
                        for (m, slot) in gm.iter_mut().enumerate() {
                            *slot = gout[(m * rows + r) * nk + j];
                        }
                        if gm.iter().all(|v| *v == T::zero()) {
                            continue;
                        }
                        let kj = xk.row(g * nk + j);
                        let d = [qi[0] - kj[0], qi[1] - kj[1], qi[2] - kj[2]];
                        pe_hidden(&d, w1v, b1v, &mut h);
                        for (m, &gv) in gm.iter().enumerate() {
                            gb2[m] = gb2[m] + gv;
                        }
                        for a in 0..hidden {
                            let mut acc = T::zero();
                            for (m, &gv) in gm.iter().enumerate() {
                                gw2[a * heads + m] = gw2[a * heads + m] + h[a] * gv;
                                acc = acc + w2v[a * heads + m] * gv;
                            }
                            dh[a] = if h[a] > T::zero() { acc } else { T::zero() };
                            gb1[a] = gb1[a] + dh[a];
                        }
                        for (c, &dc) in d.iter().enumerate() {
                            let mut acc = T::zero();
                            for a in 0..hidden {
                                gw1[c * hidden + a] = gw1[c * hidden + a] + dc * dh[a];
                                acc = acc + w1v[c * hidden + a] * dh[a];
                            }
                            gxq[r * 3 + c] = gxq[r * 3 + c] + acc;
                            let kr = (g * nk + j) * 3 + c;
                            gxk[kr] = gxk[kr] - acc;
                        }
                    }
                }
            }
            vec![
                needs[0].then_some(gxq),
                needs[1].then_some(gxk),
                needs[2].then_some(gw1),
                needs[3].then_some(gb1),
                needs[4].then_some(gw2),
                needs[5].then_some(gb2),
            ]
        }),
    ))
}

#[inline]
fn pe_hidden<T: Real>(d: &[T; 3], w1: &[T], b1: &[T], h: &mut [T]) {
    let hidden = h.len();
    for (a, slot) in h.iter_mut().enumerate() {
        let v = b1[a] + d[0] * w1[a] + d[1] * w1[hidden + a] + d[2] * w1[2 * hidden + a];
        *slot = v.max(T::zero());
    }
}

/// Low-rank projection `E · X` of an `[n × d]` key or value matrix.
pub fn linformer_project<T: Real>(e: &Var<T>, x: &Var<T>) -> Result<Var<T>> {
    if e.cols() != x.rows() {
        return dim_err("linformer_project", e.shape(), x.shape());
    }
    ops::left_project(e, x, 1)
}

/// Key/value projections shared by all heads of one layer.
#[derive(Clone, Debug)]
pub struct LinformerProj<T: Real> {
    pub e: Param<T>,
    pub f: Param<T>,
    pub n_max: usize,
}

impl<T: Real> LinformerProj<T> {
    pub fn k_proj(&self) -> usize {
        self.e.meta().shape[0]
    }

    /// Sets both projections to the rectangular identity.
    pub fn set_identity(&self) -> Result<()> {
        let (k, n) = (self.k_proj(), self.n_max);
        let mut t = Tensor::zeros(&[k, n]);
        for i in 0..k.min(n) {
            t.set(i, i, T::one());
        }
        self.e.set_value(t.clone())?;
        self.f.set_value(t)
    }
}

/// One transformer layer: multi-head attention and a residual FFN.
#[derive(Clone, Debug)]
pub struct AttentionLayer<T: Real> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub ffn: FeedForward<T>,
    pub linformer: Option<LinformerProj<T>>,
    pub heads: usize,
    pub layernorm: bool,
}

/// Per-layer settings for [`AttentionLayer::new`].
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    /// `(r, n_max)` enables low-rank keys/values.
    pub linformer: Option<(usize, usize)>,
    pub layernorm: bool,
}

/// Result of one attention call.
pub struct Attended<T: Real> {
    /// Residual input plus concatenated head outputs.
    pub out: Var<T>,
    /// Per head `[g·n_q × n_keys]` row-stochastic weights, where `n_keys`
    /// is the projected count in low-rank mode.
    pub weights: Vec<Var<T>>,
}

impl<T: Real> AttentionLayer<T> {
    pub fn new(pb: &mut ParamBuilder<T>, name: &str, spec: LayerSpec) -> Result<Self> {
        let LayerSpec { d_model, heads, .. } = spec;
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: {heads} heads do not divide width {d_model}"
            )));
        }
        let linformer = match spec.linformer {
            None => None,
            Some((r, n_max)) => {
                if r == 0 || n_max == 0 {
                    return Err(Error::Config(format!("{name}: linformer needs r ≥ 1 and n_max ≥ 1")));
                }
                let k = projected_len(n_max, r);
                Some(LinformerProj {
                    e: pb.xavier(format!("{name}.lin_e"), k, n_max)?,
                    f: pb.xavier(format!("{name}.lin_f"), k, n_max)?,
                    n_max,
                })
            }
        };
        Ok(Self {
            wq: Linear::no_bias(pb, &format!("{name}.wq"), d_model, d_model)?,
            wk: Linear::no_bias(pb, &format!("{name}.wk"), d_model, d_model)?,
            wv: Linear::no_bias(pb, &format!("{name}.wv"), d_model, d_model)?,
            ffn: FeedForward::new(pb, &format!("{name}.ffn"), d_model, spec.ffn_hidden, d_model, spec.dropout)?,
            linformer,
            heads,
            layernorm: spec.layernorm,
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.d_in()
    }

    pub fn mode(&self) -> AttentionMode {
        if self.linformer.is_some() {
            AttentionMode::Linformer
        } else {
            AttentionMode::Full
        }
    }

    fn norm(&self, x: &Var<T>) -> Var<T> {
        if self.layernorm {
            ops::layer_norm_rows(x, T::from_f64_lossy(1e-5))
        } else {
            x.clone()
        }
    }

    /// `q + Concat_m(softmax(Q_m K_mᵀ/√d_head + bias_m) V_m)`.
    ///
    /// `bias`, if given, is `[M·g·n_q × n_k]` as produced by [`relative_pe`].
    pub fn attend(
        &self,
        q: &Var<T>,
        kv: &Var<T>,
        bias: Option<&Var<T>>,
        groups: usize,
    ) -> Result<Attended<T>> {
        let d = self.d_model();
        if q.cols() != d || kv.cols() != d {
            return dim_err("multi_head_attention", q.shape(), kv.shape());
        }
        if groups == 0 || !q.rows().is_multiple_of(groups) || !kv.rows().is_multiple_of(groups) {
            return Err(Error::Argument(format!(
                "attention: {}/{} rows do not split into {groups} groups",
                q.rows(),
                kv.rows()
            )));
        }
        let nq = q.rows() / groups;
        let nk = kv.rows() / groups;
        let heads = self.heads;
        let rows = groups * nq;
        if let Some(b) = bias {
            if b.rows() != heads * rows || b.cols() != nk {
                return dim_err("attention_bias", b.shape(), &[heads * rows, nk]);
            }
        }
        let (qn, kvn) = (self.norm(q), self.norm(kv));
        let mut kk = self.wk.forward(&kvn)?;
        let mut vv = self.wv.forward(&kvn)?;
        let qq = self.wq.forward(&qn)?;
        let mut bias = bias.cloned();
        if let Some(lin) = &self.linformer {
            if nk > lin.n_max {
                return Err(Error::Argument(format!(
                    "linformer attention got {nk} keys but was built for at most {}",
                    lin.n_max
                )));
            }
            let (e, f) = if nk == lin.n_max {
                (lin.e.var(), lin.f.var())
            } else {
                (ops::slice_cols(&lin.e.var(), 0, nk)?, ops::slice_cols(&lin.f.var(), 0, nk)?)
            };
            kk = ops::left_project(&e, &kk, groups)?;
            vv = ops::left_project(&f, &vv, groups)?;
            bias = bias.map(|b| ops::matmul_nt(&b, &e)).transpose()?;
        }
        let n_keys = kk.rows() / groups;
        let d_head = d / heads;
        let scale = T::one() / T::from_usize(d_head).unwrap().sqrt();
        let qh = ops::scale(&ops::split_heads(&qq, heads)?, scale);
        let kh = ops::split_heads(&kk, heads)?;
        let vh = ops::split_heads(&vv, heads)?;

        let mut head_out = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for m in 0..heads {
            let q_m = ops::slice_rows(&qh, m * rows, rows)?;
            let k_m = ops::slice_rows(&kh, m * groups * n_keys, groups * n_keys)?;
            let v_m = ops::slice_rows(&vh, m * groups * n_keys, groups * n_keys)?;
            let mut logits = ops::bmm_nt(&q_m, &k_m, groups)?;
            score_meter::add(logits.value().len() * T::BYTES);
            if let Some(b) = &bias {
                logits = ops::add(&logits, &ops::slice_rows(b, m * rows, rows)?)?;
            }
            let a = ops::softmax_rows(&logits);
            drop(logits);
            head_out.push(ops::bmm(&a, &v_m, groups)?);
            weights.push(a);
        }
        let merged = ops::merge_heads(&ops::concat_rows(&head_out)?, heads)?;
        Ok(Attended {
            out: ops::add(q, &merged)?,
            weights,
        })
    }

    /// Attention followed by `o = y + FFN(y)`.
    pub fn forward(
        &self,
        q: &Var<T>,
        kv: &Var<T>,
        bias: Option<&Var<T>>,
        groups: usize,
        ctx: &RunCtx,
    ) -> Result<Attended<T>> {
        let att = self.attend(q, kv, bias, groups)?;
        let ff = self.ffn.forward(&self.norm(&att.out), ctx)?;
        Ok(Attended {
            out: ops::add(&att.out, &ff)?,
            weights: att.weights,
        })
    }
}

/// Retained attention matrices: `layers[l][m]` is `[g·n_q × n_keys]`.
#[derive(Clone, Debug, Default)]
pub struct AttentionRecord<T: Real> {
    pub groups: usize,
    pub layers: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> AttentionRecord<T> {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    /// `[n_q × n_keys]` matrix of one head for one group.
    pub fn matrix(&self, layer: usize, head: usize, group: usize) -> Tensor<T> {
        let full = &self.layers[layer][head];
        let nq = full.rows() / self.groups;
        let idx: Vec<usize> = (group * nq..(group + 1) * nq).collect();
        full.select_rows(&idx)
    }

    /// Average over heads of one layer's full matrix.
    pub fn head_mean(&self, layer: usize) -> Tensor<T> {
        let heads = &self.layers[layer];
        let inv = T::one() / T::from_usize(heads.len()).unwrap();
        let mut acc = heads[0].clone();
        for h in &heads[1..] {
            for (a, &v) in acc.data_mut().iter_mut().zip(h.data()) {
                *a = *a + v;
            }
        }
        acc.map(|v| v * inv)
    }

    /// Largest deviation from row-stochasticity over all stored matrices;
    /// negative entries count as deviations too.
    pub fn max_stochastic_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for m in self.layers.iter().flatten() {
            for r in 0..m.rows() {
                let row = m.row(r);
                let s: f64 = row.iter().map(|v| v.to_f64_lossy()).sum();
                worst = worst.max((s - 1.0).abs());
                for &v in row {
                    let v = v.to_f64_lossy();
                    if v < 0.0 {
                        worst = worst.max(-v);
                    }
                    if v > 1.0 {
                        worst = worst.max(v - 1.0);
                    }
                }
            }
        }
        worst
    }
}

/// Stack of attention layers sharing one positional-encoding network.
#[derive(Clone, Debug)]
pub struct Transblock<T: Real> {
    pub pe: Option<FeedForward<T>>,
    pub layers: Vec<AttentionLayer<T>>,
}

/// Output of a [`Transblock`] call.
pub struct TransblockOutput<T: Real> {
    pub feats: Var<T>,
    /// Differentiable per-head weights of the last layer.
    pub last_weights: Vec<Var<T>>,
    /// All layers' weights when the run context asks for them.
    pub record: Option<AttentionRecord<T>>,
}

impl<T: Real> Transblock<T> {
    /// `layers` copies of `spec`, plus a `3 → pe_hidden → heads` encoder
    /// when `pe_hidden > 0`.
    pub fn new(
        pb: &mut ParamBuilder<T>,
        name: &str,
        n_layers: usize,
        spec: LayerSpec,
        pe_hidden: usize,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config(format!("{name}: needs at least one layer")));
        }
        let pe = (pe_hidden > 0)
            .then(|| FeedForward::new(pb, &format!("{name}.pe"), 3, pe_hidden, spec.heads, 0.0))
            .transpose()?;
        let layers = (0..n_layers)
            .map(|l| AttentionLayer::new(pb, &format!("{name}.layer{l}"), spec))
            .collect::<Result<_>>()?;
        Ok(Self { pe, layers })
    }

    pub fn heads(&self) -> usize {
        self.layers[0].heads
    }

    pub fn d_model(&self) -> usize {
        self.layers[0].d_model()
    }

    /// Self-attention over `feats` (or cross-attention against `kv` when
    /// given), `groups` independent sequences at once.
    pub fn forward(
        &self,
        feats: &Var<T>,
        coords: &Var<T>,
        kv: Option<(&Var<T>, &Var<T>)>,
        groups: usize,
        ctx: &RunCtx,
    ) -> Result<TransblockOutput<T>> {
        let (kv_feats, kv_coords) = kv.unwrap_or((feats, coords));
        let cross = kv.is_some();
        let bias = self
            .pe
            .as_ref()
            .map(|pe| relative_pe(pe, coords, kv_coords, groups))
            .transpose()?;
        let mut x = feats.clone();
        let mut record = ctx.retain_attention.then(|| AttentionRecord {
            groups,
            layers: Vec::new(),
        });
        let mut last = Vec::new();
        for layer in &self.layers {
            let keys = if cross { kv_feats } else { &x };
            let att = layer.forward(&x, &keys.clone(), bias.as_ref(), groups, ctx)?;
            if let Some(rec) = record.as_mut() {
                rec.layers.push(att.weights.iter().map(|w| w.value().clone()).collect());
            }
            x = att.out;
            last = att.weights;
        }
        Ok(TransblockOutput {
            feats: x,
            last_weights: last,
            record,
        })
    }

    pub fn params(&self) -> Vec<Param<T>> {
        let mut out: Vec<Param<T>> = self.pe.iter().flat_map(FeedForward::params).collect();
        for l in &self.layers {
            out.extend([l.wq.weight.clone(), l.wk.weight.clone(), l.wv.weight.clone()]);
            out.extend(l.ffn.params());
            if let Some(lin) = &l.linformer {
                out.extend([lin.e.clone(), lin.f.clone()]);
            }
        }
        out
    }
}

/// Single attention call with positional bias computed from `x_q`, `x_k`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Real>(
    layer: &AttentionLayer<T>,
    pe: &FeedForward<T>,
    q_feats: &Var<T>,
    k_feats: &Var<T>,
    x_q: &Var<T>,
    x_k: &Var<T>,
    mode: AttentionMode,
) -> Result<(Var<T>, AttentionRecord<T>)> {
    if mode != layer.mode() {
        return Err(Error::Argument(format!(
            "layer was built for {:?} attention, asked for {mode:?}",
            layer.mode()
        )));
    }
    let bias = relative_pe(pe, x_q, x_k, 1)?;
    let att = layer.attend(q_feats, k_feats, Some(&bias), 1)?;
    let record = AttentionRecord {
        groups: 1,
        layers: vec![att.weights.iter().map(|w| w.value().clone()).collect()],
    };
    Ok((att.out, record))
}
