//! Local, local-global and global transformer stages and the block that
//! chains them.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionRecord, LayerSpec, Transblock};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Param, ParamBuilder, RunCtx};
use crate::ops;
use crate::point_ops::{ball_query, farthest_point_sample, group_features, FpsStart, NeighborhoodIndex};
use crate::tensor::{Real, Tensor};

/// How a K-token group collapses to one feature after the local stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Output of token 0 (the centroid).
    #[default]
    Centroid,
    MaxPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerNormMode {
    #[default]
    None,
    /// Normalize inputs of attention and FFN sublayers.
    Pre,
}

/// Low-rank reduction factor per stage; 0 keeps full attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinformerFactors {
    pub lt: usize,
    pub lgt: usize,
    pub gt: usize,
}

fn two() -> usize {
    2
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn pe_hidden_default() -> usize {
    16
}

/// Hyperparameters of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    /// Expected incoming point count; `None` accepts any.
    #[serde(default)]
    pub n_in: Option<usize>,
    pub n_out: usize,
    pub radius: f64,
    pub k_samples: usize,
    /// Working width of the local stage.
    pub c_in: usize,
    /// Working width of the local-global stage.
    pub c_med: usize,
    /// Width of the global stage and of the block output.
    pub c_out: usize,
    #[serde(default = "two")]
    pub layers_lt: usize,
    #[serde(default = "two")]
    pub layers_gt: usize,
    #[serde(default = "one")]
    pub layers_lgt: usize,
    pub heads: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub linformer_r: LinformerFactors,
    #[serde(default)]
    pub use_lgt: bool,
    #[serde(default = "yes")]
    pub use_refinement: bool,
    #[serde(default)]
    pub readout: Readout,
    #[serde(default)]
    pub layernorm: LayerNormMode,
    #[serde(default)]
    pub fps_start: FpsStart,
    /// Hidden width of each layer's FFN as a multiple of its model width.
    #[serde(default = "two")]
    pub ffn_ratio: usize,
    /// Hidden width of the positional-encoding network.
    #[serde(default = "pe_hidden_default")]
    pub pe_hidden: usize,
}

impl BlockConfig {
    /// Minimal config with the default layer counts.
    pub fn new(n_out: usize, radius: f64, k_samples: usize, widths: [usize; 3], heads: usize) -> Self {
        Self {
            n_in: None,
            n_out,
            radius,
            k_samples,
            c_in: widths[0],
            c_med: widths[1],
            c_out: widths[2],
            layers_lt: 2,
            layers_gt: 2,
            layers_lgt: 1,
            heads,
            dropout: 0.0,
            linformer_r: LinformerFactors::default(),
            use_lgt: false,
            use_refinement: true,
            readout: Readout::Centroid,
            layernorm: LayerNormMode::None,
            fps_start: FpsStart::Lexicographic,
            ffn_ratio: 2,
            pe_hidden: 16,
        }
    }

    pub fn validate(&self, label: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{label}: {msg}")));
        if self.n_out == 0 {
            return bad("n_out must be positive".into());
        }
        if let Some(n_in) = self.n_in {
            if self.n_out > n_in {
                return bad(format!("n_out {} exceeds n_in {n_in}", self.n_out));
            }
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return bad(format!("radius must be positive, got {}", self.radius));
        }
        if self.k_samples == 0 {
            return bad("k_samples must be positive".into());
        }
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        for (name, w, used) in [
            ("c_in", self.c_in, true),
            ("c_med", self.c_med, self.use_lgt),
            ("c_out", self.c_out, true),
        ] {
            if w == 0 {
                return bad(format!("{name} must be positive"));
            }
            if used && w % self.heads != 0 {
                return bad(format!("{} heads do not divide {name} = {w}", self.heads));
            }
        }
        if self.layers_lt == 0 || self.layers_gt == 0 || (self.use_lgt && self.layers_lgt == 0) {
            return bad("every enabled stage needs at least one layer".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0,1)", self.dropout));
        }
        if self.ffn_ratio == 0 {
            return bad("ffn_ratio must be positive".into());
        }
        if self.use_refinement && self.linformer_r.lt > 0 {
            return bad("centroid refinement needs full attention in the local stage".into());
        }
        if self.use_lgt && self.linformer_r.lgt > 0 && self.n_in.is_none() {
            return bad("low-rank local-global attention needs n_in".into());
        }
        Ok(())
    }

    fn spec(&self, width: usize, layers_dropout: f64, r: usize, n_max: usize) -> LayerSpec {
        LayerSpec {
            d_model: width,
            heads: self.heads,
            ffn_hidden: self.ffn_ratio * width,
            dropout: layers_dropout,
            linformer: (r > 0).then_some((r, n_max)),
            layernorm: self.layernorm == LayerNormMode::Pre,
        }
    }
}

/// Cross-attention from block centroids to the block's input points.
#[derive(Clone, Debug)]
pub struct LocalGlobal<T: Real> {
    pub q_embed: FeedForward<T>,
    pub kv_embed: FeedForward<T>,
    pub tb: Transblock<T>,
}

#[derive(Clone, Debug)]
pub struct PointformerBlock<T: Real> {
    pub cfg: BlockConfig,
    pub in_channels: usize,
    pub lt_embed: FeedForward<T>,
    pub lt: Transblock<T>,
    pub lgt: Option<LocalGlobal<T>>,
    pub gt_embed: FeedForward<T>,
    pub gt: Transblock<T>,
}

/// Local stage result.
pub struct LocalOutput<T: Real> {
    /// One feature row per centroid, `[N′ × c_in]`.
    pub feats: Var<T>,
    pub neighborhood: NeighborhoodIndex,
    /// Absolute group coordinates, `[N′·K × 3]`.
    pub group_coords: Var<T>,
    /// Last layer's per-head weights, each `[N′·K × K]`.
    pub last_weights: Vec<Var<T>>,
    pub record: Option<AttentionRecord<T>>,
}

pub struct BlockOutput<T: Real> {
    /// Refined (or raw, when refinement is off) centroids, `[N′ × 3]`.
    pub centroids: Var<T>,
    pub feats: Var<T>,
    pub pre_refinement_centroids: Tensor<T>,
    pub neighborhood: NeighborhoodIndex,
    pub lt_records: Option<AttentionRecord<T>>,
    pub lgt_records: Option<AttentionRecord<T>>,
    pub gt_records: Option<AttentionRecord<T>>,
}

/// Attention-weighted centroid: the head-averaged attention row of token 0
/// in the local stage's last layer, applied to the group's absolute
/// coordinates. Returns `[G × 3]`.
pub fn refine_centroids<T: Real>(
    last_weights: &[Var<T>],
    group_coords: &Var<T>,
    groups: usize,
) -> Result<Var<T>> {
    let first = last_weights
        .first()
        .ok_or_else(|| Error::Argument("refinement needs at least one attention head".into()))?;
    if groups == 0 || first.rows() % groups != 0 {
        return Err(Error::Argument(format!(
            "{} attention rows do not split into {groups} groups",
            first.rows()
        )));
    }
    let k = first.rows() / groups;
    if first.cols() != k || group_coords.rows() != groups * k || group_coords.cols() != 3 {
        return Err(Error::Dimension {
            op: "refine_centroids",
            lhs: first.shape().to_vec(),
            rhs: group_coords.shape().to_vec(),
        });
    }
    let row0: Vec<usize> = (0..groups).map(|t| t * k).collect();
    let mut w = ops::gather_rows(first, &row0)?;
    for a in &last_weights[1..] {
        w = ops::add(&w, &ops::gather_rows(a, &row0)?)?;
    }
    let w = ops::scale(&w, T::one() / T::from_usize(last_weights.len()).unwrap());
    ops::bmm(&w, group_coords, groups)
}

impl<T: Real> PointformerBlock<T> {
    pub fn new(pb: &mut ParamBuilder<T>, name: &str, cfg: &BlockConfig, in_channels: usize) -> Result<Self> {
        cfg.validate(name)?;
        let c = cfg;
        let lt_embed = FeedForward::new(pb, &format!("{name}.lt.embed"), in_channels, c.c_in, c.c_in, 0.0)?;
        let lt = Transblock::new(
            pb,
            &format!("{name}.lt"),
            c.layers_lt,
            c.spec(c.c_in, 0.0, c.linformer_r.lt, c.k_samples),
            c.pe_hidden,
        )?;
        let lgt = if c.use_lgt {
            Some(LocalGlobal {
                q_embed: FeedForward::new(pb, &format!("{name}.lgt.q_embed"), c.c_in, c.c_med, c.c_med, 0.0)?,
                kv_embed: FeedForward::new(
                    pb,
                    &format!("{name}.lgt.kv_embed"),
                    in_channels,
                    c.c_med,
                    c.c_med,
                    0.0,
                )?,
                tb: Transblock::new(
                    pb,
                    &format!("{name}.lgt"),
                    c.layers_lgt,
                    c.spec(c.c_med, c.dropout, c.linformer_r.lgt, c.n_in.unwrap_or(0)),
                    c.pe_hidden,
                )?,
            })
        } else {
            None
        };
        let gt_in = if c.use_lgt { c.c_med } else { c.c_in };
        let gt_embed = FeedForward::new(pb, &format!("{name}.gt.embed"), gt_in, c.c_out, c.c_out, 0.0)?;
        let gt = Transblock::new(
            pb,
            &format!("{name}.gt"),
            c.layers_gt,
            c.spec(c.c_out, c.dropout, c.linformer_r.gt, c.n_out),
            c.pe_hidden,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            in_channels,
            lt_embed,
            lt,
            lgt,
            gt_embed,
            gt,
        })
    }

    /// Sampling, grouping and the shared per-group transformer.
    pub fn local_transformer(&self, coords: &Var<T>, feats: &Var<T>, ctx: &RunCtx) -> Result<LocalOutput<T>> {
        let n = coords.rows();
        if self.cfg.n_out > n {
            return Err(Error::Argument(format!(
                "block samples {} centroids from only {n} points",
                self.cfg.n_out
            )));
        }
        if let Some(n_in) = self.cfg.n_in {
            if n != n_in {
                return Err(Error::Argument(format!("block expects {n_in} input points, got {n}")));
            }
        }
        let ids = farthest_point_sample(coords.value(), self.cfg.n_out, self.cfg.fps_start)?;
        let nbr = ball_query(coords.value(), &ids, self.cfg.radius, self.cfg.k_samples)?;
        let embedded = self.lt_embed.forward(feats, ctx)?;
        let grouped = group_features(coords, &embedded, &nbr)?;
        let groups = nbr.n_groups();
        let out = self.lt.forward(&grouped.feats, &grouped.rel_coords, None, groups, ctx)?;
        let k = nbr.k;
        let feats = match self.cfg.readout {
            Readout::Centroid => {
                let rows: Vec<usize> = (0..groups).map(|t| t * k).collect();
                ops::gather_rows(&out.feats, &rows)?
            }
            Readout::MaxPool => ops::max_pool_groups(&out.feats, groups)?,
        };
        Ok(LocalOutput {
            feats,
            neighborhood: nbr,
            group_coords: grouped.coords,
            last_weights: out.last_weights,
            record: out.record,
        })
    }

    /// Centroid features query the block's input points.
    pub fn local_global_transformer(
        &self,
        low_feats: &Var<T>,
        low_coords: &Var<T>,
        high_feats: &Var<T>,
        high_coords: &Var<T>,
        ctx: &RunCtx,
    ) -> Result<(Var<T>, Option<AttentionRecord<T>>)> {
        let lgt = self
            .lgt
            .as_ref()
            .ok_or_else(|| Error::Config("block was built without the local-global stage".into()))?;
        let q = lgt.q_embed.forward(low_feats, ctx)?;
        let kv = lgt.kv_embed.forward(high_feats, ctx)?;
        let out = lgt.tb.forward(&q, low_coords, Some((&kv, high_coords)), 1, ctx)?;
        Ok((out.feats, out.record))
    }

    /// Embedding followed by self-attention over the whole point set.
    pub fn global_transformer(
        &self,
        feats: &Var<T>,
        coords: &Var<T>,
        ctx: &RunCtx,
    ) -> Result<(Var<T>, Option<AttentionRecord<T>>)> {
        let x = self.gt_embed.forward(feats, ctx)?;
        let out = self.gt.forward(&x, coords, None, 1, ctx)?;
        Ok((out.feats, out.record))
    }

    pub fn forward(&self, coords: &Var<T>, feats: &Var<T>, ctx: &RunCtx) -> Result<BlockOutput<T>> {
        if feats.cols() != self.in_channels {
            return Err(Error::Dimension {
                op: "pointformer_block",
                lhs: feats.shape().to_vec(),
                rhs: vec![coords.rows(), self.in_channels],
            });
        }
        let local = self.local_transformer(coords, feats, ctx)?;
        let raw = ops::gather_rows(coords, &local.neighborhood.centroid_ids)?;
        let pre_refinement_centroids = raw.value().clone();
        let centroids = if self.cfg.use_refinement {
            refine_centroids(&local.last_weights, &local.group_coords, local.neighborhood.n_groups())?
        } else {
            raw
        };
        let (mid, lgt_records) = if self.lgt.is_some() {
            let (f, r) = self.local_global_transformer(&local.feats, &centroids, feats, coords, ctx)?;
            (f, r)
        } else {
            (local.feats.clone(), None)
        };
        let (out, gt_records) = self.global_transformer(&mid, &centroids, ctx)?;
        Ok(BlockOutput {
            centroids,
            feats: out,
            pre_refinement_centroids,
            neighborhood: local.neighborhood,
            lt_records: local.record,
            lgt_records,
            gt_records,
        })
    }

    pub fn params(&self) -> Vec<Param<T>> {
        let mut out = self.lt_embed.params();
        out.extend(self.lt.params());
        if let Some(l) = &self.lgt {
            out.extend(l.q_embed.params());
            out.extend(l.kv_embed.params());
            out.extend(l.tb.params());
        }
        out.extend(self.gt_embed.params());
        out.extend(self.gt.params());
        out
    }
}
