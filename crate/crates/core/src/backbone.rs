//! Multi-resolution backbone: a chain of blocks followed by
//! feature-propagation upsampling, plus the bundled configs and a small
//! gradient-descent overfitting loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::blocks::{BlockConfig, BlockOutput, PointformerBlock};
use crate::error::{Error, Result};
use crate::nn::{Linear, Param, ParamBuilder, ParamStore, RunCtx};
use crate::ops;
use crate::point_ops::{FeaturePropagation, PointCloud};
use crate::tensor::{Precision, Real, Tensor};

pub const INDOOR: &str = include_str!("../presets/indoor.json");
pub const KITTI: &str = include_str!("../presets/kitti.json");
pub const OVERFIT_TINY: &str = include_str!("../presets/overfit_tiny.json");

/// Upsampling target: the resolution to return to and the output width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpStage {
    pub target: usize,
    pub width: usize,
}

fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// Feature channels carried by input clouds (a constant-1 channel is
    /// always prepended).
    #[serde(default)]
    pub input_channels: usize,
    pub blocks: Vec<BlockConfig>,
    #[serde(default)]
    pub fp_stages: Vec<FpStage>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

/// Names accepted by [`BackboneConfig::preset`].
pub const PRESETS: [&str; 3] = ["indoor", "kitti", "overfit_tiny"];

impl BackboneConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "indoor" => INDOOR,
            "kitti" => KITTI,
            "overfit_tiny" => OVERFIT_TINY,
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other}; available: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Self::from_json(text)
    }

    /// Resolution of every down stage, input first (`None` if unconstrained).
    pub fn resolutions(&self) -> Vec<Option<usize>> {
        std::iter::once(self.blocks.first().and_then(|b| b.n_in))
            .chain(self.blocks.iter().map(|b| Some(b.n_out)))
            .collect()
    }

    /// Checks chaining and resolves, for each upsampling stage, the index of
    /// the down stage it returns to (0 is the input).
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.blocks.is_empty() {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        for (t, b) in self.blocks.iter().enumerate() {
            b.validate(&format!("block {t}"))?;
        }
        for t in 1..self.blocks.len() {
            let prev = self.blocks[t - 1].n_out;
            let cur = &self.blocks[t];
            if let Some(n_in) = cur.n_in {
                if n_in != prev {
                    return Err(Error::Config(format!(
                        "block {t} expects n_in {n_in} but block {} emits {prev} points",
                        t - 1
                    )));
                }
            }
            if cur.n_out > prev {
                return Err(Error::Config(format!(
                    "block {t} samples {} points from the {prev} emitted by block {}",
                    cur.n_out,
                    t - 1
                )));
            }
        }
        let res = self.resolutions();
        let mut cursor = self.blocks.len();
        let mut targets = Vec::with_capacity(self.fp_stages.len());
        for (i, fp) in self.fp_stages.iter().enumerate() {
            if fp.width == 0 {
                return Err(Error::Config(format!("fp stage {i}: width must be positive")));
            }
            let found = (0..cursor).rev().find(|&s| res[s] == Some(fp.target));
            match found {
                Some(s) => {
                    targets.push(s);
                    cursor = s;
                }
                None => {
                    return Err(Error::Config(format!(
                        "fp stage {i}: target resolution {} is not an earlier stage resolution",
                        fp.target
                    )))
                }
            }
        }
        Ok(targets)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Down,
    Up,
}

pub struct Stage<T: Real> {
    pub kind: StageKind,
    pub coords: Var<T>,
    pub feats: Var<T>,
}

pub struct BackboneOutput<T: Real> {
    /// Down stages in block order, then upsampling stages.
    pub stages: Vec<Stage<T>>,
    pub blocks: Vec<BlockOutput<T>>,
}

impl<T: Real> BackboneOutput<T> {
    pub fn last(&self) -> &Stage<T> {
        self.stages.last().expect("at least one stage")
    }
}

struct FpPlan<T: Real> {
    module: FeaturePropagation<T>,
    high_stage: usize,
}

pub struct Backbone<T: Real> {
    pub cfg: BackboneConfig,
    pub blocks: Vec<PointformerBlock<T>>,
    fps: Vec<FpPlan<T>>,
}

/// Instantiates every parameter from `cfg.seed`.
pub fn build<T: Real>(cfg: &BackboneConfig) -> Result<(Backbone<T>, ParamStore<T>)> {
    let mut pb = ParamBuilder::new(cfg.seed);
    let model = Backbone::new(&mut pb, cfg)?;
    Ok((model, pb.finish()))
}

impl<T: Real> Backbone<T> {
    pub fn new(pb: &mut ParamBuilder<T>, cfg: &BackboneConfig) -> Result<Self> {
        let targets = cfg.validate()?;
        let mut widths = vec![1 + cfg.input_channels];
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        for (t, bc) in cfg.blocks.iter().enumerate() {
            blocks.push(PointformerBlock::new(pb, &format!("blocks.{t}"), bc, widths[t])?);
            widths.push(bc.c_out);
        }
        let mut low = *widths.last().expect("non-empty");
        let mut fps = Vec::with_capacity(targets.len());
        for (i, (fp, &s)) in cfg.fp_stages.iter().zip(&targets).enumerate() {
            let module = FeaturePropagation::new(pb, &format!("fp.{i}"), low, widths[s], fp.width)?;
            fps.push(FpPlan { module, high_stage: s });
            low = fp.width;
        }
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            fps,
        })
    }

    /// Width of the last stage's features.
    pub fn out_channels(&self) -> usize {
        self.cfg
            .fp_stages
            .last()
            .map_or_else(|| self.cfg.blocks.last().expect("block").c_out, |f| f.width)
    }

    /// Point count of every output stage, in order.
    pub fn stage_resolutions(&self, n_input: usize) -> Vec<usize> {
        let res = self.cfg.resolutions();
        let down = self.cfg.blocks.iter().map(|b| b.n_out);
        let up = self.fps.iter().map(|p| res[p.high_stage].unwrap_or(n_input));
        down.chain(up).collect()
    }

    pub fn params(&self) -> Vec<Param<T>> {
        let mut out: Vec<Param<T>> = self.blocks.iter().flat_map(PointformerBlock::params).collect();
        out.extend(self.fps.iter().flat_map(|p| p.module.ffn.params()));
        out
    }

    /// Input features: a constant 1 followed by the cloud's own channels.
    pub fn input_features(&self, cloud: &PointCloud<T>) -> Result<Tensor<T>> {
        if cloud.channels() != self.cfg.input_channels {
            return Err(Error::Argument(format!(
                "config expects {} input channels, cloud has {}",
                self.cfg.input_channels,
                cloud.channels()
            )));
        }
        let n = cloud.len();
        let c = cloud.channels();
        let mut data = Vec::with_capacity(n * (c + 1));
        for i in 0..n {
            data.push(T::one());
            data.extend_from_slice(cloud.feats.row(i));
        }
        Tensor::matrix(n, c + 1, data)
    }

    pub fn forward(&self, cloud: &PointCloud<T>, ctx: &RunCtx) -> Result<BackboneOutput<T>> {
        let first = &self.cfg.blocks[0];
        if cloud.len() < first.n_out {
            return Err(Error::Argument(format!(
                "input has {} points but the first block samples {}",
                cloud.len(),
                first.n_out
            )));
        }
        let mut coords = Var::constant(cloud.coords.clone());
        let mut feats = Var::constant(self.input_features(cloud)?);
        let mut down = vec![(coords.clone(), feats.clone())];
        let mut block_outs = Vec::with_capacity(self.blocks.len());
        let mut stages = Vec::new();
        for block in &self.blocks {
            let out = block.forward(&coords, &feats, ctx)?;
            coords = out.centroids.clone();
            feats = out.feats.clone();
            down.push((coords.clone(), feats.clone()));
            stages.push(Stage {
                kind: StageKind::Down,
                coords: coords.clone(),
                feats: feats.clone(),
            });
            block_outs.push(out);
        }
        for plan in &self.fps {
            let (high_coords, skip) = &down[plan.high_stage];
            feats = plan.module.forward(&coords, &feats, high_coords, skip, ctx)?;
            coords = high_coords.clone();
            stages.push(Stage {
                kind: StageKind::Up,
                coords: coords.clone(),
                feats: feats.clone(),
            });
        }
        Ok(BackboneOutput {
            stages,
            blocks: block_outs,
        })
    }
}

/// Fixed 64-point scene: four jittered clusters with three color-like
/// channels and one scalar target per point.
pub struct SyntheticScene<T: Real> {
    pub cloud: PointCloud<T>,
    pub targets: Tensor<T>,
}

pub const SCENE_POINTS: usize = 64;

pub fn synthetic_scene<T: Real>(seed: u64, channels: usize, zero_targets: bool) -> SyntheticScene<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = [[0.25, 0.25, 0.2], [0.75, 0.25, 0.3], [0.25, 0.75, 0.5], [0.75, 0.75, 0.4]];
    let mut coords = Vec::with_capacity(SCENE_POINTS * 3);
    let mut feats = Vec::with_capacity(SCENE_POINTS * channels);
    let mut targets = Vec::with_capacity(SCENE_POINTS);
    for i in 0..SCENE_POINTS {
        let c = centers[i % centers.len()];
        for v in c {
            coords.push(T::from_f64_lossy(v + rng.gen_range(-0.12..0.12)));
        }
        for _ in 0..channels {
            feats.push(T::from_f64_lossy(rng.gen_range(0.0..1.0)));
        }
        let t: f64 = rng.gen_range(-1.0..1.0);
        targets.push(T::from_f64_lossy(if zero_targets { 0.0 } else { t }));
    }
    SyntheticScene {
        cloud: PointCloud::new(
            Tensor::matrix(SCENE_POINTS, 3, coords).expect("scene coords"),
            Tensor::matrix(SCENE_POINTS, channels, feats).expect("scene feats"),
        )
        .expect("valid scene"),
        targets: Tensor::matrix(SCENE_POINTS, 1, targets).expect("scene targets"),
    }
}

/// Backbone plus a linear per-point scalar head.
pub struct Regressor<T: Real> {
    pub backbone: Backbone<T>,
    pub head: Linear<T>,
}

impl<T: Real> Regressor<T> {
    /// Builds backbone and head from one seeded stream. `zero_head` zeroes
    /// the head weights so the initial prediction is exactly 0.
    pub fn build(cfg: &BackboneConfig, zero_head: bool) -> Result<(Self, ParamStore<T>)> {
        let mut pb = ParamBuilder::new(cfg.seed);
        let backbone = Backbone::new(&mut pb, cfg)?;
        let head = Linear::new(&mut pb, "head", backbone.out_channels(), 1)?;
        if zero_head {
            head.weight.set_value(Tensor::zeros(&head.weight.meta().shape))?;
        }
        Ok((Self { backbone, head }, pb.finish()))
    }

    pub fn predict(&self, cloud: &PointCloud<T>, ctx: &RunCtx) -> Result<Var<T>> {
        let out = self.backbone.forward(cloud, ctx)?;
        let last = out.last();
        if last.feats.rows() != cloud.len() {
            return Err(Error::Config(format!(
                "last stage has {} points; per-point regression needs all {}",
                last.feats.rows(),
                cloud.len()
            )));
        }
        self.head.forward(&last.feats)
    }

    /// Mean squared error against `targets`.
    pub fn loss(&self, scene: &SyntheticScene<T>, ctx: &RunCtx) -> Result<Var<T>> {
        let pred = self.predict(&scene.cloud, ctx)?;
        let diff = ops::sub(&pred, &Var::constant(scene.targets.clone()))?;
        Ok(ops::mean(&ops::mul(&diff, &diff)?))
    }

    pub fn head_params(&self) -> Vec<Param<T>> {
        std::iter::once(self.head.weight.clone())
            .chain(self.head.bias.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrPolicy {
    Fixed(f64),
    /// Start here and halve (restarting from the initial parameters) on
    /// divergence.
    Auto(f64),
}

pub const AUTO_LR_START: f64 = 0.2;
const MAX_HALVINGS: usize = 30;
const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    HeadOnly,
}

#[derive(Debug, Clone, Serialize)]
pub struct OverfitTrace {
    /// Loss before each update, then the final loss (`steps + 1` values).
    pub losses: Vec<f64>,
    pub lr: f64,
    pub halvings: usize,
}

impl OverfitTrace {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }

    pub fn reduction(&self) -> f64 {
        self.initial() / self.final_loss()
    }
}

/// Plain gradient descent on the synthetic scene.
pub fn overfit<T: Real>(
    model: &Regressor<T>,
    store: &ParamStore<T>,
    scene: &SyntheticScene<T>,
    steps: usize,
    lr: LrPolicy,
    trainable: Trainable,
) -> Result<OverfitTrace> {
    let params: Vec<Param<T>> = match trainable {
        Trainable::All => store.iter().cloned().collect(),
        Trainable::HeadOnly => model.head_params(),
    };
    let start = store.snapshot();
    let (mut rate, auto) = match lr {
        LrPolicy::Fixed(r) => (r, false),
        LrPolicy::Auto(r) => (r, true),
    };
    let mut halvings = 0;
    loop {
        match descend(model, &params, scene, steps, rate) {
            Ok(losses) => {
                return Ok(OverfitTrace {
                    losses,
                    lr: rate,
                    halvings,
                })
            }
            Err(Error::Divergence { .. }) if auto && halvings < MAX_HALVINGS => {
                store.restore(&start)?;
                rate /= 2.0;
                halvings += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn descend<T: Real>(
    model: &Regressor<T>,
    params: &[Param<T>],
    scene: &SyntheticScene<T>,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let ctx = RunCtx::inference();
    let step_lr = T::from_f64_lossy(lr);
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let loss = model.loss(scene, &ctx)?;
        let v = loss.value().data()[0].to_f64_lossy();
        let blown = losses.first().is_some_and(|&l0: &f64| v > DIVERGENCE_FACTOR * l0.max(1e-12));
        if !v.is_finite() || blown {
            return Err(Error::Divergence { step, lr });
        }
        losses.push(v);
        if step == steps {
            break;
        }
        params.iter().for_each(Param::zero_grad);
        loss.backward()?;
        for p in params {
            let g = p.grad();
            let mut w = p.value();
            for (w, &g) in w.data_mut().iter_mut().zip(g.data()) {
                *w = *w - step_lr * g;
            }
            p.set_value(w)?;
        }
    }
    Ok(losses)
}
