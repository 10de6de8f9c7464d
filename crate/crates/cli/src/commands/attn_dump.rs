use std::path::PathBuf;
use std::str::FromStr;

use pointformer::attention::AttentionRecord;
use pointformer::backbone::{build, BackboneConfig};
use pointformer::nn::RunCtx;
use pointformer::{no_grad, PointCloud, Real, Tensor};
use serde::Serialize;

use super::{load_config, round9, round9_all, Globals};
use crate::cloudfile;
use crate::error::{CliError, CliResult};
use crate::with_precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Lt,
    Lgt,
    Gt,
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lt" => Ok(Stage::Lt),
            "lgt" => Ok(Stage::Lgt),
            "gt" => Ok(Stage::Gt),
            _ => Err(format!("unknown stage {s}; expected lt, lgt or gt")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum HeadSel {
    Index(usize),
    #[serde(serialize_with = "mean_str")]
    Mean,
}

fn mean_str<S: serde::Serializer>(s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str("mean")
}

impl FromStr for HeadSel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "mean" {
            return Ok(HeadSel::Mean);
        }
        s.parse()
            .map(HeadSel::Index)
            .map_err(|_| format!("head must be an index or \"mean\", got {s}"))
    }
}

#[derive(Debug, Clone)]
pub struct AttnDumpArgs {
    pub config: String,
    pub input: PathBuf,
    pub block: usize,
    pub stage: Stage,
    pub layer: usize,
    pub head: HeadSel,
    pub query: usize,
    pub topk: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Entry {
    pub rank: usize,
    /// Point index within the key set's stage.
    pub index: usize,
    pub coords: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryPoint {
    pub index: usize,
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttnDump {
    pub block: usize,
    pub stage: Stage,
    pub layer: usize,
    pub head: HeadSel,
    pub query: QueryPoint,
    pub n_keys: usize,
    /// Sum of the query's full attention row before truncation.
    pub weight_sum: f64,
    pub entries: Vec<Entry>,
}

pub fn run(args: &AttnDumpArgs, globals: &Globals) -> CliResult<AttnDump> {
    let cfg = load_config(&args.config, globals)?;
    let n_blocks = cfg.blocks.len();
    if args.block >= n_blocks {
        return Err(CliError::Usage(format!(
            "block {} out of range: valid blocks are 0..={}",
            args.block,
            n_blocks - 1
        )));
    }
    let bc = &cfg.blocks[args.block];
    let (layers, mode_r) = match args.stage {
        Stage::Lt => (bc.layers_lt, bc.linformer_r.lt),
        Stage::Lgt => (bc.layers_lgt, bc.linformer_r.lgt),
        Stage::Gt => (bc.layers_gt, bc.linformer_r.gt),
    };
    if args.stage == Stage::Lgt && !bc.use_lgt {
        return Err(CliError::Usage(format!("block {} has no lgt stage (valid stages: lt, gt)", args.block)));
    }
    if mode_r > 0 {
        return Err(CliError::Usage(
            "stage uses projected keys; attention dumps need full attention".into(),
        ));
    }
    if args.layer >= layers {
        return Err(CliError::Usage(format!(
            "layer {} out of range: valid layers are 0..={}",
            args.layer,
            layers - 1
        )));
    }
    if let HeadSel::Index(h) = args.head {
        if h >= bc.heads {
            return Err(CliError::Usage(format!(
                "head {h} out of range: valid heads are 0..={} or mean",
                bc.heads - 1
            )));
        }
    }
    if args.query >= bc.n_out {
        return Err(CliError::Usage(format!(
            "query {} out of range: valid queries are 0..={}",
            args.query,
            bc.n_out - 1
        )));
    }
    if args.topk == 0 {
        return Err(CliError::Usage("topk must be at least 1".into()));
    }
    let data = cloudfile::read(&args.input)?;
    with_precision!(cfg.precision, dump(&cfg, &data, args))
}

fn dump<T: Real>(cfg: &BackboneConfig, data: &cloudfile::CloudData, args: &AttnDumpArgs) -> CliResult<AttnDump> {
    let cloud: PointCloud<T> = data.to_cloud().map_err(|e| CliError::input(&args.input, e.to_string()))?;
    let (model, _) = build::<T>(cfg)?;
    let out = no_grad(|| model.forward(&cloud, &RunCtx::inference().retaining()))?;
    let bo = &out.blocks[args.block];
    let block_input: Tensor<T> = if args.block == 0 {
        cloud.coords.clone()
    } else {
        out.blocks[args.block - 1].centroids.value().clone()
    };
    let centroids = bo.centroids.value();
    let missing = || CliError::Failed("attention record was not retained".into());
    let (rec, group, row, keys, key_coords): (&AttentionRecord<T>, usize, usize, Vec<usize>, &Tensor<T>) =
        match args.stage {
            Stage::Lt => {
                let rec = bo.lt_records.as_ref().ok_or_else(missing)?;
                (rec, args.query, 0, bo.neighborhood.row(args.query).to_vec(), &block_input)
            }
            Stage::Lgt => {
                let rec = bo.lgt_records.as_ref().ok_or_else(missing)?;
                (rec, 0, args.query, (0..block_input.rows()).collect(), &block_input)
            }
            Stage::Gt => {
                let rec = bo.gt_records.as_ref().ok_or_else(missing)?;
                (rec, 0, args.query, (0..centroids.rows()).collect(), centroids)
            }
        };
    let weights: Vec<f64> = match args.head {
        HeadSel::Index(h) => rec.matrix(args.layer, h, group).row(row).iter().map(|v| v.to_f64_lossy()).collect(),
        HeadSel::Mean => {
            let heads = rec.n_heads();
            let mut acc = vec![0.0; keys.len()];
            for h in 0..heads {
                for (a, v) in acc.iter_mut().zip(rec.matrix(args.layer, h, group).row(row)) {
                    *a += v.to_f64_lossy();
                }
            }
            acc.iter().map(|a| a / heads as f64).collect()
        }
    };
    let weight_sum: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(keys[a].cmp(&keys[b]))
            .then(a.cmp(&b))
    });
    let coords_of = |t: &Tensor<T>, i: usize| round9_all(&t.row(i).iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>());
    let entries = order
        .iter()
        .take(args.topk)
        .enumerate()
        .map(|(rank, &slot)| Entry {
            rank,
            index: keys[slot],
            coords: coords_of(key_coords, keys[slot]),
            weight: round9(weights[slot]),
        })
        .collect();
    Ok(AttnDump {
        block: args.block,
        stage: args.stage,
        layer: args.layer,
        head: args.head,
        query: QueryPoint {
            index: args.query,
            coords: match args.stage {
                Stage::Lt => coords_of(&bo.pre_refinement_centroids, args.query),
                _ => coords_of(centroids, args.query),
            },
        },
        n_keys: weights.len(),
        weight_sum: round9(weight_sum),
        entries,
    })
}
