use std::path::{Path, PathBuf};

use pointformer::backbone::{build, BackboneConfig, StageKind};
use pointformer::nn::RunCtx;
use pointformer::{no_grad, PointCloud, Real};
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{load_config, sha256_hex, to_json, write_text, Globals};
use crate::cloudfile::{self, CloudData, Format};
use crate::error::{CliError, CliResult};
use crate::with_precision;

#[derive(Debug, Clone)]
pub struct ForwardArgs {
    pub config: String,
    pub input: PathBuf,
    pub output: PathBuf,
    pub retain_attn: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageEntry {
    pub index: usize,
    pub kind: StageKind,
    pub points: usize,
    pub channels: usize,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionEntry {
    pub block: usize,
    pub stage: &'static str,
    pub layers: usize,
    pub heads: usize,
    pub groups: usize,
    pub queries_per_group: usize,
    pub keys: usize,
    pub max_row_sum_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config: Option<String>,
    pub input_points: usize,
    pub precision: u32,
    pub seed: u64,
    pub parameters: usize,
    pub stages: Vec<StageEntry>,
    /// SHA-256 over every stage payload in order.
    pub checksum: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<AttentionEntry>>,
}

pub fn run(args: &ForwardArgs, globals: &Globals) -> CliResult<Manifest> {
    let cfg = load_config(&args.config, globals)?;
    let data = cloudfile::read(&args.input)?;
    std::fs::create_dir_all(&args.output).map_err(|e| CliError::io(&args.output, e))?;
    let manifest = with_precision!(cfg.precision, forward(&cfg, &data, args))?;
    write_text(&args.output.join("manifest.json"), &to_json(&manifest))?;
    Ok(manifest)
}

fn forward<T: Real>(cfg: &BackboneConfig, data: &CloudData, args: &ForwardArgs) -> CliResult<Manifest> {
    let cloud: PointCloud<T> = data.to_cloud().map_err(|e| CliError::input(&args.input, e.to_string()))?;
    let (model, store) = build::<T>(cfg)?;
    let ctx = if args.retain_attn {
        RunCtx::inference().retaining()
    } else {
        RunCtx::inference()
    };
    log::info!("forward: {} points, {} parameters", cloud.len(), store.num_scalars());
    let out = no_grad(|| model.forward(&cloud, &ctx))?;
    let mut total = Sha256::new();
    let mut stages = Vec::with_capacity(out.stages.len());
    for (i, s) in out.stages.iter().enumerate() {
        let kind = match s.kind {
            StageKind::Down => "down",
            StageKind::Up => "up",
        };
        let file = format!("stage{i:02}_{kind}.pfpc");
        let stage_cloud = PointCloud::new(s.coords.value().clone(), s.feats.value().clone())?;
        let stage_data = CloudData::from_cloud(&stage_cloud);
        let payload = cloudfile::payload(&stage_data);
        total.update(&payload);
        cloudfile::write(&args.output.join(&file), &stage_data, Format::Binary)?;
        log::debug!("wrote {file}");
        stages.push(StageEntry {
            index: i,
            kind: s.kind,
            points: stage_cloud.len(),
            channels: stage_cloud.channels(),
            file,
            sha256: sha256_hex(&payload),
        });
    }
    let attention = args.retain_attn.then(|| {
        let mut v = Vec::new();
        for (b, bo) in out.blocks.iter().enumerate() {
            for (stage, rec) in [("lt", &bo.lt_records), ("lgt", &bo.lgt_records), ("gt", &bo.gt_records)] {
                if let Some(rec) = rec {
                    let m = &rec.layers[0][0];
                    v.push(AttentionEntry {
                        block: b,
                        stage,
                        layers: rec.n_layers(),
                        heads: rec.n_heads(),
                        groups: rec.groups,
                        queries_per_group: m.rows() / rec.groups,
                        keys: m.cols(),
                        max_row_sum_error: rec.max_stochastic_error(),
                    });
                }
            }
        }
        v
    });
    Ok(Manifest {
        config: cfg.name.clone(),
        input_points: cloud.len(),
        precision: cfg.precision.bits(),
        seed: cfg.seed,
        parameters: store.num_scalars(),
        stages,
        checksum: total.finalize().iter().map(|b| format!("{b:02x}")).collect(),
        attention,
    })
}

pub fn manifest_path(output: &Path) -> PathBuf {
    output.join("manifest.json")
}
