pub mod attn_dump;
pub mod bench;
pub mod forward;
pub mod grad_check;
pub mod overfit;

use std::path::Path;

use pointformer::backbone::{BackboneConfig, PRESETS};
use pointformer::Precision;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub seed: Option<u64>,
    pub threads: usize,
    pub precision: Option<Precision>,
}

/// Reads a config file, or a bundled preset when `spec` names one and no
/// such file exists.
pub fn load_config(spec: &str, globals: &Globals) -> CliResult<BackboneConfig> {
    let path = Path::new(spec);
    let mut cfg = if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        BackboneConfig::from_json(&text).map_err(|e| CliError::input(path, e.to_string()))?
    } else if PRESETS.contains(&spec) {
        BackboneConfig::preset(spec)?
    } else {
        return Err(CliError::input(
            path,
            format!("file not found (bundled presets: {})", PRESETS.join(", ")),
        ));
    };
    if let Some(seed) = globals.seed {
        cfg.seed = seed;
    }
    if let Some(p) = globals.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Rounds to 9 significant digits so dumps compare textually across runs.
pub fn round9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

pub fn round9_all(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| round9(x)).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_json<S: Serialize>(value: &S) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Calls `$f::<f32>` or `$f::<f64>` depending on `$p`.
#[macro_export]
macro_rules! with_precision {
    ($p:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        match $p {
            pointformer::Precision::F32 => $f::<f32>($($arg),*),
            pointformer::Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}
