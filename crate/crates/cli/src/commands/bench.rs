use std::str::FromStr;
use std::time::Instant;

use pointformer::attention::{projected_len, relative_pe, score_meter, AttentionLayer, LayerSpec};
use pointformer::autograd::Var;
use pointformer::nn::{FeedForward, ParamBuilder};
use pointformer::{no_grad, Precision, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::round9;
use crate::error::{CliError, CliResult};
use crate::with_precision;

pub const MIN_REPEAT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    Linformer,
    Both,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Mode::Full),
            "linformer" => Ok(Mode::Linformer),
            "both" => Ok(Mode::Both),
            _ => Err(format!("unknown mode {s}; expected full, linformer or both")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub n: usize,
    pub r: usize,
    pub heads: usize,
    pub dim: usize,
    pub repeat: usize,
    pub mode: Mode,
    /// Include the positional-encoding network in the timed kernel.
    pub pe: bool,
    /// Set both low-rank projections to the identity.
    pub identity_proj: bool,
    pub seed: u64,
    pub precision: Precision,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub mode: Mode,
    pub n: usize,
    pub r: usize,
    pub heads: usize,
    pub d_model: usize,
    pub keys: usize,
    pub precision: u32,
    pub repeat: usize,
    pub times_ms: Vec<f64>,
    pub median_ms: f64,
    pub score_bytes: usize,
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchOutcome {
    pub reports: Vec<BenchReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_abs_diff: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_ratio: Option<f64>,
}

pub fn run(args: &BenchArgs) -> CliResult<BenchOutcome> {
    if args.n == 0 || args.r == 0 {
        return Err(CliError::Usage("bench needs n >= 1 and r >= 1".into()));
    }
    if args.mode != Mode::Full && args.r > args.n {
        return Err(CliError::Usage(format!(
            "linformer reduction r={} exceeds sequence length n={}",
            args.r, args.n
        )));
    }
    if args.repeat < MIN_REPEAT {
        return Err(CliError::Usage(format!("repeat must be at least {MIN_REPEAT}")));
    }
    if args.heads == 0 || !args.dim.is_multiple_of(args.heads) {
        return Err(CliError::Usage(format!("{} heads do not divide width {}", args.heads, args.dim)));
    }
    with_precision!(args.precision, bench(args))
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

struct Kernel<T: Real> {
    layer: AttentionLayer<T>,
    pe: FeedForward<T>,
    with_pe: bool,
}

impl<T: Real> Kernel<T> {
    fn call(&self, x: &Var<T>, c: &Var<T>) -> pointformer::Result<Tensor<T>> {
        let bias = self.with_pe.then(|| relative_pe(&self.pe, c, c, 1)).transpose()?;
        Ok(self.layer.attend(x, x, bias.as_ref(), 1)?.out.value().clone())
    }
}

fn bench<T: Real>(args: &BenchArgs) -> CliResult<BenchOutcome> {
    let spec = LayerSpec {
        d_model: args.dim,
        heads: args.heads,
        ffn_hidden: 2 * args.dim,
        dropout: 0.0,
        linformer: None,
        layernorm: false,
    };
    let mut pb = ParamBuilder::<T>::new(args.seed);
    let full = AttentionLayer::new(&mut pb, "full", spec)?;
    let pe = FeedForward::new(&mut pb, "pe", 3, 16, args.heads, 0.0)?;
    let mut lin_pb = ParamBuilder::<T>::new(args.seed.wrapping_add(1));
    let lin = AttentionLayer::new(
        &mut lin_pb,
        "lin",
        LayerSpec {
            linformer: Some((args.r, args.n)),
            ..spec
        },
    )?;
    for (dst, src) in [(&lin.wq, &full.wq), (&lin.wk, &full.wk), (&lin.wv, &full.wv)] {
        dst.weight.set_value(src.weight.value())?;
    }
    if args.identity_proj {
        lin.linformer.as_ref().expect("linformer layer").set_identity()?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let x: Vec<T> = (0..args.n * args.dim).map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0))).collect();
    let c: Vec<T> = (0..args.n * 3).map(|_| T::from_f64_lossy(rng.gen_range(0.0..1.0))).collect();
    let x = Var::constant(Tensor::matrix(args.n, args.dim, x)?);
    let c = Var::constant(Tensor::matrix(args.n, 3, c)?);

    let kernels: Vec<(Mode, Kernel<T>)> = match args.mode {
        Mode::Full => vec![(Mode::Full, Kernel { layer: full, pe, with_pe: args.pe })],
        Mode::Linformer => vec![(Mode::Linformer, Kernel { layer: lin, pe, with_pe: args.pe })],
        Mode::Both => vec![
            (Mode::Full, Kernel { layer: full, pe: pe.clone(), with_pe: args.pe }),
            (Mode::Linformer, Kernel { layer: lin, pe, with_pe: args.pe }),
        ],
    };
    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    for (mode, kernel) in &kernels {
        let keys = match mode {
            Mode::Linformer => projected_len(args.n, args.r),
            _ => args.n,
        };
        let (warm, _) = no_grad(|| timed(|| kernel.call(&x, &c)))?;
        let mut times = Vec::with_capacity(args.repeat);
        let mut score_bytes = 0;
        let mut checksum = String::new();
        for i in 0..args.repeat {
            score_meter::reset();
            let (out, ms) = no_grad(|| timed(|| kernel.call(&x, &c)))?;
            score_bytes = score_bytes.max(score_meter::bytes());
            let sum = hash(&out);
            if i == 0 {
                checksum = sum;
            } else if sum != checksum {
                return Err(CliError::Failed(format!("{mode:?} output changed between repeats")));
            }
            times.push(ms);
        }
        log::info!("{mode:?}: median {:.3} ms", median(&times));
        reports.push(BenchReport {
            mode: *mode,
            n: args.n,
            r: args.r,
            heads: args.heads,
            d_model: args.dim,
            keys,
            precision: args.precision.bits(),
            repeat: args.repeat,
            median_ms: round9(median(&times)),
            times_ms: times.into_iter().map(round9).collect(),
            score_bytes,
            checksum,
        });
        outputs.push(warm);
    }
    let both = reports.len() == 2;
    Ok(BenchOutcome {
        max_abs_diff: both.then(|| outputs[0].max_abs_diff(&outputs[1]).to_f64_lossy()),
        memory_ratio: both.then(|| reports[1].score_bytes as f64 / reports[0].score_bytes as f64),
        time_ratio: both.then(|| reports[1].median_ms / reports[0].median_ms),
        reports,
    })
}

fn timed<T: Real>(f: impl FnOnce() -> pointformer::Result<Tensor<T>>) -> pointformer::Result<(Tensor<T>, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64() * 1e3))
}

fn hash<T: Real>(t: &Tensor<T>) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::with_capacity(t.len() * T::BYTES);
    for v in t.data() {
        (*v).write_le(&mut buf);
    }
    h.update(&buf);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
