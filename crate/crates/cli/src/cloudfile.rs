//! Point-cloud files: a little-endian binary layout with a `PFPC` header,
//! or CSV rows `x,y,z[,f1..fC]`.
//!
//! Binary header (24 bytes): magic `PFPC`, version `u32`, point count `u64`,
//! channel count `u32`, scalar width in bits `u32` (32 or 64). The payload is
//! every coordinate row followed by every feature row.

use std::fs;
use std::path::Path;

use pointformer::{PointCloud, Precision, Real, Tensor};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"PFPC";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Csv,
}

impl Format {
    /// `.csv` selects CSV; anything else is binary.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

/// Decoded file contents, kept at the precision they were stored in.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudData {
    pub n: usize,
    pub channels: usize,
    pub precision: Precision,
    pub coords: Vec<f64>,
    pub feats: Vec<f64>,
}

impl CloudData {
    pub fn from_cloud<T: Real>(cloud: &PointCloud<T>) -> Self {
        let precision = if T::BYTES == 4 { Precision::F32 } else { Precision::F64 };
        Self {
            n: cloud.len(),
            channels: cloud.channels(),
            precision,
            coords: cloud.coords.data().iter().map(|v| v.to_f64_lossy()).collect(),
            feats: cloud.feats.data().iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }

    pub fn to_cloud<T: Real>(&self) -> pointformer::Result<PointCloud<T>> {
        let cast = |v: &[f64]| v.iter().map(|&x| T::from_f64_lossy(x)).collect();
        PointCloud::new(
            Tensor::matrix(self.n, 3, cast(&self.coords))?,
            Tensor::matrix(self.n, self.channels, cast(&self.feats))?,
        )
    }
}

pub fn read(path: &Path) -> CliResult<CloudData> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::input(path, "file not found"),
        _ => CliError::io(path, e),
    })?;
    let data = match Format::for_path(path) {
        Format::Csv => parse_csv(&bytes),
        Format::Binary => decode(&bytes),
    }
    .map_err(|msg| CliError::input(path, msg))?;
    if data.n == 0 {
        return Err(CliError::input(path, "cloud has no points"));
    }
    Ok(data)
}

pub fn write(path: &Path, data: &CloudData, format: Format) -> CliResult<()> {
    let bytes = match format {
        Format::Binary => encode(data),
        Format::Csv => to_csv(data),
    };
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn encode(data: &CloudData) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + (data.coords.len() + data.feats.len()) * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(data.n as u64).to_le_bytes());
    out.extend_from_slice(&(data.channels as u32).to_le_bytes());
    out.extend_from_slice(&data.precision.bits().to_le_bytes());
    out.extend(payload(data));
    out
}

/// Little-endian scalars of coords then feats, at the stored precision.
pub fn payload(data: &CloudData) -> Vec<u8> {
    let mut out = Vec::new();
    for &v in data.coords.iter().chain(&data.feats) {
        match data.precision {
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<CloudData, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("byte {}: truncated header ({HEADER_LEN} bytes expected)", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err("byte 0: missing PFPC magic (use a .csv extension for text input)".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(format!("byte 4: unsupported version {version}"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let channels = u32_at(16) as usize;
    let precision = match u32_at(20) {
        32 => Precision::F32,
        64 => Precision::F64,
        other => return Err(format!("byte 20: precision flag must be 32 or 64, got {other}")),
    };
    let width = precision.bits() as usize / 8;
    let expected = n
        .checked_mul(3 + channels)
        .and_then(|s| s.checked_mul(width))
        .ok_or_else(|| "byte 8: header sizes overflow".to_string())?;
    let got = bytes.len() - HEADER_LEN;
    if got != expected {
        return Err(format!(
            "byte {HEADER_LEN}: payload has {got} bytes, header (N={n}, C={channels}, {}-bit) requires {expected}",
            precision.bits()
        ));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(width)
        .map(|c| match precision {
            Precision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
        })
        .collect();
    let split = n * 3;
    if let Some(i) = values[..split].iter().position(|v| !v.is_finite()) {
        return Err(format!("byte {}: non-finite coordinate", HEADER_LEN + i * width));
    }
    Ok(CloudData {
        n,
        channels,
        precision,
        coords: values[..split].to_vec(),
        feats: values[split..].to_vec(),
    })
}

/// CSV values are parsed as 64-bit and tagged 64-bit.
pub fn parse_csv(bytes: &[u8]) -> Result<CloudData, String> {
    let cleaned: Vec<u8> = bytes
        .split_inclusive(|&b| b == b'\n')
        .flat_map(|line| {
            let comment = line.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'#');
            let keep = if comment { &line[line.len() - usize::from(line.ends_with(b"\n"))..] } else { line };
            keep.iter().copied()
        })
        .collect();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(cleaned.as_slice());
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    let mut width: Option<usize> = None;
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| line_at(&cleaned, p.byte()));
            format!("line {line}: {e}")
        })?;
        let line = rec.position().map_or(0, |p| line_at(&cleaned, p.byte()));
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if rec.len() < 3 {
            return Err(format!("line {line}: expected at least 3 fields (x,y,z), got {}", rec.len()));
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(format!("line {line}: expected {w} fields like the first row, got {}", rec.len()))
            }
            _ => {}
        }
        for (f, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| format!("line {line}, field {}: invalid number {field:?}", f + 1))?;
            if f < 3 {
                if !v.is_finite() {
                    return Err(format!("line {line}, field {}: non-finite coordinate", f + 1));
                }
                coords.push(v);
            } else {
                feats.push(v);
            }
        }
        n += 1;
    }
    Ok(CloudData {
        n,
        channels: width.map_or(0, |w| w - 3),
        precision: Precision::F64,
        coords,
        feats,
    })
}

fn line_at(bytes: &[u8], offset: u64) -> usize {
    let mut end = (offset as usize).min(bytes.len());
    while end < bytes.len() && bytes[end].is_ascii_whitespace() {
        end += 1;
    }
    1 + bytes[..end].iter().filter(|&&b| b == b'\n').count()
}

/// Shortest round-trip decimal for every scalar at the stored precision.
pub fn to_csv(data: &CloudData) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |v: f64| match data.precision {
        Precision::F32 => (v as f32).to_string(),
        Precision::F64 => v.to_string(),
    };
    for i in 0..data.n {
        let row = data.coords[i * 3..i * 3 + 3]
            .iter()
            .chain(&data.feats[i * data.channels..(i + 1) * data.channels])
            .map(|&v| fmt(v));
        w.write_record(row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}
