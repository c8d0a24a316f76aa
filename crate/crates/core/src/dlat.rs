//! `DLAT` tensor files and the weights manifest.
//!
//! Layout: `b"DLAT"`, `u16` version (1), `u8` dtype (0 = FP64, 1 = FP32,
//! 2 = FP16), `u8` rank, `rank` x `u32` dims, then the little-endian payload.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shared_exp::{to_fp16, Fp16};
use crate::tensor::Tensor;
use crate::weights::{LayerParams, Weights};

const MAGIC: &[u8; 4] = b"DLAT";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F64,
    F32,
    F16,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
            DType::F16 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            2 => Ok(DType::F16),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }
}

pub fn encode(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.shape().len())
        .map_err(|_| Error::Format(format!("rank {} too large", t.shape().len())))?;
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + t.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F16 => out.extend_from_slice(&to_fp16(v).to_bits().to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let short = || Error::Format("truncated DLAT data".into());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing DLAT magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported DLAT version {version}")));
    }
    let dtype = DType::from_code(bytes[6])?;
    let rank = bytes[7] as usize;
    let dims_end = 8 + 4 * rank;
    let dims_bytes = bytes.get(8..dims_end).ok_or_else(short)?;
    let shape: Vec<usize> = dims_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[dims_end..];
    if payload.len() != n * dtype.width() {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            n * dtype.width()
        )));
    }
    let data = payload
        .chunks_exact(dtype.width())
        .map(|c| match dtype {
            DType::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            DType::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            DType::F16 => Fp16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64(),
        })
        .collect();
    Tensor::new(shape, data)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(t, dtype)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub weights: String,
    pub bias: String,
}

/// Maps layer names to their tensor files, relative to the manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub layers: BTreeMap<String, ManifestEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
}

/// Loads the weights and any images listed in a manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(Weights, Vec<Tensor>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut w = Weights::new();
    for (name, e) in &m.layers {
        let bias = read(dir.join(&e.bias))?;
        w.insert(
            name.clone(),
            LayerParams {
                weights: read(dir.join(&e.weights))?,
                bias: bias.into_data(),
            },
        );
    }
    let images = m.images.iter().map(|f| read(dir.join(f))).collect::<Result<_>>()?;
    Ok((w, images))
}

/// Writes every tensor into `dir` and returns the manifest path.
pub fn save_manifest(dir: impl AsRef<Path>, weights: &Weights, images: &[Tensor], dtype: DType) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = Manifest::default();
    for (name, p) in weights.iter() {
        let entry = ManifestEntry {
            weights: format!("{name}.weights.dlat"),
            bias: format!("{name}.bias.dlat"),
        };
        write(dir.join(&entry.weights), &p.weights, dtype)?;
        write(dir.join(&entry.bias), &Tensor::vector(p.bias.clone()), dtype)?;
        m.layers.insert(name.clone(), entry);
    }
    for (i, img) in images.iter().enumerate() {
        let f = format!("image{i:04}.dlat");
        write(dir.join(&f), img, dtype)?;
        m.images.push(f);
    }
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
