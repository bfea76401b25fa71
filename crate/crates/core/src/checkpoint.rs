//! Versioned binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"MDCK"
//! version u32 (currently 1)
//! dtype   u8  (0 = f32, 1 = f64)
//! meta    u32 length + JSON bytes (model configuration)
//! count   u32 number of tensors
//! tensor* name (u32 length + utf8), ndim u32, dims u32*, data dtype*
//! ```
//!
//! Weights default to 32-bit storage; 64-bit is available for
//! gradient-check-grade exactness.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{ControlNetParams, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::nn::{ParamVisit, TensorRef};
use crate::norm::FeatureStats;

const MAGIC: &[u8; 4] = b"MDCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Config(format!("unknown dtype '{other}'"))),
        }
    }
}

/// One named tensor: (name, shape, row-major data).
pub type NamedTensor = (String, Vec<usize>, Vec<f64>);

fn collect_tensors<P: ParamVisit>(p: &P) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    p.visit("", &mut |name, t| {
        let (shape, data): (Vec<usize>, Vec<f64>) = match t {
            TensorRef::M(m) => (vec![m.nrows(), m.ncols()], m.iter().copied().collect()),
            TensorRef::V(v) => (vec![v.len()], v.iter().copied().collect()),
        };
        out.push((name, shape, data));
    });
    out
}

pub fn save_tensors(
    path: &Path,
    meta_json: &str,
    tensors: &[NamedTensor],
    dtype: Dtype,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(dtype.tag());
    let meta = meta_json.as_bytes();
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        match dtype {
            Dtype::F32 => {
                for v in data {
                    buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for v in data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_tensors(path: &Path) -> Result<(String, Vec<NamedTensor>, Dtype)> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let dtype = Dtype::from_tag(r.take(1)?[0])?;
    let meta_len = r.u32()? as usize;
    let meta = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("metadata is not utf8".into()))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not utf8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match dtype {
            Dtype::F32 => {
                let bytes = r.take(4 * n)?;
                for c in bytes.chunks_exact(4) {
                    data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
                }
            }
            Dtype::F64 => {
                let bytes = r.take(8 * n)?;
                for c in bytes.chunks_exact(8) {
                    data.push(f64::from_le_bytes([
                        c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                    ]));
                }
            }
        }
        tensors.push((name, shape, data));
    }
    Ok((meta, tensors, dtype))
}

/// Overwrite a parameter container from named tensors, checking names and
/// shapes in visit order.
fn fill_from_tensors<P: ParamVisit>(params: &mut P, tensors: &[NamedTensor]) -> Result<()> {
    let mut idx = 0usize;
    let mut err: Option<Error> = None;
    params.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        let Some((tname, shape, data)) = tensors.get(idx) else {
            err = Some(Error::Checkpoint(format!("missing tensor {name}")));
            return;
        };
        idx += 1;
        if *tname != name {
            err = Some(Error::Checkpoint(format!(
                "tensor order mismatch: file has {tname}, model expects {name}"
            )));
            return;
        }
        match t {
            crate::nn::TensorMut::M(m) => {
                if shape != &vec![m.nrows(), m.ncols()] {
                    err = Some(Error::Checkpoint(format!(
                        "tensor {name}: shape {shape:?} vs expected {:?}",
                        (m.nrows(), m.ncols())
                    )));
                    return;
                }
                for (dst, src) in m.iter_mut().zip(data.iter()) {
                    *dst = *src;
                }
            }
            crate::nn::TensorMut::V(v) => {
                if shape != &vec![v.len()] {
                    err = Some(Error::Checkpoint(format!(
                        "tensor {name}: shape {shape:?} vs expected [{}]",
                        v.len()
                    )));
                    return;
                }
                for (dst, src) in v.iter_mut().zip(data.iter()) {
                    *dst = *src;
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} extra tensors in file",
            tensors.len() - idx
        )));
    }
    Ok(())
}

/// Save the base denoiser together with the feature-normalization stats.
pub fn save_base(
    path: &Path,
    params: &DenoiserParams,
    stats: &FeatureStats,
    dtype: Dtype,
) -> Result<()> {
    let meta = serde_json::to_string(&params.cfg)?;
    let mut tensors = collect_tensors(params);
    tensors.push((
        "norm.mean".to_string(),
        vec![stats.mean.len()],
        stats.mean.to_vec(),
    ));
    tensors.push((
        "norm.std".to_string(),
        vec![stats.std.len()],
        stats.std.to_vec(),
    ));
    save_tensors(path, &meta, &tensors, dtype)
}

pub fn load_base(path: &Path) -> Result<(DenoiserParams, FeatureStats)> {
    let (meta, tensors, _) = load_tensors(path)?;
    let cfg: DenoiserConfig = serde_json::from_str(&meta)?;
    let mut params = DenoiserParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    if tensors.len() < 2 {
        return Err(Error::Checkpoint("base checkpoint too small".into()));
    }
    let (model_tensors, stat_tensors) = tensors.split_at(tensors.len() - 2);
    fill_from_tensors(&mut params, model_tensors)?;
    let mean = &stat_tensors[0];
    let std = &stat_tensors[1];
    if mean.0 != "norm.mean" || std.0 != "norm.std" {
        return Err(Error::Checkpoint("missing normalization stats".into()));
    }
    let stats = FeatureStats {
        mean: Array1::from_vec(mean.2.clone()),
        std: Array1::from_vec(std.2.clone()),
    };
    Ok((params, stats))
}

/// Save the control branch; the metadata carries the base configuration the
/// branch was built against.
pub fn save_controlnet(
    path: &Path,
    cn: &ControlNetParams,
    base_cfg: &DenoiserConfig,
    dtype: Dtype,
) -> Result<()> {
    let meta = serde_json::to_string(base_cfg)?;
    save_tensors(path, &meta, &collect_tensors(cn), dtype)
}

pub fn load_controlnet(path: &Path, base: &DenoiserParams) -> Result<ControlNetParams> {
    let (meta, tensors, _) = load_tensors(path)?;
    let cfg: DenoiserConfig = serde_json::from_str(&meta)?;
    if cfg != base.cfg {
        return Err(Error::Checkpoint(
            "control branch was trained against a different base configuration".into(),
        ));
    }
    let mut cn = ControlNetParams::init_from_base(base, &mut ChaCha8Rng::seed_from_u64(0));
    fill_from_tensors(&mut cn, &tensors)?;
    Ok(cn)
}
