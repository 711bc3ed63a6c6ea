//! Trained model bundle, its weights file, and network-driven quantization.
//!
//! Weights file layout (little-endian):
//!
//! ```text
//! magic "RDOQNN1\0" | version u32 | arch u8 (0 fcnn, 1 arm)
//! N u32 | QP u32 | k u32 | classes i8[k] | sq_offset f64
//! rate-model name: len u32 + utf8
//! shape: a u32, b u32        fcnn: depth, width; arm: hidden, 0
//! stats: mean f64[2N²], std f64[2N²]
//! tensor count u32, then per tensor:
//!   name len u32 + utf8 | ndim u32 | dims u32[ndim] | values f32[prod(dims)]
//! ```

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arm::{Arm, ArmShape};
use super::fcnn::{Fcnn, FcnnShape};
use super::tensor::Mat;
use super::{ClassSet, StandardizationStats};
use crate::codec::{merge_sign, quantize_with_offset, split_sign, CoeffBlock, LevelBlock};
use crate::error::{ensure, Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"RDOQNN1\0";
pub const MODEL_VERSION: u32 = 1;

/// Blocks per inference batch.
const INFER_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Fcnn,
    Arm,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Fcnn => "fcnn",
            Arch::Arm => "arm",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcnn" => Ok(Arch::Fcnn),
            "arm" => Ok(Arch::Arm),
            _ => Err(Error::InvalidParam(format!("unknown architecture {s:?} (expected fcnn or arm)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Network {
    Fcnn(Fcnn<f32>),
    Arm(Arm<f32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub arch: Arch,
    pub n: usize,
    pub qp: i32,
    pub classes: ClassSet,
    pub sq_offset: f64,
    pub rate_model: String,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub meta: ModelMeta,
    pub stats: StandardizationStats,
    pub net: Network,
}

impl Model {
    pub fn param_count(&self) -> usize {
        match &self.net {
            Network::Fcnn(f) => f.param_count(),
            Network::Arm(a) => a.param_count(),
        }
    }

    fn shape_words(&self) -> (u32, u32) {
        match &self.net {
            Network::Fcnn(f) => (f.shape.depth as u32, f.shape.width as u32),
            Network::Arm(a) => (a.shape.hidden as u32, 0),
        }
    }

    /// All stored tensors: trainable parameters followed by batch-norm
    /// running statistics.
    fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let (params, norms) = match &self.net {
            Network::Fcnn(f) => (f.params(), f.norms.iter().collect::<Vec<_>>()),
            Network::Arm(a) => (a.params(), a.cond_norms.iter().collect::<Vec<_>>()),
        };
        let mut out: Vec<_> = params.into_iter().map(|p| (p.name.clone(), p.shape.clone(), p.value.clone())).collect();
        for bn in norms {
            let base = bn.gamma.name.trim_end_matches(".gamma");
            out.push((format!("{base}.running_mean"), vec![bn.running_mean.len()], bn.running_mean.clone()));
            out.push((format!("{base}.running_var"), vec![bn.running_var.len()], bn.running_var.clone()));
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let m = &self.meta;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&[match m.arch {
            Arch::Fcnn => 0u8,
            Arch::Arm => 1u8,
        }])?;
        for v in [m.n as u32, m.qp as u32, m.classes.k() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &c in m.classes.values() {
            w.write_all(&(c as i8).to_le_bytes())?;
        }
        w.write_all(&m.sq_offset.to_le_bytes())?;
        write_str(w, &m.rate_model)?;
        let (a, b) = self.shape_words();
        w.write_all(&a.to_le_bytes())?;
        w.write_all(&b.to_le_bytes())?;
        for v in self.stats.mean.iter().chain(&self.stats.std) {
            w.write_all(&v.to_le_bytes())?;
        }
        let tensors = self.tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, shape, values) in tensors {
            write_str(w, &name)?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        ensure!(&magic == MODEL_MAGIC, Format, "not a model file (bad magic)");
        let version = read_u32(r)?;
        ensure!(version == MODEL_VERSION, Unsupported, "model file version {version}");
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(truncated)?;
        let arch = match tag[0] {
            0 => Arch::Fcnn,
            1 => Arch::Arm,
            t => return Err(Error::Format(format!("unknown architecture tag {t}"))),
        };
        let n = read_u32(r)? as usize;
        let qp = read_u32(r)? as i32;
        let k = read_u32(r)? as usize;
        ensure!(k <= 256, Format, "implausible class count {k}");
        let mut raw = vec![0u8; k];
        r.read_exact(&mut raw).map_err(truncated)?;
        let classes = ClassSet::new(raw.iter().map(|&b| i32::from(b as i8)).collect())?;
        let sq_offset = read_f64(r)?;
        let rate_model = read_str(r)?;
        let (a, b) = (read_u32(r)? as usize, read_u32(r)? as usize);
        let len = 2 * n * n;
        let mean = (0..len).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        let std = (0..len).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;

        let net = match arch {
            Arch::Fcnn => Network::Fcnn(Fcnn::uninit(FcnnShape { side: n, depth: a, width: b, classes: k })?),
            Arch::Arm => Network::Arm(Arm::uninit(ArmShape { side: n, hidden: a, classes: k })?),
        };
        let meta = ModelMeta { arch, n, qp, classes, sq_offset, rate_model };
        let mut model = Model { meta, stats: StandardizationStats { n, mean, std }, net };

        let count = read_u32(r)? as usize;
        let mut loaded = std::collections::HashMap::new();
        for _ in 0..count {
            let name = read_str(r)?;
            let ndim = read_u32(r)? as usize;
            ensure!(ndim <= 8, Format, "tensor {name} has {ndim} dimensions");
            let shape = (0..ndim).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let size: usize = shape.iter().product();
            let mut bytes = vec![0u8; size * 4];
            r.read_exact(&mut bytes).map_err(truncated)?;
            let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect::<Vec<_>>();
            loaded.insert(name, (shape, values));
        }
        model.load_tensors(loaded)?;
        Ok(model)
    }

    fn load_tensors(&mut self, mut loaded: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let (s, v) = loaded.remove(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            ensure!(s == shape, ShapeMismatch, "tensor {name}: stored {s:?}, expected {shape:?}");
            Ok(v)
        };
        let (params, norms) = match &mut self.net {
            Network::Fcnn(f) => {
                let norms: Vec<_> = f.norms.iter().map(|bn| bn.gamma.name.clone()).collect();
                (f.params_mut(), norms)
            }
            Network::Arm(a) => {
                let norms: Vec<_> = a.cond_norms.iter().map(|bn| bn.gamma.name.clone()).collect();
                (a.params_mut(), norms)
            }
        };
        for p in params {
            p.value = take(&p.name, &p.shape)?;
        }
        let bns = match &mut self.net {
            Network::Fcnn(f) => f.norms_mut(),
            Network::Arm(a) => a.norms_mut(),
        };
        for (bn, gname) in bns.into_iter().zip(norms) {
            let base = gname.trim_end_matches(".gamma");
            let c = bn.running_mean.len();
            bn.running_mean = take(&format!("{base}.running_mean"), &[c])?;
            bn.running_var = take(&format!("{base}.running_var"), &[c])?;
        }
        if let Network::Arm(a) = &mut self.net {
            a.enforce_masks();
        }
        if let Some(extra) = loaded.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated file".into())
    } else {
        Error::Io(e)
    }
}

pub(crate) fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    ensure!(len <= 4096, Format, "implausible string length {len}");
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::Format("string is not utf-8".into()))
}

/// Predicted classes `[B·N²]` for blocks with precomputed magnitudes.
/// `masked[i]` pins coefficient `i` to the zero adjustment.
pub(crate) fn predict_classes(model: &Model, inputs: &[f32], masked: &[bool]) -> Vec<usize> {
    let p = model.meta.n * model.meta.n;
    let batch = masked.len() / p;
    match &model.net {
        Network::Fcnn(f) => {
            let logits = f.infer(&Mat::from_vec(batch * p, 2, inputs.to_vec()));
            (0..batch * p).map(|r| super::arm::argmax(logits.row(r))).collect()
        }
        Network::Arm(a) => {
            let zero = model.meta.classes.zero_class();
            let forced: Vec<Option<usize>> = masked.iter().map(|&m| m.then_some(zero)).collect();
            a.decode(&Mat::from_vec(batch, 2 * p, inputs.to_vec()), &forced)
        }
    }
}

/// Network-refined levels for a batch of blocks.
///
/// Scalar quantization uses the model's training offset. With `zero_mask`,
/// coefficients whose SQ level is zero are left untouched.
pub fn quantize_batch(model: &Model, xs: &[CoeffBlock], zero_mask: bool) -> Result<Vec<LevelBlock>> {
    let n = model.meta.n;
    if let Some(bad) = xs.iter().find(|x| x.n != n) {
        return Err(Error::ShapeMismatch(format!("{0}x{0} block for a {n}x{n} model", bad.n)));
    }
    let chunks: Vec<Result<Vec<LevelBlock>>> = xs
        .par_chunks(INFER_CHUNK)
        .map(|chunk| {
            let mut inputs = Vec::with_capacity(chunk.len() * 2 * n * n);
            let mut splits = Vec::with_capacity(chunk.len());
            let mut masked = Vec::with_capacity(chunk.len() * n * n);
            for x in chunk {
                let q_sq = quantize_with_offset(x, model.meta.sq_offset);
                let split = split_sign(x, &q_sq)?;
                model.stats.standardize_into(split.x_mags.iter().copied(), &split.q_mags, &mut inputs);
                masked.extend(split.q_mags.iter().map(|&m| zero_mask && m == 0));
                splits.push(split);
            }
            let classes = predict_classes(model, &inputs, &masked);
            splits
                .iter()
                .enumerate()
                .map(|(b, split)| {
                    let mags: Vec<i32> = (0..n * n)
                        .map(|i| {
                            let delta = if masked[b * n * n + i] { 0 } else { model.meta.classes.value(classes[b * n * n + i]) };
                            (split.q_mags[i] + delta).max(0)
                        })
                        .collect();
                    merge_sign(n, &mags, &split.signs)
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(xs.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn quantize_with_network(model: &Model, x: &CoeffBlock, zero_mask: bool) -> Result<LevelBlock> {
    Ok(quantize_batch(model, std::slice::from_ref(x), zero_mask)?.remove(0))
}
