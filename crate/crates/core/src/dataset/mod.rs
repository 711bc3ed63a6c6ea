//! Frame ingest, block extraction, labeling and the binary dataset format.
//!
//! Dataset file layout (little-endian):
//!
//! ```text
//! magic "RDOQDS1\0" | version u32 = 1 | N u32 | QP u32 | k u32
//! classes i8[k] | sq_offset f64 | rate-model name: len u32 + utf8
//! record count u64
//! records: x f32[N²] | q_sq i16[N²] | q_ref i16[N²]
//! ```

mod build;
mod frame;

use std::io::{Read, Write};
use std::path::Path;

use crate::codec::{CoeffBlock, LevelBlock};
use crate::error::{ensure, Error, Result};
use crate::nn::model::{read_f64, read_str, read_u32, write_str};
use crate::nn::ClassSet;

pub(crate) use build::plane_seed;
pub use build::{build_dataset, label_block, summarize, BuildConfig, BuiltDataset, DatasetSummary};
pub use frame::{extract_blocks, ingest, read_pgm, FrameFormat, FrameSource, TilePosition};

pub const DATASET_MAGIC: &[u8; 8] = b"RDOQDS1\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub n: usize,
    pub qp: i32,
    pub classes: ClassSet,
    pub sq_offset: f64,
    pub rate_model: String,
}

/// One `(x, q_sq, q_ref)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub x: Vec<f32>,
    pub q_sq: Vec<i16>,
    pub q_ref: Vec<i16>,
}

impl TrainingExample {
    pub fn coeffs(&self, n: usize) -> CoeffBlock {
        CoeffBlock { n, values: self.x.iter().map(|&v| f64::from(v)).collect() }
    }

    pub fn sq_levels(&self, n: usize) -> LevelBlock {
        LevelBlock { n, levels: self.q_sq.iter().map(|&v| i32::from(v)).collect() }
    }

    pub fn ref_levels(&self, n: usize) -> LevelBlock {
        LevelBlock { n, levels: self.q_ref.iter().map(|&v| i32::from(v)).collect() }
    }

    /// Label classes `[N²]` under `classes`.
    pub fn labels(&self, classes: &ClassSet) -> Vec<usize> {
        self.q_sq.iter().zip(&self.q_ref).map(|(&s, &r)| classes.label(i32::from(s), i32::from(r))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<TrainingExample>,
}

impl Dataset {
    pub fn new(header: DatasetHeader) -> Self {
        Self { header, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn record_bytes(&self) -> usize {
        self.header.n * self.header.n * 8
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let h = &self.header;
        w.write_all(DATASET_MAGIC)?;
        for v in [DATASET_VERSION, h.n as u32, h.qp as u32, h.classes.k() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &c in h.classes.values() {
            w.write_all(&(c as i8).to_le_bytes())?;
        }
        w.write_all(&h.sq_offset.to_le_bytes())?;
        write_str(w, &h.rate_model)?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        let p = h.n * h.n;
        let mut buf = Vec::with_capacity(self.record_bytes());
        for rec in &self.records {
            ensure!(rec.x.len() == p && rec.q_sq.len() == p && rec.q_ref.len() == p, ShapeMismatch, "record size for {0}x{0}", h.n);
            buf.clear();
            rec.x.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            rec.q_sq.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            rec.q_ref.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let header = read_header(r)?;
        let count = {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| Error::Format("truncated dataset header".into()))?;
            u64::from_le_bytes(b)
        };
        let mut ds = Dataset::new(header);
        let p = ds.header.n * ds.header.n;
        let mut buf = vec![0u8; ds.record_bytes()];
        for i in 0..count {
            r.read_exact(&mut buf).map_err(|_| Error::Format(format!("dataset truncated at record {i} of {count}")))?;
            let (xb, rest) = buf.split_at(4 * p);
            let (sb, rb) = rest.split_at(2 * p);
            ds.records.push(TrainingExample {
                x: xb.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
                q_sq: sb.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect(),
                q_ref: rb.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect(),
            });
        }
        let mut extra = [0u8; 1];
        ensure!(r.read(&mut extra)? == 0, Format, "trailing bytes after {count} records");
        Ok(ds)
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

fn read_header(r: &mut impl Read) -> Result<DatasetHeader> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated dataset header".into()))?;
    ensure!(&magic == DATASET_MAGIC, Format, "not a dataset file (bad magic)");
    let version = read_u32(r)?;
    ensure!(version == DATASET_VERSION, Unsupported, "dataset version {version}");
    let n = read_u32(r)? as usize;
    ensure!(crate::codec::BLOCK_SIZES.contains(&n), Format, "unsupported block size {n}");
    let qp = read_u32(r)? as i32;
    let k = read_u32(r)? as usize;
    ensure!(k <= 256, Format, "implausible class count {k}");
    let mut raw = vec![0u8; k];
    r.read_exact(&mut raw).map_err(|_| Error::Format("truncated dataset header".into()))?;
    let classes = ClassSet::new(raw.iter().map(|&b| i32::from(b as i8)).collect())?;
    let sq_offset = read_f64(r)?;
    let rate_model = read_str(r)?;
    Ok(DatasetHeader { n, qp, classes, sq_offset, rate_model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn header() -> DatasetHeader {
        DatasetHeader { n: 4, qp: 27, classes: ClassSet::default(), sq_offset: 0.5, rate_model: "eg-sig-v1".into() }
    }

    #[test]
    fn write_then_read_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ds = Dataset::new(header());
        for _ in 0..25 {
            ds.records.push(TrainingExample {
                x: (0..16).map(|_| rng.gen_range(-40.0f32..40.0)).collect(),
                q_sq: (0..16).map(|_| rng.gen_range(-40i16..40)).collect(),
                q_ref: (0..16).map(|_| rng.gen_range(-40i16..40)).collect(),
            });
        }
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        assert_eq!(Dataset::read_from(&mut bytes.as_slice()).unwrap(), ds);

        let mut short = bytes.clone();
        short.pop();
        assert!(matches!(Dataset::read_from(&mut short.as_slice()), Err(Error::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(Dataset::read_from(&mut long.as_slice()).is_err());
        bytes[3] = b'?';
        assert!(matches!(Dataset::read_from(&mut bytes.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = Dataset::new(header());
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        assert_eq!(Dataset::read_from(&mut bytes.as_slice()).unwrap(), ds);
    }
}
