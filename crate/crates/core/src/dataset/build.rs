use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use super::frame::{extract_blocks, ingest, FrameSource, TilePosition};
use super::{Dataset, DatasetHeader, TrainingExample};
use crate::codec::{dc_predict, quantize_with_offset, scaled_coefficients, Plane, QuantParams, DEADZONE_OFFSET, DEFAULT_LAMBDA_ALPHA};
use crate::error::{ensure, Error, Result};
use crate::nn::{ClassSet, StandardizationStats};
use crate::rate::{EgSigRate, RateModel};
use crate::search::{make_label, rd_cost, SearchConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    pub n: usize,
    pub qp: i32,
    pub sq_offset: f64,
    pub alpha: f64,
    pub search: SearchConfig,
    pub classes: ClassSet,
    /// Tiles kept per plane; `None` keeps the whole grid.
    pub max_blocks_per_plane: Option<usize>,
    pub seed: u64,
}

impl BuildConfig {
    pub fn new(n: usize, qp: i32) -> Self {
        Self {
            n,
            qp,
            sq_offset: crate::codec::NIR_OFFSET,
            alpha: DEFAULT_LAMBDA_ALPHA,
            search: SearchConfig::default(),
            classes: ClassSet::default(),
            max_blocks_per_plane: None,
            seed: 0,
        }
    }

    fn header(&self) -> DatasetHeader {
        DatasetHeader {
            n: self.n,
            qp: self.qp,
            classes: self.classes.clone(),
            sq_offset: self.sq_offset,
            rate_model: EgSigRate::NAME.to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuiltDataset {
    pub train: Dataset,
    pub val: Dataset,
    /// Network input statistics of the training split.
    pub stats: StandardizationStats,
}

/// Labels one tile. `x` is rounded to `f32` before labeling so that the
/// stored record reproduces the label's cost exactly.
pub fn label_block(plane: &Plane, at: TilePosition, cfg: &BuildConfig) -> Result<TrainingExample> {
    let params = QuantParams::for_bitdepth(cfg.qp, cfg.sq_offset, plane.bitdepth, cfg.alpha)?;
    let block = plane.block(at.x, at.y, cfg.n)?;
    let pred = dc_predict(plane, at.x, at.y, cfg.n)?;
    let mut x = scaled_coefficients(&block, &pred, params.step)?;
    x.values.iter_mut().for_each(|v| *v = f64::from(*v as f32));
    let label = make_label(&x, &params, &cfg.search, &EgSigRate)?;
    let narrow = |levels: &[i32]| -> Result<Vec<i16>> {
        levels.iter().map(|&l| i16::try_from(l).map_err(|_| Error::OutOfRange(format!("level {l} exceeds i16")))).collect()
    };
    Ok(TrainingExample {
        x: x.values.iter().map(|&v| v as f32).collect(),
        q_sq: narrow(&label.q_sq.levels)?,
        q_ref: narrow(&label.q_ref.levels)?,
    })
}

pub(crate) fn plane_seed(seed: u64, source: usize, frame: usize) -> u64 {
    seed ^ ((source as u64) << 40) ^ ((frame as u64) << 20)
}

fn build_split(sources: &[FrameSource], cfg: &BuildConfig, salt: usize) -> Result<Dataset> {
    let mut planes = Vec::new();
    for (si, source) in sources.iter().enumerate() {
        for (fi, plane) in ingest(source)?.into_iter().enumerate() {
            let tiles = extract_blocks(&plane, cfg.n, plane_seed(cfg.seed, salt + si, fi), cfg.max_blocks_per_plane)?;
            planes.push((plane, tiles));
        }
    }
    let jobs: Vec<(&Plane, TilePosition)> = planes.iter().flat_map(|(p, tiles)| tiles.iter().map(move |&t| (p, t))).collect();
    let records = jobs.par_iter().map(|&(plane, at)| label_block(plane, at, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { header: cfg.header(), records })
}

/// Labels every source into a training and a validation dataset. The two
/// source lists must not share a file.
pub fn build_dataset(train: &[FrameSource], val: &[FrameSource], cfg: &BuildConfig) -> Result<BuiltDataset> {
    ensure!(!train.is_empty(), Empty, "no training sources");
    ensure!(!val.is_empty(), Empty, "no validation sources");
    let canon = |s: &FrameSource| -> PathBuf { s.path.canonicalize().unwrap_or_else(|_| s.path.clone()) };
    for v in val {
        if train.iter().any(|t| canon(t) == canon(v)) {
            return Err(Error::InvalidParam(format!("{} is in both splits", v.path.display())));
        }
    }
    cfg.search.validate()?;
    let train_ds = build_split(train, cfg, 0)?;
    let val_ds = build_split(val, cfg, train.len())?;
    ensure!(!train_ds.is_empty(), Empty, "training split has no {0}x{0} blocks", cfg.n);
    ensure!(!val_ds.is_empty(), Empty, "validation split has no {0}x{0} blocks", cfg.n);
    let stats = StandardizationStats::fit(cfg.n, train_ds.records.iter().map(|r| (r.x.as_slice(), r.q_sq.as_slice())))?;
    Ok(BuiltDataset { train: train_ds, val: val_ds, stats })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub records: usize,
    pub class_values: Vec<i32>,
    pub class_counts: Vec<u64>,
    /// Coefficients with `|q_ref|` outside `{|q_sq|, |q_sq| - 1}`.
    pub outside_keep_or_decrement: u64,
    /// Records whose label costs more than NIR quantization.
    pub cost_violations: u64,
    pub mean_cost_sq: f64,
    pub mean_cost_deadzone: f64,
    pub mean_cost_label: f64,
    pub label_vs_sq_percent: f64,
    pub label_vs_deadzone_percent: f64,
}

/// Label statistics recomputed from the file contents alone.
pub fn summarize(ds: &Dataset) -> Result<DatasetSummary> {
    let h = &ds.header;
    let params = QuantParams::from_qp(h.qp, h.sq_offset)?;
    let model = EgSigRate;
    ensure!(h.rate_model == model.name(), Unsupported, "rate model {:?}", h.rate_model);
    let mut class_counts = vec![0u64; h.classes.k()];
    let mut outside = 0u64;
    let mut violations = 0u64;
    let (mut j_sq, mut j_dz, mut j_ref) = (0.0, 0.0, 0.0);
    for rec in &ds.records {
        for c in rec.labels(&h.classes) {
            class_counts[c] += 1;
        }
        outside += rec
            .q_sq
            .iter()
            .zip(&rec.q_ref)
            .filter(|(s, r)| {
                let (s, r) = (s.unsigned_abs(), r.unsigned_abs());
                r != s && r + 1 != s
            })
            .count() as u64;
        let x = rec.coeffs(h.n);
        let sq = rd_cost(&x, &rec.sq_levels(h.n), &params, &model)?.cost;
        let nir = rd_cost(&x, &quantize_with_offset(&x, crate::codec::NIR_OFFSET), &params, &model)?.cost;
        let dz = rd_cost(&x, &quantize_with_offset(&x, DEADZONE_OFFSET), &params, &model)?.cost;
        let lab = rd_cost(&x, &rec.ref_levels(h.n), &params, &model)?.cost;
        if lab > nir {
            violations += 1;
        }
        j_sq += sq;
        j_dz += dz;
        j_ref += lab;
    }
    let count = ds.records.len().max(1) as f64;
    let pct = |a: f64, b: f64| if b > 0.0 { 100.0 * (a - b) / b } else { 0.0 };
    Ok(DatasetSummary {
        records: ds.records.len(),
        class_values: h.classes.values().to_vec(),
        class_counts,
        outside_keep_or_decrement: outside,
        cost_violations: violations,
        mean_cost_sq: j_sq / count,
        mean_cost_deadzone: j_dz / count,
        mean_cost_label: j_ref / count,
        label_vs_sq_percent: pct(j_ref, j_sq),
        label_vs_deadzone_percent: pct(j_ref, j_dz),
    })
}
