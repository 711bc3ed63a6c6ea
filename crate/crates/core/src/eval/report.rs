use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bdrate::{bd_rate, RdPoint};
use super::{psnr_from_sse, squared_error};
use crate::codec::{quantize_with_offset, reconstruct, scaled_coefficients, CoeffBlock, LevelBlock, PixelBlock, QuantParams, DEADZONE_OFFSET, NIR_OFFSET};
use crate::error::{ensure, Error, Result};
use crate::nn::{quantize_batch, Arch, ClassSet, Model};
use crate::rate::{EgSigRate, RateModel};
use crate::search::{greedy_group_refine, rd_cost, rdoq_baseline, SearchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    Nir,
    Deadzone,
    Rdoq,
    Refined,
    Network(Arch),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Nir => f.write_str("nir"),
            Method::Deadzone => f.write_str("deadzone"),
            Method::Rdoq => f.write_str("rdoq"),
            Method::Refined => f.write_str("refined"),
            Method::Network(a) => a.fmt(f),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nir" => Ok(Method::Nir),
            "deadzone" | "sq" => Ok(Method::Deadzone),
            "rdoq" => Ok(Method::Rdoq),
            "refined" => Ok(Method::Refined),
            other => other.parse::<Arch>().map(Method::Network).map_err(|_| {
                Error::InvalidParam(format!("unknown method {other:?} (nir, deadzone, rdoq, refined, fcnn, arm)"))
            }),
        }
    }
}

/// A source block and its prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBlock {
    pub original: PixelBlock,
    pub prediction: PixelBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n: usize,
    pub qps: Vec<i32>,
    pub alpha: f64,
    pub search: SearchConfig,
    /// Offset of the SQ levels that adjustments and accuracy refer to.
    pub sq_offset: f64,
    pub classes: ClassSet,
    pub zero_mask: bool,
}

impl EvalConfig {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            qps: vec![22, 27, 32, 37],
            alpha: crate::codec::DEFAULT_LAMBDA_ALPHA,
            search: SearchConfig::default(),
            sq_offset: NIR_OFFSET,
            classes: ClassSet::default(),
            zero_mask: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodStats {
    pub method: String,
    pub qp: i32,
    pub blocks: usize,
    pub sum_cost: f64,
    pub sum_rate: u64,
    pub sum_distortion: f64,
    pub mean_cost: f64,
    pub mean_rate: f64,
    pub mean_distortion: f64,
    /// Aggregate-sum RD change against deadzone SQ.
    pub rd_vs_deadzone_percent: f64,
    /// Agreement of `|q| - |q_sq|` with the refined labels.
    pub accuracy_percent: f64,
    /// `confusion[label][predicted]` coefficient counts.
    pub confusion: Vec<Vec<u64>>,
    pub bits_per_pixel: f64,
    pub psnr_db: f64,
    /// Coefficients changed although their SQ level is zero.
    pub zero_level_changes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rate_model: String,
    pub n: usize,
    pub classes: Vec<i32>,
    pub sq_offset: f64,
    pub zero_mask: bool,
    pub reference: String,
    pub methods: Vec<MethodStats>,
    /// BD-rate against deadzone SQ, when at least four QPs were run.
    pub bd_rate_vs_deadzone: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdRow {
    pub method: String,
    pub qp: i32,
    pub bits_per_pixel: f64,
    pub psnr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub rows: Vec<RdRow>,
}

pub const RD_TABLE_HEADER: &str = "method,qp,bits_per_pixel,psnr_db";

pub fn write_rd_table(rows: &[RdRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "{RD_TABLE_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.method, r.qp, r.bits_per_pixel, r.psnr_db)?;
    }
    Ok(())
}

pub fn read_rd_table(text: &str) -> Result<Vec<RdRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    ensure!(lines.next().map(str::trim) == Some(RD_TABLE_HEADER), Format, "RD table must start with {RD_TABLE_HEADER:?}");
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Format(format!("RD table row {}: {line:?}", i + 1));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(RdRow {
                method: f[0].to_string(),
                qp: f[1].parse().map_err(|_| bad())?,
                bits_per_pixel: f[2].parse().map_err(|_| bad())?,
                psnr_db: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

struct PerQp {
    xs: Vec<CoeffBlock>,
    params: Vec<QuantParams>,
    q_sq: Vec<LevelBlock>,
    rdoq: Vec<LevelBlock>,
    refined: Vec<LevelBlock>,
}

fn prepare(blocks: &[EvalBlock], cfg: &EvalConfig, qp: i32) -> Result<PerQp> {
    let model = EgSigRate;
    let per_block: Vec<_> = blocks
        .par_iter()
        .map(|b| -> Result<_> {
            let params = QuantParams::for_bitdepth(qp, cfg.sq_offset, b.original.bitdepth, cfg.alpha)?;
            let x = scaled_coefficients(&b.original, &b.prediction, params.step)?;
            let q_sq = quantize_with_offset(&x, cfg.sq_offset);
            let rdoq = rdoq_baseline(&x, &params, &model)?;
            let greedy = greedy_group_refine(&x, &rdoq, &params, &cfg.search, &model)?;
            let refined =
                if rd_cost(&x, &greedy, &params, &model)?.cost < rd_cost(&x, &rdoq, &params, &model)?.cost { greedy } else { rdoq.clone() };
            Ok((x, params, q_sq, rdoq, refined))
        })
        .collect::<Result<_>>()?;
    let mut out = PerQp { xs: vec![], params: vec![], q_sq: vec![], rdoq: vec![], refined: vec![] };
    for (x, p, s, r, f) in per_block {
        out.xs.push(x);
        out.params.push(p);
        out.q_sq.push(s);
        out.rdoq.push(r);
        out.refined.push(f);
    }
    Ok(out)
}

/// Runs every method over the same blocks at each QP.
///
/// Network methods look up `models[(arch, qp)]`. Deadzone SQ is always
/// evaluated, as it is the reference for RD percentages and BD-rate.
pub fn evaluate_quantizers(
    blocks: &[EvalBlock],
    cfg: &EvalConfig,
    methods: &[Method],
    models: &BTreeMap<(Arch, i32), Model>,
) -> Result<EvalOutput> {
    ensure!(!blocks.is_empty(), Empty, "no blocks to evaluate");
    ensure!(!cfg.qps.is_empty(), Empty, "no QPs to evaluate");
    let bitdepth = blocks[0].original.bitdepth;
    for b in blocks {
        ensure!(b.original.n == cfg.n && b.prediction.n == cfg.n, ShapeMismatch, "{0}x{0} block in a {1}x{1} evaluation", b.original.n, cfg.n);
        ensure!(b.original.bitdepth == bitdepth, Unsupported, "mixed bit depths in one evaluation");
    }
    let mut methods: Vec<Method> = methods.to_vec();
    if !methods.contains(&Method::Deadzone) {
        methods.insert(0, Method::Deadzone);
    }
    methods.dedup();
    for m in &methods {
        if let Method::Network(arch) = m {
            for &qp in &cfg.qps {
                let model = models.get(&(*arch, qp)).ok_or_else(|| Error::InvalidParam(format!("missing {arch} model for QP {qp}")))?;
                ensure!(model.meta.n == cfg.n, ShapeMismatch, "{arch} model for QP {qp} is {0}x{0}, blocks are {1}x{1}", model.meta.n, cfg.n);
            }
        }
    }

    let rate_model = EgSigRate;
    let k = cfg.classes.k();
    let originals: Vec<PixelBlock> = blocks.iter().map(|b| b.original.clone()).collect();
    let mut stats = Vec::new();
    let mut rows = Vec::new();
    for &qp in &cfg.qps {
        let prep = prepare(blocks, cfg, qp)?;
        let labels: Vec<usize> = prep
            .q_sq
            .iter()
            .zip(&prep.refined)
            .flat_map(|(s, r)| s.levels.iter().zip(&r.levels).map(|(&a, &b)| cfg.classes.label(a, b)).collect::<Vec<_>>())
            .collect();
        let mut method_stats = Vec::new();
        for &method in &methods {
            let levels: Vec<LevelBlock> = match method {
                Method::Nir => prep.xs.iter().map(|x| quantize_with_offset(x, NIR_OFFSET)).collect(),
                Method::Deadzone => prep.xs.iter().map(|x| quantize_with_offset(x, DEADZONE_OFFSET)).collect(),
                Method::Rdoq => prep.rdoq.clone(),
                Method::Refined => prep.refined.clone(),
                Method::Network(arch) => quantize_batch(&models[&(arch, qp)], &prep.xs, cfg.zero_mask)?,
            };
            let per_block: Vec<(f64, u32, f64, PixelBlock)> = levels
                .par_iter()
                .enumerate()
                .map(|(i, q)| -> Result<_> {
                    let c = rd_cost(&prep.xs[i], q, &prep.params[i], &rate_model)?;
                    Ok((c.cost, c.rate, c.distortion, reconstruct(&blocks[i].prediction, q, prep.params[i].step)?))
                })
                .collect::<Result<_>>()?;
            let (mut sum_cost, mut sum_rate, mut sum_dist) = (0.0, 0u64, 0.0);
            let mut recon = Vec::with_capacity(per_block.len());
            for (c, r, d, px) in per_block {
                sum_cost += c;
                sum_rate += u64::from(r);
                sum_dist += d;
                recon.push(px);
            }
            let mut confusion = vec![vec![0u64; k]; k];
            let mut hits = 0u64;
            let mut zero_changes = 0u64;
            for (b, q) in levels.iter().enumerate() {
                for (i, &l) in q.levels.iter().enumerate() {
                    let s = prep.q_sq[b].levels[i];
                    let pred = cfg.classes.label(s, l);
                    let label = labels[b * cfg.n * cfg.n + i];
                    confusion[label][pred] += 1;
                    hits += u64::from(pred == label);
                    zero_changes += u64::from(s == 0 && l != 0);
                }
            }
            let (sse, count) = squared_error(&originals, &recon)?;
            let nb = blocks.len() as f64;
            method_stats.push(MethodStats {
                method: method.to_string(),
                qp,
                blocks: blocks.len(),
                sum_cost,
                sum_rate,
                sum_distortion: sum_dist,
                mean_cost: sum_cost / nb,
                mean_rate: sum_rate as f64 / nb,
                mean_distortion: sum_dist / nb,
                rd_vs_deadzone_percent: 0.0,
                accuracy_percent: 100.0 * hits as f64 / labels.len() as f64,
                confusion,
                bits_per_pixel: sum_rate as f64 / count as f64,
                psnr_db: psnr_from_sse(sse, count, bitdepth),
                zero_level_changes: zero_changes,
            });
        }
        let reference = method_stats.iter().find(|m| m.method == "deadzone").map(|m| m.sum_cost).unwrap_or(0.0);
        for m in &mut method_stats {
            m.rd_vs_deadzone_percent = if reference > 0.0 { 100.0 * (m.sum_cost - reference) / reference } else { 0.0 };
            rows.push(RdRow { method: m.method.clone(), qp, bits_per_pixel: m.bits_per_pixel, psnr_db: m.psnr_db });
        }
        stats.extend(method_stats);
    }

    let mut bd = BTreeMap::new();
    if cfg.qps.len() >= 4 {
        let curve = |name: &str| -> Vec<RdPoint> {
            rows.iter().filter(|r| r.method == name).map(|r| RdPoint { rate: r.bits_per_pixel, quality: r.psnr_db }).collect()
        };
        let reference = curve("deadzone");
        for m in &methods {
            let name = m.to_string();
            if name != "deadzone" {
                // Degenerate curves (e.g. zero rate) simply get no entry.
                if let Ok(v) = bd_rate(&curve(&name), &reference) {
                    bd.insert(name, v);
                }
            }
        }
    }
    let report = EvalReport {
        rate_model: rate_model.name().to_string(),
        n: cfg.n,
        classes: cfg.classes.values().to_vec(),
        sq_offset: cfg.sq_offset,
        zero_mask: cfg.zero_mask,
        reference: "deadzone".into(),
        methods: stats,
        bd_rate_vs_deadzone: bd,
    };
    Ok(EvalOutput { report, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{dc_predict, Plane};

    fn blocks(n: usize) -> Vec<EvalBlock> {
        let (w, h) = (48, 48);
        let samples = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                (128.0 + 50.0 * (x * 0.4).sin() * (y * 0.25).cos() + ((i * 7919) % 17) as f64) as u16
            })
            .collect();
        let plane = Plane::new(w, h, 8, samples).unwrap();
        let mut out = Vec::new();
        for y in (0..h).step_by(n) {
            for x in (0..w).step_by(n) {
                out.push(EvalBlock { original: plane.block(x, y, n).unwrap(), prediction: dc_predict(&plane, x, y, n).unwrap() });
            }
        }
        out
    }

    #[test]
    fn methods_parse_and_print() {
        for m in [Method::Nir, Method::Deadzone, Method::Rdoq, Method::Refined, Method::Network(Arch::Fcnn), Method::Network(Arch::Arm)] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("vgg".parse::<Method>().is_err());
    }

    #[test]
    fn report_is_consistent() {
        let cfg = EvalConfig::new(4);
        let out = evaluate_quantizers(&blocks(4), &cfg, &[Method::Nir, Method::Rdoq, Method::Refined], &BTreeMap::new()).unwrap();
        assert_eq!(out.rows.len(), 16);
        for qp in cfg.qps.clone() {
            let get = |name: &str| out.report.methods.iter().find(|m| m.qp == qp && m.method == name).unwrap();
            let (dz, nir, rdoq, refined) = (get("deadzone"), get("nir"), get("rdoq"), get("refined"));
            assert!(refined.sum_cost <= rdoq.sum_cost + 1e-9 && rdoq.sum_cost <= dz.sum_cost.min(nir.sum_cost) + 1e-9);
            let pct = 100.0 * (refined.sum_cost - dz.sum_cost) / dz.sum_cost;
            assert!((refined.rd_vs_deadzone_percent - pct).abs() < 1e-12);
            assert_eq!(refined.accuracy_percent, 100.0);
            let total: u64 = nir.confusion.iter().flatten().sum();
            assert_eq!(total as usize, nir.blocks * 16);
            assert!((nir.mean_cost * nir.blocks as f64 - nir.sum_cost).abs() < 1e-9);
        }
        assert!(out.report.bd_rate_vs_deadzone.contains_key("refined"));
        assert!(evaluate_quantizers(&blocks(4), &cfg, &[Method::Network(Arch::Fcnn)], &BTreeMap::new()).is_err());
    }

    #[test]
    fn rd_table_round_trip() {
        let rows = vec![
            RdRow { method: "nir".into(), qp: 22, bits_per_pixel: 1.25, psnr_db: 40.123456789 },
            RdRow { method: "fcnn".into(), qp: 37, bits_per_pixel: 0.1, psnr_db: 30.0 },
        ];
        let mut buf = Vec::new();
        write_rd_table(&rows, &mut buf).unwrap();
        assert_eq!(read_rd_table(std::str::from_utf8(&buf).unwrap()).unwrap(), rows);
        assert!(read_rd_table("a,b\n").is_err());
    }
}
