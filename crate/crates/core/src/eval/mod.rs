//! Quantizer comparison: RD deltas, accuracy, PSNR and BD-rate.

mod bdrate;
mod report;

use crate::codec::PixelBlock;
use crate::error::{ensure, Result};

pub use bdrate::{bd_rate, Pchip, RdPoint};
pub use report::{evaluate_quantizers, read_rd_table, write_rd_table, EvalBlock, EvalConfig, EvalOutput, EvalReport, Method, MethodStats, RdRow};

/// PSNR reported for a lossless reconstruction.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `100 · (ΣJ_method − ΣJ_ref) / ΣJ_ref` over matching blocks.
pub fn rd_relative(method: &[f64], reference: &[f64]) -> Result<f64> {
    ensure!(method.len() == reference.len(), ShapeMismatch, "{} method blocks vs {} reference blocks", method.len(), reference.len());
    let (m, r): (f64, f64) = (method.iter().sum(), reference.iter().sum());
    ensure!(r > 0.0, InvalidParam, "reference cost sum is {r}");
    Ok(100.0 * (m - r) / r)
}

/// Percentage of positions where the predicted class equals the label.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    ensure!(predicted.len() == labels.len(), ShapeMismatch, "{} predictions vs {} labels", predicted.len(), labels.len());
    ensure!(!labels.is_empty(), Empty, "no labels");
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Squared error sum and sample count between block pairs.
pub fn squared_error(original: &[PixelBlock], reconstructed: &[PixelBlock]) -> Result<(f64, usize)> {
    ensure!(original.len() == reconstructed.len(), ShapeMismatch, "{} vs {} blocks", original.len(), reconstructed.len());
    let mut sse = 0.0;
    let mut count = 0;
    for (a, b) in original.iter().zip(reconstructed) {
        ensure!(a.samples.len() == b.samples.len(), ShapeMismatch, "block {}x{} vs {}x{}", a.n, a.n, b.n, b.n);
        for (&p, &q) in a.samples.iter().zip(&b.samples) {
            let d = f64::from(p) - f64::from(q);
            sse += d * d;
        }
        count += a.samples.len();
    }
    Ok((sse, count))
}

/// PSNR from a pooled squared error, capped for zero error.
pub fn psnr_from_sse(sse: f64, count: usize, bitdepth: u32) -> f64 {
    if sse <= 0.0 || count == 0 {
        return PSNR_CAP_DB;
    }
    let max = f64::from((1u32 << bitdepth) - 1);
    (10.0 * (max * max / (sse / count as f64)).log10()).min(PSNR_CAP_DB)
}

/// PSNR with the MSE pooled over all blocks.
pub fn psnr(original: &[PixelBlock], reconstructed: &[PixelBlock], bitdepth: u32) -> Result<f64> {
    let (sse, count) = squared_error(original, reconstructed)?;
    Ok(psnr_from_sse(sse, count, bitdepth))
}
