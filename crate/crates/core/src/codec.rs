//! Block transform, QP mapping, scalar quantization and sign handling.
//!
//! Coefficients are kept in the orthonormal DCT-II domain, so a squared error
//! on coefficients equals the squared error on reconstructed residual samples.
//! Scaled coefficients are `x = c / step`, and quantization levels are signed
//! integers in the same raster layout.

use std::sync::OnceLock;

use crate::error::{ensure, Error, Result};

/// Block sides a codec block may take.
pub const BLOCK_SIZES: [usize; 4] = [4, 8, 16, 32];

/// Highest quantization parameter.
pub const MAX_QP: i32 = 51;

/// Default multiplier in the QP to lambda mapping.
pub const DEFAULT_LAMBDA_ALPHA: f64 = 0.57;

/// Rounding offset of the deadzone scalar quantizer.
pub const DEADZONE_OFFSET: f64 = 1.0 / 3.0;

/// Rounding offset of nearest-integer rounding.
pub const NIR_OFFSET: f64 = 0.5;

fn check_qp(qp: i32) -> Result<()> {
    ensure!((0..=MAX_QP).contains(&qp), OutOfRange, "qp {qp} outside 0..={MAX_QP}");
    Ok(())
}

fn check_block_size(n: usize) -> Result<()> {
    ensure!(BLOCK_SIZES.contains(&n), Unsupported, "block side {n}");
    Ok(())
}

/// Quantization step for an 8-bit QP: `2^((qp - 4) / 6)`.
pub fn qp_to_step(qp: i32) -> Result<f64> {
    check_qp(qp)?;
    Ok(2f64.powf(f64::from(qp - 4) / 6.0))
}

/// Lagrangian trade-off for a QP: `alpha * 2^((qp - 12) / 3)`.
pub fn qp_to_lambda(qp: i32, alpha: f64) -> Result<f64> {
    check_qp(qp)?;
    ensure!(alpha > 0.0 && alpha.is_finite(), InvalidParam, "alpha must be positive, got {alpha}");
    Ok(alpha * 2f64.powf(f64::from(qp - 12) / 3.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub qp: i32,
    pub step: f64,
    pub offset: f64,
    pub lambda: f64,
}

impl QuantParams {
    pub fn new(qp: i32, step: f64, offset: f64, lambda: f64) -> Result<Self> {
        ensure!(step > 0.0 && step.is_finite(), InvalidParam, "step must be positive, got {step}");
        ensure!((0.0..=1.0).contains(&offset), InvalidParam, "offset must be in [0, 1], got {offset}");
        ensure!(lambda > 0.0 && lambda.is_finite(), InvalidParam, "lambda must be positive, got {lambda}");
        Ok(Self { qp, step, offset, lambda })
    }

    /// Parameters for 8-bit content using the default lambda mapping.
    pub fn from_qp(qp: i32, offset: f64) -> Result<Self> {
        Self::for_bitdepth(qp, offset, 8, DEFAULT_LAMBDA_ALPHA)
    }

    /// Step and lambda scaled for `bitdepth` so that the same QP gives the
    /// same relative quality on 8- and 10-bit samples.
    pub fn for_bitdepth(qp: i32, offset: f64, bitdepth: u32, alpha: f64) -> Result<Self> {
        ensure!(bitdepth == 8 || bitdepth == 10, Unsupported, "bitdepth {bitdepth}");
        let scale = f64::from(1u32 << (bitdepth - 8));
        Self::new(qp, qp_to_step(qp)? * scale, offset, qp_to_lambda(qp, alpha)? * scale * scale)
    }

    pub fn with_offset(self, offset: f64) -> Result<Self> {
        Self::new(self.qp, self.step, offset, self.lambda)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelBlock {
    pub n: usize,
    pub bitdepth: u32,
    pub samples: Vec<u16>,
}

impl PixelBlock {
    pub fn new(n: usize, bitdepth: u32, samples: Vec<u16>) -> Result<Self> {
        check_block_size(n)?;
        ensure!(bitdepth == 8 || bitdepth == 10, Unsupported, "bitdepth {bitdepth}");
        ensure!(samples.len() == n * n, ShapeMismatch, "{} samples for a {n}x{n} block", samples.len());
        let max = 1u16 << bitdepth;
        ensure!(samples.iter().all(|&s| s < max), OutOfRange, "sample exceeds {bitdepth}-bit range");
        Ok(Self { n, bitdepth, samples })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoeffBlock {
    pub n: usize,
    pub values: Vec<f64>,
}

impl CoeffBlock {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(n > 0 && values.len() == n * n, ShapeMismatch, "{} values for a {n}x{n} block", values.len());
        ensure!(values.iter().all(|v| v.is_finite()), InvalidParam, "non-finite coefficient");
        Ok(Self { n, values })
    }

    pub fn zeros(n: usize) -> Self {
        Self { n, values: vec![0.0; n * n] }
    }

    pub fn negated(&self) -> Self {
        Self { n: self.n, values: self.values.iter().map(|v| -v).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LevelBlock {
    pub n: usize,
    pub levels: Vec<i32>,
}

impl LevelBlock {
    pub fn new(n: usize, levels: Vec<i32>) -> Result<Self> {
        ensure!(n > 0 && levels.len() == n * n, ShapeMismatch, "{} levels for a {n}x{n} block", levels.len());
        Ok(Self { n, levels })
    }

    pub fn zeros(n: usize) -> Self {
        Self { n, levels: vec![0; n * n] }
    }

    pub fn negated(&self) -> Self {
        Self { n: self.n, levels: self.levels.iter().map(|v| -v).collect() }
    }

    pub fn abs_sum(&self) -> i64 {
        self.levels.iter().map(|&l| i64::from(l.unsigned_abs())).sum()
    }
}

/// Orthonormal DCT-II basis, row `k` holds basis function `k`.
struct DctBasis {
    n: usize,
    m: Vec<f64>,
}

impl DctBasis {
    fn build(n: usize) -> Self {
        let mut m = vec![0.0; n * n];
        let nf = n as f64;
        for k in 0..n {
            let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            for i in 0..n {
                let angle = std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf);
                m[k * n + i] = scale * angle.cos();
            }
        }
        Self { n, m }
    }
}

fn basis(n: usize) -> Result<&'static DctBasis> {
    static CACHE: [OnceLock<DctBasis>; 4] = [OnceLock::new(), OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let slot = BLOCK_SIZES
        .iter()
        .position(|&s| s == n)
        .ok_or_else(|| Error::Unsupported(format!("transform size {n}")))?;
    Ok(CACHE[slot].get_or_init(|| DctBasis::build(n)))
}

/// `out = a * b` for n×n row-major matrices; `ta`/`tb` transpose the operand.
fn matmul(n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                let av = if ta { a[k * n + i] } else { a[i * n + k] };
                let bv = if tb { b[j * n + k] } else { b[k * n + j] };
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// 2D orthonormal DCT-II of a square residual given in raster order.
pub fn dct_forward(n: usize, residual: &[f64]) -> Result<CoeffBlock> {
    ensure!(residual.len() == n * n, ShapeMismatch, "{} samples for a {n}x{n} transform", residual.len());
    let b = basis(n)?;
    let tmp = matmul(b.n, &b.m, false, residual, false);
    CoeffBlock::new(n, matmul(b.n, &tmp, false, &b.m, true))
}

/// Inverse of [`dct_forward`].
pub fn dct_inverse(coeffs: &CoeffBlock) -> Result<Vec<f64>> {
    let n = coeffs.n;
    ensure!(coeffs.values.len() == n * n, ShapeMismatch, "coefficient block is not square");
    let b = basis(n)?;
    let tmp = matmul(n, &b.m, true, &coeffs.values, false);
    Ok(matmul(n, &tmp, false, &b.m, false))
}

/// A single luma plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub bitdepth: u32,
    pub samples: Vec<u16>,
}

impl Plane {
    pub fn new(width: usize, height: usize, bitdepth: u32, samples: Vec<u16>) -> Result<Self> {
        ensure!(width > 0 && height > 0, InvalidParam, "empty plane {width}x{height}");
        ensure!(bitdepth == 8 || bitdepth == 10, Unsupported, "bitdepth {bitdepth}");
        ensure!(samples.len() == width * height, ShapeMismatch, "{} samples for {width}x{height}", samples.len());
        Ok(Self { width, height, bitdepth, samples })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u16 {
        self.samples[y * self.width + x]
    }

    pub fn block(&self, x0: usize, y0: usize, n: usize) -> Result<PixelBlock> {
        self.check_bounds(x0, y0, n)?;
        let samples = (0..n)
            .flat_map(|y| (0..n).map(move |x| (x, y)))
            .map(|(x, y)| self.at(x0 + x, y0 + y))
            .collect();
        PixelBlock::new(n, self.bitdepth, samples)
    }

    fn check_bounds(&self, x0: usize, y0: usize, n: usize) -> Result<()> {
        ensure!(
            x0 + n <= self.width && y0 + n <= self.height,
            OutOfRange,
            "{n}x{n} block at ({x0}, {y0}) outside {}x{} plane",
            self.width,
            self.height
        );
        Ok(())
    }
}

/// DC prediction from the original samples directly above and left of the
/// block. Without any neighbor the mid-grey value is used.
pub fn dc_predict(plane: &Plane, x0: usize, y0: usize, n: usize) -> Result<PixelBlock> {
    plane.check_bounds(x0, y0, n)?;
    let mut sum = 0u64;
    let mut count = 0u64;
    if y0 > 0 {
        sum += (0..n).map(|x| u64::from(plane.at(x0 + x, y0 - 1))).sum::<u64>();
        count += n as u64;
    }
    if x0 > 0 {
        sum += (0..n).map(|y| u64::from(plane.at(x0 - 1, y0 + y))).sum::<u64>();
        count += n as u64;
    }
    let value = (sum + count / 2).checked_div(count).map_or(1u16 << (plane.bitdepth - 1), |v| v as u16);
    PixelBlock::new(n, plane.bitdepth, vec![value; n * n])
}

/// `q = sign(x) * floor(|x| + offset)` element-wise.
pub fn scalar_quantize(x: &CoeffBlock, params: &QuantParams) -> LevelBlock {
    quantize_with_offset(x, params.offset)
}

pub(crate) fn quantize_with_offset(x: &CoeffBlock, offset: f64) -> LevelBlock {
    let levels = x
        .values
        .iter()
        .map(|&v| {
            let mag = (v.abs() + offset).floor() as i32;
            if v < 0.0 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    LevelBlock { n: x.n, levels }
}

/// Nearest-integer rounding.
pub fn nir_quantize(x: &CoeffBlock) -> LevelBlock {
    quantize_with_offset(x, NIR_OFFSET)
}

/// Deadzone scalar quantization with the default offset.
pub fn deadzone_quantize(x: &CoeffBlock) -> LevelBlock {
    quantize_with_offset(x, DEADZONE_OFFSET)
}

/// Sign of a coefficient with `sign(0) = +1`.
#[inline]
pub fn sign_of(v: f64) -> i8 {
    if v < 0.0 {
        -1
    } else {
        1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignSplit {
    pub x_mags: Vec<f64>,
    pub q_mags: Vec<i32>,
    pub signs: Vec<i8>,
}

/// Separates magnitudes from the signs of `x`.
pub fn split_sign(x: &CoeffBlock, q: &LevelBlock) -> Result<SignSplit> {
    ensure!(
        x.n == q.n && x.values.len() == q.levels.len(),
        ShapeMismatch,
        "coefficients {}x{} vs levels {}x{}",
        x.n,
        x.n,
        q.n,
        q.n
    );
    Ok(SignSplit {
        x_mags: x.values.iter().map(|v| v.abs()).collect(),
        q_mags: q.levels.iter().map(|l| l.abs()).collect(),
        signs: x.values.iter().map(|&v| sign_of(v)).collect(),
    })
}

/// Re-applies a sign mask to non-negative magnitudes.
pub fn merge_sign(n: usize, mags: &[i32], signs: &[i8]) -> Result<LevelBlock> {
    ensure!(
        mags.len() == n * n && signs.len() == n * n,
        ShapeMismatch,
        "{} magnitudes and {} signs for {n}x{n}",
        mags.len(),
        signs.len()
    );
    ensure!(mags.iter().all(|&m| m >= 0), InvalidParam, "negative magnitude");
    let levels = mags.iter().zip(signs).map(|(&m, &s)| m * i32::from(s)).collect();
    Ok(LevelBlock { n, levels })
}

/// Reconstructs pixels from levels: `prediction + idct(levels * step)`,
/// rounded and clipped to the sample range.
pub fn reconstruct(prediction: &PixelBlock, levels: &LevelBlock, step: f64) -> Result<PixelBlock> {
    ensure!(prediction.n == levels.n, ShapeMismatch, "prediction {} vs levels {}", prediction.n, levels.n);
    let dequant = CoeffBlock::new(levels.n, levels.levels.iter().map(|&l| f64::from(l) * step).collect())?;
    let residual = dct_inverse(&dequant)?;
    let max = f64::from((1u32 << prediction.bitdepth) - 1);
    let samples = prediction
        .samples
        .iter()
        .zip(&residual)
        .map(|(&p, &r)| (f64::from(p) + r).round().clamp(0.0, max) as u16)
        .collect();
    PixelBlock::new(prediction.n, prediction.bitdepth, samples)
}

/// Scaled coefficients `x = dct(block - prediction) / step`.
pub fn scaled_coefficients(block: &PixelBlock, prediction: &PixelBlock, step: f64) -> Result<CoeffBlock> {
    ensure!(block.n == prediction.n, ShapeMismatch, "block {} vs prediction {}", block.n, prediction.n);
    let residual: Vec<f64> = block
        .samples
        .iter()
        .zip(&prediction.samples)
        .map(|(&a, &b)| f64::from(a) - f64::from(b))
        .collect();
    let c = dct_forward(block.n, &residual)?;
    CoeffBlock::new(c.n, c.values.into_iter().map(|v| v / step).collect())
}
