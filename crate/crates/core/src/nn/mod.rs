//! Neural quantization refiners and the small CPU network stack behind them.

pub mod arm;
pub mod fcnn;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::codec::{CoeffBlock, LevelBlock, QuantParams};
use crate::error::{ensure, Result};
use crate::rate::RateModel;

pub use arm::{Arm, ArmShape};
pub use fcnn::{Fcnn, FcnnShape};
pub use model::{quantize_batch, quantize_with_network, Arch, Model, ModelMeta, Network};
pub use tensor::{Mat, Real};
pub use train::{train, EpochLog, TrainConfig, TrainOutcome};

/// Ordered adjustment values a network can predict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSet {
    values: Vec<i32>,
}

impl Default for ClassSet {
    fn default() -> Self {
        Self { values: vec![-1, 0] }
    }
}

impl ClassSet {
    pub fn new(values: Vec<i32>) -> Result<Self> {
        ensure!(values.windows(2).all(|w| w[0] < w[1]), InvalidParam, "class values must be strictly increasing: {values:?}");
        ensure!(values.contains(&-1) && values.contains(&0), InvalidParam, "class set must contain -1 and 0: {values:?}");
        ensure!(values.iter().all(|v| (-128..=127).contains(v)), OutOfRange, "class values must fit in i8: {values:?}");
        Ok(Self { values })
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn value(&self, class: usize) -> i32 {
        self.values[class]
    }

    pub fn index_of(&self, delta: i32) -> Option<usize> {
        self.values.iter().position(|&v| v == delta)
    }

    pub fn zero_class(&self) -> usize {
        self.index_of(0).expect("class set contains 0")
    }

    /// Class of the nearest value, ties toward zero adjustment. Deltas
    /// outside the set's range map to its extremes.
    pub fn nearest(&self, delta: i32) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            let (d, bd) = ((v - delta).abs(), (self.values[best] - delta).abs());
            if d < bd || (d == bd && v.abs() < self.values[best].abs()) {
                best = i;
            }
        }
        best
    }

    /// Label class for one coefficient: `|q_ref| - |q_sq|` snapped into the set.
    pub fn label(&self, q_sq: i32, q_ref: i32) -> usize {
        self.nearest(q_ref.abs() - q_sq.abs())
    }
}

/// Per-coefficient adjustments `Δ` applied to level magnitudes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjustmentBlock {
    pub n: usize,
    pub deltas: Vec<i32>,
}

impl AdjustmentBlock {
    pub fn new(n: usize, deltas: Vec<i32>, classes: &ClassSet) -> Result<Self> {
        ensure!(deltas.len() == n * n, ShapeMismatch, "{} deltas for {n}x{n}", deltas.len());
        if let Some(bad) = deltas.iter().find(|d| classes.index_of(**d).is_none()) {
            return Err(crate::Error::OutOfRange(format!("adjustment {bad} not in {:?}", classes.values())));
        }
        Ok(Self { n, deltas })
    }

    /// `max(0, |q_sq| + Δ)` with the signs of `x`.
    pub fn apply(&self, x: &CoeffBlock, q_sq: &LevelBlock) -> Result<LevelBlock> {
        let split = crate::codec::split_sign(x, q_sq)?;
        ensure!(self.n == x.n, ShapeMismatch, "adjustments {} vs block {}", self.n, x.n);
        let mags: Vec<i32> = split.q_mags.iter().zip(&self.deltas).map(|(m, d)| (m + d).max(0)).collect();
        crate::codec::merge_sign(x.n, &mags, &split.signs)
    }
}

/// Lower bound on a standardization deviation.
pub const STD_FLOOR: f64 = 1e-3;

/// Per-position, per-channel mean and deviation of network inputs.
///
/// Both vectors use the network input layout: position-major, channels
/// `(|x|, |q_sq|)` interleaved, so entry `2·pos + ch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub n: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    /// Statistics over `(|x|, |q_sq|)` magnitude pairs, one slice each per block.
    pub fn fit<'a>(n: usize, blocks: impl IntoIterator<Item = (&'a [f32], &'a [i16])>) -> Result<Self> {
        let len = 2 * n * n;
        let mut sum = vec![0.0f64; len];
        let mut sq = vec![0.0f64; len];
        let mut count = 0usize;
        for (x, q) in blocks {
            ensure!(x.len() == n * n && q.len() == n * n, ShapeMismatch, "block of {} values for {n}x{n}", x.len());
            for (pos, (xv, qv)) in x.iter().zip(q).enumerate() {
                let (a, b) = (f64::from(xv.abs()), f64::from(qv.unsigned_abs()));
                sum[2 * pos] += a;
                sq[2 * pos] += a * a;
                sum[2 * pos + 1] += b;
                sq[2 * pos + 1] += b * b;
            }
            count += 1;
        }
        ensure!(count > 0, Empty, "no blocks to standardize");
        let c = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| (s / c - m * m).max(0.0).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { n, mean, std })
    }

    /// Identity transform, for tests and untrained models.
    pub fn identity(n: usize) -> Self {
        Self { n, mean: vec![0.0; 2 * n * n], std: vec![1.0; 2 * n * n] }
    }

    /// Appends one block's standardized inputs to `out`.
    pub fn standardize_into(&self, x_mags: impl Iterator<Item = f64>, q_mags: &[i32], out: &mut Vec<f32>) {
        for (pos, (xv, &qv)) in x_mags.zip(q_mags).enumerate() {
            out.push(((xv - self.mean[2 * pos]) / self.std[2 * pos]) as f32);
            out.push(((f64::from(qv) - self.mean[2 * pos + 1]) / self.std[2 * pos + 1]) as f32);
        }
    }
}

/// Loss weight per coefficient position with mean 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    pub n: usize,
    pub weights: Vec<f64>,
}

impl SensitivityMap {
    pub fn uniform(n: usize) -> Self {
        Self { n, weights: vec![1.0; n * n] }
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }
}

/// Sums `|ΔJ|` of unilateral `±1` magnitude shifts of the refined levels at
/// each position, then divides by the mean over the map. A `-1` shift of a
/// zero level is not a valid level and is skipped.
pub fn compute_sensitivity_map<R: RateModel>(
    samples: &[(CoeffBlock, LevelBlock)],
    params: &QuantParams,
    model: &R,
) -> Result<SensitivityMap> {
    ensure!(!samples.is_empty(), Empty, "sensitivity map needs samples");
    let n = samples[0].0.n;
    let mut acc = vec![0.0f64; n * n];
    for (x, q) in samples {
        ensure!(x.n == n && q.n == n, ShapeMismatch, "mixed block sizes {} and {}", n, x.n);
        #[allow(clippy::needless_range_loop)]
        for pos in 0..n * n {
            let level = q.levels[pos];
            let sign = if level != 0 { level.signum() } else { i32::from(crate::codec::sign_of(x.values[pos])) };
            for shift in [-1, 1] {
                let mag = level.abs() + shift;
                if mag < 0 {
                    continue;
                }
                let new = sign * mag;
                let old_err = f64::from(level) - x.values[pos];
                let new_err = f64::from(new) - x.values[pos];
                let dist = params.step * params.step * (new_err * new_err - old_err * old_err);
                let rate = model.rate_delta(q, pos, new)?;
                acc[pos] += (dist + params.lambda * rate as f64).abs();
            }
        }
    }
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    ensure!(mean > 0.0, Empty, "all level shifts were free");
    Ok(SensitivityMap { n, weights: acc.into_iter().map(|a| a / mean).collect() })
}
