//! Bjøntegaard delta rate with piecewise cubic Hermite interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    /// Bits per pixel.
    pub rate: f64,
    /// PSNR in dB.
    pub quality: f64,
}

/// Monotone piecewise cubic Hermite interpolant (Fritsch–Carlson slopes with
/// the usual three-point end conditions).
#[derive(Debug, Clone, PartialEq)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        ensure!(x.len() == y.len(), ShapeMismatch, "{} abscissae for {} values", x.len(), y.len());
        ensure!(x.len() >= 2, InvalidParam, "interpolation needs at least two points");
        ensure!(x.iter().chain(&y).all(|v| v.is_finite()), InvalidParam, "non-finite curve value");
        ensure!(x.windows(2).all(|w| w[0] < w[1]), InvalidParam, "abscissae must be strictly increasing");
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d.fill(delta[0]);
            return Ok(Self { x, y, d });
        }
        for k in 1..n - 1 {
            if delta[k - 1] * delta[k] > 0.0 {
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
            }
        }
        d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
        d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        Ok(Self { x, y, d })
    }

    fn segment(&self, t: f64) -> usize {
        match self.x.partition_point(|&v| v <= t) {
            0 => 0,
            i => (i - 1).min(self.x.len() - 2),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.segment(t);
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let (s2, s3) = (s * s, s * s * s);
        self.y[k] * (2.0 * s3 - 3.0 * s2 + 1.0)
            + h * self.d[k] * (s3 - 2.0 * s2 + s)
            + self.y[k + 1] * (-2.0 * s3 + 3.0 * s2)
            + h * self.d[k + 1] * (s3 - s2)
    }

    /// Antiderivative of segment `k` at local coordinate `s`, in `x` units.
    fn segment_primitive(&self, k: usize, s: f64) -> f64 {
        let h = self.x[k + 1] - self.x[k];
        let (s2, s3, s4) = (s * s, s * s * s, s * s * s * s);
        h * (self.y[k] * (s4 / 2.0 - s3 + s)
            + h * self.d[k] * (s4 / 4.0 - 2.0 * s3 / 3.0 + s2 / 2.0)
            + self.y[k + 1] * (-s4 / 2.0 + s3)
            + h * self.d[k + 1] * (s4 / 4.0 - s3 / 3.0))
    }

    /// Exact integral over `[a, b]` within the data range.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let (ka, kb) = (self.segment(a), self.segment(b));
        let local = |k: usize, t: f64| (t - self.x[k]) / (self.x[k + 1] - self.x[k]);
        if ka == kb {
            return self.segment_primitive(ka, local(ka, b)) - self.segment_primitive(ka, local(ka, a));
        }
        let mut total = self.segment_primitive(ka, 1.0) - self.segment_primitive(ka, local(ka, a));
        for k in ka + 1..kb {
            total += self.segment_primitive(k, 1.0);
        }
        total + self.segment_primitive(kb, local(kb, b))
    }
}

fn end_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() || m0 == 0.0 {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

fn log_rate_curve(points: &[RdPoint], which: &str) -> Result<Pchip> {
    ensure!(points.len() >= 4, InvalidParam, "{which} curve has {} points, need at least 4", points.len());
    ensure!(points.iter().all(|p| p.rate > 0.0 && p.rate.is_finite()), InvalidParam, "{which} curve has a non-positive rate");
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.quality.total_cmp(&b.quality));
    if sorted.windows(2).any(|w| w[0].quality >= w[1].quality) {
        return Err(Error::InvalidParam(format!("{which} curve is not strictly monotone in quality")));
    }
    Pchip::new(sorted.iter().map(|p| p.quality).collect(), sorted.iter().map(|p| p.rate.log10()).collect())
}

/// Average rate difference of `test` against `reference` at equal quality, in
/// percent. Negative means `test` needs fewer bits.
pub fn bd_rate(test: &[RdPoint], reference: &[RdPoint]) -> Result<f64> {
    let t = log_rate_curve(test, "test")?;
    let r = log_rate_curve(reference, "reference")?;
    let lo = t.x[0].max(r.x[0]);
    let hi = t.x[t.x.len() - 1].min(r.x[r.x.len() - 1]);
    ensure!(lo < hi, InvalidParam, "curves do not overlap in quality");
    let mean_diff = (t.integrate(lo, hi) - r.integrate(lo, hi)) / (hi - lo);
    Ok(100.0 * (10f64.powf(mean_diff) - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn curve(rates: [f64; 4], psnr: [f64; 4]) -> Vec<RdPoint> {
        rates.iter().zip(psnr).map(|(&rate, quality)| RdPoint { rate, quality }).collect()
    }

    /// Independent slope computation and trapezoid quadrature of the same
    /// interpolant family.
    fn quadrature_bd(test: &[RdPoint], reference: &[RdPoint]) -> f64 {
        fn interp(points: &[RdPoint]) -> impl Fn(f64) -> f64 {
            let mut p = points.to_vec();
            p.sort_by(|a, b| a.quality.partial_cmp(&b.quality).unwrap());
            let x: Vec<f64> = p.iter().map(|q| q.quality).collect();
            let y: Vec<f64> = p.iter().map(|q| q.rate.log10()).collect();
            let m = x.len();
            let h: Vec<f64> = (0..m - 1).map(|i| x[i + 1] - x[i]).collect();
            let s: Vec<f64> = (0..m - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
            let mut d = vec![0.0; m];
            for i in 1..m - 1 {
                if s[i - 1] * s[i] > 0.0 {
                    let (a, b) = (2.0 * h[i] + h[i - 1], h[i] + 2.0 * h[i - 1]);
                    d[i] = (a + b) / (a / s[i - 1] + b / s[i]);
                }
            }
            let edge = |h0: f64, h1: f64, s0: f64, s1: f64| {
                let v = ((2.0 * h0 + h1) * s0 - h0 * s1) / (h0 + h1);
                if v * s0 <= 0.0 {
                    0.0
                } else if s0 * s1 < 0.0 && v.abs() > 3.0 * s0.abs() {
                    3.0 * s0
                } else {
                    v
                }
            };
            d[0] = edge(h[0], h[1], s[0], s[1]);
            d[m - 1] = edge(h[m - 2], h[m - 3], s[m - 2], s[m - 3]);
            move |t: f64| {
                let mut i = 0;
                while i < m - 2 && t > x[i + 1] {
                    i += 1;
                }
                let u = (t - x[i]) / h[i];
                let (u2, u3) = (u * u, u * u * u);
                y[i] * (2.0 * u3 - 3.0 * u2 + 1.0)
                    + h[i] * d[i] * (u3 - 2.0 * u2 + u)
                    + y[i + 1] * (3.0 * u2 - 2.0 * u3)
                    + h[i] * d[i + 1] * (u3 - u2)
            }
        }
        let (ft, fr) = (interp(test), interp(reference));
        let range = |p: &[RdPoint]| {
            let q = p.iter().map(|v| v.quality);
            (q.clone().fold(f64::INFINITY, f64::min), q.fold(f64::NEG_INFINITY, f64::max))
        };
        let ((a0, a1), (b0, b1)) = (range(test), range(reference));
        let (lo, hi) = (a0.max(b0), a1.min(b1));
        let steps = 10_000;
        let dx = (hi - lo) / steps as f64;
        let mut area = 0.0;
        for i in 0..steps {
            let (u, v) = (lo + i as f64 * dx, lo + (i + 1) as f64 * dx);
            area += 0.5 * dx * ((ft(u) - fr(u)) + (ft(v) - fr(v)));
        }
        100.0 * (10f64.powf(area / (hi - lo)) - 1.0)
    }

    #[test]
    fn identical_and_scaled_curves() {
        let a = curve([0.2, 0.45, 0.9, 1.7], [31.0, 34.5, 37.8, 41.2]);
        assert_eq!(bd_rate(&a, &a).unwrap(), 0.0);
        let scaled: Vec<RdPoint> = a.iter().map(|p| RdPoint { rate: p.rate * 1.1, ..*p }).collect();
        assert!((bd_rate(&scaled, &a).unwrap() - 10.0).abs() < 1e-9);
        let back = bd_rate(&a, &scaled).unwrap();
        assert!(back < 0.0 && (back - (100.0 / 1.1 - 100.0)).abs() < 1e-9);
    }

    #[test]
    fn interpolant_hits_knots() {
        let p = Pchip::new(vec![0.0, 1.0, 3.0, 4.5], vec![1.0, -2.0, 0.5, 0.7]).unwrap();
        for (x, y) in [(0.0, 1.0), (1.0, -2.0), (3.0, 0.5), (4.5, 0.7)] {
            assert!((p.eval(x) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_dense_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut make = || {
                let mut q = 28.0 + rng.gen_range(0.0..2.0);
                let mut r = rng.gen_range(0.05..0.3);
                (0..4)
                    .map(|_| {
                        let p = RdPoint { rate: r, quality: q };
                        q += rng.gen_range(1.5..4.5);
                        r *= rng.gen_range(1.4..2.6);
                        p
                    })
                    .collect::<Vec<_>>()
            };
            let (t, r) = (make(), make());
            let exact = bd_rate(&t, &r).unwrap();
            assert!((exact - quadrature_bd(&t, &r)).abs() < 0.01, "{exact}");
        }
    }

    #[test]
    fn rejects_bad_curves() {
        let a = curve([0.2, 0.45, 0.9, 1.7], [31.0, 34.5, 37.8, 41.2]);
        assert!(bd_rate(&a[..3], &a).is_err());
        let flat = curve([0.2, 0.45, 0.9, 1.7], [31.0, 34.5, 34.5, 41.2]);
        assert!(bd_rate(&flat, &a).is_err());
        let far = curve([0.2, 0.45, 0.9, 1.7], [50.0, 51.0, 52.0, 53.0]);
        assert!(bd_rate(&far, &a).is_err());
    }
}
