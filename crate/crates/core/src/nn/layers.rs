//! Layer primitives with hand-written backward passes.
//!
//! Activations are matrices with one row per sample (dense layers) or one row
//! per spatial position (`B·N·N` rows, channels as columns) for convolutions.
//! Each layer caches what its backward pass needs during `forward`.

use rand::Rng;

use super::tensor::{Mat, Real};

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { name: name.into(), shape, value: vec![T::zero(); len], grad: vec![T::zero(); len] }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: T) -> Self {
        let mut p = Self::zeros(name, shape);
        p.value.fill(v);
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Fully connected layer `y = x W + b`, `W` stored `[in, out]`.
///
/// With a mask, entries of `W` outside the mask are held at zero: they start
/// at zero and their gradient is masked out.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub w: Param<T>,
    pub b: Param<T>,
    mask: Option<Vec<T>>,
    input: Option<Mat<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            w: Param::zeros(format!("{name}.w"), vec![inputs, outputs]),
            b: Param::zeros(format!("{name}.b"), vec![outputs]),
            mask: None,
            input: None,
        }
    }

    pub fn masked(name: &str, inputs: usize, outputs: usize, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), inputs * outputs, "mask shape");
        let mut layer = Self::new(name, inputs, outputs);
        layer.mask = Some(mask.into_iter().map(|m| if m { T::one() } else { T::zero() }).collect());
        layer
    }

    pub fn inputs(&self) -> usize {
        self.w.shape[0]
    }

    pub fn outputs(&self) -> usize {
        self.w.shape[1]
    }

    /// He-uniform initialisation using each unit's effective fan-in.
    pub fn init(&mut self, rng: &mut impl Rng) {
        let (inputs, outputs) = (self.inputs(), self.outputs());
        for o in 0..outputs {
            let fan_in = match &self.mask {
                Some(m) => (0..inputs).filter(|&i| m[i * outputs + o] != T::zero()).count(),
                None => inputs,
            }
            .max(1);
            let bound = (6.0 / fan_in as f64).sqrt();
            for i in 0..inputs {
                self.w.value[i * outputs + o] = T::lit(rng.gen_range(-bound..bound));
            }
        }
        self.b.value.fill(T::zero());
        self.apply_mask();
    }

    pub fn apply_mask(&mut self) {
        if let Some(m) = &self.mask {
            for (w, &k) in self.w.value.iter_mut().zip(m) {
                *w *= k;
            }
        }
    }

    pub fn forward(&mut self, x: &Mat<T>) -> Mat<T> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    /// Forward without caching.
    pub fn infer(&self, x: &Mat<T>) -> Mat<T> {
        assert_eq!(x.cols, self.inputs(), "{} input width", self.w.name);
        let mut y = Mat::zeros(x.rows, self.outputs());
        T::gemm(x.rows, x.cols, y.cols, &x.data, false, &self.w.value, false, T::zero(), &mut y.data);
        y.add_row_vector(&self.b.value);
        y
    }

    pub fn backward(&mut self, dy: &Mat<T>, need_dx: bool) -> Option<Mat<T>> {
        let x = self.input.as_ref().expect("backward before forward");
        x.t_matmul_into(dy, &mut self.w.grad);
        if let Some(m) = &self.mask {
            for (g, &k) in self.w.grad.iter_mut().zip(m) {
                *g *= k;
            }
        }
        dy.column_sums_into(&mut self.b.grad);
        need_dx.then(|| {
            let mut dx = Mat::zeros(dy.rows, self.inputs());
            T::gemm(dy.rows, dy.cols, dx.cols, &dy.data, false, &self.w.value, true, T::zero(), &mut dx.data);
            dx
        })
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.w, &mut self.b]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.w, &self.b]
    }
}

/// 3×3 convolution, stride 1, zero padding, on `B` square `side×side` maps.
/// Weights are stored `[9·in, out]` with row index `(ky·3 + kx)·in + c`.
#[derive(Debug, Clone)]
pub struct Conv3x3<T> {
    pub w: Param<T>,
    pub b: Param<T>,
    side: usize,
    cols: Option<Mat<T>>,
}

impl<T: Real> Conv3x3<T> {
    pub fn new(name: &str, side: usize, inputs: usize, outputs: usize) -> Self {
        Self {
            w: Param::zeros(format!("{name}.w"), vec![9 * inputs, outputs]),
            b: Param::zeros(format!("{name}.b"), vec![outputs]),
            side,
            cols: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.shape[0] / 9
    }

    pub fn outputs(&self) -> usize {
        self.w.shape[1]
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        let bound = (6.0 / self.w.shape[0] as f64).sqrt();
        for w in &mut self.w.value {
            *w = T::lit(rng.gen_range(-bound..bound));
        }
        self.b.value.fill(T::zero());
    }

    fn im2col(&self, x: &Mat<T>) -> Mat<T> {
        let (s, c) = (self.side, self.inputs());
        assert_eq!(x.cols, c, "{} input channels", self.w.name);
        assert_eq!(x.rows % (s * s), 0, "{} input rows", self.w.name);
        let mut cols = Mat::zeros(x.rows, 9 * c);
        for p in 0..x.rows {
            let base = p - p % (s * s);
            let (y, xx) = ((p % (s * s)) / s, p % s);
            let row = cols.row_mut(p);
            for ky in 0..3 {
                let sy = y + ky;
                if sy < 1 || sy > s {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx + kx;
                    if sx < 1 || sx > s {
                        continue;
                    }
                    let src = base + (sy - 1) * s + (sx - 1);
                    let off = (ky * 3 + kx) * c;
                    row[off..off + c].copy_from_slice(x.row(src));
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Mat<T>) -> Mat<T> {
        let (s, c) = (self.side, self.inputs());
        let mut dx = Mat::zeros(dcols.rows, c);
        for p in 0..dcols.rows {
            let base = p - p % (s * s);
            let (y, xx) = ((p % (s * s)) / s, p % s);
            for ky in 0..3 {
                let sy = y + ky;
                if sy < 1 || sy > s {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx + kx;
                    if sx < 1 || sx > s {
                        continue;
                    }
                    let dst = base + (sy - 1) * s + (sx - 1);
                    let off = (ky * 3 + kx) * c;
                    let src = &dcols.data[p * 9 * c + off..p * 9 * c + off + c];
                    for (d, &v) in dx.row_mut(dst).iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &Mat<T>) -> Mat<T> {
        let cols = self.im2col(x);
        let mut y = Mat::zeros(x.rows, self.outputs());
        T::gemm(cols.rows, cols.cols, y.cols, &cols.data, false, &self.w.value, false, T::zero(), &mut y.data);
        y.add_row_vector(&self.b.value);
        self.cols = Some(cols);
        y
    }

    pub fn infer(&self, x: &Mat<T>) -> Mat<T> {
        let cols = self.im2col(x);
        let mut y = Mat::zeros(x.rows, self.outputs());
        T::gemm(cols.rows, cols.cols, y.cols, &cols.data, false, &self.w.value, false, T::zero(), &mut y.data);
        y.add_row_vector(&self.b.value);
        y
    }

    pub fn backward(&mut self, dy: &Mat<T>, need_dx: bool) -> Option<Mat<T>> {
        let cols = self.cols.as_ref().expect("backward before forward");
        cols.t_matmul_into(dy, &mut self.w.grad);
        dy.column_sums_into(&mut self.b.grad);
        need_dx.then(|| {
            let mut dcols = Mat::zeros(dy.rows, self.w.shape[0]);
            T::gemm(dy.rows, dy.cols, dcols.cols, &dy.data, false, &self.w.value, true, T::zero(), &mut dcols.data);
            self.col2im(&dcols)
        })
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.w, &mut self.b]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.w, &self.b]
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-column batch normalisation with running statistics for inference.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    cache: Option<(Mat<T>, Vec<T>)>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], T::one()),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training-mode forward on batch statistics; updates running statistics.
    pub fn forward(&mut self, x: &Mat<T>) -> Mat<T> {
        let c = self.channels();
        assert_eq!(x.cols, c, "{} channels", self.gamma.name);
        let m = T::from_usize(x.rows).unwrap();
        let mut mean = vec![T::zero(); c];
        x.column_sums_into(&mut mean);
        mean.iter_mut().for_each(|v| *v = *v / m);
        let mut var = vec![T::zero(); c];
        for row in x.data.chunks_exact(c) {
            for ((v, &a), &mu) in var.iter_mut().zip(row).zip(&mean) {
                *v += (a - mu) * (a - mu);
            }
        }
        var.iter_mut().for_each(|v| *v = *v / m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt()).collect();

        let mut xhat = x.clone();
        for row in xhat.data.chunks_exact_mut(c) {
            for ((a, &mu), &is) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *a = (*a - mu) * is;
            }
        }
        let y = self.affine(&xhat);

        let mom = T::lit(BN_MOMENTUM);
        for i in 0..c {
            self.running_mean[i] = (T::one() - mom) * self.running_mean[i] + mom * mean[i];
            self.running_var[i] = (T::one() - mom) * self.running_var[i] + mom * var[i];
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    /// Inference-mode forward on running statistics.
    pub fn infer(&self, x: &Mat<T>) -> Mat<T> {
        let c = self.channels();
        assert_eq!(x.cols, c, "{} channels", self.gamma.name);
        let inv_std: Vec<T> = self.running_var.iter().map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt()).collect();
        let mut xhat = x.clone();
        for row in xhat.data.chunks_exact_mut(c) {
            for ((a, &mu), &is) in row.iter_mut().zip(&self.running_mean).zip(&inv_std) {
                *a = (*a - mu) * is;
            }
        }
        self.affine(&xhat)
    }

    fn affine(&self, xhat: &Mat<T>) -> Mat<T> {
        let c = self.channels();
        let mut y = xhat.clone();
        for row in y.data.chunks_exact_mut(c) {
            for ((a, &g), &b) in row.iter_mut().zip(&self.gamma.value).zip(&self.beta.value) {
                *a = *a * g + b;
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Mat<T>) -> Mat<T> {
        let c = self.channels();
        let (xhat, inv_std) = self.cache.as_ref().expect("backward before forward");
        let m = T::from_usize(dy.rows).unwrap();
        let mut sum_dxhat = vec![T::zero(); c];
        let mut sum_dxhat_xhat = vec![T::zero(); c];
        for (dr, xr) in dy.data.chunks_exact(c).zip(xhat.data.chunks_exact(c)) {
            for i in 0..c {
                self.gamma.grad[i] += dr[i] * xr[i];
                self.beta.grad[i] += dr[i];
                let dxh = dr[i] * self.gamma.value[i];
                sum_dxhat[i] += dxh;
                sum_dxhat_xhat[i] += dxh * xr[i];
            }
        }
        let mut dx = Mat::zeros(dy.rows, c);
        for ((out, dr), xr) in dx.data.chunks_exact_mut(c).zip(dy.data.chunks_exact(c)).zip(xhat.data.chunks_exact(c)) {
            for i in 0..c {
                let dxh = dr[i] * self.gamma.value[i];
                out[i] = inv_std[i] / m * (m * dxh - sum_dxhat[i] - xr[i] * sum_dxhat_xhat[i]);
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.gamma, &self.beta]
    }
}

pub fn relu<T: Real>(mut x: Mat<T>) -> Mat<T> {
    x.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
    x
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(dy: &Mat<T>, y: &Mat<T>) -> Mat<T> {
    let data = dy.data.iter().zip(&y.data).map(|(&d, &o)| if o > T::zero() { d } else { T::zero() }).collect();
    Mat::from_vec(dy.rows, dy.cols, data)
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Row-wise softmax.
pub fn softmax<T: Real>(logits: &Mat<T>) -> Mat<T> {
    let mut out = logits.clone();
    for row in out.data.chunks_exact_mut(logits.cols) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / sum);
    }
    out
}

/// Weighted softmax cross-entropy over rows of `logits`.
///
/// Returns `sum_i w_i * CE_i / count` and its gradient, where rows with
/// `w_i = 0` are excluded from `count`. With no active row the loss is 0.
pub fn softmax_cross_entropy<T: Real>(logits: &Mat<T>, targets: &[usize], weights: &[T]) -> (T, Mat<T>) {
    assert_eq!(targets.len(), logits.rows, "one target per row");
    assert_eq!(weights.len(), logits.rows, "one weight per row");
    let probs = softmax(logits);
    let count = weights.iter().filter(|&&w| w != T::zero()).count();
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    if count == 0 {
        return (T::zero(), grad);
    }
    let inv = T::one() / T::from_usize(count).unwrap();
    let mut loss = T::zero();
    for r in 0..logits.rows {
        let w = weights[r];
        if w == T::zero() {
            continue;
        }
        let t = targets[r];
        let row = logits.row(r);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += w * (lse - row[t]);
        let g = grad.row_mut(r);
        for (c, gv) in g.iter_mut().enumerate() {
            let onehot = if c == t { T::one() } else { T::zero() };
            *gv = w * inv * (probs.data[r * logits.cols + c] - onehot);
        }
    }
    (loss * inv, grad)
}
