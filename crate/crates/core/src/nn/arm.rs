//! Auto-regressive refiner over raster-ordered adjustments.
//!
//! A conditioning stack (dense, batch norm, ReLU) embeds the standardized
//! `(|x|, |q_sq|)` block. The auto-regressive stack consumes one-hot
//! adjustments; each hidden unit belongs to a block position and its masked
//! weights only see earlier positions (strictly earlier in the first layer,
//! earlier-or-equal afterwards), so the logits at position `i` depend on
//! `Δ_{<i}` only. Every AR layer receives the conditioning features through a
//! gated linear projection: `h' = relu(M h + a ⊙ σ(g))` with `[a, g] = G c`.

use rand::Rng;

use super::layers::{relu, relu_backward, sigmoid, BatchNorm, Dense, Param};
use super::tensor::{Mat, Real};
use crate::error::{ensure, Result};

pub const COND_LAYERS: usize = 3;
pub const AR_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArmShape {
    pub side: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ArmShape {
    /// Default hidden width: 256, 384 and 512 for 4×4, 8×8 and 16×16 blocks.
    pub fn default_for(side: usize, classes: usize) -> Result<Self> {
        let hidden = match side {
            4 => 256,
            8 => 384,
            16 => 512,
            _ => return Err(crate::Error::Unsupported(format!("no network for {side}x{side} blocks"))),
        };
        Ok(Self { side, hidden, classes })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(matches!(self.side, 4 | 8 | 16), Unsupported, "no network for {0}x{0} blocks", self.side);
        ensure!(self.hidden >= 1, InvalidParam, "empty hidden layer");
        ensure!(self.classes >= 2, InvalidParam, "need at least two classes");
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.side * self.side
    }

    /// Block position owned by hidden unit `j`.
    fn unit_position(&self, j: usize) -> usize {
        j * self.positions() / self.hidden
    }

    fn input_mask(&self) -> Vec<bool> {
        let (inputs, k) = (self.positions() * self.classes, self.classes);
        (0..inputs * self.hidden).map(|i| (i / self.hidden) / k < self.unit_position(i % self.hidden)).collect()
    }

    fn hidden_mask(&self) -> Vec<bool> {
        let h = self.hidden;
        (0..h * h).map(|i| self.unit_position(i / h) <= self.unit_position(i % h)).collect()
    }

    fn output_mask(&self) -> Vec<bool> {
        let outputs = self.positions() * self.classes;
        (0..self.hidden * outputs).map(|i| self.unit_position(i / outputs) <= (i % outputs) / self.classes).collect()
    }
}

#[derive(Debug, Clone)]
struct Cache<T> {
    cond_acts: Vec<Mat<T>>,
    gates: Vec<Mat<T>>,
    ar_acts: Vec<Mat<T>>,
}

#[derive(Debug, Clone)]
pub struct Arm<T> {
    pub shape: ArmShape,
    pub cond: Vec<Dense<T>>,
    pub cond_norms: Vec<BatchNorm<T>>,
    pub ar: Vec<Dense<T>>,
    pub gates: Vec<Dense<T>>,
    pub out: Dense<T>,
    cache: Option<Cache<T>>,
}

/// Conditioning-dependent part of a forward pass, reused across decode steps.
pub struct Conditioning<T> {
    gate_terms: Vec<Mat<T>>,
}

impl<T: Real> Arm<T> {
    pub fn new(shape: ArmShape, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::uninit(shape)?;
        for layer in net.cond.iter_mut().chain(&mut net.ar).chain(&mut net.gates) {
            layer.init(rng);
        }
        net.out.init(rng);
        Ok(net)
    }

    pub fn uninit(shape: ArmShape) -> Result<Self> {
        shape.validate()?;
        let (h, p, k) = (shape.hidden, shape.positions(), shape.classes);
        let cond = (0..COND_LAYERS)
            .map(|l| Dense::new(&format!("cond{l}"), if l == 0 { 2 * p } else { h }, h))
            .collect();
        let cond_norms = (0..COND_LAYERS).map(|l| BatchNorm::new(&format!("cond_bn{l}"), h)).collect();
        let ar = (0..AR_LAYERS)
            .map(|l| {
                if l == 0 {
                    Dense::masked("ar0", p * k, h, shape.input_mask())
                } else {
                    Dense::masked(&format!("ar{l}"), h, h, shape.hidden_mask())
                }
            })
            .collect();
        let gates = (0..AR_LAYERS).map(|l| Dense::new(&format!("gate{l}"), h, 2 * h)).collect();
        let out = Dense::masked("out", h, p * k, shape.output_mask());
        Ok(Self { shape, cond, cond_norms, ar, gates, out, cache: None })
    }

    /// Re-zeroes masked weights, e.g. after loading.
    pub fn enforce_masks(&mut self) {
        for layer in self.ar.iter_mut().chain(std::iter::once(&mut self.out)) {
            layer.apply_mask();
        }
    }

    fn gate_term(&self, g: &Mat<T>) -> Mat<T> {
        let h = self.shape.hidden;
        let mut out = Mat::zeros(g.rows, h);
        for r in 0..g.rows {
            let row = g.row(r);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = row[j] * sigmoid(row[h + j]);
            }
        }
        out
    }

    /// Training-mode forward. `cond_in` is `[B, 2·N²]`, `onehot` is
    /// `[B, N²·k]`; returns logits `[B·N², k]`.
    pub fn forward(&mut self, cond_in: &Mat<T>, onehot: &Mat<T>) -> Mat<T> {
        let mut cond_acts = Vec::with_capacity(COND_LAYERS);
        let mut c = cond_in.clone();
        for (dense, bn) in self.cond.iter_mut().zip(&mut self.cond_norms) {
            c = relu(bn.forward(&dense.forward(&c)));
            cond_acts.push(c.clone());
        }
        let mut gates = Vec::with_capacity(AR_LAYERS);
        let mut ar_acts = Vec::with_capacity(AR_LAYERS);
        let mut h = onehot.clone();
        for l in 0..AR_LAYERS {
            let g = self.gates[l].forward(&c);
            let mut pre = self.ar[l].forward(&h);
            for (p, t) in pre.data.iter_mut().zip(&self.gate_term(&g).data) {
                *p += *t;
            }
            h = relu(pre);
            gates.push(g);
            ar_acts.push(h.clone());
        }
        let logits = self.out.forward(&h);
        self.cache = Some(Cache { cond_acts, gates, ar_acts });
        self.reshape_logits(logits)
    }

    fn reshape_logits(&self, logits: Mat<T>) -> Mat<T> {
        let rows = logits.rows * self.shape.positions();
        Mat::from_vec(rows, self.shape.classes, logits.data)
    }

    pub fn backward(&mut self, dlogits: &Mat<T>) {
        let cache = self.cache.take().expect("backward before forward");
        let (h, p, k) = (self.shape.hidden, self.shape.positions(), self.shape.classes);
        let batch = dlogits.rows / p;
        let dlogits = Mat::from_vec(batch, p * k, dlogits.data.clone());

        let mut dh = self.out.backward(&dlogits, true).expect("out input grad");
        let mut dc = Mat::zeros(batch, h);
        for l in (0..AR_LAYERS).rev() {
            let dpre = relu_backward(&dh, &cache.ar_acts[l]);
            let g = &cache.gates[l];
            let mut dg = Mat::zeros(batch, 2 * h);
            for r in 0..batch {
                let (grow, drow) = (g.row(r), dpre.row(r));
                let out = dg.row_mut(r);
                for j in 0..h {
                    let s = sigmoid(grow[h + j]);
                    out[j] = drow[j] * s;
                    out[h + j] = drow[j] * grow[j] * s * (T::one() - s);
                }
            }
            let dcg = self.gates[l].backward(&dg, true).expect("gate input grad");
            for (a, b) in dc.data.iter_mut().zip(&dcg.data) {
                *a += *b;
            }
            match self.ar[l].backward(&dpre, l > 0) {
                Some(d) => dh = d,
                None => break,
            }
        }
        let mut d = dc;
        for l in (0..COND_LAYERS).rev() {
            d = relu_backward(&d, &cache.cond_acts[l]);
            d = self.cond_norms[l].backward(&d);
            match self.cond[l].backward(&d, l > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    /// Inference-mode conditioning pass.
    pub fn condition(&self, cond_in: &Mat<T>) -> Conditioning<T> {
        let mut c = cond_in.clone();
        for (dense, bn) in self.cond.iter().zip(&self.cond_norms) {
            c = relu(bn.infer(&dense.infer(&c)));
        }
        Conditioning { gate_terms: self.gates.iter().map(|g| self.gate_term(&g.infer(&c))).collect() }
    }

    /// Inference-mode AR pass given precomputed conditioning; `[B·N², k]`.
    pub fn infer_with(&self, cond: &Conditioning<T>, onehot: &Mat<T>) -> Mat<T> {
        let mut h = onehot.clone();
        for (layer, term) in self.ar.iter().zip(&cond.gate_terms) {
            let mut pre = layer.infer(&h);
            for (p, t) in pre.data.iter_mut().zip(&term.data) {
                *p += *t;
            }
            h = relu(pre);
        }
        self.reshape_logits(self.out.infer(&h))
    }

    pub fn infer(&self, cond_in: &Mat<T>, onehot: &Mat<T>) -> Mat<T> {
        self.infer_with(&self.condition(cond_in), onehot)
    }

    /// Greedy sequential decode: `N²` steps in raster order, feeding back the
    /// argmax class. `forced[b·N² + i] = Some(c)` pins a position's class
    /// instead of predicting it. Returns class indices `[B·N²]`.
    pub fn decode(&self, cond_in: &Mat<T>, forced: &[Option<usize>]) -> Vec<usize> {
        let (p, k) = (self.shape.positions(), self.shape.classes);
        let batch = cond_in.rows;
        assert_eq!(forced.len(), batch * p, "one forced entry per coefficient");
        let cond = self.condition(cond_in);
        let mut onehot = Mat::zeros(batch, p * k);
        let mut classes = vec![0usize; batch * p];
        for i in 0..p {
            let logits = self.infer_with(&cond, &onehot);
            for b in 0..batch {
                let idx = b * p + i;
                let class = forced[idx].unwrap_or_else(|| argmax(logits.row(idx)));
                classes[idx] = class;
                onehot.data[b * p * k + i * k + class] = T::one();
            }
        }
        classes
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for (dense, bn) in self.cond.iter_mut().zip(&mut self.cond_norms) {
            out.extend(dense.params_mut());
            out.extend(bn.params_mut());
        }
        for (ar, gate) in self.ar.iter_mut().zip(&mut self.gates) {
            out.extend(ar.params_mut());
            out.extend(gate.params_mut());
        }
        out.extend(self.out.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for (dense, bn) in self.cond.iter().zip(&self.cond_norms) {
            out.extend(dense.params());
            out.extend(bn.params());
        }
        for (ar, gate) in self.ar.iter().zip(&self.gates) {
            out.extend(ar.params());
            out.extend(gate.params());
        }
        out.extend(self.out.params());
        out
    }

    pub fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.cond_norms.iter_mut().collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One-hot rows `[B, N²·k]` from class indices `[B·N²]`.
pub fn one_hot<T: Real>(classes: &[usize], positions: usize, k: usize) -> Mat<T> {
    let batch = classes.len() / positions;
    let mut m = Mat::zeros(batch, positions * k);
    for (idx, &c) in classes.iter().enumerate() {
        m.data[idx * k + c] = T::one();
    }
    m
}

#[cfg(test)]
mod tests {
    use super::super::layers::gradcheck::*;
    use super::super::layers::softmax_cross_entropy;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(rng: &mut ChaCha8Rng, batch: usize, shape: ArmShape) -> (Mat<f64>, Vec<usize>) {
        let p = shape.positions();
        let cond = Mat::from_vec(batch, 2 * p, (0..batch * 2 * p).map(|_| rng.gen_range(-1.5..1.5)).collect());
        let classes = (0..batch * p).map(|_| rng.gen_range(0..shape.classes)).collect();
        (cond, classes)
    }

    #[test]
    fn default_parameter_counts() {
        let count = |side| Arm::<f32>::uninit(ArmShape::default_for(side, 2).unwrap()).unwrap().param_count();
        // Paper-reported sizes: 0.69M, 1.63M and 3.42M parameters.
        assert!((count(4) as f64 / 0.69e6 - 1.0).abs() < 0.01);
        assert!((count(8) as f64 / 1.63e6 - 1.0).abs() < 0.01);
        assert!((count(16) as f64 / 3.42e6 - 1.0).abs() < 0.01);
    }

    #[test]
    fn causality_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = ArmShape { side: 4, hidden: 48, classes: 2 };
        let net = Arm::<f32>::new(shape, &mut rng).unwrap();
        for _ in 0..5 {
            let (cond, classes) = random_inputs(&mut rng, 3, shape);
            let cond = cond.cast::<f32>();
            let base = net.infer(&cond, &one_hot(&classes, 16, 2));
            for j in 0..16 {
                let mut flipped = classes.clone();
                for b in 0..3 {
                    flipped[b * 16 + j] = 1 - flipped[b * 16 + j];
                }
                let out = net.infer(&cond, &one_hot(&flipped, 16, 2));
                for b in 0..3 {
                    for i in 0..=j {
                        let (r0, r1) = (base.row(b * 16 + i), out.row(b * 16 + i));
                        assert!(r0.iter().zip(r1).all(|(a, c)| a.to_bits() == c.to_bits()), "pos {i} saw change at {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn decode_agrees_with_teacher_forcing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = ArmShape { side: 4, hidden: 32, classes: 3 };
        let net = Arm::<f32>::new(shape, &mut rng).unwrap();
        let (cond, _) = random_inputs(&mut rng, 4, shape);
        let cond = cond.cast::<f32>();
        let decoded = net.decode(&cond, &vec![None; 64]);
        let forced = net.infer(&cond, &one_hot(&decoded, 16, 3));
        for (idx, &c) in decoded.iter().enumerate() {
            assert_eq!(argmax(forced.row(idx)), c);
        }
    }

    #[test]
    fn end_to_end_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (batch, side, hidden, classes) in [(3, 4, 8, 2), (4, 4, 16, 2), (3, 4, 5, 3), (5, 8, 8, 2), (3, 4, 20, 2)] {
            let shape = ArmShape { side, hidden, classes };
            let mut net = Arm::<f64>::new(shape, &mut rng).unwrap();
            let (cond, classes_in) = random_inputs(&mut rng, batch, shape);
            let onehot = one_hot::<f64>(&classes_in, shape.positions(), classes);
            let rows = batch * shape.positions();
            let weights: Vec<f64> = (0..rows).map(|_| rng.gen_range(0.0..2.0)).collect();

            let logits = net.forward(&cond, &onehot);
            let (_, dlogits) = softmax_cross_entropy(&logits, &classes_in, &weights);
            net.params_mut().into_iter().for_each(|p| p.zero_grad());
            net.backward(&dlogits);

            let probe = net.clone();
            for pi in 0..probe.params().len() {
                let analytic = net.params()[pi].grad.clone();
                let mut values = net.params()[pi].value.clone();
                let numeric = numeric_grad(&mut values, 1e-5, |v| {
                    let mut m = probe.clone();
                    m.params_mut()[pi].value.copy_from_slice(v);
                    let logits = m.forward(&cond, &onehot);
                    softmax_cross_entropy(&logits, &classes_in, &weights).0
                });
                // Masked weights have zero analytic gradient by construction;
                // compare only the free entries.
                let name = net.params()[pi].name.clone();
                let free: Vec<bool> = match name.as_str() {
                    "ar0.w" => shape.input_mask(),
                    n if n.starts_with("ar") && n.ends_with(".w") => shape.hidden_mask(),
                    "out.w" => shape.output_mask(),
                    _ => vec![true; analytic.len()],
                };
                let a: Vec<f64> = analytic.iter().zip(&free).filter(|(_, &f)| f).map(|(v, _)| *v).collect();
                let n: Vec<f64> = numeric.iter().zip(&free).filter(|(_, &f)| f).map(|(v, _)| *v).collect();
                let err = relative_error(&a, &n);
                assert!(err <= 1e-6, "{shape:?} param {name} rel err {err}");
            }
        }
    }
}
