//! Fully-convolutional refiner: every coefficient's class logits in one pass.
//!
//! Input rows are block positions (`B·N·N` rows) with two standardized
//! channels, `|x|` and `|q_sq|`. Hidden layers are 3×3 convolution, batch
//! norm and ReLU at constant spatial size; the head is a 1×1 convolution to
//! `k` logits.

use rand::Rng;

use super::layers::{relu, relu_backward, BatchNorm, Conv3x3, Dense, Param};
use super::tensor::{Mat, Real};
use crate::error::{ensure, Result};

pub const INPUT_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FcnnShape {
    pub side: usize,
    pub depth: usize,
    pub width: usize,
    pub classes: usize,
}

impl FcnnShape {
    /// Default depth/width per block side: 3×256, 4×256 and 5×300 for
    /// 4×4, 8×8 and 16×16 blocks.
    pub fn default_for(side: usize, classes: usize) -> Result<Self> {
        let (depth, width) = match side {
            4 => (3, 256),
            8 => (4, 256),
            16 => (5, 300),
            _ => return Err(crate::Error::Unsupported(format!("no network for {side}x{side} blocks"))),
        };
        Ok(Self { side, depth, width, classes })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(matches!(self.side, 4 | 8 | 16), Unsupported, "no network for {0}x{0} blocks", self.side);
        ensure!(self.depth >= 1 && self.width >= 1, InvalidParam, "empty network");
        ensure!(self.classes >= 2, InvalidParam, "need at least two classes");
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Fcnn<T> {
    pub shape: FcnnShape,
    pub convs: Vec<Conv3x3<T>>,
    pub norms: Vec<BatchNorm<T>>,
    pub head: Dense<T>,
    acts: Vec<Mat<T>>,
}

impl<T: Real> Fcnn<T> {
    pub fn new(shape: FcnnShape, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::uninit(shape)?;
        for conv in &mut net.convs {
            conv.init(rng);
        }
        net.head.init(rng);
        Ok(net)
    }

    /// Zero-initialised network, to be filled from a weights file.
    pub fn uninit(shape: FcnnShape) -> Result<Self> {
        shape.validate()?;
        let convs = (0..shape.depth)
            .map(|l| {
                let inputs = if l == 0 { INPUT_CHANNELS } else { shape.width };
                Conv3x3::new(&format!("conv{l}"), shape.side, inputs, shape.width)
            })
            .collect();
        let norms = (0..shape.depth).map(|l| BatchNorm::new(&format!("bn{l}"), shape.width)).collect();
        let head = Dense::new("head", shape.width, shape.classes);
        Ok(Self { shape, convs, norms, head, acts: Vec::new() })
    }

    /// Training-mode forward; `input` is `[B·N·N, 2]`.
    pub fn forward(&mut self, input: &Mat<T>) -> Mat<T> {
        self.acts.clear();
        let mut h = input.clone();
        for (conv, bn) in self.convs.iter_mut().zip(&mut self.norms) {
            h = relu(bn.forward(&conv.forward(&h)));
            self.acts.push(h.clone());
        }
        self.head.forward(&h)
    }

    pub fn infer(&self, input: &Mat<T>) -> Mat<T> {
        let mut h = input.clone();
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            h = relu(bn.infer(&conv.infer(&h)));
        }
        self.head.infer(&h)
    }

    pub fn backward(&mut self, dlogits: &Mat<T>) {
        let mut d = self.head.backward(dlogits, true).expect("head input grad");
        for l in (0..self.convs.len()).rev() {
            d = relu_backward(&d, &self.acts[l]);
            d = self.norms[l].backward(&d);
            match self.convs[l].backward(&d, l > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for (conv, bn) in self.convs.iter_mut().zip(&mut self.norms) {
            out.extend(conv.params_mut());
            out.extend(bn.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            out.extend(conv.params());
            out.extend(bn.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.norms.iter_mut().collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::super::layers::gradcheck::*;
    use super::super::layers::softmax_cross_entropy;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_parameter_counts() {
        let count = |side| Fcnn::<f32>::uninit(FcnnShape::default_for(side, 2).unwrap()).unwrap().param_count();
        // Paper-reported sizes: 1.187M, 1.78M and 3.23M parameters.
        assert_eq!(count(4), 1_187_074);
        assert!((count(8) as f64 / 1.78e6 - 1.0).abs() < 0.01);
        assert!((count(16) as f64 / 3.23e6 - 1.0).abs() < 0.01);
        assert!(FcnnShape::default_for(32, 2).is_err());
    }

    #[test]
    fn output_shape_and_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Fcnn::<f32>::new(FcnnShape { side: 8, depth: 2, width: 8, classes: 3 }, &mut rng).unwrap();
        let x = Mat::from_vec(2 * 64, 2, (0..256).map(|i| (i as f32 * 0.1).sin()).collect());
        let logits = net.infer(&x);
        assert_eq!((logits.rows, logits.cols), (128, 3));
        let p = super::super::layers::softmax(&logits);
        for row in p.data.chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn end_to_end_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (batch, side, depth, width, classes) in [(2, 4, 1, 3, 2), (3, 4, 2, 4, 2), (2, 8, 2, 3, 3), (4, 4, 3, 2, 2), (1, 16, 1, 2, 2)] {
            let shape = FcnnShape { side, depth, width, classes };
            let mut net = Fcnn::<f64>::new(shape, &mut rng).unwrap();
            let rows = batch * side * side;
            let x = Mat::from_vec(rows, 2, (0..rows * 2).map(|_| rng.gen_range(-1.5..1.5)).collect());
            let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
            let weights: Vec<f64> = (0..rows).map(|_| rng.gen_range(0.0..2.0)).collect();

            let logits = net.forward(&x);
            let (_, dlogits) = softmax_cross_entropy(&logits, &targets, &weights);
            net.params_mut().into_iter().for_each(|p| p.zero_grad());
            net.backward(&dlogits);

            let probe = net.clone();
            let n_params = probe.params().len();
            for pi in 0..n_params {
                let analytic = net.params()[pi].grad.clone();
                let mut values = net.params()[pi].value.clone();
                let numeric = numeric_grad(&mut values, 1e-5, |v| {
                    let mut m = probe.clone();
                    m.params_mut()[pi].value.copy_from_slice(v);
                    let logits = m.forward(&x);
                    softmax_cross_entropy(&logits, &targets, &weights).0
                });
                let err = relative_error(&analytic, &numeric);
                assert!(err <= 1e-6, "param {} rel err {err}", net.params()[pi].name);
            }
        }
    }
}
