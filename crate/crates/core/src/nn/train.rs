//! Imitation training with Adam and validation-RD checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::arm::{one_hot, Arm, ArmShape};
use super::fcnn::{Fcnn, FcnnShape};
use super::layers::{softmax_cross_entropy, Param};
use super::model::{quantize_batch, Arch, Model, ModelMeta, Network};
use super::tensor::Mat;
use super::{compute_sensitivity_map, SensitivityMap, StandardizationStats};
use crate::codec::{quantize_with_offset, CoeffBlock, LevelBlock, QuantParams, DEADZONE_OFFSET};
use crate::dataset::Dataset;
use crate::error::{ensure, Result};
use crate::rate::EgSigRate;
use crate::search::rd_cost;

/// Records used to estimate the sensitivity map.
const SENSITIVITY_SAMPLES: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: Arch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of the `Σθ²` penalty.
    pub l2: f64,
    /// Stop after this many epochs without a better validation RD.
    pub patience: usize,
    pub seed: u64,
    /// Exclude coefficients with a zero SQ level from the loss and keep them
    /// at zero when quantizing.
    pub zero_mask: bool,
    pub sensitivity_map: bool,
    /// Optional per-class loss weights.
    pub class_weights: Option<Vec<f64>>,
    /// FCNN `(depth, width)`; defaults depend on the block size.
    pub fcnn_layers: Option<(usize, usize)>,
    pub arm_hidden: Option<usize>,
}

impl TrainConfig {
    pub fn new(arch: Arch) -> Self {
        Self {
            arch,
            epochs: 50,
            batch_size: 256,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            l2: 1e-6,
            patience: 10,
            seed: 0,
            zero_mask: true,
            sensitivity_map: false,
            class_weights: None,
            fcnn_layers: None,
            arm_hidden: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss; absent for the untrained epoch 0.
    pub train_loss: Option<f64>,
    pub val_accuracy: f64,
    /// Aggregate RD change of the network quantizer against deadzone SQ.
    pub val_rd_percent: f64,
    pub best_val_rd_percent: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Validation RD of the labels and of the network's SQ input, both
    /// against deadzone SQ.
    pub label_rd_percent: f64,
    pub input_rd_percent: f64,
    pub sensitivity: Option<SensitivityMap>,
}

impl TrainOutcome {
    /// Share of the deadzone-to-label RD gap closed by the best checkpoint.
    pub fn gap_closed(&self) -> f64 {
        let best = self.log.iter().map(|l| l.val_rd_percent).fold(f64::INFINITY, f64::min);
        if self.label_rd_percent < 0.0 {
            best / self.label_rd_percent
        } else {
            0.0
        }
    }
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(params: &[&mut Param<f32>]) -> Self {
        Self { m: params.iter().map(|p| vec![0.0; p.len()]).collect(), v: params.iter().map(|p| vec![0.0; p.len()]).collect(), t: 0 }
    }

    fn step(&mut self, params: Vec<&mut Param<f32>>, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps, decay) = (cfg.lr as f32, cfg.adam_eps as f32, 2.0 * cfg.l2 as f32);
        for (i, p) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j] + decay * p.value[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                p.value[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

/// Flattened network inputs, targets and loss weights for a dataset.
struct Prepared {
    inputs: Vec<f32>,
    targets: Vec<usize>,
    weights: Vec<f32>,
}

fn prepare(ds: &Dataset, stats: &StandardizationStats, cfg: &TrainConfig, map: &SensitivityMap) -> Prepared {
    let p = ds.header.n * ds.header.n;
    let classes = &ds.header.classes;
    let mut out = Prepared {
        inputs: Vec::with_capacity(ds.len() * 2 * p),
        targets: Vec::with_capacity(ds.len() * p),
        weights: Vec::with_capacity(ds.len() * p),
    };
    for rec in &ds.records {
        let q_mags: Vec<i32> = rec.q_sq.iter().map(|&v| i32::from(v.unsigned_abs())).collect();
        stats.standardize_into(rec.x.iter().map(|v| f64::from(v.abs())), &q_mags, &mut out.inputs);
        for (pos, c) in rec.labels(classes).into_iter().enumerate() {
            let mut w = map.weights[pos];
            if let Some(cw) = &cfg.class_weights {
                w *= cw[c];
            }
            if cfg.zero_mask && q_mags[pos] == 0 {
                w = 0.0;
            }
            out.targets.push(c);
            out.weights.push(w as f32);
        }
    }
    out
}

struct Validation {
    xs: Vec<CoeffBlock>,
    params: QuantParams,
    labels: Vec<usize>,
    deadzone_cost: f64,
}

impl Validation {
    fn new(ds: &Dataset) -> Result<Self> {
        let n = ds.header.n;
        let params = QuantParams::from_qp(ds.header.qp, ds.header.sq_offset)?;
        let xs: Vec<CoeffBlock> = ds.records.iter().map(|r| r.coeffs(n)).collect();
        let labels = ds.records.iter().flat_map(|r| r.labels(&ds.header.classes)).collect();
        let deadzone: Vec<LevelBlock> = xs.iter().map(|x| quantize_with_offset(x, DEADZONE_OFFSET)).collect();
        let deadzone_cost = total_cost(&xs, &deadzone, &params)?;
        ensure!(deadzone_cost > 0.0, Empty, "validation blocks have zero cost");
        Ok(Self { xs, params, labels, deadzone_cost })
    }

    fn rd_percent(&self, levels: &[LevelBlock]) -> Result<f64> {
        Ok(100.0 * (total_cost(&self.xs, levels, &self.params)? - self.deadzone_cost) / self.deadzone_cost)
    }

    /// `(accuracy %, RD %)` of a model's quantizer.
    fn score(&self, model: &Model, zero_mask: bool) -> Result<(f64, f64)> {
        let out = quantize_batch(model, &self.xs, zero_mask)?;
        let classes = &model.meta.classes;
        let mut hits = 0usize;
        for (b, (x, q)) in self.xs.iter().zip(&out).enumerate() {
            let q_sq = quantize_with_offset(x, model.meta.sq_offset);
            for (i, (&s, &l)) in q_sq.levels.iter().zip(&q.levels).enumerate() {
                hits += usize::from(classes.label(s, l) == self.labels[b * x.n * x.n + i]);
            }
        }
        Ok((100.0 * hits as f64 / self.labels.len() as f64, self.rd_percent(&out)?))
    }
}

fn total_cost(xs: &[CoeffBlock], levels: &[LevelBlock], params: &QuantParams) -> Result<f64> {
    let mut sum = 0.0;
    for (x, q) in xs.iter().zip(levels) {
        sum += rd_cost(x, q, params, &EgSigRate)?.cost;
    }
    Ok(sum)
}

fn build_network(cfg: &TrainConfig, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Network> {
    Ok(match cfg.arch {
        Arch::Fcnn => {
            let mut shape = FcnnShape::default_for(n, k)?;
            if let Some((depth, width)) = cfg.fcnn_layers {
                shape.depth = depth;
                shape.width = width;
            }
            Network::Fcnn(Fcnn::new(shape, rng)?)
        }
        Arch::Arm => {
            let mut shape = ArmShape::default_for(n, k)?;
            if let Some(h) = cfg.arm_hidden {
                shape.hidden = h;
            }
            Network::Arm(Arm::new(shape, rng)?)
        }
    })
}

/// One optimisation step on the given rows; returns the batch loss.
fn train_step(net: &mut Network, adam: &mut Adam, data: &Prepared, rows: &[usize], p: usize, k: usize, cfg: &TrainConfig) -> f64 {
    let mut inputs = Vec::with_capacity(rows.len() * 2 * p);
    let mut targets = Vec::with_capacity(rows.len() * p);
    let mut weights = Vec::with_capacity(rows.len() * p);
    for &r in rows {
        inputs.extend_from_slice(&data.inputs[r * 2 * p..(r + 1) * 2 * p]);
        targets.extend_from_slice(&data.targets[r * p..(r + 1) * p]);
        weights.extend_from_slice(&data.weights[r * p..(r + 1) * p]);
    }
    let b = rows.len();
    let loss = match net {
        Network::Fcnn(f) => {
            let logits = f.forward(&Mat::from_vec(b * p, 2, inputs));
            let (loss, grad) = softmax_cross_entropy(&logits, &targets, &weights);
            f.params_mut().into_iter().for_each(|q| q.zero_grad());
            f.backward(&grad);
            adam.step(f.params_mut(), cfg);
            loss
        }
        Network::Arm(a) => {
            let logits = a.forward(&Mat::from_vec(b, 2 * p, inputs), &one_hot(&targets, p, k));
            let (loss, grad) = softmax_cross_entropy(&logits, &targets, &weights);
            a.params_mut().into_iter().for_each(|q| q.zero_grad());
            a.backward(&grad);
            adam.step(a.params_mut(), cfg);
            loss
        }
    };
    f64::from(loss)
}

/// Trains one model on `train`, selecting the epoch with the lowest
/// validation RD (epoch 0 is the untrained network). `on_epoch` sees every
/// log entry as it is produced.
pub fn train(train: &Dataset, val: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let h = &train.header;
    ensure!(!train.is_empty(), Empty, "training set is empty");
    ensure!(!val.is_empty(), Empty, "validation set is empty");
    ensure!(
        val.header == *h,
        InvalidParam,
        "validation header (N {}, QP {}) does not match training (N {}, QP {})",
        val.header.n,
        val.header.qp,
        h.n,
        h.qp
    );
    ensure!(h.rate_model == EgSigRate::NAME, Unsupported, "rate model {:?}", h.rate_model);
    ensure!(cfg.batch_size >= 1 && cfg.lr > 0.0, InvalidParam, "batch size and learning rate must be positive");
    let (n, k) = (h.n, h.classes.k());
    if let Some(cw) = &cfg.class_weights {
        ensure!(cw.len() == k && cw.iter().all(|w| *w >= 0.0), InvalidParam, "need {k} non-negative class weights");
    }
    let p = n * n;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stats = StandardizationStats::fit(n, train.records.iter().map(|r| (r.x.as_slice(), r.q_sq.as_slice())))?;
    let sensitivity = if cfg.sensitivity_map {
        let params = QuantParams::from_qp(h.qp, h.sq_offset)?;
        let samples: Vec<_> = train.records.iter().take(SENSITIVITY_SAMPLES).map(|r| (r.coeffs(n), r.ref_levels(n))).collect();
        Some(compute_sensitivity_map(&samples, &params, &EgSigRate)?)
    } else {
        None
    };
    let map = sensitivity.clone().unwrap_or_else(|| SensitivityMap::uniform(n));
    let data = prepare(train, &stats, cfg, &map);
    let validation = Validation::new(val)?;
    let label_rd_percent = validation.rd_percent(&val.records.iter().map(|r| r.ref_levels(n)).collect::<Vec<_>>())?;
    let input_rd_percent = validation.rd_percent(&val.records.iter().map(|r| r.sq_levels(n)).collect::<Vec<_>>())?;

    let meta = ModelMeta { arch: cfg.arch, n, qp: h.qp, classes: h.classes.clone(), sq_offset: h.sq_offset, rate_model: h.rate_model.clone() };
    let mut model = Model { meta, stats, net: build_network(cfg, n, k, &mut rng)? };
    let mut adam = match &mut model.net {
        Network::Fcnn(f) => Adam::new(&f.params_mut()),
        Network::Arm(a) => Adam::new(&a.params_mut()),
    };

    let (acc0, rd0) = validation.score(&model, cfg.zero_mask)?;
    let mut best = (rd0, 0usize, model.net.clone());
    let mut log = vec![EpochLog { epoch: 0, train_loss: None, val_accuracy: acc0, val_rd_percent: rd0, best_val_rd_percent: rd0, improved: true }];
    on_epoch(&log[0]);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for rows in order.chunks(cfg.batch_size) {
            loss_sum += train_step(&mut model.net, &mut adam, &data, rows, p, k, cfg);
            batches += 1;
        }
        let (acc, rd) = validation.score(&model, cfg.zero_mask)?;
        let improved = rd < best.0;
        if improved {
            best = (rd, epoch, model.net.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        let entry = EpochLog {
            epoch,
            train_loss: Some(loss_sum / batches as f64),
            val_accuracy: acc,
            val_rd_percent: rd,
            best_val_rd_percent: best.0,
            improved,
        };
        on_epoch(&entry);
        log.push(entry);
        if stale >= cfg.patience {
            break;
        }
    }
    model.net = best.2;
    Ok(TrainOutcome { model, log, best_epoch: best.1, label_rd_percent, input_rd_percent, sensitivity })
}
