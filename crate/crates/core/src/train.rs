//! Minibatch SGD with momentum over weights and gates.
//!
//! Every minibatch draws one mask per gate (a single Monte-Carlo sample of the
//! expected loss), backpropagates with the straight-through rule, then clips
//! the gates back into `[0, 1]`.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gates::GateMode;
use crate::network::{GradientSet, Network, Objective};
use crate::regularizers::Regularizer;
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Gates step with `learning_rate · gate_lr_multiplier`.
    pub gate_lr_multiplier: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// L2 coefficient on weights (Gaussian prior); gates are exempt.
    pub weight_decay: f64,
    pub regularizer: Regularizer,
    /// `Train` samples masks, `Heaviside` thresholds them.
    pub mask_mode: GateMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            gate_lr_multiplier: 1.0,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            weight_decay: 0.0,
            regularizer: Regularizer::default(),
            mask_mode: GateMode::Train,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.gate_lr_multiplier.is_nan() || self.gate_lr_multiplier < 0.0 {
            return Err(Error::Config("gate_lr_multiplier must be >= 0".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.mask_mode == GateMode::Eval {
            return Err(Error::Config("mask_mode must be train or heaviside".into()));
        }
        self.regularizer.validate()
    }
}

/// Momentum buffers, shaped like the network's parameters.
#[derive(Debug, Clone)]
pub struct Velocity {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    gates: Vec<Vec<f64>>,
}

impl Velocity {
    pub fn zeros(net: &Network) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Tensor::zeros(l.weight.shape())).collect(),
            biases: net.layers.iter().map(|l| Tensor::zeros(l.bias.shape())).collect(),
            gates: net.gate_sites().iter().map(|g| vec![0.0; g.len()]).collect(),
        }
    }
}

fn momentum_update(param: &mut [f64], grad: &[f64], vel: &mut [f64], lr: f64, momentum: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Classical momentum: `v ← μ·v + g`, `p ← p − lr·v`. Gates use the scaled
/// learning rate and are clipped to `[0, 1]` afterwards.
pub fn sgd_step(net: &mut Network, grads: &GradientSet, cfg: &TrainConfig, vel: &mut Velocity) {
    let (lr, mu) = (cfg.learning_rate, cfg.momentum);
    for (i, layer) in net.layers.iter_mut().enumerate() {
        momentum_update(
            layer.weight.data_mut(),
            grads.weights[i].data(),
            vel.weights[i].data_mut(),
            lr,
            mu,
        );
        momentum_update(
            layer.bias.data_mut(),
            grads.biases[i].data(),
            vel.biases[i].data_mut(),
            lr,
            mu,
        );
    }
    let gate_lr = lr * cfg.gate_lr_multiplier;
    for (site, (g, v)) in net
        .gate_sites_mut()
        .into_iter()
        .zip(grads.gates.iter().zip(vel.gates.iter_mut()))
    {
        if gate_lr != 0.0 {
            momentum_update(&mut site.k, g, v, gate_lr, mu);
        }
        site.k.iter_mut().for_each(|k| *k = k.clamp(0.0, 1.0));
        debug_assert!(site.k.iter().all(|k| (0.0..=1.0).contains(k)));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Mean sampled-mask task loss over the epoch's minibatches.
    pub train_loss: f64,
    /// Eval-mode error on the training set at epoch end.
    pub train_error: f64,
    pub test_error: f64,
    /// `(site, mean k)` per gated site.
    pub mean_gates: Vec<(String, f64)>,
    /// Unscaled prior over all gates at epoch end.
    pub penalty_value: f64,
    /// Sum of the per-minibatch scaled prior contributions during the epoch.
    pub minibatch_penalty_sum: f64,
}

/// Fraction of misclassified examples under Eval-mode rescaling.
/// Ties in the logits go to the lowest class index.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut wrong = 0usize;
    let n = ds.len();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let x = ds.images.slice_leading(start, end)?;
        let logits = net.predict(&x)?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks_exact(classes).zip(&ds.labels[start..end]) {
            if argmax(row) != label {
                wrong += 1;
            }
        }
        start = end;
    }
    Ok(wrong as f64 / n as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_compat(net: &Network, ds: &Dataset) -> Result<()> {
    let want: usize = net.spec().input.dims().iter().product();
    let got: usize = ds.example_shape().iter().product();
    if want != got {
        return Err(Error::Dimension(format!(
            "dataset {} has examples of shape {:?}, network expects {:?}",
            ds.name,
            ds.example_shape(),
            net.spec().input.dims()
        )));
    }
    if ds.num_classes > net.spec().num_classes() {
        return Err(Error::Dimension(format!(
            "dataset {} has {} classes, network outputs {}",
            ds.name,
            ds.num_classes,
            net.spec().num_classes()
        )));
    }
    Ok(())
}

pub fn train(net: &mut Network, train_set: &Dataset, test_set: &Dataset, cfg: &TrainConfig) -> Result<Vec<MetricsRow>> {
    train_with(net, train_set, test_set, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after each epoch's metrics are computed.
pub fn train_with(
    net: &mut Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Config("training and test sets must be non-empty".into()));
    }
    check_compat(net, train_set)?;
    check_compat(net, test_set)?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_rng.set_stream(1);

    let objective = Objective {
        regularizer: cfg.regularizer,
        dataset_size: train_set.len(),
        weight_decay: cfg.weight_decay,
    };
    let mut vel = Velocity::zeros(net);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut penalty_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.batch(chunk)?;
            let (_, trace) = net.forward(&x, cfg.mask_mode, Some(&mut mask_rng))?;
            let grads = net.backward(&trace, &y, &objective)?;
            loss_sum += grads.task_loss * chunk.len() as f64;
            penalty_sum += grads.penalty;
            sgd_step(net, &grads, cfg, &mut vel);
        }
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_error: evaluate(net, train_set)?,
            test_error: evaluate(net, test_set)?,
            mean_gates: net
                .gate_sites()
                .iter()
                .map(|g| (g.site.clone(), g.mean()))
                .collect(),
            penalty_value: net
                .gate_sites()
                .iter()
                .map(|g| cfg.regularizer.value(&g.k))
                .sum(),
            minibatch_penalty_sum: penalty_sum,
        };
        if !row.train_loss.is_finite() {
            return Err(Error::Numeric(format!("training diverged at epoch {epoch}")));
        }
        on_epoch(&row);
        history.push(row);
    }
    Ok(history)
}

fn header(rows: &[MetricsRow]) -> Vec<String> {
    let mut cols: Vec<String> = ["epoch", "train_loss", "train_error", "test_error"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if let Some(first) = rows.first() {
        cols.extend(first.mean_gates.iter().map(|(s, _)| format!("mean_gate_{s}")));
    }
    cols.push("penalty_value".into());
    cols
}

/// CSV with a header row; gate columns are `mean_gate_<site>`.
pub fn write_metrics_csv<W: Write>(writer: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(rows))?;
    for r in rows {
        let mut rec = vec![
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.train_error.to_string(),
            r.test_error.to_string(),
        ];
        rec.extend(r.mean_gates.iter().map(|(_, m)| m.to_string()));
        rec.push(r.penalty_value.to_string());
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}

pub fn format_metrics_header(row: &MetricsRow) -> String {
    let mut s = format!("{:>5} {:>11} {:>9} {:>9}", "epoch", "train_loss", "train_err", "test_err");
    for (site, _) in &row.mean_gates {
        s.push_str(&format!(" {:>10}", format!("k[{site}]")));
    }
    s.push_str(&format!(" {:>12}", "penalty"));
    s
}

pub fn format_metrics_row(row: &MetricsRow) -> String {
    let mut s = format!(
        "{:>5} {:>11.6} {:>9.4} {:>9.4}",
        row.epoch, row.train_loss, row.train_error, row.test_error
    );
    for (_, m) in &row.mean_gates {
        s.push_str(&format!(" {m:>10.4}"));
    }
    s.push_str(&format!(" {:>12.4}", row.penalty_value));
    s
}
