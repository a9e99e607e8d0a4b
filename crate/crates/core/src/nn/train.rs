use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::random::seeded;

use super::classifier::{argmax_rows, softmax_cross_entropy};
use super::network::{LayerGrads, LayerKind, Network};

/// Batch size used when only forward passes are needed.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Ceiling on the global gradient norm over trainable parameters.
    pub grad_clip_norm: Option<f64>,
    /// Keep layers produced by a CP rewrite fixed.
    pub freeze_inserted: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 32,
            grad_clip_norm: None,
            freeze_inserted: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for fine-tuning a rewritten network: a lower rate and
    /// gradient clipping at norm 5.
    pub fn fine_tune() -> Self {
        Self {
            learning_rate: 0.002,
            epochs: 3,
            grad_clip_norm: Some(5.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and ≥ 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be ≥ 1"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid("clip norm must be positive"));
            }
        }
        Ok(())
    }
}

/// Loss and accuracy over the whole training set after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

/// Momentum SGD on softmax cross-entropy: `v ← μv − η·g`, `w ← w + v`.
///
/// Batches are drawn from a per-epoch shuffle seeded by `cfg.seed`. Frozen
/// layers (and inserted ones under `freeze_inserted`) are never written.
/// A zero learning rate is allowed and leaves every weight unchanged.
pub fn train(
    net: &Network,
    data: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochRecord>)> {
    cfg.validate()?;
    check_data(net, data)?;
    if let Some(e) = eval {
        check_data(net, e)?;
    }
    let mut net = net.clone();
    let frozen: Vec<bool> = net.layers().iter().map(|l| l.is_frozen(cfg.freeze_inserted)).collect();
    let mut velocity: Vec<LayerGrads> = net
        .layers()
        .iter()
        .map(|l| match &l.kind {
            LayerKind::Conv(c) => LayerGrads::Conv {
                kernel: crate::DenseTensor::zeros(c.kernel().shape()).expect("valid shape"),
                bias: c.bias().map(|b| vec![0.0; b.len()]),
            },
            LayerKind::Classifier(c) => LayerGrads::Classifier {
                weights: crate::DenseTensor::zeros(c.weights().shape()).expect("valid shape"),
                bias: vec![0.0; c.classes()],
            },
            LayerKind::Maxout(_) => LayerGrads::None,
        })
        .collect();

    let mut rng = seeded(cfg.seed, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch_idx, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.batch(idx);
            let cache = net.forward_cached(&x, Exec::default())?;
            let (loss, grad_logits) = softmax_cross_entropy(cache.logits(), &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let (mut grads, _) = net.backward(&cache, &grad_logits, Exec::default())?;
            for (g, &f) in grads.iter_mut().zip(&frozen) {
                if f {
                    *g = LayerGrads::None;
                }
            }
            if let Some(limit) = cfg.grad_clip_norm {
                let norm = grads.iter().map(LayerGrads::squared_norm).sum::<f64>().sqrt();
                if norm > limit {
                    let c = limit / norm;
                    grads.iter_mut().for_each(|g| g.scale(c));
                }
            }
            apply_update(&mut net, &mut velocity, &grads, cfg);
            if !net_is_finite(&net) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
        }
        let (loss, train_acc) = loss_and_accuracy(&net, data)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
            });
        }
        let eval_acc = eval.map(|e| evaluate(&net, e)).transpose()?;
        history.push(EpochRecord {
            epoch: epoch + 1,
            loss,
            train_acc,
            eval_acc,
        });
    }
    Ok((net, history))
}

fn apply_update(net: &mut Network, velocity: &mut [LayerGrads], grads: &[LayerGrads], cfg: &TrainConfig) {
    let (lr, mu) = (cfg.learning_rate, cfg.momentum);
    let step = |w: &mut [f64], v: &mut [f64], g: &[f64]| {
        for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = mu * *v - lr * g;
            *w += *v;
        }
    };
    for ((layer, vel), g) in net.layers_mut().iter_mut().zip(velocity).zip(grads) {
        match (&mut layer.kind, vel, g) {
            (
                LayerKind::Conv(c),
                LayerGrads::Conv { kernel: vk, bias: vb },
                LayerGrads::Conv { kernel: gk, bias: gb },
            ) => {
                step(c.kernel_mut().data_mut(), vk.data_mut(), gk.data());
                if let (Some(w), Some(v), Some(g)) = (c.bias_mut(), vb.as_mut(), gb.as_ref()) {
                    step(w, v, g);
                }
            }
            (
                LayerKind::Classifier(c),
                LayerGrads::Classifier { weights: vw, bias: vb },
                LayerGrads::Classifier { weights: gw, bias: gb },
            ) => {
                step(c.weights_mut().data_mut(), vw.data_mut(), gw.data());
                step(c.bias_mut(), vb, gb);
            }
            _ => {}
        }
    }
}

fn net_is_finite(net: &Network) -> bool {
    net.layers().iter().all(|l| match &l.kind {
        LayerKind::Conv(c) => c.kernel().is_finite() && c.bias().is_none_or(|b| b.iter().all(|v| v.is_finite())),
        LayerKind::Classifier(c) => c.weights().is_finite() && c.bias().iter().all(|v| v.is_finite()),
        LayerKind::Maxout(_) => true,
    })
}

fn check_data(net: &Network, data: &LabeledDataset) -> Result<()> {
    if data.image_shape() != net.input_shape() {
        return Err(Error::invalid(format!(
            "dataset images are {:?}, network expects {:?}",
            data.image_shape(),
            net.input_shape()
        )));
    }
    if data.num_classes() > net.num_classes() {
        return Err(Error::invalid(format!(
            "dataset has {} classes, network only {}",
            data.num_classes(),
            net.num_classes()
        )));
    }
    Ok(())
}

/// Predicted class of every sample; ties go to the lowest class index.
pub fn predict(net: &Network, data: &LabeledDataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk);
        out.extend(argmax_rows(&net.forward(&x, Exec::default())?));
    }
    Ok(out)
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate(net: &Network, data: &LabeledDataset) -> Result<f64> {
    check_data(net, data)?;
    let pred = predict(net, data)?;
    let correct = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Mean loss and accuracy over the whole set, summed in sample order.
pub fn loss_and_accuracy(net: &Network, data: &LabeledDataset) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0);
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let logits = net.forward(&x, Exec::default())?;
        loss += softmax_cross_entropy(&logits, &y)?.0 * chunk.len() as f64;
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}
