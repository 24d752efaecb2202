use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{choose_scale_for_max, fold_network};
use crate::audio::AugmentSpec;
use crate::data::{evaluate, LabeledSet};
use crate::error::{Error, Result};
use crate::supernet::{Network, QuantSpec, BN_MOMENTUM};
use crate::tensor::{Adam, BnMode, Tape};

/// Adam with step halvings of the learning rate; at `qat_start` batch norm is
/// folded and the quantizers switch on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QatSchedule {
    pub epochs: usize,
    pub qat_start: usize,
    pub lr: f32,
    pub halve_start: usize,
    pub halve_every: usize,
    pub halvings: usize,
    pub batch_size: usize,
    pub augment: Option<AugmentSpec>,
}

impl Default for QatSchedule {
    fn default() -> Self {
        QatSchedule {
            epochs: 200,
            qat_start: 150,
            lr: 0.001,
            halve_start: 100,
            halve_every: 20,
            halvings: 5,
            batch_size: 32,
            augment: None,
        }
    }
}

impl QatSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.qat_start >= self.epochs {
            return Err(Error::Config(format!(
                "qat_start {} must be below the epoch count {}",
                self.qat_start, self.epochs
            )));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "need lr > 0 and a positive batch size".into(),
            ));
        }
        if self.halvings > 0 && self.halve_every == 0 {
            return Err(Error::Config("halve_every must be positive".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    /// Halvings applied by `epoch`: the first at `halve_start`, then one every
    /// `halve_every` epochs until `halvings` is reached.
    pub fn halvings_at(&self, epoch: usize) -> usize {
        if self.halvings == 0 || epoch < self.halve_start {
            return 0;
        }
        ((epoch - self.halve_start) / self.halve_every + 1).min(self.halvings)
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.lr * 0.5f32.powi(self.halvings_at(epoch) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QatLog {
    pub epoch: usize,
    pub lr: f32,
    /// BN folded and fake quantizers active during this epoch.
    pub quantized: bool,
    pub loss: f32,
    pub val_accuracy: Option<f64>,
}

/// Trained network: BN folded and activation exponents frozen once the
/// quantizers have been switched on.
#[derive(Clone, Debug, PartialEq)]
pub struct QatOutcome {
    pub net: Network,
    pub act_exponents: Option<Vec<i32>>,
    pub logs: Vec<QatLog>,
}

impl QatOutcome {
    pub fn is_quantized(&self) -> bool {
        !self.net.has_bn() && self.act_exponents.is_some()
    }

    /// Fake-quantized forward settings of the trained network.
    pub fn quant_spec(&self) -> QuantSpec {
        QuantSpec {
            weights: self.is_quantized(),
            act_exponents: self.act_exponents.clone(),
        }
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Quantization-aware training of an extracted subnet. Activation exponents
/// follow the running max of each quantizer site over the first quantized
/// epoch and are frozen afterwards.
pub fn qat_train(
    net: &Network,
    train: &LabeledSet,
    val: Option<&LabeledSet>,
    class_weights: &[f32],
    schedule: &QatSchedule,
    seed: u64,
    mut on_epoch: impl FnMut(&QatLog),
) -> Result<QatOutcome> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if class_weights.len() != net.n_classes() {
        return Err(Error::shape("class weight count does not match classes"));
    }
    let channels = net.input_channels();
    let steps = train.windows[0].len() / channels;
    let mut net = net.clone();
    net.enable_grads();
    let spec = net.own_spec();
    let mut adam = Adam::new(schedule.lr);
    let mut act_exponents: Option<Vec<i32>> = None;
    let mut running_max: Vec<f32> = Vec::new();
    let mut logs = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let quantized = epoch >= schedule.qat_start;
        let calibrating = epoch == schedule.qat_start;
        if calibrating {
            net = fold_network(&net)?;
            // the parameter list changed, so the moment estimates restart
            adam = Adam::new(schedule.lr);
            log::info!("epoch {epoch}: batch norm folded, quantizers on");
        }
        adam.lr = schedule.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut n_steps = 0usize;
        for chunk in order.chunks(schedule.batch_size) {
            let aug = schedule.augment.as_ref().map(|a| (a, epoch as u64));
            let (x, labels) = train.batch(chunk, channels, steps, aug)?;
            let quant = if !quantized {
                QuantSpec::default()
            } else if calibrating {
                let probe = QuantSpec {
                    weights: true,
                    act_exponents: None,
                };
                let mut tape = Tape::inference();
                let xv = tape.constant(x.clone());
                let out = net.forward(&mut tape, xv, &spec, BnMode::Eval, &probe)?;
                if running_max.is_empty() {
                    running_max = out.act_max;
                } else {
                    running_max
                        .iter_mut()
                        .zip(&out.act_max)
                        .for_each(|(m, &v)| *m = m.max(v));
                }
                let exps = running_max
                    .iter()
                    .map(|&m| choose_scale_for_max(m).exponent)
                    .collect();
                QuantSpec {
                    weights: true,
                    act_exponents: Some(exps),
                }
            } else {
                QuantSpec {
                    weights: true,
                    act_exponents: act_exponents.clone(),
                }
            };
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let out = net.forward(&mut tape, xv, &spec, BnMode::Train, &quant)?;
            let loss = tape.weighted_cross_entropy(out.logits, &labels, class_weights)?;
            let lv = tape.data(loss)[0];
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: n_steps,
                    loss: lv,
                });
            }
            tape.backward(loss)?;
            net.collect_grads(&tape, &out.param_vars, 1.0)?;
            net.update_running_stats(&spec, &out.bn_stats, BN_MOMENTUM);
            adam.step(&mut net.params_mut())?;
            net.enable_grads();
            if calibrating {
                act_exponents = quant.act_exponents;
            }
            loss_sum += lv as f64;
            n_steps += 1;
        }
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => {
                let q = QuantSpec {
                    weights: quantized,
                    act_exponents: act_exponents.clone(),
                };
                Some(evaluate(&net, v, &q, 64)?.accuracy)
            }
            _ => None,
        };
        let log = QatLog {
            epoch,
            lr: adam.lr,
            quantized,
            loss: (loss_sum / n_steps as f64) as f32,
            val_accuracy,
        };
        log::info!(
            "qat epoch {} lr {:e} quantized {} loss {:.4}{}",
            log.epoch,
            log.lr,
            log.quantized,
            log.loss,
            log.val_accuracy
                .map(|a| format!(" val {a:.4}"))
                .unwrap_or_default()
        );
        on_epoch(&log);
        logs.push(log);
    }
    Ok(QatOutcome {
        net,
        act_exponents,
        logs,
    })
}
