use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_subnet, QuantSpec, Stage, Supernet, BN_MOMENTUM};
use crate::audio::AugmentSpec;
use crate::data::{evaluate, LabeledSet};
use crate::error::{Error, Result};
use crate::tensor::{BnMode, Sgd, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    /// Epochs for the full, elastic kernel, elastic depth and elastic width
    /// stages.
    pub epochs: [usize; 4],
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub subnets_per_step: usize,
    pub kd_lambda: f32,
    pub kd_temperature: f32,
    pub augment: Option<AugmentSpec>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: [30, 30, 30, 30],
            lr: 0.02,
            momentum: 0.9,
            batch_size: 32,
            subnets_per_step: 1,
            kd_lambda: 1.0,
            kd_temperature: 1.0,
            augment: None,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("need lr > 0 and momentum in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.subnets_per_step == 0 {
            return Err(Error::Config(
                "batch size and subnets per step must be positive".into(),
            ));
        }
        if !(self.kd_lambda >= 0.0) || !(self.kd_temperature > 0.0) {
            return Err(Error::Config(
                "need kd_lambda >= 0 and kd_temperature > 0".into(),
            ));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean training loss over the epoch's steps.
    pub loss: f32,
    /// Eval-mode accuracy of the largest subnet on the validation set, with
    /// batch norm recalibrated once the elastic stages start.
    pub val_accuracy: Option<f64>,
}

/// `CE_w(student, labels) + λ·T²·KL(softmax(teacher/T) ‖ softmax(student/T))`;
/// without teacher logits (or with `λ = 0`) only the weighted cross entropy.
pub fn distill_loss(
    tape: &mut Tape,
    student: Var,
    teacher_logits: Option<&[f32]>,
    labels: &[usize],
    class_weights: &[f32],
    lambda: f32,
    temperature: f32,
) -> Result<Var> {
    let ce = tape.weighted_cross_entropy(student, labels, class_weights)?;
    match teacher_logits {
        Some(t) if lambda > 0.0 => {
            let kl = tape.kl_distill(student, t, temperature)?;
            let kl = tape.scale(kl, lambda * temperature * temperature);
            tape.add(ce, kl)
        }
        _ => Ok(ce),
    }
}

fn stage_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Progressive shrinking from the supernet's current stage onwards. Stages
/// with zero epochs are skipped. The teacher snapshot is taken when the first
/// elastic stage starts, and channels are sorted when the elastic width stage
/// starts. `on_epoch` sees each log entry as it is produced.
pub fn train_supernet(
    sn: &mut Supernet,
    train: &LabeledSet,
    val: Option<&LabeledSet>,
    class_weights: &[f32],
    schedule: &TrainSchedule,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if class_weights.len() != sn.config.n_classes {
        return Err(Error::shape("class weight count does not match classes"));
    }
    let (channels, steps) = (sn.config.input_channels, sn.config.input_len);
    let mut sgd = Sgd::new(schedule.lr, schedule.momentum);
    let mut logs = Vec::new();
    let mut global_epoch = 0usize;
    let start = sn.stage;
    let mut width_sorted = sn.stage == Stage::ElasticWidth;
    for stage in Stage::ALL.into_iter().filter(|&s| s >= start) {
        let n_epochs = schedule.epochs[stage as usize];
        if n_epochs == 0 {
            continue;
        }
        if stage > Stage::Full && sn.teacher.is_none() {
            sn.teacher = Some(sn.net.clone());
        }
        if stage == Stage::ElasticWidth && !width_sorted {
            sn.sort_channels()?;
            width_sorted = true;
        }
        sn.stage = stage;
        let use_teacher = stage > Stage::Full && schedule.kd_lambda > 0.0;
        // without augmentation the teacher sees the same inputs every epoch
        let cached_teacher = if use_teacher && schedule.augment.is_none() {
            Some(teacher_logits(sn, train, schedule.batch_size)?)
        } else {
            None
        };
        let k = sn.config.n_classes;
        // running statistics are shared by every sampled subnet, so the
        // largest one gets its own before validation
        let calib_idx =
            crate::search::fixed_subset(train.len(), train.len().min(256), seed ^ 0xBA7C);
        let calibration = calib_idx
            .chunks(64)
            .map(|c| train.batch(c, channels, steps, None).map(|(x, _)| x))
            .collect::<Result<Vec<_>>>()?;
        for _ in 0..n_epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, global_epoch));
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0f64;
            let mut steps_done = 0usize;
            for chunk in order.chunks(schedule.batch_size) {
                let aug = schedule.augment.as_ref().map(|a| (a, global_epoch as u64));
                let (x, labels) = train.batch(chunk, channels, steps, aug)?;
                let teacher: Option<Vec<f32>> = if !use_teacher {
                    None
                } else if let Some(cache) = &cached_teacher {
                    Some(
                        chunk
                            .iter()
                            .flat_map(|&i| cache[i * k..(i + 1) * k].iter().copied())
                            .collect(),
                    )
                } else {
                    let t = sn.teacher.as_ref().expect("teacher set above");
                    Some(t.predict(&x, &QuantSpec::default())?.into_data())
                };
                let share = 1.0 / schedule.subnets_per_step as f32;
                let mut step_loss = 0.0f32;
                for _ in 0..schedule.subnets_per_step {
                    let spec = sample_subnet(&sn.config, stage, &mut rng);
                    let mut tape = Tape::new();
                    let xv = tape.constant(x.clone());
                    let out = sn.masked_forward(&mut tape, xv, &spec, BnMode::Train)?;
                    let loss = distill_loss(
                        &mut tape,
                        out.logits,
                        teacher.as_deref(),
                        &labels,
                        class_weights,
                        schedule.kd_lambda,
                        schedule.kd_temperature,
                    )?;
                    let lv = tape.data(loss)[0];
                    if !lv.is_finite() {
                        return Err(Error::Divergence {
                            epoch: global_epoch,
                            step: steps_done,
                            loss: lv,
                        });
                    }
                    step_loss += lv * share;
                    tape.backward(loss)?;
                    sn.net.collect_grads(&tape, &out.param_vars, share)?;
                    sn.net
                        .update_running_stats(&spec, &out.bn_stats, BN_MOMENTUM);
                }
                sgd.step(&mut sn.net.params_mut())?;
                sn.net.enable_grads();
                loss_sum += step_loss as f64;
                steps_done += 1;
            }
            let val_accuracy = match val {
                Some(v) if !v.is_empty() => {
                    let mut net = sn.extract_subnet(&sn.config.max_spec())?;
                    if stage > Stage::Full {
                        net.recalibrate_bn(&calibration)?;
                    }
                    Some(evaluate(&net, v, &QuantSpec::default(), 64)?.accuracy)
                }
                _ => None,
            };
            let log = EpochLog {
                epoch: global_epoch,
                stage,
                loss: (loss_sum / steps_done as f64) as f32,
                val_accuracy,
            };
            log::info!(
                "epoch {} [{}] loss {:.4}{}",
                log.epoch,
                log.stage,
                log.loss,
                log.val_accuracy
                    .map(|a| format!(" val {a:.4}"))
                    .unwrap_or_default()
            );
            on_epoch(&log);
            logs.push(log);
            global_epoch += 1;
        }
    }
    Ok(logs)
}

fn teacher_logits(sn: &Supernet, data: &LabeledSet, batch: usize) -> Result<Vec<f32>> {
    let teacher = sn
        .teacher
        .as_ref()
        .ok_or_else(|| Error::invalid("no teacher snapshot"))?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len() * sn.config.n_classes);
    for chunk in all.chunks(batch) {
        let (x, _) = data.batch(chunk, sn.config.input_channels, sn.config.input_len, None)?;
        out.extend(teacher.predict(&x, &QuantSpec::default())?.into_data());
    }
    Ok(out)
}
