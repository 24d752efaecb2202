//! Conv → BN → ReLU units, pooling between units, average pool and a linear
//! head. The same forward serves the elastic supernet (through tape slices of
//! the shared tensors) and standalone extracted or quantized networks.

use std::ops::Range;

use rand::Rng;

use super::spec::{LayerChoice, SubnetSpec};
use crate::error::{Error, Result};
use crate::quant::{choose_scale, BIAS_QMAX, BIAS_QMIN, QMAX, QMIN};
use crate::tensor::{BnMode, BnStats, Tape, Tensor, Var};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Conv1d with optional batch norm, followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[C_out, C_in, K]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: Option<BatchNorm>,
}

impl ConvLayer {
    /// PyTorch-style uniform init with bound `1/sqrt(C_in·K)`.
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, kernel: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f32).sqrt();
        ConvLayer {
            weight: Tensor::uniform(&[c_out, c_in, kernel], bound, rng).with_grad(),
            bias: Tensor::uniform(&[c_out], bound, rng).with_grad(),
            bn: Some(BatchNorm::new(c_out)),
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[O, F]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(features: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (features as f32).sqrt();
        Linear {
            weight: Tensor::uniform(&[outputs, features], bound, rng).with_grad(),
            bias: Tensor::uniform(&[outputs], bound, rng).with_grad(),
        }
    }
}

/// Simulated 8-bit quantization during forward.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuantSpec {
    /// Fake-quantize weights (per-tensor power-of-two scale) and biases (at
    /// the weight scale, 32-bit range).
    pub weights: bool,
    /// Power-of-two exponents of the activation quantizers: the input, then
    /// the output of every active layer. `None` leaves activations in float.
    pub act_exponents: Option<Vec<i32>>,
}

/// Result of one forward pass.
pub struct ForwardOut {
    pub logits: Var,
    /// Train-mode batch statistics, one entry per active layer in order.
    pub bn_stats: Vec<Option<BnStats>>,
    /// Largest absolute activation seen at every quantizer site.
    pub act_max: Vec<f32>,
    /// Tape leaves for [`Network::params`] order; `None` for unused tensors.
    pub param_vars: Vec<Option<Var>>,
}

/// Plain layer stack. For the supernet this holds the shared maximal
/// tensors; extracted networks hold exactly the active slices.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub units: Vec<Vec<ConvLayer>>,
    pub head: Linear,
}

fn kernel_offset(stored: usize, active: usize) -> Result<usize> {
    if active > stored || !(stored - active).is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "kernel {active} cannot be center-sliced from {stored}"
        )));
    }
    Ok((stored - active) / 2)
}

impl Network {
    /// The spec that uses every stored layer at its stored size.
    pub fn own_spec(&self) -> SubnetSpec {
        SubnetSpec {
            units: self
                .units
                .iter()
                .map(|u| {
                    u.iter()
                        .map(|l| LayerChoice {
                            kernel: l.kernel(),
                            width: l.c_out(),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.units[0][0].c_in()
    }

    pub fn n_classes(&self) -> usize {
        self.head.weight.shape()[0]
    }

    pub fn has_bn(&self) -> bool {
        self.units.iter().flatten().any(|l| l.bn.is_some())
    }

    /// All trainable tensors: per layer weight, bias, then gamma and beta
    /// when present; finally the head weight and bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self.units.iter().flatten() {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Some(bn) = &l.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.units.iter_mut().flatten() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Number of stored trainable values.
    pub fn param_len(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_spec(&self, spec: &SubnetSpec) -> Result<()> {
        if spec.units.len() != self.units.len() {
            return Err(Error::invalid(format!(
                "spec has {} units, network has {}",
                spec.units.len(),
                self.units.len()
            )));
        }
        for (u, (choices, layers)) in spec.units.iter().zip(&self.units).enumerate() {
            if choices.is_empty() || choices.len() > layers.len() {
                return Err(Error::invalid(format!(
                    "unit {u} depth {} outside 1..={}",
                    choices.len(),
                    layers.len()
                )));
            }
            for (c, l) in choices.iter().zip(layers) {
                kernel_offset(l.kernel(), c.kernel)?;
                if c.width == 0 || c.width > l.c_out() {
                    return Err(Error::invalid(format!(
                        "width {} outside 1..={}",
                        c.width,
                        l.c_out()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Forward of the subnet `spec` on `x` (`[N, C, L]`).
    ///
    /// Layers use the first `width` output channels, the input channels
    /// produced by the previous active layer, and the centered `kernel` taps.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        spec: &SubnetSpec,
        mode: BnMode,
        quant: &QuantSpec,
    ) -> Result<ForwardOut> {
        self.check_spec(spec)?;
        let n_params = self.params().len();
        let mut param_vars: Vec<Option<Var>> = vec![None; n_params];
        let mut bn_stats = Vec::new();
        let mut act_max = Vec::new();
        let mut site = 0usize;
        let act_quant =
            |tape: &mut Tape, h: Var, site: usize, act_max: &mut Vec<f32>| -> Result<Var> {
                act_max.push(tape.value(h).max_abs());
                match &quant.act_exponents {
                    Some(exps) => {
                        let e = *exps.get(site).ok_or_else(|| {
                            Error::invalid("too few activation quantizer exponents")
                        })?;
                        tape.fake_quantize(h, exp2(-e), QMIN, QMAX)
                    }
                    None => Ok(h),
                }
            };

        let mut h = act_quant(tape, x, site, &mut act_max)?;
        site += 1;
        let mut c_prev = tape.shape(h)[1];
        if c_prev != self.input_channels() {
            return Err(Error::shape(format!(
                "input has {c_prev} channels, network expects {}",
                self.input_channels()
            )));
        }
        let mut p_idx = 0usize;
        let n_units = self.units.len();
        for (u, (choices, layers)) in spec.units.iter().zip(&self.units).enumerate() {
            for (j, layer) in layers.iter().enumerate() {
                let per_layer = if layer.bn.is_some() { 4 } else { 2 };
                let Some(choice) = choices.get(j) else {
                    p_idx += per_layer;
                    continue;
                };
                let off = kernel_offset(layer.kernel(), choice.kernel)?;
                let w_out = choice.width;
                let wv = tape.leaf(&layer.weight);
                let bv = tape.leaf(&layer.bias);
                param_vars[p_idx] = Some(wv);
                param_vars[p_idx + 1] = Some(bv);
                let mut ws = tape.slice(wv, &[0..w_out, 0..c_prev, off..off + choice.kernel])?;
                let mut bs = tape.slice(bv, &[0..w_out])?;
                if quant.weights {
                    let e = choose_scale(tape.data(ws)).exponent;
                    ws = tape.fake_quantize(ws, exp2(-e), QMIN, QMAX)?;
                    bs = tape.fake_quantize(bs, exp2(-e), BIAS_QMIN, BIAS_QMAX)?;
                }
                h = tape.conv1d(h, ws, bs, (choice.kernel - 1) / 2)?;
                if let Some(bn) = &layer.bn {
                    let gv = tape.leaf(&bn.gamma);
                    let betav = tape.leaf(&bn.beta);
                    param_vars[p_idx + 2] = Some(gv);
                    param_vars[p_idx + 3] = Some(betav);
                    let gs = tape.slice(gv, &[0..w_out])?;
                    let bts = tape.slice(betav, &[0..w_out])?;
                    let running = (&bn.running_mean[..w_out], &bn.running_var[..w_out]);
                    let (y, stats) = tape.batchnorm1d(h, gs, bts, mode, Some(running), BN_EPS)?;
                    h = y;
                    bn_stats.push(stats);
                } else {
                    bn_stats.push(None);
                }
                h = tape.relu(h);
                h = act_quant(tape, h, site, &mut act_max)?;
                site += 1;
                c_prev = w_out;
                p_idx += per_layer;
            }
            h = if u + 1 < n_units {
                tape.maxpool1d(h, 2, 2)?
            } else {
                tape.global_avgpool1d(h)?
            };
        }
        let hw = tape.leaf(&self.head.weight);
        let hb = tape.leaf(&self.head.bias);
        param_vars[p_idx] = Some(hw);
        param_vars[p_idx + 1] = Some(hb);
        let classes = self.n_classes();
        let mut ws = tape.slice(hw, &[0..classes, 0..c_prev])?;
        let mut bs = hb;
        if quant.weights {
            let e = choose_scale(tape.data(ws)).exponent;
            ws = tape.fake_quantize(ws, exp2(-e), QMIN, QMAX)?;
            bs = tape.fake_quantize(bs, exp2(-e), BIAS_QMIN, BIAS_QMAX)?;
        }
        let logits = tape.linear(h, ws, bs)?;
        Ok(ForwardOut {
            logits,
            bn_stats,
            act_max,
            param_vars,
        })
    }

    /// Convenience eval-mode forward on the network's own spec.
    pub fn predict(&self, x: &Tensor, quant: &QuantSpec) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, &self.own_spec(), BnMode::Eval, quant)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Copies tape gradients into the parameter tensors. Parameters without a
    /// gradient get `requires_grad` cleared so optimizers skip them for this
    /// step; call [`Network::enable_grads`] afterwards.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[Option<Var>], scale: f32) -> Result<()> {
        for (p, v) in self.params_mut().into_iter().zip(vars) {
            match v.and_then(|v| tape.grad(v)) {
                Some(g) => {
                    if scale == 1.0 {
                        p.accumulate_grad(g)?;
                    } else {
                        let scaled: Vec<f32> = g.iter().map(|x| x * scale).collect();
                        p.accumulate_grad(&scaled)?;
                    }
                }
                None => {
                    if p.grad().is_none() {
                        p.set_requires_grad(false);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn enable_grads(&mut self) {
        for p in self.params_mut() {
            p.set_requires_grad(true);
            p.zero_grad();
        }
    }

    /// Momentum update of the running statistics of the active channels from
    /// train-mode batch statistics (unbiased variance).
    pub fn update_running_stats(
        &mut self,
        spec: &SubnetSpec,
        stats: &[Option<BnStats>],
        momentum: f32,
    ) {
        let mut it = stats.iter();
        for (choices, layers) in spec.units.iter().zip(&mut self.units) {
            for (choice, layer) in choices.iter().zip(layers.iter_mut()) {
                let (Some(Some(s)), Some(bn)) = (it.next(), layer.bn.as_mut()) else {
                    continue;
                };
                let unbias = if s.count > 1 {
                    s.count as f32 / (s.count - 1) as f32
                } else {
                    1.0
                };
                for c in 0..choice.width {
                    bn.running_mean[c] =
                        (1.0 - momentum) * bn.running_mean[c] + momentum * s.mean[c];
                    bn.running_var[c] =
                        (1.0 - momentum) * bn.running_var[c] + momentum * s.var[c] * unbias;
                }
            }
        }
    }

    /// Replaces the running statistics of the whole network by the average of
    /// per-batch statistics over `batches`, without touching weights.
    pub fn recalibrate_bn(&mut self, batches: &[Tensor]) -> Result<()> {
        if batches.is_empty() {
            return Err(Error::invalid(
                "batch norm recalibration needs at least one batch",
            ));
        }
        let spec = self.own_spec();
        let n_layers = spec.layers().count();
        let mut sum_mean: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut sum_var: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        for l in self.units.iter().flatten() {
            sum_mean.push(vec![0.0; l.c_out()]);
            sum_var.push(vec![0.0; l.c_out()]);
        }
        for x in batches {
            let mut tape = Tape::inference();
            let xv = tape.constant(x.clone());
            let out = self.forward(&mut tape, xv, &spec, BnMode::Train, &QuantSpec::default())?;
            for (l, s) in out.bn_stats.iter().enumerate() {
                if let Some(s) = s {
                    let unbias = if s.count > 1 {
                        s.count as f64 / (s.count - 1) as f64
                    } else {
                        1.0
                    };
                    for c in 0..s.mean.len() {
                        sum_mean[l][c] += s.mean[c] as f64;
                        sum_var[l][c] += s.var[c] as f64 * unbias;
                    }
                }
            }
        }
        let nb = batches.len() as f64;
        for (l, layer) in self.units.iter_mut().flatten().enumerate() {
            if let Some(bn) = &mut layer.bn {
                for c in 0..bn.running_mean.len() {
                    bn.running_mean[c] = (sum_mean[l][c] / nb) as f32;
                    bn.running_var[c] = (sum_var[l][c] / nb) as f32;
                }
            }
        }
        Ok(())
    }
}

/// Copies `t[ranges]` into a new trainable tensor.
pub(crate) fn slice_param(t: &Tensor, ranges: &[Range<usize>]) -> Result<Tensor> {
    let mut s = t.slice(ranges)?;
    s.set_requires_grad(t.requires_grad());
    Ok(s)
}

pub(crate) fn exp2(e: i32) -> f32 {
    (e as f32).exp2()
}
