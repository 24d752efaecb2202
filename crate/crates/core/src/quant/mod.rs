//! 8-bit quantization: batch-norm folding, power-of-two per-tensor scales,
//! quantization-aware training and the int8 model file.

mod export;
mod qat;

pub use export::{
    export_int8, load_model, read_model, save_model, write_model, ModelDescriptor, QuantLayer,
    QuantizedModel, MODEL_MAGIC,
};
pub use qat::{qat_train, QatLog, QatOutcome, QatSchedule};

use crate::error::{Error, Result};
use crate::supernet::{ConvLayer, Network, BN_EPS};
use crate::tensor::Tensor;

pub const QMIN: f32 = -128.0;
pub const QMAX: f32 = 127.0;
/// Bias range: 32-bit, kept to values exactly representable in f32.
pub const BIAS_QMIN: f32 = -2_147_483_520.0;
pub const BIAS_QMAX: f32 = 2_147_483_520.0;

/// Exponent used for an all-zero tensor.
pub const ZERO_EXPONENT: i32 = 7;
pub const MAX_EXPONENT: i32 = 15;

/// Symmetric 8-bit quantizer with scale `2^(−exponent)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantParams {
    pub exponent: i32,
}

impl QuantParams {
    pub fn scale(self) -> f32 {
        (-self.exponent as f32).exp2()
    }

    pub fn quantize(self, x: f32) -> i8 {
        (x / self.scale()).round_ties_even().clamp(QMIN, QMAX) as i8
    }

    pub fn dequantize(self, q: i8) -> f32 {
        q as f32 * self.scale()
    }

    /// `clamp(round(x/scale), −128, 127)·scale`
    pub fn fake_quantize(self, x: f32) -> f32 {
        self.dequantize(self.quantize(x))
    }
}

/// Smallest power-of-two scale with `max|x| / scale ≤ 127`, exponent clamped
/// to `[0, 15]`.
pub fn choose_scale(data: &[f32]) -> QuantParams {
    let m = data.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    choose_scale_for_max(m)
}

pub fn choose_scale_for_max(m: f32) -> QuantParams {
    if m == 0.0 {
        return QuantParams {
            exponent: ZERO_EXPONENT,
        };
    }
    if !m.is_finite() {
        return QuantParams { exponent: 0 };
    }
    let mut e = MAX_EXPONENT;
    while e > 0 && m * (e as f32).exp2() > QMAX {
        e -= 1;
    }
    QuantParams { exponent: e }
}

/// `w' = w·γ/√(σ²+ε)` per output channel, `b' = (b − μ)·γ/√(σ²+ε) + β`.
#[allow(clippy::too_many_arguments)]
pub fn bn_fold(
    weight: &Tensor,
    bias: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<(Tensor, Tensor)> {
    let c_out = weight.shape()[0];
    if [bias.len(), gamma.len(), beta.len(), mean.len(), var.len()]
        .iter()
        .any(|&n| n != c_out)
    {
        return Err(Error::shape(
            "batch norm parameters do not match output channels",
        ));
    }
    let row = weight.len() / c_out;
    let mut w = weight.data().to_vec();
    let mut b = vec![0.0f32; c_out];
    for c in 0..c_out {
        let denom = var[c] + eps;
        if !(denom > 0.0) {
            return Err(Error::invalid(format!(
                "channel {c}: variance + eps = {denom} is not positive"
            )));
        }
        let f = gamma[c] / denom.sqrt();
        w[c * row..(c + 1) * row].iter_mut().for_each(|v| *v *= f);
        b[c] = (bias.data()[c] - mean[c]) * f + beta[c];
    }
    let mut wt = Tensor::new(weight.shape().to_vec(), w)?;
    let mut bt = Tensor::new(vec![c_out], b)?;
    wt.set_requires_grad(weight.requires_grad());
    bt.set_requires_grad(bias.requires_grad());
    Ok((wt, bt))
}

/// Copy of `net` with every batch norm folded into its convolution.
pub fn fold_network(net: &Network) -> Result<Network> {
    let mut out = net.clone();
    for l in out.units.iter_mut().flatten() {
        if let Some(bn) = l.bn.take() {
            let (w, b) = bn_fold(
                &l.weight,
                &l.bias,
                bn.gamma.data(),
                bn.beta.data(),
                &bn.running_mean,
                &bn.running_var,
                BN_EPS,
            )?;
            *l = ConvLayer {
                weight: w,
                bias: b,
                bn: None,
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_examples() {
        let p = choose_scale(&[0.5, -0.25]);
        assert_eq!(p.exponent, 7);
        assert_eq!(p.quantize(0.5), 64);
        assert_eq!(choose_scale(&[127.0]).exponent, 0);
        assert_eq!(choose_scale(&[0.0, 0.0]).exponent, ZERO_EXPONENT);
        assert_eq!(choose_scale(&[1e-9]).exponent, MAX_EXPONENT);
        assert_eq!(choose_scale(&[1000.0]).exponent, 0);
        for e in 0..=15 {
            assert_eq!(QuantParams { exponent: e }.quantize(0.0), 0);
        }
    }

    #[test]
    fn fake_quant_examples() {
        let p = QuantParams { exponent: 4 };
        assert_eq!(p.fake_quantize(0.3125), 0.3125);
        let x = 0.3;
        assert!((p.fake_quantize(x) - x).abs() <= p.scale() / 2.0);
        assert_eq!(p.fake_quantize(10.0 * 127.0 * p.scale()), 127.0 * p.scale());
    }

    #[test]
    fn fold_identity_and_gamma() {
        let w = Tensor::new(vec![2, 1, 1], vec![0.5, -1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.1, 0.2]).unwrap();
        let (fw, fb) = bn_fold(
            &w,
            &b,
            &[1.0, 1.0],
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[1.0, 1.0],
            0.0,
        )
        .unwrap();
        assert_eq!(fw, w);
        assert_eq!(fb, b);
        let (fw, _) = bn_fold(
            &w,
            &b,
            &[2.0, 1.0],
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[1.0, 1.0],
            0.0,
        )
        .unwrap();
        assert_eq!(fw.data(), &[1.0, -1.0]);
        assert!(bn_fold(
            &w,
            &b,
            &[1.0, 1.0],
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[0.0, 1.0],
            0.0
        )
        .is_err());
    }
}
