//! MAC, parameter and byte accounting for subnets and for the MFCC front end,
//! plus a check that a layer list only uses operations the accelerator runs.

use serde::{Deserialize, Serialize};

use crate::mfcc::{MelFilterbank, MfccConfig};
use crate::supernet::{SubnetSpec, SupernetConfig};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv1d,
    Conv2d,
    ConvTranspose2d,
    Linear,
    MaxPool,
    AvgPool,
    Relu,
    BatchNorm,
    Add,
    Sub,
    Or,
    Xor,
    /// Anything else, by name (for example a sinc convolution).
    Other(String),
}

/// One layer for cost purposes. `len_out` is the output length (`H·W` for 2-D
/// ops); linear layers use `c_in` features and `c_out` outputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub op: OpKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub len_out: usize,
}

impl LayerDesc {
    pub fn conv1d(c_in: usize, c_out: usize, kernel: usize, len_out: usize) -> Self {
        LayerDesc {
            op: OpKind::Conv1d,
            c_in,
            c_out,
            kernel,
            len_out,
        }
    }

    pub fn linear(features: usize, outputs: usize) -> Self {
        LayerDesc {
            op: OpKind::Linear,
            c_in: features,
            c_out: outputs,
            kernel: 1,
            len_out: 1,
        }
    }
}

/// Multiply-accumulates of one layer. Pooling, activations and eval-mode
/// batch norm cost none.
pub fn layer_macs(l: &LayerDesc) -> u64 {
    let (ci, co, k, n) = (
        l.c_in as u64,
        l.c_out as u64,
        l.kernel as u64,
        l.len_out as u64,
    );
    match l.op {
        OpKind::Conv1d => ci * co * k * n,
        OpKind::Conv2d | OpKind::ConvTranspose2d => ci * co * k * k * n,
        OpKind::Linear => ci * co,
        _ => 0,
    }
}

/// Elementwise operations of one layer, the work [`layer_macs`] leaves out.
pub fn layer_elementwise(l: &LayerDesc) -> u64 {
    match l.op {
        OpKind::MaxPool | OpKind::AvgPool | OpKind::Relu | OpKind::BatchNorm => {
            (l.c_in * l.len_out) as u64
        }
        _ => 0,
    }
}

/// Layer list of a subnet as deployed: each convolution (ReLU fused, batch
/// norm folded), the pooling between units, and the head.
pub fn describe_spec(cfg: &SupernetConfig, spec: &SubnetSpec) -> Vec<LayerDesc> {
    let mut out = Vec::new();
    let mut c = cfg.input_channels;
    let n_units = spec.units.len();
    for (u, layers) in spec.units.iter().enumerate() {
        let len = cfg.unit_len(u);
        for l in layers {
            out.push(LayerDesc::conv1d(c, l.width, l.kernel, len));
            c = l.width;
        }
        let pool = if u + 1 < n_units {
            LayerDesc {
                op: OpKind::MaxPool,
                c_in: c,
                c_out: c,
                kernel: 2,
                len_out: len / 2,
            }
        } else {
            LayerDesc {
                op: OpKind::AvgPool,
                c_in: c,
                c_out: c,
                kernel: len,
                len_out: 1,
            }
        };
        out.push(pool);
    }
    out.push(LayerDesc::linear(c, cfg.n_classes));
    out
}

pub fn total_macs(cfg: &SupernetConfig, spec: &SubnetSpec) -> u64 {
    describe_spec(cfg, spec).iter().map(layer_macs).sum()
}

/// Weights and biases, plus batch-norm γ and β when `include_bn`.
pub fn param_count(cfg: &SupernetConfig, spec: &SubnetSpec, include_bn: bool) -> u64 {
    let mut c = cfg.input_channels as u64;
    let mut n = 0u64;
    for l in spec.layers() {
        let w = l.width as u64;
        n += c * w * l.kernel as u64 + w;
        if include_bn {
            n += 2 * w;
        }
        c = w;
    }
    n + c * cfg.n_classes as u64 + cfg.n_classes as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecCost {
    pub params: u64,
    pub param_bytes: u64,
    pub macs: u64,
}

/// Parameters (batch norm included, as counted for the supernet), their
/// storage at `bits` per parameter, and MACs.
pub fn spec_cost(cfg: &SupernetConfig, spec: &SubnetSpec, bits: u32) -> SpecCost {
    let params = param_count(cfg, spec, true);
    SpecCost {
        params,
        param_bytes: (params * bits as u64).div_ceil(8),
        macs: total_macs(cfg, spec),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MfccCost {
    pub frames: u64,
    pub window: u64,
    pub fft_butterflies: u64,
    /// Four real multiplies per complex butterfly.
    pub fft_mults: u64,
    pub power: u64,
    pub mel: u64,
    pub dct: u64,
    /// `window + fft_mults + power + mel + dct`
    pub total: u64,
}

/// Per-stage multiply counts of the MFCC pipeline for one window of
/// `samples` samples.
pub fn mfcc_macs(cfg: &MfccConfig, samples: usize) -> Result<MfccCost> {
    cfg.validate()?;
    let frames = cfg.n_frames(samples) as u64;
    let half = cfg.n_fft as u64 / 2;
    let log2 = cfg.n_fft.trailing_zeros() as u64;
    let support: u64 = MelFilterbank::new(cfg)
        .support_sizes()
        .iter()
        .map(|&s| s as u64)
        .sum();
    let window = frames * cfg.frame_len as u64;
    let fft_butterflies = frames * half * log2;
    let fft_mults = 4 * fft_butterflies;
    let power = frames * (half + 1) * 2;
    let mel = frames * support;
    let dct = frames * cfg.n_mels as u64 * cfg.n_mfcc as u64;
    Ok(MfccCost {
        frames,
        window,
        fft_butterflies,
        fft_mults,
        power,
        mel,
        dct,
        total: window + fft_mults + power + mel + dct,
    })
}

/// What the target accelerator accepts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceleratorLimits {
    pub max_width: usize,
    pub max_kernel: usize,
}

impl Default for AcceleratorLimits {
    fn default() -> Self {
        AcceleratorLimits {
            max_width: 128,
            max_kernel: 9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub layer: usize,
    pub reason: String,
}

pub fn check_capabilities(layers: &[LayerDesc], limits: &AcceleratorLimits) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, l) in layers.iter().enumerate() {
        let mut flag = |reason: String| out.push(Violation { layer: i, reason });
        if let OpKind::Other(name) = &l.op {
            flag(format!("unsupported op {name}"));
            continue;
        }
        if l.op == OpKind::BatchNorm {
            flag("unsupported op batch_norm (fold it into the convolution)".into());
            continue;
        }
        if matches!(
            l.op,
            OpKind::Conv1d | OpKind::Conv2d | OpKind::ConvTranspose2d | OpKind::Linear
        ) {
            if l.c_out > limits.max_width || l.c_in > limits.max_width {
                flag(format!(
                    "width {} exceeds {}",
                    l.c_out.max(l.c_in),
                    limits.max_width
                ));
            }
            if l.op != OpKind::Linear && l.kernel > limits.max_kernel {
                flag(format!("kernel {} exceeds {}", l.kernel, limits.max_kernel));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_mac_examples() {
        assert_eq!(layer_macs(&LayerDesc::conv1d(128, 128, 5, 128)), 10_485_760);
        assert_eq!(layer_macs(&LayerDesc::linear(128, 12)), 1_536);
        assert_eq!(layer_macs(&LayerDesc::conv1d(1, 1, 1, 1)), 1);
    }

    #[test]
    fn maxima_counts() {
        let cfg = SupernetConfig::default();
        let max = cfg.max_spec();
        assert_eq!(param_count(&cfg, &max, true), 1_153_804);
        assert_eq!(param_count(&cfg, &max, false), 1_153_804 - 14 * 256);
        let c = spec_cost(&cfg, &max, 8);
        assert_eq!(c.param_bytes, c.params);
    }

    #[test]
    fn mfcc_breakdown() {
        let c = mfcc_macs(&MfccConfig::default(), 16000).unwrap();
        assert_eq!(c.frames, 49);
        assert_eq!(c.window, 31_360);
        assert_eq!(c.fft_butterflies, 250_880);
        assert_eq!(c.dct, 78_400);
    }

    #[test]
    fn capability_examples() {
        let cfg = SupernetConfig::default();
        let limits = AcceleratorLimits::default();
        assert!(check_capabilities(&describe_spec(&cfg, &cfg.max_spec()), &limits).is_empty());
        let sinc = LayerDesc {
            op: OpKind::Other("sinc_conv".into()),
            c_in: 1,
            c_out: 64,
            kernel: 251,
            len_out: 1,
        };
        let v = check_capabilities(&[sinc], &limits);
        assert!(v[0].reason.contains("unsupported op"));
        let wide = check_capabilities(&[LayerDesc::conv1d(64, 129, 3, 10)], &limits);
        assert_eq!(wide.len(), 1);
        assert!(wide[0].reason.contains("width 129"));
    }
}
