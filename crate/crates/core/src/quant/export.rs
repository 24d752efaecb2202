//! `KWSQ0001` model file: a length-prefixed JSON architecture descriptor, then
//! per layer an i8 scale exponent, the int8 weights and the i32 biases, and a
//! CRC32 trailer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{choose_scale, QatOutcome, QuantParams, BIAS_QMAX, BIAS_QMIN};
use crate::binio::{config_hash, Reader, Writer};
use crate::error::{Error, Result};
use crate::supernet::{ConvLayer, Linear, Network, QuantSpec, SubnetSpec, SupernetConfig};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 8] = b"KWSQ0001";
const KIND: &str = "quantized model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub config: SupernetConfig,
    pub spec: SubnetSpec,
    /// Activation quantizer exponents: the input, then every layer output.
    pub act_exponents: Vec<i32>,
    pub config_hash: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantLayer {
    pub exponent: i8,
    pub shape: Vec<usize>,
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
}

impl QuantLayer {
    fn from_float(weight: &Tensor, bias: &Tensor) -> QuantLayer {
        let p = choose_scale(weight.data());
        let scale = p.scale();
        QuantLayer {
            exponent: p.exponent as i8,
            shape: weight.shape().to_vec(),
            weights: weight.data().iter().map(|&w| p.quantize(w)).collect(),
            bias: bias
                .data()
                .iter()
                .map(|&b| (b / scale).round_ties_even().clamp(BIAS_QMIN, BIAS_QMAX) as i32)
                .collect(),
        }
    }

    fn params(&self) -> QuantParams {
        QuantParams {
            exponent: self.exponent as i32,
        }
    }

    fn dequantized(&self) -> Result<(Tensor, Tensor)> {
        let p = self.params();
        let w = self.weights.iter().map(|&q| p.dequantize(q)).collect();
        let b = self.bias.iter().map(|&q| q as f32 * p.scale()).collect();
        Ok((
            Tensor::new(self.shape.clone(), w)?,
            Tensor::new(vec![self.bias.len()], b)?,
        ))
    }
}

/// Deployable int8 network: folded convolutions and the head, with
/// power-of-two scales.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub descriptor: ModelDescriptor,
    /// Convolution layers in order, then the head.
    pub layers: Vec<QuantLayer>,
}

/// `(weight shape, bias length)` of every stored layer of `spec`.
fn layer_shapes(config: &SupernetConfig, spec: &SubnetSpec) -> Vec<(Vec<usize>, usize)> {
    let mut c_in = config.input_channels;
    let mut out = Vec::new();
    for l in spec.layers() {
        out.push((vec![l.width, c_in, l.kernel], l.width));
        c_in = l.width;
    }
    out.push((vec![config.n_classes, c_in], config.n_classes));
    out
}

impl QuantizedModel {
    /// Weight and bias elements stored.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Size at one byte per parameter.
    pub fn param_bytes(&self) -> usize {
        self.param_count()
    }

    /// Float network with the dequantized weights.
    pub fn to_network(&self) -> Result<Network> {
        let (head, convs) = self
            .layers
            .split_last()
            .ok_or_else(|| Error::format(KIND, "no layers"))?;
        let mut it = convs.iter();
        let mut units = Vec::new();
        for depth in self.descriptor.spec.depths() {
            let mut unit = Vec::with_capacity(depth);
            for _ in 0..depth {
                let l = it
                    .next()
                    .ok_or_else(|| Error::format(KIND, "layer count does not match spec"))?;
                let (weight, bias) = l.dequantized()?;
                unit.push(ConvLayer {
                    weight,
                    bias,
                    bn: None,
                });
            }
            units.push(unit);
        }
        let (weight, bias) = head.dequantized()?;
        Ok(Network {
            units,
            head: Linear { weight, bias },
        })
    }

    /// Forward settings for the dequantized network: weights are already on
    /// their grids, activations are quantized.
    pub fn quant_spec(&self) -> QuantSpec {
        QuantSpec {
            weights: false,
            act_exponents: Some(self.descriptor.act_exponents.clone()),
        }
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.to_network()?.predict(x, &self.quant_spec())
    }
}

/// Int8 snapshot of a quantization-aware trained network.
pub fn export_int8(model: &QatOutcome, config: &SupernetConfig) -> Result<QuantizedModel> {
    let act_exponents = match &model.act_exponents {
        Some(e) if !model.net.has_bn() => e.clone(),
        _ => {
            return Err(Error::invalid(
                "network is not quantized: run QAT past its quantization epoch",
            ))
        }
    };
    let spec = model.net.own_spec();
    spec.validate(config)?;
    if act_exponents.len() != spec.layers().count() + 1 {
        return Err(Error::shape(
            "activation exponent count does not match the layer count",
        ));
    }
    let mut layers: Vec<QuantLayer> = model
        .net
        .units
        .iter()
        .flatten()
        .map(|l| QuantLayer::from_float(&l.weight, &l.bias))
        .collect();
    layers.push(QuantLayer::from_float(
        &model.net.head.weight,
        &model.net.head.bias,
    ));
    Ok(QuantizedModel {
        descriptor: ModelDescriptor {
            config: config.clone(),
            spec,
            act_exponents,
            config_hash: config_hash(config),
        },
        layers,
    })
}

pub fn write_model(m: &QuantizedModel) -> Result<Vec<u8>> {
    let desc = serde_json::to_vec(&m.descriptor)?;
    let mut w = Writer::default();
    w.bytes(MODEL_MAGIC);
    w.u32(desc.len() as u32);
    w.bytes(&desc);
    for l in &m.layers {
        w.i8(l.exponent);
        for &q in &l.weights {
            w.i8(q);
        }
        for &b in &l.bias {
            w.bytes(&b.to_le_bytes());
        }
    }
    Ok(w.finish())
}

pub fn read_model(bytes: &[u8]) -> Result<QuantizedModel> {
    let mut r = Reader::open(bytes, MODEL_MAGIC, KIND)?;
    let n = r.u32()? as usize;
    let descriptor: ModelDescriptor =
        serde_json::from_slice(r.take(n)?).map_err(|e| r.err(format!("bad descriptor: {e}")))?;
    if config_hash(&descriptor.config) != descriptor.config_hash {
        return Err(r.err("config hash does not match descriptor"));
    }
    descriptor.config.validate()?;
    descriptor.spec.validate(&descriptor.config)?;
    let shapes = layer_shapes(&descriptor.config, &descriptor.spec);
    if descriptor.act_exponents.len() != shapes.len() {
        return Err(r.err("activation exponent count does not match the layer count"));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for (shape, n_bias) in shapes {
        let exponent = r.i8()?;
        let n_w: usize = shape.iter().product();
        let weights = r.take(n_w)?.iter().map(|&b| b as i8).collect();
        let bias = r
            .take(n_bias * 4)?
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        layers.push(QuantLayer {
            exponent,
            shape,
            weights,
            bias,
        });
    }
    r.done()?;
    Ok(QuantizedModel { descriptor, layers })
}

pub fn save_model(m: &QuantizedModel, path: &Path) -> Result<()> {
    std::fs::write(path, write_model(m)?).map_err(Error::at_path(path))
}

pub fn load_model(path: &Path) -> Result<QuantizedModel> {
    read_model(&std::fs::read(path).map_err(Error::at_path(path))?)
}
