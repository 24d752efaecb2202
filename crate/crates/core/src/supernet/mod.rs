//! Elastic Conv1D supernet: six pooled units of conv → BN → ReLU layers over
//! the folded 128 × 128 grid, average pool and a linear head. Subnets pick a
//! depth per unit and a kernel and width per layer; all of them share the
//! supernet's tensors.

mod checkpoint;
mod network;
mod spec;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use network::{
    BatchNorm, ConvLayer, ForwardOut, Linear, Network, QuantSpec, BN_EPS, BN_MOMENTUM,
};
pub use spec::{random_spec, sample_subnet, LayerChoice, Stage, SubnetSpec, SupernetConfig};
pub use train::{distill_loss, train_supernet, EpochLog, TrainSchedule};

pub(crate) use network::slice_param;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BnMode, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Supernet {
    pub config: SupernetConfig,
    pub net: Network,
    pub stage: Stage,
    /// Per layer, the original index of each stored output channel.
    pub channel_order: Vec<Vec<usize>>,
    /// Frozen snapshot providing soft labels during the elastic stages.
    pub teacher: Option<Network>,
}

/// Allocates the maximal network with seeded uniform initialization.
pub fn build_supernet(config: &SupernetConfig, seed: u64) -> Result<Supernet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c_in = config.input_channels;
    let mut units = Vec::with_capacity(config.unit_max_depths.len());
    for &d in &config.unit_max_depths {
        let mut layers = Vec::with_capacity(d);
        for _ in 0..d {
            layers.push(ConvLayer::new(
                c_in,
                config.max_width,
                config.max_kernel,
                &mut rng,
            ));
            c_in = config.max_width;
        }
        units.push(layers);
    }
    let head = Linear::new(config.max_width, config.n_classes, &mut rng);
    Ok(Supernet {
        config: config.clone(),
        net: Network { units, head },
        stage: Stage::Full,
        channel_order: vec![(0..config.max_width).collect(); config.n_layers()],
        teacher: None,
    })
}

impl Supernet {
    /// Forward of subnet `spec` through slices of the shared tensors, so
    /// gradients land in the supernet's storage.
    pub fn masked_forward(
        &self,
        tape: &mut Tape,
        x: Var,
        spec: &SubnetSpec,
        mode: BnMode,
    ) -> Result<ForwardOut> {
        spec.validate(&self.config)?;
        self.net.forward(tape, x, spec, mode, &QuantSpec::default())
    }

    /// Eval-mode logits of `spec` for a batch.
    pub fn predict(&self, x: &Tensor, spec: &SubnetSpec) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let out = self.masked_forward(&mut tape, xv, spec, BnMode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Dense copy of the active slices of `spec`.
    pub fn extract_subnet(&self, spec: &SubnetSpec) -> Result<Network> {
        spec.validate(&self.config)?;
        let mut c_prev = self.config.input_channels;
        let mut units = Vec::with_capacity(spec.units.len());
        for (choices, layers) in spec.units.iter().zip(&self.net.units) {
            let mut out = Vec::with_capacity(choices.len());
            for (c, l) in choices.iter().zip(layers) {
                let off = (l.kernel() - c.kernel) / 2;
                let w = c.width;
                let bn =
                    l.bn.as_ref()
                        .map(|bn| -> Result<BatchNorm> {
                            Ok(BatchNorm {
                                gamma: slice_param(&bn.gamma, &[0..w])?,
                                beta: slice_param(&bn.beta, &[0..w])?,
                                running_mean: bn.running_mean[..w].to_vec(),
                                running_var: bn.running_var[..w].to_vec(),
                            })
                        })
                        .transpose()?;
                out.push(ConvLayer {
                    weight: slice_param(&l.weight, &[0..w, 0..c_prev, off..off + c.kernel])?,
                    bias: slice_param(&l.bias, &[0..w])?,
                    bn,
                });
                c_prev = w;
            }
            units.push(out);
        }
        let classes = self.config.n_classes;
        let head = Linear {
            weight: slice_param(&self.net.head.weight, &[0..classes, 0..c_prev])?,
            bias: self.net.head.bias.clone(),
        };
        Ok(Network { units, head })
    }

    /// Reorders every layer's output channels by descending L1 norm of the
    /// weights that consume them (next layer's input slice, or the head
    /// column for the last layer). Downstream input channels are permuted to
    /// match, so the full network computes the same function.
    pub fn sort_channels(&mut self) -> Result<()> {
        let n_layers = self.config.n_layers();
        for l in 0..n_layers {
            let importance = self.outgoing_l1(l);
            let mut perm: Vec<usize> = (0..importance.len()).collect();
            // stable: equal importance keeps the current order
            perm.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]));
            self.apply_permutation(l, &perm)?;
        }
        Ok(())
    }

    fn layer(&self, l: usize) -> &ConvLayer {
        let (u, j) = self.config.layer_positions()[l];
        &self.net.units[u][j]
    }

    fn layer_mut(&mut self, l: usize) -> &mut ConvLayer {
        let (u, j) = self.config.layer_positions()[l];
        &mut self.net.units[u][j]
    }

    /// L1 norm of the weights reading each output channel of layer `l`.
    pub fn outgoing_l1(&self, l: usize) -> Vec<f32> {
        let width = self.layer(l).c_out();
        let mut imp = vec![0.0f32; width];
        if l + 1 < self.config.n_layers() {
            let next = &self.layer(l + 1).weight;
            let [c_out, c_in, k] = next.shape()[..] else {
                unreachable!()
            };
            let d = next.data();
            for o in 0..c_out {
                for (i, v) in imp.iter_mut().enumerate().take(c_in) {
                    *v += d[(o * c_in + i) * k..(o * c_in + i + 1) * k]
                        .iter()
                        .map(|x| x.abs())
                        .sum::<f32>();
                }
            }
        } else {
            let w = &self.net.head.weight;
            let f = w.shape()[1];
            for row in w.data().chunks_exact(f) {
                for (v, x) in imp.iter_mut().zip(row) {
                    *v += x.abs();
                }
            }
        }
        imp
    }

    /// Stores output channel `perm[j]` of layer `l` at position `j`.
    fn apply_permutation(&mut self, l: usize, perm: &[usize]) -> Result<()> {
        let permute_rows = |t: &Tensor, perm: &[usize]| -> Result<Tensor> {
            let row = t.len() / t.shape()[0];
            let mut data = Vec::with_capacity(t.len());
            for &p in perm {
                data.extend_from_slice(&t.data()[p * row..(p + 1) * row]);
            }
            let mut out = Tensor::new(t.shape().to_vec(), data)?;
            out.set_requires_grad(t.requires_grad());
            Ok(out)
        };
        let permute_vec =
            |v: &[f32], perm: &[usize]| perm.iter().map(|&p| v[p]).collect::<Vec<f32>>();
        {
            let layer = self.layer_mut(l);
            layer.weight = permute_rows(&layer.weight, perm)?;
            layer.bias = permute_rows(&layer.bias, perm)?;
            if let Some(bn) = &mut layer.bn {
                bn.gamma = permute_rows(&bn.gamma, perm)?;
                bn.beta = permute_rows(&bn.beta, perm)?;
                bn.running_mean = permute_vec(&bn.running_mean, perm);
                bn.running_var = permute_vec(&bn.running_var, perm);
            }
        }
        // consumer input channels
        let permute_cols = |t: &Tensor, perm: &[usize]| -> Result<Tensor> {
            let s = t.shape().to_vec();
            let (rows, cols, inner) = (s[0], s[1], s.get(2).copied().unwrap_or(1));
            let d = t.data();
            let mut data = Vec::with_capacity(t.len());
            for r in 0..rows {
                for &p in perm {
                    let base = (r * cols + p) * inner;
                    data.extend_from_slice(&d[base..base + inner]);
                }
            }
            let mut out = Tensor::new(s, data)?;
            out.set_requires_grad(t.requires_grad());
            Ok(out)
        };
        if l + 1 < self.config.n_layers() {
            let next = self.layer_mut(l + 1);
            next.weight = permute_cols(&next.weight, perm)?;
        } else {
            self.net.head.weight = permute_cols(&self.net.head.weight, perm)?;
        }
        let order = &self.channel_order[l];
        self.channel_order[l] = perm.iter().map(|&p| order[p]).collect();
        Ok(())
    }

    /// Total stored floats (weights, biases, BN affine parameters).
    pub fn storage_len(&self) -> usize {
        self.net.param_len()
    }

    pub fn check_compatible(&self, other: &SupernetConfig) -> Result<()> {
        if &self.config != other {
            return Err(Error::Config(
                "checkpoint was trained with a different supernet config".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> SupernetConfig {
        SupernetConfig {
            unit_max_depths: vec![2, 1, 2],
            max_width: 8,
            max_kernel: 5,
            kernel_choices: vec![1, 3, 5],
            width_choices: vec![2, 4, 6, 8],
            n_classes: 3,
            input_channels: 4,
            input_len: 16,
        }
    }

    fn input(n: usize, cfg: &SupernetConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[n, cfg.input_channels, cfg.input_len], 1.0, &mut rng)
    }

    fn with_random_stats(sn: &mut Supernet, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in sn.net.units.iter_mut().flatten() {
            let bn = l.bn.as_mut().unwrap();
            for v in bn.running_mean.iter_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
            for v in bn.running_var.iter_mut() {
                *v = rng.random_range(0.5..2.0);
            }
            for v in bn.gamma.data_mut() {
                *v = rng.random_range(0.5..1.5);
            }
        }
    }

    #[test]
    fn full_parameter_count() {
        let sn = build_supernet(&SupernetConfig::default(), 0).unwrap();
        assert_eq!(sn.storage_len(), 1_153_804);
    }

    #[test]
    fn zero_input_gives_finite_logits() {
        let cfg = SupernetConfig::default();
        let sn = build_supernet(&cfg, 1).unwrap();
        let y = sn
            .predict(&Tensor::zeros(&[1, 128, 128]), &cfg.max_spec())
            .unwrap();
        assert_eq!(y.shape(), &[1, 12]);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn extraction_matches_masked_forward() {
        let cfg = tiny();
        let mut sn = build_supernet(&cfg, 2).unwrap();
        with_random_stats(&mut sn, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = input(3, &cfg, 5);
        for _ in 0..20 {
            let spec = random_spec(&cfg, &mut rng);
            let a = sn.predict(&x, &spec).unwrap();
            let net = sn.extract_subnet(&spec).unwrap();
            assert_eq!(net.own_spec(), spec);
            let b = net.predict(&x, &QuantSpec::default()).unwrap();
            let err = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f32::max);
            assert!(err <= 1e-5, "{err}");
            assert!(net.param_len() <= sn.storage_len());
        }
        let full = sn.extract_subnet(&cfg.max_spec()).unwrap();
        assert_eq!(full, sn.net);
    }

    #[test]
    fn sorting_preserves_full_network() {
        let cfg = tiny();
        let mut sn = build_supernet(&cfg, 6).unwrap();
        with_random_stats(&mut sn, 7);
        let x = input(2, &cfg, 8);
        let before = sn.predict(&x, &cfg.max_spec()).unwrap();
        sn.sort_channels().unwrap();
        let after = sn.predict(&x, &cfg.max_spec()).unwrap();
        for (p, q) in before.data().iter().zip(after.data()) {
            assert!((p - q).abs() <= 1e-5);
        }
        for l in 0..cfg.n_layers() {
            let imp = sn.outgoing_l1(l);
            assert!(imp.windows(2).all(|w| w[0] >= w[1]), "layer {l}: {imp:?}");
            let mut order = sn.channel_order[l].clone();
            order.sort();
            assert_eq!(order, (0..8).collect::<Vec<_>>());
        }
        // sorting again is the identity
        let orders = sn.channel_order.clone();
        let weights = sn.net.clone();
        sn.sort_channels().unwrap();
        assert_eq!(sn.channel_order, orders);
        assert_eq!(sn.net, weights);
    }
}
