use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{FOLD_CHANNELS, FOLD_STEPS};
use crate::error::{Error, Result};

/// Shape of the elastic supernet and the choice sets its subnets draw from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct SupernetConfig {
    pub unit_max_depths: Vec<usize>,
    pub max_width: usize,
    pub max_kernel: usize,
    pub kernel_choices: Vec<usize>,
    pub width_choices: Vec<usize>,
    pub n_classes: usize,
    /// Channels of the folded input grid.
    pub input_channels: usize,
    /// Time steps of the folded input grid.
    pub input_len: usize,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig {
            unit_max_depths: vec![3, 3, 2, 2, 2, 2],
            max_width: 128,
            max_kernel: 5,
            kernel_choices: vec![1, 3, 5],
            width_choices: vec![32, 64, 96, 128],
            n_classes: 12,
            input_channels: FOLD_CHANNELS,
            input_len: FOLD_STEPS,
        }
    }
}

fn check_choices(name: &str, choices: &[usize], max: usize) -> Result<()> {
    if choices.is_empty() || choices.contains(&0) {
        return Err(Error::Config(format!(
            "{name} choices must be non-empty and positive"
        )));
    }
    if choices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "{name} choices must be strictly ascending: {choices:?}"
        )));
    }
    if choices.last() != Some(&max) {
        return Err(Error::Config(format!(
            "largest {name} choice must equal {max}"
        )));
    }
    Ok(())
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unit_max_depths.is_empty() || self.unit_max_depths.contains(&0) {
            return Err(Error::Config("every unit needs at least one layer".into()));
        }
        check_choices("kernel", &self.kernel_choices, self.max_kernel)?;
        check_choices("width", &self.width_choices, self.max_width)?;
        if self.kernel_choices.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("kernel choices must be odd".into()));
        }
        if self.n_classes < 2 || self.input_channels == 0 {
            return Err(Error::Config(
                "need at least 2 classes and 1 input channel".into(),
            ));
        }
        let pools = self.unit_max_depths.len() - 1;
        if self.input_len >> pools == 0 || self.input_len < self.max_kernel.div_ceil(2) {
            return Err(Error::Config(format!(
                "input length {} too short for {pools} pooling stages",
                self.input_len
            )));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.unit_max_depths.iter().sum()
    }

    /// Time steps seen by every layer of unit `u` (pooling halves the
    /// length between units).
    pub fn unit_len(&self, u: usize) -> usize {
        self.input_len >> u
    }

    /// `(unit, layer within unit)` for each flat layer index.
    pub fn layer_positions(&self) -> Vec<(usize, usize)> {
        self.unit_max_depths
            .iter()
            .enumerate()
            .flat_map(|(u, &d)| (0..d).map(move |j| (u, j)))
            .collect()
    }

    pub fn max_spec(&self) -> SubnetSpec {
        SubnetSpec {
            units: self
                .unit_max_depths
                .iter()
                .map(|&d| {
                    vec![
                        LayerChoice {
                            kernel: self.max_kernel,
                            width: self.max_width
                        };
                        d
                    ]
                })
                .collect(),
        }
    }
}

/// Progressive-shrinking stages, in training order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Full,
    ElasticKernel,
    ElasticDepth,
    ElasticWidth,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Full,
        Stage::ElasticKernel,
        Stage::ElasticDepth,
        Stage::ElasticWidth,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Stage> {
        Stage::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Full => "full",
            Stage::ElasticKernel => "elastic_kernel",
            Stage::ElasticDepth => "elastic_depth",
            Stage::ElasticWidth => "elastic_width",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerChoice {
    pub kernel: usize,
    pub width: usize,
}

/// Active layers per unit; the unit depth is the length of its list.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubnetSpec {
    pub units: Vec<Vec<LayerChoice>>,
}

impl SubnetSpec {
    pub fn depths(&self) -> Vec<usize> {
        self.units.iter().map(Vec::len).collect()
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerChoice> {
        self.units.iter().flatten()
    }

    pub fn last_width(&self) -> usize {
        self.units
            .last()
            .and_then(|u| u.last())
            .map_or(0, |l| l.width)
    }

    /// Checks that the spec only uses existing layers and allowed values.
    pub fn validate(&self, cfg: &SupernetConfig) -> Result<()> {
        if self.units.len() != cfg.unit_max_depths.len() {
            return Err(Error::invalid(format!(
                "spec has {} units, supernet has {}",
                self.units.len(),
                cfg.unit_max_depths.len()
            )));
        }
        for (u, (layers, &max_d)) in self.units.iter().zip(&cfg.unit_max_depths).enumerate() {
            if layers.is_empty() || layers.len() > max_d {
                return Err(Error::invalid(format!(
                    "unit {u} depth {} outside 1..={max_d}",
                    layers.len()
                )));
            }
            for l in layers {
                if !cfg.kernel_choices.contains(&l.kernel) {
                    return Err(Error::invalid(format!(
                        "kernel {} not in {:?}",
                        l.kernel, cfg.kernel_choices
                    )));
                }
                if !cfg.width_choices.contains(&l.width) {
                    return Err(Error::invalid(format!(
                        "width {} not in {:?}",
                        l.width, cfg.width_choices
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draws a spec with the dimensions unlocked at `stage` sampled uniformly
/// and the rest at their maxima.
pub fn sample_subnet<R: Rng + ?Sized>(
    cfg: &SupernetConfig,
    stage: Stage,
    rng: &mut R,
) -> SubnetSpec {
    let units = cfg
        .unit_max_depths
        .iter()
        .map(|&max_d| {
            let depth = if stage >= Stage::ElasticDepth {
                rng.random_range(1..=max_d)
            } else {
                max_d
            };
            (0..depth)
                .map(|_| LayerChoice {
                    kernel: if stage >= Stage::ElasticKernel {
                        *cfg.kernel_choices.choose(rng).unwrap()
                    } else {
                        cfg.max_kernel
                    },
                    width: if stage >= Stage::ElasticWidth {
                        *cfg.width_choices.choose(rng).unwrap()
                    } else {
                        cfg.max_width
                    },
                })
                .collect()
        })
        .collect();
    SubnetSpec { units }
}

/// Draws every gene uniformly from its choice set.
pub fn random_spec<R: Rng + ?Sized>(cfg: &SupernetConfig, rng: &mut R) -> SubnetSpec {
    sample_subnet(cfg, Stage::ElasticWidth, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_config_is_valid() {
        let c = SupernetConfig::default();
        c.validate().unwrap();
        assert_eq!(c.n_layers(), 14);
        let lens: Vec<usize> = (0..6).map(|u| c.unit_len(u)).collect();
        assert_eq!(lens, vec![128, 64, 32, 16, 8, 4]);
    }

    #[test]
    fn bad_configs_rejected() {
        let c = SupernetConfig {
            kernel_choices: vec![1, 3],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = SupernetConfig {
            width_choices: vec![64, 32, 128],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = SupernetConfig {
            input_len: 16,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_stage_gives_maxima() {
        let c = SupernetConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_subnet(&c, Stage::Full, &mut rng);
        assert_eq!(s, c.max_spec());
        assert_eq!(s.depths(), vec![3, 3, 2, 2, 2, 2]);
    }

    #[test]
    fn kernel_stage_keeps_width_and_depth() {
        let c = SupernetConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = sample_subnet(&c, Stage::ElasticKernel, &mut rng);
            assert_eq!(s.depths(), c.unit_max_depths);
            assert!(s.layers().all(|l| l.width == 128));
            s.validate(&c).unwrap();
        }
    }

    #[test]
    fn spec_validation() {
        let c = SupernetConfig::default();
        let mut s = c.max_spec();
        s.units[0][0].width = 100;
        assert!(s.validate(&c).is_err());
        let mut s = c.max_spec();
        s.units[2].push(LayerChoice {
            kernel: 5,
            width: 128,
        });
        assert!(s.validate(&c).is_err());
    }
}
