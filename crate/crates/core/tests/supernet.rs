mod common;

use kws_core::data::LabeledSet;
use kws_core::supernet::{
    build_supernet, random_spec, read_checkpoint, sample_subnet, train_supernet, write_checkpoint,
    QuantSpec, Stage, Supernet, SupernetConfig, TrainSchedule,
};
use kws_core::tensor::{BnMode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random BN statistics and affine parameters so eval-mode batch norm is
/// not the identity.
fn perturbed_supernet(cfg: &SupernetConfig, seed: u64) -> Supernet {
    let mut sn = build_supernet(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB4);
    for layer in sn.net.units.iter_mut().flatten() {
        let bn = layer.bn.as_mut().unwrap();
        for v in bn.gamma.data_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in bn.beta.data_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
        for v in bn.running_mean.iter_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
        for v in bn.running_var.iter_mut() {
            *v = rng.random_range(0.05..0.5);
        }
    }
    sn
}

fn input(cfg: &SupernetConfig, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[n, cfg.input_channels, cfg.input_len], 1.0, &mut rng)
}

#[test]
fn masked_forward_equals_extracted_subnet() {
    let cfg = SupernetConfig::default();
    let sn = perturbed_supernet(&cfg, 3);
    let x = input(&cfg, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let spec = random_spec(&cfg, &mut rng);
        let masked = sn.predict(&x, &spec).unwrap();
        let net = sn.extract_subnet(&spec).unwrap();
        assert_eq!(net.own_spec(), spec);
        let dense = net.predict(&x, &QuantSpec::default()).unwrap();
        let d = common::max_abs_diff(masked.data(), dense.data());
        assert!(d <= 1e-5, "{spec:?}: {d}");
    }
}

#[test]
fn sort_channels_keeps_the_full_network_function() {
    let cfg = SupernetConfig::default();
    let mut sn = perturbed_supernet(&cfg, 6);
    let x = input(&cfg, 2, 7);
    let full = cfg.max_spec();
    let before = sn.predict(&x, &full).unwrap();
    sn.sort_channels().unwrap();
    let after = sn.predict(&x, &full).unwrap();
    assert!(common::max_abs_diff(before.data(), after.data()) <= 1e-5);
    for l in 0..cfg.n_layers() {
        let imp = sn.outgoing_l1(l);
        assert!(imp.windows(2).all(|w| w[0] >= w[1]), "layer {l} not sorted");
        let mut order = sn.channel_order[l].clone();
        order.sort_unstable();
        assert_eq!(order, (0..cfg.max_width).collect::<Vec<_>>());
    }
}

#[test]
fn sample_subnet_respects_stage_unlocks() {
    let cfg = SupernetConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    assert_eq!(sample_subnet(&cfg, Stage::Full, &mut rng), cfg.max_spec());
    for stage in Stage::ALL {
        let mut seen_k = std::collections::BTreeSet::new();
        let mut seen_w = std::collections::BTreeSet::new();
        let mut seen_d = std::collections::BTreeSet::new();
        for _ in 0..10_000 {
            let s = sample_subnet(&cfg, stage, &mut rng);
            s.validate(&cfg).unwrap();
            if stage < Stage::ElasticDepth {
                assert_eq!(s.depths(), cfg.unit_max_depths);
            }
            for l in s.layers() {
                if stage < Stage::ElasticKernel {
                    assert_eq!(l.kernel, cfg.max_kernel);
                }
                if stage < Stage::ElasticWidth {
                    assert_eq!(l.width, cfg.max_width);
                }
                seen_k.insert(l.kernel);
                seen_w.insert(l.width);
            }
            seen_d.extend(s.depths());
        }
        if stage >= Stage::ElasticKernel {
            assert_eq!(seen_k.into_iter().collect::<Vec<_>>(), cfg.kernel_choices);
        }
        if stage >= Stage::ElasticDepth {
            assert_eq!(seen_d.into_iter().collect::<Vec<_>>(), vec![1, 2, 3]);
        }
        if stage >= Stage::ElasticWidth {
            assert_eq!(seen_w.into_iter().collect::<Vec<_>>(), cfg.width_choices);
        }
    }
}

fn tiny_config() -> SupernetConfig {
    SupernetConfig {
        unit_max_depths: vec![2, 1],
        max_width: 8,
        max_kernel: 5,
        kernel_choices: vec![1, 3, 5],
        width_choices: vec![4, 8],
        n_classes: 3,
        input_channels: 4,
        input_len: 16,
    }
}

fn tiny_data(cfg: &SupernetConfig, n: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.input_channels * cfg.input_len;
    let labels: Vec<usize> = (0..n).map(|i| i % cfg.n_classes).collect();
    let windows = labels
        .iter()
        .map(|&c| {
            (0..len)
                .map(|t| ((t * (c + 1)) as f32 * 0.3).sin() + rng.random_range(-0.1..0.1))
                .collect()
        })
        .collect();
    LabeledSet::new(windows, labels).unwrap()
}

#[test]
fn training_only_touches_shared_storage() {
    let cfg = tiny_config();
    let mut sn = build_supernet(&cfg, 1).unwrap();
    let before = sn.storage_len();
    let data = tiny_data(&cfg, 24, 2);
    let schedule = TrainSchedule {
        epochs: [1, 1, 1, 1],
        batch_size: 8,
        ..TrainSchedule::default()
    };
    let logs =
        train_supernet(&mut sn, &data, Some(&data), &[1.0; 3], &schedule, 9, |_| {}).unwrap();
    let stages: Vec<Stage> = logs.iter().map(|l| l.stage).collect();
    assert_eq!(stages, Stage::ALL.to_vec());
    assert_eq!(sn.storage_len(), before);
    assert!(sn.teacher.is_some());
    assert_eq!(sn.stage, Stage::ElasticWidth);
}

#[test]
fn checkpoint_roundtrip_preserves_everything() {
    let cfg = tiny_config();
    let mut sn = perturbed_supernet(&cfg, 11);
    sn.stage = Stage::ElasticDepth;
    sn.teacher = Some(sn.net.clone());
    let bytes = write_checkpoint(&sn).unwrap();
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(back, sn);
    assert_eq!(write_checkpoint(&back).unwrap(), bytes);
}

#[test]
fn masked_gradients_land_in_active_slices_only() {
    let cfg = tiny_config();
    let sn = build_supernet(&cfg, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let spec = random_spec(&cfg, &mut rng);
    let x = input(&cfg, 3, 14);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = sn
        .masked_forward(&mut tape, xv, &spec, BnMode::Train)
        .unwrap();
    let loss = tape
        .weighted_cross_entropy(out.logits, &[0, 1, 2], &[1.0; 3])
        .unwrap();
    tape.backward(loss).unwrap();
    let mut c_prev = cfg.input_channels;
    let mut idx = 0;
    for (unit, layers) in spec.units.iter().zip(&sn.net.units) {
        for (j, layer) in layers.iter().enumerate() {
            let Some(choice) = unit.get(j) else {
                assert!(out.param_vars[idx].is_none());
                idx += 4;
                continue;
            };
            let g = tape.grad(out.param_vars[idx].unwrap()).unwrap();
            let [co, ci, k] = layer.weight.shape()[..] else {
                unreachable!()
            };
            let off = (k - choice.kernel) / 2;
            for o in 0..co {
                for i in 0..ci {
                    for t in 0..k {
                        let active = o < choice.width
                            && i < c_prev
                            && (off..off + choice.kernel).contains(&t);
                        if !active {
                            assert_eq!(g[(o * ci + i) * k + t], 0.0);
                        }
                    }
                }
            }
            c_prev = choice.width;
            idx += 4;
        }
    }
}
