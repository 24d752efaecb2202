mod common;

use kws_core::data::LabeledSet;
use kws_core::quant::{
    choose_scale, export_int8, fold_network, qat_train, read_model, write_model, QatOutcome,
    QatSchedule,
};
use kws_core::supernet::{build_supernet, random_spec, QuantSpec, SupernetConfig};
use kws_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> SupernetConfig {
    SupernetConfig {
        unit_max_depths: vec![2, 2, 1],
        max_width: 16,
        max_kernel: 5,
        kernel_choices: vec![1, 3, 5],
        width_choices: vec![8, 16],
        n_classes: 3,
        input_channels: 8,
        input_len: 32,
    }
}

#[test]
fn folded_network_matches_eval_batch_norm() {
    let cfg = SupernetConfig::default();
    let mut sn = build_supernet(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for l in sn.net.units.iter_mut().flatten() {
        let bn = l.bn.as_mut().unwrap();
        bn.gamma
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.5..1.5));
        bn.beta
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.3..0.3));
        bn.running_mean
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.2..0.2));
        bn.running_var
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.1..2.0));
    }
    let x = Tensor::uniform(&[2, 128, 128], 1.0, &mut rng);
    for _ in 0..5 {
        let net = sn.extract_subnet(&random_spec(&cfg, &mut rng)).unwrap();
        let folded = fold_network(&net).unwrap();
        assert!(!folded.has_bn());
        let a = net.predict(&x, &QuantSpec::default()).unwrap();
        let b = folded.predict(&x, &QuantSpec::default()).unwrap();
        assert!(common::max_abs_diff(a.data(), b.data()) <= 1e-4);
    }
}

#[test]
fn rounding_error_is_at_most_half_a_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0usize;
    while checked < 1_000_000 {
        let magnitude = 10f32.powf(rng.random_range(-4.0..2.0));
        let data: Vec<f32> = (0..10_000)
            .map(|_| rng.random_range(-magnitude..magnitude))
            .collect();
        let p = choose_scale(&data);
        let half = p.scale() / 2.0;
        for &x in &data {
            let err = (p.fake_quantize(x) - x).abs();
            assert!(err <= half, "x={x} e={} err={err}", p.exponent);
        }
        checked += data.len();
    }
}

proptest! {
    #[test]
    fn scale_is_the_smallest_that_fits(m in 1e-6f32..127.0) {
        let p = choose_scale(&[m, -m / 2.0]);
        prop_assert!(m / p.scale() <= 127.0);
        if p.exponent < 15 {
            prop_assert!(m / (p.scale() / 2.0) > 127.0);
        }
    }
}

fn toy_data(cfg: &SupernetConfig, n: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.input_channels * cfg.input_len;
    let labels: Vec<usize> = (0..n).map(|i| i % cfg.n_classes).collect();
    let windows = labels
        .iter()
        .map(|&c| {
            (0..len)
                .map(|t| 0.5 * ((t * (c + 2)) as f32 * 0.21).sin() + rng.random_range(-0.1..0.1))
                .collect()
        })
        .collect();
    LabeledSet::new(windows, labels).unwrap()
}

fn trained(cfg: &SupernetConfig) -> QatOutcome {
    let sn = build_supernet(cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let net = sn.extract_subnet(&random_spec(cfg, &mut rng)).unwrap();
    let data = toy_data(cfg, 30, 7);
    let schedule = QatSchedule {
        epochs: 4,
        qat_start: 2,
        lr: 0.003,
        halve_start: 1,
        halve_every: 1,
        halvings: 2,
        batch_size: 8,
        augment: None,
    };
    qat_train(&net, &data, Some(&data), &[1.0; 3], &schedule, 8, |_| {}).unwrap()
}

#[test]
fn export_reload_is_byte_identical_and_matches_fake_quant() {
    let cfg = small_config();
    let outcome = trained(&cfg);
    assert!(outcome.is_quantized());
    let model = export_int8(&outcome, &cfg).unwrap();
    let bytes = write_model(&model).unwrap();
    let back = read_model(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(write_model(&back).unwrap(), bytes);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::uniform(&[4, cfg.input_channels, cfg.input_len], 0.6, &mut rng);
    let int8 = back.predict(&x).unwrap();
    let fake = outcome.net.predict(&x, &outcome.quant_spec()).unwrap();
    assert!(common::max_abs_diff(int8.data(), fake.data()) <= 1e-4);
    assert_eq!(
        model.param_count() as u64,
        common::count_params_by_shapes(&cfg, &model.descriptor.spec, false)
    );
}

#[test]
fn corrupted_model_is_rejected() {
    let cfg = small_config();
    let model = export_int8(&trained(&cfg), &cfg).unwrap();
    let mut bytes = write_model(&model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(read_model(&bytes).is_err());
    assert!(read_model(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn unquantized_network_cannot_be_exported() {
    let cfg = small_config();
    let sn = build_supernet(&cfg, 10).unwrap();
    let outcome = QatOutcome {
        net: sn.extract_subnet(&cfg.max_spec()).unwrap(),
        act_exponents: None,
        logs: vec![],
    };
    assert!(export_int8(&outcome, &cfg).is_err());
    let folded_only = QatOutcome {
        net: fold_network(&outcome.net).unwrap(),
        ..outcome.clone()
    };
    assert!(export_int8(&folded_only, &cfg).is_err());
    let bn_kept = QatOutcome {
        act_exponents: Some(vec![7; 6]),
        ..outcome
    };
    assert!(export_int8(&bn_kept, &cfg).is_err());
}

#[test]
fn schedule_log_follows_the_paper_timeline() {
    let cfg = SupernetConfig {
        unit_max_depths: vec![1],
        max_width: 4,
        max_kernel: 3,
        kernel_choices: vec![3],
        width_choices: vec![4],
        n_classes: 2,
        input_channels: 2,
        input_len: 8,
    };
    let sn = build_supernet(&cfg, 11).unwrap();
    let net = sn.extract_subnet(&cfg.max_spec()).unwrap();
    let data = toy_data(&cfg, 8, 12);
    let schedule = QatSchedule {
        batch_size: 8,
        ..QatSchedule::default()
    };
    let out = qat_train(&net, &data, None, &[1.0; 2], &schedule, 13, |_| {}).unwrap();
    assert_eq!(out.logs.len(), 200);
    let mut cuts = vec![];
    for w in out.logs.windows(2) {
        if w[1].lr != w[0].lr {
            assert_eq!(w[1].lr, w[0].lr / 2.0);
            cuts.push(w[1].epoch);
        }
    }
    assert_eq!(cuts, vec![100, 120, 140, 160, 180]);
    assert_eq!(out.logs[0].lr, 0.001);
    let first_q = out.logs.iter().position(|l| l.quantized).unwrap();
    assert_eq!(first_q, 150);
    assert!(out.logs[150..].iter().all(|l| l.quantized));
}
