use kws_core::cost::spec_cost;
use kws_core::data::LabeledSet;
use kws_core::search::{
    crossover, evolutionary_search, mutate, random_feasible, Constraint, Fitness, SearchConfig,
    SearchSpace, SupernetFitness,
};
use kws_core::supernet::{build_supernet, random_spec, SubnetSpec, SupernetConfig};
use kws_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rewards large kernels and an odd mix of widths, so the optimum is not at
/// either corner of the space.
struct Landscape;

impl Fitness for Landscape {
    fn fitness(&self, spec: &SubnetSpec) -> Result<f64> {
        let s: f64 = spec
            .layers()
            .enumerate()
            .map(|(i, l)| {
                l.kernel as f64
                    * if i % 2 == 0 {
                        l.width as f64
                    } else {
                        160.0 - l.width as f64
                    }
            })
            .sum();
        Ok(s / 10_000.0)
    }
}

#[test]
fn twenty_generations_are_monotone_and_feasible() {
    let cfg = SupernetConfig::default();
    let constraint = Constraint::default();
    let search = SearchConfig {
        population: 32,
        generations: 20,
        seed: 4,
        ..SearchConfig::default()
    };
    let r = evolutionary_search(&cfg, &Landscape, &constraint, &search, |_| {}).unwrap();
    assert_eq!(r.history.len(), 21);
    assert!(r
        .history
        .windows(2)
        .all(|w| w[1].best_fitness >= w[0].best_fitness));
    assert!(r.history.last().unwrap().best_fitness > r.history[0].best_fitness);
    assert_eq!(r.audit.len(), 32 + 20 * (32 - 8));
    for a in &r.audit {
        assert!(a.feasible);
        assert_eq!(a.cost, spec_cost(&cfg, &a.spec, 8));
        assert!(a.cost.param_bytes <= constraint.max_weight_bytes);
    }
    assert!(r.best.cost.param_bytes <= 442_368);
}

#[test]
fn mutation_changes_genes_at_the_expected_rate() {
    let cfg = SupernetConfig::default();
    let space = SearchSpace::new(&cfg, &Constraint::unbounded()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = 0.1;
    let (mut k_changed, mut w_changed, mut d_changed) = (0usize, 0usize, 0usize);
    let (mut k_total, mut d_total) = (0usize, 0usize);
    for _ in 0..20_000 {
        let parent = random_spec(&cfg, &mut rng);
        let child = mutate(&space, &parent, p, &mut rng);
        child.validate(&cfg).unwrap();
        for (a, b) in parent.units.iter().zip(&child.units) {
            d_total += 1;
            d_changed += (a.len() != b.len()) as usize;
            for (x, y) in a.iter().zip(b) {
                k_total += 1;
                k_changed += (x.kernel != y.kernel) as usize;
                w_changed += (x.width != y.width) as usize;
            }
        }
    }
    let close = |got: usize, total: usize, want: f64| {
        let rate = got as f64 / total as f64;
        assert!((rate - want).abs() <= 0.1 * want, "rate {rate} vs {want}");
    };
    close(k_changed, k_total, p * (1.0 - 1.0 / 3.0));
    close(w_changed, k_total, p * (1.0 - 1.0 / 4.0));
    // four units of depth 2 and two of depth 3
    close(
        d_changed,
        d_total,
        p * (4.0 * 0.5 + 2.0 * (2.0 / 3.0)) / 6.0,
    );
}

#[test]
fn crossover_children_are_valid_and_inherit() {
    let cfg = SupernetConfig::default();
    let space = SearchSpace::new(&cfg, &Constraint::unbounded()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10_000 {
        let a = random_spec(&cfg, &mut rng);
        let b = random_spec(&cfg, &mut rng);
        let c = crossover(&space, &a, &b, &mut rng);
        c.validate(&cfg).unwrap();
        for (u, layers) in c.units.iter().enumerate() {
            assert!(layers.len() == a.units[u].len() || layers.len() == b.units[u].len());
            for (j, l) in layers.iter().enumerate() {
                let from = [a.units[u].get(j), b.units[u].get(j)];
                assert!(from.iter().flatten().any(|p| p.kernel == l.kernel));
                assert!(from.iter().flatten().any(|p| p.width == l.width));
            }
        }
    }
}

#[test]
fn restricted_choice_sets_are_honored() {
    let cfg = SupernetConfig::default();
    let constraint = Constraint {
        allowed_kernels: Some(vec![3]),
        allowed_widths: Some(vec![32, 64]),
        max_macs: Some(20_000_000),
        ..Constraint::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let c = random_feasible(&cfg, &constraint, &mut rng).unwrap();
        assert!(c.spec.layers().all(|l| l.kernel == 3 && l.width <= 64));
        assert!(c.cost.macs <= 20_000_000);
    }
    let tight = Constraint {
        max_weight_bytes: 10,
        ..Constraint::default()
    };
    assert!(random_feasible(&cfg, &tight, &mut rng).is_err());
}

fn tiny() -> (SupernetConfig, LabeledSet) {
    let cfg = SupernetConfig {
        unit_max_depths: vec![2, 2],
        max_width: 8,
        max_kernel: 5,
        kernel_choices: vec![1, 3, 5],
        width_choices: vec![4, 8],
        n_classes: 3,
        input_channels: 4,
        input_len: 16,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let windows = labels
        .iter()
        .map(|&c| {
            (0..64)
                .map(|t| ((t * (c + 1)) as f32 * 0.4).cos() + rng.random_range(-0.5..0.5))
                .collect()
        })
        .collect();
    (cfg, LabeledSet::new(windows, labels).unwrap())
}

#[test]
fn replay_under_a_fixed_seed_is_identical() {
    let (cfg, data) = tiny();
    let sn = build_supernet(&cfg, 9).unwrap();
    let search = SearchConfig {
        population: 8,
        generations: 4,
        seed: 10,
        eval_samples: 40,
        calib_batches: 2,
        calib_batch_size: 16,
        ..SearchConfig::default()
    };
    let run = || {
        let fitness = SupernetFitness::new(&sn, &data, &data, &search).unwrap();
        let r =
            evolutionary_search(&cfg, &fitness, &Constraint::unbounded(), &search, |_| {}).unwrap();
        serde_json::to_string(&r).unwrap()
    };
    let first = run();
    assert_eq!(first, run());
    let other = SearchConfig {
        seed: 11,
        ..search.clone()
    };
    let fitness = SupernetFitness::new(&sn, &data, &data, &other).unwrap();
    let r = evolutionary_search(&cfg, &fitness, &Constraint::unbounded(), &other, |_| {}).unwrap();
    assert_ne!(serde_json::to_string(&r).unwrap(), first);
}
