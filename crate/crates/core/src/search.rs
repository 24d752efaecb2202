//! Elitist evolutionary search over subnet specs under accelerator limits.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{spec_cost, SpecCost};
use crate::data::{evaluate, LabeledSet};
use crate::error::{Error, Result};
use crate::supernet::{LayerChoice, QuantSpec, SubnetSpec, Supernet, SupernetConfig};
use crate::tensor::Tensor;

/// Rejection-sampling budget of [`random_feasible`] and of each offspring.
pub const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Constraint {
    pub max_weight_bytes: u64,
    pub max_macs: Option<u64>,
    /// Subsets of the supernet's choice sets; `None` allows all of them.
    pub allowed_kernels: Option<Vec<usize>>,
    pub allowed_widths: Option<Vec<usize>>,
    pub bits: u32,
}

impl Default for Constraint {
    fn default() -> Self {
        Constraint {
            max_weight_bytes: 442_368,
            max_macs: None,
            allowed_kernels: None,
            allowed_widths: None,
            bits: 8,
        }
    }
}

impl Constraint {
    /// No bounds at all.
    pub fn unbounded() -> Self {
        Constraint {
            max_weight_bytes: u64::MAX,
            ..Constraint::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_weight_bytes == 0 || self.max_macs == Some(0) {
            return Err(Error::Config("constraint bounds must be positive".into()));
        }
        if !(1..=32).contains(&self.bits) {
            return Err(Error::Config(format!("bits {} outside 1..=32", self.bits)));
        }
        for list in [&self.allowed_kernels, &self.allowed_widths]
            .into_iter()
            .flatten()
        {
            if list.is_empty() || list.contains(&0) {
                return Err(Error::Config(
                    "allowed value lists must be non-empty and positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn admits(&self, cost: &SpecCost, spec: &SubnetSpec) -> bool {
        let in_list =
            |list: &Option<Vec<usize>>, v: usize| list.as_ref().is_none_or(|l| l.contains(&v));
        cost.param_bytes <= self.max_weight_bytes
            && self.max_macs.is_none_or(|m| cost.macs <= m)
            && spec.layers().all(|l| {
                in_list(&self.allowed_kernels, l.kernel) && in_list(&self.allowed_widths, l.width)
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub spec: SubnetSpec,
    pub fitness: Option<f64>,
    pub cost: SpecCost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    pub parent_fraction: f64,
    /// Per-gene resampling probability.
    pub mutation_prob: f64,
    /// Share of offspring made by mutation; the rest come from crossover.
    pub mutation_share: f64,
    pub seed: u64,
    /// Size of the fixed validation subset used as fitness.
    pub eval_samples: usize,
    pub calib_batches: usize,
    pub calib_batch_size: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population: 64,
            generations: 20,
            parent_fraction: 0.25,
            mutation_prob: 0.1,
            mutation_share: 0.5,
            seed: 0,
            eval_samples: 1024,
            calib_batches: 4,
            calib_batch_size: 64,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 || !self.population.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "population {} must be even and at least 2",
                self.population
            )));
        }
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.parent_fraction) || !open(self.mutation_share) {
            return Err(Error::Config(
                "parent fraction and mutation share must lie in (0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return Err(Error::Config(
                "mutation probability must lie in [0, 1]".into(),
            ));
        }
        if self.eval_samples == 0 || self.calib_batches == 0 || self.calib_batch_size == 0 {
            return Err(Error::Config(
                "evaluation and calibration sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Choice sets after intersecting the supernet's with the constraint's.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    pub unit_max_depths: Vec<usize>,
    pub kernels: Vec<usize>,
    pub widths: Vec<usize>,
}

impl SearchSpace {
    pub fn new(cfg: &SupernetConfig, constraint: &Constraint) -> Result<Self> {
        let keep = |choices: &[usize], allowed: &Option<Vec<usize>>| -> Vec<usize> {
            choices
                .iter()
                .copied()
                .filter(|v| allowed.as_ref().is_none_or(|a| a.contains(v)))
                .collect()
        };
        let kernels = keep(&cfg.kernel_choices, &constraint.allowed_kernels);
        let widths = keep(&cfg.width_choices, &constraint.allowed_widths);
        if kernels.is_empty() || widths.is_empty() {
            return Err(Error::Infeasible(
                "no allowed kernel or width among the supernet's choices".into(),
            ));
        }
        Ok(SearchSpace {
            unit_max_depths: cfg.unit_max_depths.clone(),
            kernels,
            widths,
        })
    }

    fn layer<R: Rng + ?Sized>(&self, rng: &mut R) -> LayerChoice {
        LayerChoice {
            kernel: *self.kernels.choose(rng).unwrap(),
            width: *self.widths.choose(rng).unwrap(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SubnetSpec {
        let units = self
            .unit_max_depths
            .iter()
            .map(|&max_d| {
                let d = rng.random_range(1..=max_d);
                (0..d).map(|_| self.layer(rng)).collect()
            })
            .collect();
        SubnetSpec { units }
    }
}

/// Rejection-samples a spec that satisfies `constraint`.
pub fn random_feasible<R: Rng + ?Sized>(
    cfg: &SupernetConfig,
    constraint: &Constraint,
    rng: &mut R,
) -> Result<Candidate> {
    let space = SearchSpace::new(cfg, constraint)?;
    for _ in 0..MAX_ATTEMPTS {
        let spec = space.sample(rng);
        let cost = spec_cost(cfg, &spec, constraint.bits);
        if constraint.admits(&cost, &spec) {
            return Ok(Candidate {
                spec,
                fitness: None,
                cost,
            });
        }
    }
    Err(Error::Infeasible(format!(
        "no spec met the constraint in {MAX_ATTEMPTS} draws"
    )))
}

/// Resamples every gene (unit depth, layer kernel, layer width) with
/// probability `p`. Layers added by a deeper unit are drawn fresh.
pub fn mutate<R: Rng + ?Sized>(
    space: &SearchSpace,
    spec: &SubnetSpec,
    p: f64,
    rng: &mut R,
) -> SubnetSpec {
    let units = spec
        .units
        .iter()
        .zip(&space.unit_max_depths)
        .map(|(layers, &max_d)| {
            let depth = if rng.random_bool(p) {
                rng.random_range(1..=max_d)
            } else {
                layers.len()
            };
            (0..depth)
                .map(|j| match layers.get(j) {
                    Some(&l) => LayerChoice {
                        kernel: if rng.random_bool(p) {
                            *space.kernels.choose(rng).unwrap()
                        } else {
                            l.kernel
                        },
                        width: if rng.random_bool(p) {
                            *space.widths.choose(rng).unwrap()
                        } else {
                            l.width
                        },
                    },
                    None => space.layer(rng),
                })
                .collect()
        })
        .collect();
    SubnetSpec { units }
}

/// Uniform per-gene inheritance. The unit depth comes from one parent first;
/// each layer gene then comes from either parent when both have that layer,
/// otherwise from the one that does.
pub fn crossover<R: Rng + ?Sized>(
    space: &SearchSpace,
    a: &SubnetSpec,
    b: &SubnetSpec,
    rng: &mut R,
) -> SubnetSpec {
    let units = a
        .units
        .iter()
        .zip(&b.units)
        .map(|(la, lb)| {
            let depth = if rng.random_bool(0.5) {
                la.len()
            } else {
                lb.len()
            };
            (0..depth)
                .map(|j| match (la.get(j), lb.get(j)) {
                    (Some(x), Some(y)) => LayerChoice {
                        kernel: if rng.random_bool(0.5) {
                            x.kernel
                        } else {
                            y.kernel
                        },
                        width: if rng.random_bool(0.5) {
                            x.width
                        } else {
                            y.width
                        },
                    },
                    (Some(&x), None) | (None, Some(&x)) => x,
                    (None, None) => space.layer(rng),
                })
                .collect()
        })
        .collect();
    SubnetSpec { units }
}

/// Scores a spec; higher is better.
pub trait Fitness: Sync {
    fn fitness(&self, spec: &SubnetSpec) -> Result<f64>;
}

/// Extract the subnet, re-estimate its batch-norm statistics on calibration
/// batches, and measure eval-mode accuracy on a fixed validation subset.
pub struct SupernetFitness<'a> {
    pub supernet: &'a Supernet,
    pub val: LabeledSet,
    pub calibration: Vec<Tensor>,
    /// Indices of `val` within the full validation set.
    pub val_indices: Vec<usize>,
}

/// `k` sorted indices of `0..n` chosen by a seeded shuffle (all of them when
/// `k ≥ n`).
pub fn fixed_subset(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

impl<'a> SupernetFitness<'a> {
    pub fn new(
        supernet: &'a Supernet,
        train: &LabeledSet,
        val: &LabeledSet,
        cfg: &SearchConfig,
    ) -> Result<Self> {
        if val.is_empty() {
            return Err(Error::invalid("validation set is empty"));
        }
        if train.is_empty() {
            return Err(Error::invalid("calibration needs training examples"));
        }
        let val_indices = fixed_subset(val.len(), cfg.eval_samples, cfg.seed ^ 0x5EED_0001);
        let calib_idx = fixed_subset(
            train.len(),
            cfg.calib_batches * cfg.calib_batch_size,
            cfg.seed ^ 0x5EED_0002,
        );
        let (c, l) = (supernet.config.input_channels, supernet.config.input_len);
        let calibration = calib_idx
            .chunks(cfg.calib_batch_size)
            .map(|chunk| train.batch(chunk, c, l, None).map(|b| b.0))
            .collect::<Result<_>>()?;
        log::debug!("fitness subset: {val_indices:?}");
        Ok(SupernetFitness {
            supernet,
            val: val.subset(&val_indices),
            calibration,
            val_indices,
        })
    }
}

impl Fitness for SupernetFitness<'_> {
    fn fitness(&self, spec: &SubnetSpec) -> Result<f64> {
        let mut net = self.supernet.extract_subnet(spec)?;
        net.recalibrate_bn(&self.calibration)?;
        Ok(evaluate(&net, &self.val, &QuantSpec::default(), 256)?.accuracy)
    }
}

/// Memoizing wrapper: each distinct spec is scored once.
pub struct Memo<'f, F: Fitness> {
    inner: &'f F,
    table: Mutex<HashMap<SubnetSpec, f64>>,
}

impl<'f, F: Fitness> Memo<'f, F> {
    pub fn new(inner: &'f F) -> Self {
        Memo {
            inner,
            table: Mutex::new(HashMap::new()),
        }
    }

    pub fn distinct(&self) -> usize {
        self.table.lock().unwrap().len()
    }

    /// Scores all specs, computing unseen ones in parallel.
    pub fn score(&self, specs: &[&SubnetSpec]) -> Result<Vec<f64>> {
        let mut todo: Vec<&SubnetSpec> = {
            let table = self.table.lock().unwrap();
            specs
                .iter()
                .copied()
                .filter(|s| !table.contains_key(*s))
                .collect()
        };
        todo.sort_by_key(|s| serde_json::to_string(s).unwrap_or_default());
        todo.dedup();
        let fresh: Vec<(SubnetSpec, f64)> = todo
            .par_iter()
            .map(|s| self.inner.fitness(s).map(|f| ((*s).clone(), f)))
            .collect::<Result<_>>()?;
        let mut table = self.table.lock().unwrap();
        for (s, f) in fresh {
            table.entry(s).or_insert(f);
        }
        Ok(specs.iter().map(|s| table[*s]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_fitness: f64,
    pub best_spec: SubnetSpec,
    pub population_mean_fitness: f64,
    pub evaluations_so_far: usize,
}

/// One population insertion with the cost it was admitted at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub generation: usize,
    pub spec: SubnetSpec,
    pub cost: SpecCost,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Candidate,
    /// Generation 0 is the random initial population.
    pub history: Vec<GenerationRecord>,
    pub audit: Vec<AuditEntry>,
    pub evaluations: usize,
}

fn offspring<R: Rng + ?Sized>(
    cfg: &SupernetConfig,
    space: &SearchSpace,
    constraint: &Constraint,
    search: &SearchConfig,
    parents: &[Candidate],
    rng: &mut R,
) -> Result<Candidate> {
    for _ in 0..MAX_ATTEMPTS {
        let spec = if rng.random_bool(search.mutation_share) {
            let p = parents.choose(rng).unwrap();
            mutate(space, &p.spec, search.mutation_prob, rng)
        } else {
            let a = parents.choose(rng).unwrap();
            let b = parents.choose(rng).unwrap();
            crossover(space, &a.spec, &b.spec, rng)
        };
        let cost = spec_cost(cfg, &spec, constraint.bits);
        if constraint.admits(&cost, &spec) {
            return Ok(Candidate {
                spec,
                fitness: None,
                cost,
            });
        }
    }
    random_feasible(cfg, constraint, rng)
}

fn record(
    generation: usize,
    pop: &[Candidate],
    best: &Candidate,
    evaluations: usize,
) -> GenerationRecord {
    let mean = pop.iter().map(|c| c.fitness.unwrap_or(0.0)).sum::<f64>() / pop.len() as f64;
    GenerationRecord {
        generation,
        best_fitness: best.fitness.unwrap_or(0.0),
        best_spec: best.spec.clone(),
        population_mean_fitness: mean,
        evaluations_so_far: evaluations,
    }
}

/// Elitist search: each generation keeps the top parent fraction and refills
/// the population with feasible mutations and crossovers of the parents.
/// `on_generation` sees every history record as it is produced.
pub fn evolutionary_search<F: Fitness>(
    cfg: &SupernetConfig,
    fitness: &F,
    constraint: &Constraint,
    search: &SearchConfig,
    mut on_generation: impl FnMut(&GenerationRecord),
) -> Result<SearchResult> {
    search.validate()?;
    constraint.validate()?;
    let space = SearchSpace::new(cfg, constraint)?;
    let memo = Memo::new(fitness);
    let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
    let mut audit = Vec::new();
    let admit = |audit: &mut Vec<AuditEntry>, generation: usize, c: &Candidate| {
        audit.push(AuditEntry {
            generation,
            spec: c.spec.clone(),
            cost: c.cost,
            feasible: constraint.admits(&c.cost, &c.spec),
        });
    };

    let mut pop = Vec::with_capacity(search.population);
    for _ in 0..search.population {
        let c = random_feasible(cfg, constraint, &mut rng)?;
        admit(&mut audit, 0, &c);
        pop.push(c);
    }
    let score = |pop: &mut Vec<Candidate>| -> Result<()> {
        let specs: Vec<&SubnetSpec> = pop.iter().map(|c| &c.spec).collect();
        let f = memo.score(&specs)?;
        pop.iter_mut().zip(f).for_each(|(c, f)| c.fitness = Some(f));
        // stable: equal fitness keeps insertion order
        pop.sort_by(|a, b| {
            b.fitness
                .partial_cmp(&a.fitness)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        Ok(())
    };
    score(&mut pop)?;
    let mut best = pop[0].clone();
    let mut history = vec![record(0, &pop, &best, memo.distinct())];
    on_generation(&history[0]);

    let n_parents = ((search.population as f64 * search.parent_fraction).ceil() as usize)
        .clamp(1, search.population);
    for generation in 1..=search.generations {
        let parents: Vec<Candidate> = pop[..n_parents].to_vec();
        let mut next = parents.clone();
        while next.len() < search.population {
            let c = offspring(cfg, &space, constraint, search, &parents, &mut rng)?;
            admit(&mut audit, generation, &c);
            next.push(c);
        }
        pop = next;
        score(&mut pop)?;
        if pop[0].fitness > best.fitness {
            best = pop[0].clone();
        }
        let r = record(generation, &pop, &best, memo.distinct());
        on_generation(&r);
        history.push(r);
    }
    log::info!(
        "search done: best fitness {:.4}, {} params, {} evaluations",
        best.fitness.unwrap_or(0.0),
        best.cost.params,
        memo.distinct()
    );
    Ok(SearchResult {
        best,
        history,
        audit,
        evaluations: memo.distinct(),
    })
}
