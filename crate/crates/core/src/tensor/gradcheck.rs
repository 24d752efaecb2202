use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const STEP: f32 = 2e-2;
const ABS_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// `|analytic − numeric| / max(|analytic|, |numeric|, floor/tolerance)`.
    pub max_rel_error: f64,
    /// `(input, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// Compares tape gradients of `op` with Richardson-extrapolated central
/// differences, `(4·D(h/2) − D(h)) / 3` with `h = 2e-2`. The large step keeps
/// f32 round-off out of the quotient; extrapolation cancels the `h²` term.
///
/// Non-scalar outputs are reduced with a random projection `Σ r_i·y_i`
/// evaluated in f64, so unaffected outputs cancel exactly between the two
/// perturbed evaluations. Coordinates are drawn uniformly from the inputs
/// whose `requires_grad` is set. A coordinate passes when its error is below
/// `tolerance` relative to the larger magnitude, or below 1e-4 absolute.
pub fn finite_diff_check<F>(
    op: F,
    inputs: &[Tensor],
    coords: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = op(&mut tape, &vars)?;
    let proj: Vec<f32> = (0..tape.value(out).len())
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    tape.backward_with(out, proj.clone())?;

    let trainable: Vec<usize> = (0..inputs.len())
        .filter(|&i| inputs[i].requires_grad())
        .collect();
    if trainable.is_empty() {
        return Err(Error::invalid(
            "finite_diff_check needs at least one input requiring grad",
        ));
    }
    let analytic: Vec<Vec<f32>> = trainable
        .iter()
        .map(|&i| {
            tape.grad(vars[i])
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[i].len()])
        })
        .collect();
    let total: usize = trainable.iter().map(|&i| inputs[i].len()).sum();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.constant(p.clone())).collect();
        let y = op(&mut t, &vs)?;
        Ok(t.data(y)
            .iter()
            .zip(&proj)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    };

    let floor = ABS_FLOOR / tolerance;
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for _ in 0..coords {
        let mut flat = rng.random_range(0..total);
        let mut slot = 0;
        while flat >= inputs[trainable[slot]].len() {
            flat -= inputs[trainable[slot]].len();
            slot += 1;
        }
        let input = trainable[slot];
        let x0 = inputs[input].data()[flat];
        let mut central = |h: f32| -> Result<f64> {
            let (xp, xm) = (x0 + h, x0 - h);
            work[input].data_mut()[flat] = xp;
            let fp = eval(&work)?;
            work[input].data_mut()[flat] = xm;
            let fm = eval(&work)?;
            work[input].data_mut()[flat] = x0;
            Ok((fp - fm) / (xp as f64 - xm as f64))
        };
        let coarse = central(STEP)?;
        let fine = central(STEP / 2.0)?;
        let numeric = (4.0 * fine - coarse) / 3.0;
        let a = analytic[slot][flat] as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if !(rel < tolerance) {
            report.failures += 1;
        }
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some((input, flat, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4])
            .unwrap()
            .with_grad();
        let ok = finite_diff_check(
            |t, v| Ok(t.scale(v[0], 2.0)),
            std::slice::from_ref(&x),
            20,
            1e-3,
            1,
        )
        .unwrap();
        assert!(ok.passed(), "{ok:?}");

        // fake_quantize has a straight-through gradient that disagrees with
        // finite differences on a flat step
        let bad = finite_diff_check(
            |t, v| t.fake_quantize(v[0], 1.0, -128.0, 127.0),
            &[x],
            20,
            1e-3,
            1,
        )
        .unwrap();
        assert!(!bad.passed());
    }
}
