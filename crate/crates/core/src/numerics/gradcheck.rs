use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Worst coordinate as (parameter, flat index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` records a scalar loss on the graph it is given. Up to `max_coords`
/// coordinates are drawn uniformly from the flattened parameters in `names`
/// (all of them when there are fewer). The analytic gradient is taken with
/// respect to every listed parameter regardless of trainable flags.
pub fn finite_diff_check<F>(
    params: &ParamStore,
    names: &[&str],
    h: f64,
    max_coords: usize,
    seed: u64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("step h must be positive, got {h}")));
    }
    let analytic = {
        let mut g = Graph::with_all_grads(params);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::no_grad(store);
        let loss = f(&mut g)?;
        g.check_finite()?;
        Ok(g.value(loss).item())
    };

    let base_a = eval(params)?;
    let base_b = eval(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::NonDeterministic(base_a, base_b));
    }

    let mut coords = Vec::new();
    for &name in names {
        let n = params.value(name)?.len();
        coords.extend((0..n).map(|i| (name, i)));
    }
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Partial Fisher-Yates: first `max_coords` entries form the sample.
        for i in 0..max_coords {
            let j = rng.random_range(i..coords.len());
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (name, idx) in coords {
        let orig = work.value(name)?.data()[idx];
        work.value_mut(name)?.data_mut()[idx] = orig + h;
        let up = eval(&work)?;
        work.value_mut(name)?.data_mut()[idx] = orig - h;
        let down = eval(&work)?;
        work.value_mut(name)?.data_mut()[idx] = orig;

        let numeric = (up - down) / (2.0 * h);
        let a = analytic
            .get(name)
            .map(|t| t.data()[idx])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let rel = (a - numeric).abs() / a.abs().max(1e-8);
        report.checked += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((name.to_string(), idx, a, numeric));
        }
    }
    Ok(report)
}
