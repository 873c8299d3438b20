//! Central finite-difference checks for anything built on [`Tape`].
//!
//! The numeric side only ever evaluates forward passes, so it shares no code
//! with the analytic backward pass it is checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Matrix, ParamId, ParameterStore};

pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this in magnitude are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinate with the worst error, as (label, analytic, numeric).
    pub worst: Option<(String, f64, f64)>,
}

impl GradReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((label(), analytic, numeric));
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks d(loss)/d(input) for every element of every input matrix.
pub fn check_inputs<F>(inputs: &[Matrix], build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let empty = ParameterStore::new();
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new(&empty);
        let vars: Vec<Var> = values.iter().map(|m| tape.input(m.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let mut tape = Tape::new(&empty);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|m| tape.input_with_grad(m.clone()))
        .collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradReport::default();
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = Matrix::zeros(inputs[i].raw_dim());
        let analytic = grads.wrt(*var).unwrap_or(&zeros).clone();
        for idx in 0..inputs[i].len() {
            let (r, c) = (idx / inputs[i].ncols(), idx % inputs[i].ncols());
            let orig = work[i][[r, c]];
            work[i][[r, c]] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i][[r, c]] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i][[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.record(|| format!("input{i}[{r},{c}]"), analytic[[r, c]], numeric);
        }
    }
    Ok(report)
}

/// Checks d(loss)/d(theta) for parameters of `store`.
///
/// When the store holds more than `max_coords` scalars, a seeded uniform
/// sample of `max_coords` coordinates is checked instead of all of them.
pub fn check_params<F>(
    store: &ParameterStore,
    max_coords: usize,
    seed: u64,
    build: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape)?;
        let grads = tape.backward(loss)?;
        let mut per_param: Vec<Matrix> = store
            .ids()
            .map(|id| Matrix::zeros(store.value(id).raw_dim()))
            .collect();
        for (id, g) in grads.params() {
            per_param[id.index()] = g.clone();
        }
        per_param
    };

    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.value(id).len()).map(move |k| (id, k)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = sample(&mut rng, coords.len(), max_coords).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut work = store.clone();
    let eval = |work: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new(work);
        let loss = build(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut report = GradReport::default();
    for ci in chosen {
        let (id, k) = coords[ci];
        let cols = store.value(id).ncols();
        let (r, c) = (k / cols, k % cols);
        let orig = store.value(id)[[r, c]];
        work.value_mut(id)[[r, c]] = orig + FD_STEP;
        let plus = eval(&work)?;
        work.value_mut(id)[[r, c]] = orig - FD_STEP;
        let minus = eval(&work)?;
        work.value_mut(id)[[r, c]] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        report.record(
            || format!("{}[{r},{c}]", store.name(id)),
            analytic[id.index()][[r, c]],
            numeric,
        );
    }
    Ok(report)
}
