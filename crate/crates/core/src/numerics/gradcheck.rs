//! Central finite-difference oracle for tape gradients.

use crate::error::Result;
use crate::numerics::rng::Rng;
use crate::numerics::store::ParameterStore;
use crate::numerics::tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// At most this many coordinates are probed per parameter tensor, drawn
    /// without replacement from a stream seeded by `seed`. Tensors with
    /// fewer coordinates are checked exhaustively.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords_per_param: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `name[index]` of the coordinate with the largest error.
    pub worst_name: String,
    pub coords_checked: usize,
    pub passed: bool,
    /// Set when the forward pass produced a non-finite loss.
    pub failure: Option<String>,
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Runs `forward` once on a tape to get analytic gradients, then compares
/// them with central differences.
pub fn check_gradients<F>(
    store: &mut ParameterStore,
    forward: F,
    opts: &GradCheckOptions,
) -> Result<GradReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = forward(&mut tape)?;
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Ok(failed_report(format!("loss is {l}")));
        }
        tape.backward(loss)?
    };
    compare_gradients(store, forward, &analytic, opts)
}

/// Compares externally supplied gradients with central differences of
/// `forward`. Parameter values are restored before returning.
pub fn compare_gradients<F>(
    store: &mut ParameterStore,
    forward: F,
    analytic: &Gradients,
    opts: &GradCheckOptions,
) -> Result<GradReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = forward(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let mut rng = Rng::substream(opts.seed, "gradcheck");
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_name: String::new(),
        coords_checked: 0,
        passed: true,
        failure: None,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let len = store.value(id).len();
        let mut coords: Vec<usize> = (0..len).collect();
        if len > opts.max_coords_per_param {
            rng.shuffle(&mut coords);
            coords.truncate(opts.max_coords_per_param);
            coords.sort_unstable();
        }
        for k in coords {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + opts.step;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - opts.step;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;

            let name = format!("{}[{k}]", store.name(id));
            if !plus.is_finite() || !minus.is_finite() {
                report.passed = false;
                report.failure = Some(format!("non-finite loss while perturbing {name}"));
                report.worst_name = name;
                report.max_rel_err = f64::INFINITY;
                return Ok(report);
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            if !a.is_finite() {
                report.passed = false;
                report.failure = Some(format!("non-finite analytic gradient at {name}"));
                report.worst_name = name;
                report.max_rel_err = f64::INFINITY;
                return Ok(report);
            }
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_name = name;
            }
        }
    }
    report.passed = report.max_rel_err < opts.tolerance;
    Ok(report)
}

fn failed_report(msg: String) -> GradReport {
    GradReport {
        max_rel_err: f64::INFINITY,
        worst_name: String::new(),
        coords_checked: 0,
        passed: false,
        failure: Some(msg),
    }
}
