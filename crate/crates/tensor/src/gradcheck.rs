use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_relative_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Coordinates whose stencil crosses a min/max/clamp switch.
    pub skipped: Vec<usize>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.analytic.len() - self.skipped.len()
    }
}

/// Checks the gradient of a scalar function of `x` in `f64`.
///
/// `f` rebuilds the graph on a fresh tape from the variable bound to `x`. A
/// coordinate is skipped when evaluating at `x ± h` selects a different
/// argmin/argmax (or clamp region) than at `x`; if every coordinate is
/// skipped the result is [`TensorError::TiedExtremum`].
pub fn grad_check<F, E>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |point: Tensor<f64>| -> Result<(f64, Vec<usize>), E> {
        let mut tape = Tape::new();
        let v = tape.leaf(point.requiring_grad());
        let out = f(&mut tape, v)?;
        if tape.value(out).len() != 1 {
            return Err(TensorError::NotScalar(tape.shape(out).to_vec()).into());
        }
        Ok((tape.item(out), tape.extremum_signature()))
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().requiring_grad());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let base_sig = tape.extremum_signature();
    let analytic = tape
        .grad(v)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut numeric = vec![0.0; x.numel()];
    let mut skipped = Vec::new();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (fp, sp) = eval(plus)?;
        let (fm, sm) = eval(minus)?;
        numeric[i] = (fp - fm) / (2.0 * h);
        if sp != base_sig || sm != base_sig {
            skipped.push(i);
            continue;
        }
        let err = (analytic[i] - numeric[i]).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    if !skipped.is_empty() && skipped.len() == x.numel() {
        return Err(TensorError::TiedExtremum { coords: skipped }.into());
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        analytic,
        numeric,
        skipped,
    })
}
