//! Central-difference verification of tape gradients.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Largest relative disagreement between the tape gradient and central
/// differences, over every coordinate of every input.
///
/// `f` receives one leaf per entry of `points` and must build a
/// one-element output from them. It is evaluated once for the analytic
/// gradient and twice per coordinate for the numeric one, so it has to be
/// deterministic.
pub fn grad_check_many<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for i in 0..points[pi].numel() {
            let orig = points[pi].data()[i];
            work[pi] = with_coord(&points[pi], i, orig + h);
            let up = eval(&work)?;
            work[pi] = with_coord(&points[pi], i, orig - h);
            let down = eval(&work)?;
            work[pi] = points[pi].clone();
            let numeric = (up - down) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::NonFinite("grad_check".into()));
            }
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), h)
}

fn with_coord(t: &Tensor, i: usize, v: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[i] = v;
    Tensor::from_parts(t.shape().to_vec(), data)
}
