//! Virtual adversarial training.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::losses::PROB_FLOOR;
use crate::model::{self, Params, ParamVars};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VatConfig {
    /// Scale of the probe perturbation used in power iteration.
    pub xi: f64,
    /// Radius of the adversarial perturbation.
    pub epsilon: f64,
    pub power_iterations: usize,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self {
            xi: 1e-6,
            epsilon: 1.0,
            power_iterations: 1,
        }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0) {
            return Err(invalid("VAT xi must be positive"));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(invalid("VAT epsilon must be non-negative"));
        }
        if self.power_iterations == 0 {
            return Err(invalid("VAT needs at least one power iteration"));
        }
        Ok(())
    }
}

/// Mean over rows of `KL(p_i ‖ q_i)` for constant `p`.
pub fn kl_to_fixed(tape: &mut Tape, p: &Tensor, q: Var) -> Result<Var> {
    let n = p.rows() as f64;
    let log_p = p.map(|v| v.max(PROB_FLOOR).ln())?;
    let pv = tape.constant(p.clone());
    let lp = tape.constant(log_p);
    let qc = tape.clamp_min(q, PROB_FLOOR)?;
    let lq = tape.log(qc)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(pv, diff)?;
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / n)
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    t.row_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Per-sample gradient of `KL(clean ‖ f(x + r))` with respect to `r`.
fn kl_input_gradient(
    params: &Params,
    x: &Tensor,
    clean: &Tensor,
    r: &Tensor,
    leaky_slope: f64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = params.as_constants(&mut tape);
    let xv = tape.constant(x.clone());
    let rv = tape.leaf(r.clone());
    let xr = tape.add(xv, rv)?;
    let q = model::predict_probs(&mut tape, &pv, xr, leaky_slope)?;
    let kl = kl_to_fixed(&mut tape, clean, q)?;
    Ok(tape.backward(kl)?.wrt(rv))
}

/// Adversarial direction of radius `epsilon` for every row of `x`.
///
/// Starts from `r ~ N(0, ξ/√d)` and runs power iteration on the KL
/// curvature. A row whose gradient vanishes falls back to its starting
/// direction.
pub fn vat_perturbation(
    params: &Params,
    x: &Tensor,
    cfg: &VatConfig,
    leaky_slope: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    let (n, d) = (x.rows(), x.cols());
    let normal = Normal::new(0.0, cfg.xi / (d as f64).sqrt()).map_err(|e| invalid(e.to_string()))?;
    let start: Vec<f64> = (0..n * d).map(|_| normal.sample(rng)).collect();
    let start = Tensor::from_parts(vec![n, d], start);
    let clean = model::probs(params, x, leaky_slope)?;

    let mut r = start.clone();
    let mut g = Tensor::zeros(&[n, d]);
    for _ in 0..cfg.power_iterations {
        g = kl_input_gradient(params, x, &clean, &r, leaky_slope)?;
        r = rescale_rows(&g, &r, cfg.xi);
    }
    Ok(rescale_rows(&g, &start, cfg.epsilon))
}

/// Each row of `dir` scaled to `radius`; rows with zero norm use `fallback`.
fn rescale_rows(dir: &Tensor, fallback: &Tensor, radius: f64) -> Tensor {
    let d = dir.cols();
    let norms = row_norms(dir);
    let fb_norms = row_norms(fallback);
    let mut out = Vec::with_capacity(dir.numel());
    for (i, (&nrm, &fnrm)) in norms.iter().zip(&fb_norms).enumerate() {
        let (src, len) = if nrm > 0.0 && nrm.is_finite() {
            (dir.row(i), nrm)
        } else {
            (fallback.row(i), fnrm)
        };
        if len > 0.0 {
            out.extend(src.iter().map(|v| radius * v / len));
        } else {
            out.extend(std::iter::repeat_n(0.0, d));
        }
    }
    Tensor::from_parts(dir.shape().to_vec(), out)
}

/// `mean KL(stop_grad f(x) ‖ f(x + r_adv))` given a fixed perturbation and
/// fixed clean probabilities.
pub fn vat_loss_with_perturbation(
    tape: &mut Tape,
    params: &ParamVars,
    x: &Tensor,
    r_adv: &Tensor,
    clean: &Tensor,
    leaky_slope: f64,
) -> Result<Var> {
    let xa = x.zip_map(r_adv, |a, b| a + b)?;
    let xv = tape.constant(xa);
    let q = model::predict_probs(tape, params, xv, leaky_slope)?;
    kl_to_fixed(tape, clean, q)
}

/// Draws `r_adv` and records the VAT consistency loss. Gradient only flows
/// through the perturbed branch.
pub fn vat_loss(
    tape: &mut Tape,
    params: &Params,
    param_vars: &ParamVars,
    x: &Tensor,
    cfg: &VatConfig,
    leaky_slope: f64,
    rng: &mut impl Rng,
) -> Result<Var> {
    let r_adv = vat_perturbation(params, x, cfg, leaky_slope, rng)?;
    let clean = model::probs(params, x, leaky_slope)?;
    vat_loss_with_perturbation(tape, param_vars, x, &r_adv, &clean, leaky_slope)
}
