//! Loss terms, all built on the tape so they can be differentiated.
//!
//! Inputs named `mu` are row-stochastic `n×K` probability matrices.

mod combined;
mod vat;

pub use combined::{
    combined_objective, objective_with_targets, prepare_targets, Breakdown, NegativeStrategy,
    LabeledPool, ObjectiveConfig, PreparedTargets, UnsupervisedTerms, select_negatives,
};
pub use vat::{kl_to_fixed, vat_loss, vat_loss_with_perturbation, vat_perturbation, VatConfig};

use crate::diffcore::{argmax, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::negselect::NegativeLabelMask;

/// Floor applied to probabilities before taking a log in CE-style terms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Floor applied to `1 - Σ masked μ` inside the negative-sampling loss.
pub const NS3L_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Negative-sampling term.
    pub lambda1: f64,
    /// VAT or Π-model consistency term.
    pub lambda2: f64,
    /// MixMatch unsupervised (Brier) term.
    pub lambda3: f64,
    pub entmin: f64,
    pub pseudo_label: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.3,
            lambda3: 75.0,
            entmin: 1.0,
            pseudo_label: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.entmin,
            self.pseudo_label,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

fn check_same_shape(op: &'static str, tape: &Tape, a: Var, b: &Tensor) -> Result<()> {
    let av = tape.value(a);
    if av.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: av.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `-(1/n) Σ_i Σ_k y_ik log μ_ik`. Works with soft targets as well.
pub fn supervised_ce(tape: &mut Tape, mu: Var, targets: &Tensor) -> Result<Var> {
    check_same_shape("supervised_ce", tape, mu, targets)?;
    let n = targets.rows() as f64;
    let clamped = tape.clamp_min(mu, PROB_FLOOR)?;
    let logs = tape.log(clamped)?;
    let y = tape.constant(targets.clone());
    let picked = tape.mul(logs, y)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / n)
}

/// `-(1/B) Σ_b log(1 - Σ_{k masked} μ_bk)`.
///
/// Rows with no negatives contribute exactly zero. The argument of the log
/// is floored at [`NS3L_FLOOR`].
pub fn ns3l_loss(tape: &mut Tape, mu: Var, mask: &NegativeLabelMask) -> Result<Var> {
    let m = mask.to_tensor();
    check_same_shape("ns3l_loss", tape, mu, &m)?;
    if let Some(row) = mask.counts().iter().position(|&c| c == mask.classes()) {
        return Err(Error::AllClassesNegative(row));
    }
    let b = mask.rows() as f64;
    let mv = tape.constant(m);
    let masked = tape.mul(mu, mv)?;
    let selected = tape.row_sum(masked)?;
    let neg = tape.scale(selected, -1.0)?;
    let remaining = tape.add_scalar(neg, 1.0)?;
    let floored = tape.clamp_min(remaining, NS3L_FLOOR)?;
    let logs = tape.log(floored)?;
    let total = tape.sum(logs)?;
    tape.scale(total, -1.0 / b)
}

/// Mean per-row entropy `-Σ_k μ log μ`, with `0 log 0 = 0`.
pub fn entropy_min_loss(tape: &mut Tape, mu: Var) -> Result<Var> {
    let n = tape.value(mu).rows() as f64;
    let clamped = tape.clamp_min(mu, PROB_FLOOR)?;
    let logs = tape.log(clamped)?;
    let plogp = tape.mul(mu, logs)?;
    let total = tape.sum(plogp)?;
    tape.scale(total, -1.0 / n)
}

/// Cross-entropy against the argmax class for rows with `max μ ≥ tau`,
/// averaged over the whole batch. The chosen labels are constants.
pub fn pseudo_label_loss(tape: &mut Tape, mu: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(invalid(format!("pseudo-label threshold {tau} outside (0, 1)")));
    }
    let targets = pseudo_targets(tape.value(mu), tau);
    supervised_ce(tape, mu, &targets)
}

/// One-hot argmax rows for confident predictions, zero rows otherwise.
pub fn pseudo_targets(mu: &Tensor, tau: f64) -> Tensor {
    let k = mu.cols();
    let mut data = vec![0.0; mu.numel()];
    for (r, row) in mu.row_iter().enumerate() {
        let best = argmax(row);
        if row[best] >= tau {
            data[r * k + best] = 1.0;
        }
    }
    Tensor::from_parts(mu.shape().to_vec(), data)
}

/// `(1/n) Σ_i ||a_i - b_i||² / K`.
pub fn pi_consistency_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (n, k) = {
        let t = tape.value(a);
        (t.rows() as f64, t.cols() as f64)
    };
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / (n * k))
}

/// `(1/(K n)) Σ_i Σ_k (y_ik - μ_ik)²` against constant targets.
pub fn brier_loss(tape: &mut Tape, mu: Var, targets: &Tensor) -> Result<Var> {
    check_same_shape("brier_loss", tape, mu, targets)?;
    let y = tape.constant(targets.clone());
    pi_consistency_loss(tape, mu, y)
}

/// Rows as one-hot vectors over `classes`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(invalid(format!("label {y} out of range for {classes} classes")));
        }
        data[r * classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}
