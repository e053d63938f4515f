//! Supervised loss plus any mix of unsupervised terms.
//!
//! Building the objective is split in two. [`prepare_targets`] makes every
//! random or non-differentiable choice (negative-label masks, VAT
//! directions, Π-model noise, clean VAT targets) from the current
//! parameters. [`objective_with_targets`] then records a loss that is a
//! smooth function of the parameters alone, which is what the optimizer
//! and the gradient checker both see.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::SslBatch;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::losses::{
    entropy_min_loss, ns3l_loss, one_hot, pi_consistency_loss, pseudo_label_loss, supervised_ce,
    vat_loss_with_perturbation, vat_perturbation, LossWeights, VatConfig,
};
use crate::model::{self, Params, ParamVars};
use crate::negselect::{
    furthest_class_mask, nn_exclude_mask, oracle_mask, threshold_mask, uniform_mask,
    NegativeLabelMask, NnVariant,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UnsupervisedTerms {
    pub ns3l: bool,
    pub vat: bool,
    pub pi: bool,
    pub entmin: bool,
    pub pseudo_label: bool,
}

impl UnsupervisedTerms {
    pub fn any(&self) -> bool {
        self.ns3l || self.vat || self.pi || self.entmin || self.pseudo_label
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeStrategy {
    Threshold,
    Uniform { count: usize },
    /// Uses hidden labels; diagnostics only.
    Oracle { count: usize },
    NearestExclude { variant: NnVariant, count: usize },
    FurthestClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub terms: UnsupervisedTerms,
    pub weights: LossWeights,
    /// Negative-label probability threshold `T`.
    pub threshold: f64,
    /// Pseudo-label confidence threshold.
    pub pl_tau: f64,
    pub vat: VatConfig,
    /// Std of the Gaussian input noise of the Π-model.
    pub pi_noise: f64,
    pub negatives: NegativeStrategy,
    pub leaky_slope: f64,
    /// Whether the warmup ramp also scales the negative-sampling term.
    pub warmup_ns3l: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            terms: UnsupervisedTerms::default(),
            weights: LossWeights::default(),
            threshold: 0.04,
            pl_tau: 0.95,
            vat: VatConfig::default(),
            pi_noise: 0.1,
            negatives: NegativeStrategy::Threshold,
            leaky_slope: crate::model::DEFAULT_LEAKY_SLOPE,
            warmup_ns3l: true,
        }
    }
}

/// Frozen, non-differentiable inputs of the unsupervised terms.
#[derive(Clone, Debug, Default)]
pub struct PreparedTargets {
    pub mask: Option<NegativeLabelMask>,
    /// `(r_adv, clean probabilities)`.
    pub vat: Option<(Tensor, Tensor)>,
    /// Noise for the two Π-model passes.
    pub pi_noise: Option<(Tensor, Tensor)>,
}

/// Per-term values of one objective evaluation, unweighted, in a fixed
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Breakdown {
    pub terms: Vec<(&'static str, f64)>,
}

impl Breakdown {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }

    pub(crate) fn push(&mut self, name: &'static str, v: f64) {
        self.terms.push((name, v));
    }
}

/// Labeled pool used by nearest-neighbour negative selection.
pub type LabeledPool<'a> = (&'a Tensor, &'a [usize]);

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
    Ok(Tensor::from_parts(
        vec![rows, cols],
        (0..rows * cols).map(|_| normal.sample(rng)).collect(),
    ))
}

/// Negative labels for a batch of unlabeled rows.
pub fn select_negatives(
    strategy: NegativeStrategy,
    mu: &Tensor,
    x_unlabeled: &Tensor,
    hidden_labels: &[usize],
    pool: Option<LabeledPool<'_>>,
    threshold: f64,
    rng: &mut impl Rng,
) -> Result<NegativeLabelMask> {
    let k = mu.cols();
    let need_pool = || pool.ok_or_else(|| invalid("nearest-neighbour negatives need the labeled pool"));
    match strategy {
        NegativeStrategy::Threshold => threshold_mask(mu, threshold),
        NegativeStrategy::Uniform { count } => uniform_mask(mu.rows(), k, count, rng),
        NegativeStrategy::Oracle { count } => oracle_mask(hidden_labels, k, count, rng),
        NegativeStrategy::NearestExclude { variant, count } => {
            let (lx, ly) = need_pool()?;
            nn_exclude_mask(x_unlabeled, lx, ly, k, count, variant, rng)
        }
        NegativeStrategy::FurthestClass => {
            let (lx, ly) = need_pool()?;
            furthest_class_mask(x_unlabeled, lx, ly, k)
        }
    }
}

/// Makes every random and non-differentiable choice for one step.
pub fn prepare_targets(
    params: &Params,
    batch: &SslBatch,
    pool: Option<LabeledPool<'_>>,
    cfg: &ObjectiveConfig,
    rng: &mut impl Rng,
) -> Result<PreparedTargets> {
    let mut out = PreparedTargets::default();
    let Some(xu) = batch.x_unlabeled() else {
        return Ok(out);
    };
    if cfg.terms.ns3l {
        let mu = model::probs(params, xu, cfg.leaky_slope)?;
        let hidden = batch.diagnostics().unlabeled_labels;
        out.mask = Some(select_negatives(
            cfg.negatives,
            &mu,
            xu,
            hidden,
            pool,
            cfg.threshold,
            rng,
        )?);
    }
    if cfg.terms.vat {
        let r = vat_perturbation(params, xu, &cfg.vat, cfg.leaky_slope, rng)?;
        let clean = model::probs(params, xu, cfg.leaky_slope)?;
        out.vat = Some((r, clean));
    }
    if cfg.terms.pi {
        let a = gaussian(xu.rows(), xu.cols(), cfg.pi_noise, rng)?;
        let b = gaussian(xu.rows(), xu.cols(), cfg.pi_noise, rng)?;
        out.pi_noise = Some((a, b));
    }
    Ok(out)
}

/// Records `CE(labeled) + w · Σ λ_term · term(unlabeled)` on the tape.
///
/// `warmup` is the ramp multiplier in `[0, 1]`. When `warmup_ns3l` is off
/// the negative-sampling term is exempt from it.
pub fn objective_with_targets(
    tape: &mut Tape,
    params: &ParamVars,
    batch: &SslBatch,
    cfg: &ObjectiveConfig,
    warmup: f64,
    targets: &PreparedTargets,
) -> Result<(Var, Breakdown)> {
    if batch.y_labeled.is_empty() {
        return Err(invalid("labeled batch is empty"));
    }
    if !(0.0..=1.0).contains(&warmup) {
        return Err(invalid(format!("warmup multiplier {warmup} outside [0, 1]")));
    }
    cfg.weights.validate()?;
    let k = tape.value(*params.layers.last().map(|(w, _)| w).unwrap()).cols();
    let mut breakdown = Breakdown::default();

    let xl = tape.constant(batch.x_labeled.clone());
    let mu_l = model::predict_probs(tape, params, xl, cfg.leaky_slope)?;
    let y = one_hot(&batch.y_labeled, k)?;
    let mut total = supervised_ce(tape, mu_l, &y)?;
    breakdown.push("supervised", tape.value(total).item());

    let terms = cfg.terms;
    if let (Some(xu), true) = (batch.x_unlabeled(), terms.any()) {
        let xuv = tape.constant(xu.clone());
        let mu_u = model::predict_probs(tape, params, xuv, cfg.leaky_slope)?;
        let mut add = |tape: &mut Tape, name: &'static str, term: Var, weight: f64| -> Result<()> {
            breakdown.push(name, tape.value(term).item());
            let scaled = tape.scale(term, weight)?;
            total = tape.add(total, scaled)?;
            Ok(())
        };

        if terms.ns3l {
            let mask = targets
                .mask
                .as_ref()
                .ok_or_else(|| invalid("negative-sampling term needs a prepared mask"))?;
            let l = ns3l_loss(tape, mu_u, mask)?;
            let ramp = if cfg.warmup_ns3l { warmup } else { 1.0 };
            add(tape, "ns3l", l, cfg.weights.lambda1 * ramp)?;
        }
        if terms.vat {
            let (r, clean) = targets
                .vat
                .as_ref()
                .ok_or_else(|| invalid("VAT term needs a prepared perturbation"))?;
            let l = vat_loss_with_perturbation(tape, params, xu, r, clean, cfg.leaky_slope)?;
            add(tape, "vat", l, cfg.weights.lambda2 * warmup)?;
        }
        if terms.pi {
            let (na, nb) = targets
                .pi_noise
                .as_ref()
                .ok_or_else(|| invalid("Π-model term needs prepared noise"))?;
            let xa = tape.constant(xu.zip_map(na, |a, b| a + b)?);
            let xb = tape.constant(xu.zip_map(nb, |a, b| a + b)?);
            let pa = model::predict_probs(tape, params, xa, cfg.leaky_slope)?;
            let pb = model::predict_probs(tape, params, xb, cfg.leaky_slope)?;
            let l = pi_consistency_loss(tape, pa, pb)?;
            add(tape, "pi", l, cfg.weights.lambda2 * warmup)?;
        }
        if terms.entmin {
            let l = entropy_min_loss(tape, mu_u)?;
            add(tape, "entmin", l, cfg.weights.entmin * warmup)?;
        }
        if terms.pseudo_label {
            let l = pseudo_label_loss(tape, mu_u, cfg.pl_tau)?;
            add(tape, "pl", l, cfg.weights.pseudo_label * warmup)?;
        }
    }
    breakdown.push("total", tape.value(total).item());
    Ok((total, breakdown))
}

/// [`prepare_targets`] followed by [`objective_with_targets`].
#[allow(clippy::too_many_arguments)]
pub fn combined_objective(
    tape: &mut Tape,
    params: &Params,
    param_vars: &ParamVars,
    batch: &SslBatch,
    pool: Option<LabeledPool<'_>>,
    cfg: &ObjectiveConfig,
    warmup: f64,
    rng: &mut impl Rng,
) -> Result<(Var, Breakdown, PreparedTargets)> {
    let targets = prepare_targets(params, batch, pool, cfg, rng)?;
    let (loss, breakdown) = objective_with_targets(tape, param_vars, batch, cfg, warmup, &targets)?;
    Ok((loss, breakdown, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, MlpSpec};
    use crate::rng::seeded;

    fn batch(xu: Option<Tensor>) -> SslBatch {
        let xl = Tensor::from_rows(&[vec![0.5, -0.2], vec![-1.0, 0.3], vec![0.1, 0.9]]).unwrap();
        let hidden = xu.as_ref().map_or(vec![], |t| (0..t.rows()).map(|i| i % 3).collect());
        SslBatch::new(xl, vec![0, 1, 2], xu, hidden).unwrap()
    }

    fn all_terms() -> UnsupervisedTerms {
        UnsupervisedTerms {
            ns3l: true,
            vat: true,
            pi: true,
            entmin: true,
            pseudo_label: true,
        }
    }

    fn eval(params: &Params, b: &SslBatch, cfg: &ObjectiveConfig, seed: u64) -> Breakdown {
        let mut tape = Tape::new();
        let pv = params.on_tape(&mut tape);
        let (_, br, _) =
            combined_objective(&mut tape, params, &pv, b, None, cfg, 1.0, &mut seeded(seed)).unwrap();
        br
    }

    #[test]
    fn zero_weights_reduce_to_supervised() {
        let params = init_params(&MlpSpec::new(vec![2, 6, 3], 1).unwrap());
        let xu = Tensor::from_rows(&[vec![0.2, 0.2], vec![-0.4, 1.5]]).unwrap();
        let b = batch(Some(xu));
        let cfg = ObjectiveConfig {
            terms: all_terms(),
            weights: LossWeights {
                lambda1: 0.0,
                lambda2: 0.0,
                lambda3: 0.0,
                entmin: 0.0,
                pseudo_label: 0.0,
            },
            threshold: 0.4,
            ..ObjectiveConfig::default()
        };
        let br = eval(&params, &b, &cfg, 3);
        assert_eq!(br.get("total"), br.get("supervised"));
        assert!(br.get("vat").is_some() && br.get("ns3l").is_some());
    }

    #[test]
    fn supervised_only_ignores_unlabeled_contents() {
        let params = init_params(&MlpSpec::new(vec![2, 6, 3], 1).unwrap());
        let cfg = ObjectiveConfig::default();
        let a = eval(&params, &batch(Some(Tensor::full(&[4, 2], 0.3))), &cfg, 0);
        let b = eval(&params, &batch(Some(Tensor::full(&[4, 2], -7.0))), &cfg, 0);
        let c = eval(&params, &batch(None), &cfg, 0);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn empty_labeled_batch_is_rejected() {
        let params = init_params(&MlpSpec::new(vec![2, 3], 1).unwrap());
        let b = SslBatch::new(Tensor::zeros(&[1, 2]), vec![0], None, vec![]).unwrap();
        let mut empty = b.clone();
        empty.y_labeled.clear();
        let mut tape = Tape::new();
        let pv = params.on_tape(&mut tape);
        let cfg = ObjectiveConfig::default();
        let t = PreparedTargets::default();
        assert!(objective_with_targets(&mut tape, &pv, &empty, &cfg, 1.0, &t).is_err());
    }

    #[test]
    fn warmup_scales_unsupervised_terms() {
        let params = init_params(&MlpSpec::new(vec![2, 6, 3], 4).unwrap());
        let xu = Tensor::from_rows(&[vec![0.2, 0.2], vec![-0.4, 1.5]]).unwrap();
        let b = batch(Some(xu));
        let cfg = ObjectiveConfig {
            terms: UnsupervisedTerms {
                entmin: true,
                ..Default::default()
            },
            ..ObjectiveConfig::default()
        };
        let targets = prepare_targets(&params, &b, None, &cfg, &mut seeded(0)).unwrap();
        let total_at = |w: f64| {
            let mut tape = Tape::new();
            let pv = params.on_tape(&mut tape);
            let (l, br) = objective_with_targets(&mut tape, &pv, &b, &cfg, w, &targets).unwrap();
            (tape.value(l).item(), br)
        };
        let (t0, br) = total_at(0.0);
        let (t1, _) = total_at(0.5);
        assert_eq!(t0, br.get("supervised").unwrap());
        let ent = br.get("entmin").unwrap();
        assert!((t1 - t0 - 0.5 * ent).abs() < 1e-12);
    }
}
