//! MixMatch: label guessing, sharpening, mixup and the mixed objective,
//! optionally with a negative-sampling term on top.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::losses::{brier_loss, ns3l_loss, supervised_ce, Breakdown};
use crate::model::{self, Params, ParamVars};
use crate::negselect::threshold_mask;

#[derive(Clone, Debug, PartialEq)]
pub struct MixMatchConfig {
    /// Sharpening temperature.
    pub temperature: f64,
    /// Augmented copies per unlabeled sample.
    pub augmentations: usize,
    pub alpha: f64,
    pub lambda3: f64,
    /// Std of the Gaussian input-noise augmentation.
    pub noise_sigma: f64,
    /// Negative-sampling hook: `(threshold, lambda1)`.
    pub ns3l: Option<(f64, f64)>,
    /// Overrides the Beta draw; tests use this to pin the mixing weight.
    pub fixed_lambda: Option<f64>,
}

impl Default for MixMatchConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            augmentations: 2,
            alpha: 0.75,
            lambda3: 75.0,
            noise_sigma: 0.1,
            ns3l: None,
            fixed_lambda: None,
        }
    }
}

impl MixMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(invalid("sharpening temperature must be positive"));
        }
        if self.augmentations == 0 {
            return Err(invalid("need at least one augmentation"));
        }
        if !(self.alpha > 0.0) {
            return Err(invalid("mixup alpha must be positive"));
        }
        if !(self.lambda3 >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(invalid("lambda3 and noise sigma must be non-negative"));
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.5..=1.0).contains(&l) {
                return Err(invalid("fixed mixup weight must lie in [0.5, 1]"));
            }
        }
        Ok(())
    }
}

/// `x + N(0, σ²)` elementwise.
pub fn augment(x: &Tensor, noise_sigma: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if noise_sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let data = x.data().iter().map(|v| v + normal.sample(rng)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `p_k^{1/E} / Σ_j p_j^{1/E}`.
pub fn sharpen(p: &[f64], temperature: f64) -> Vec<f64> {
    // work in log space so small probabilities with small E do not underflow
    let inv = 1.0 / temperature;
    let logs: Vec<f64> = p
        .iter()
        .map(|&v| if v > 0.0 { inv * v.ln() } else { f64::NEG_INFINITY })
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logs.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Sharpened average prediction over `A` augmentations, as a
/// stop-gradient node on `tape`.
pub fn guess_label(
    tape: &mut Tape,
    params: &ParamVars,
    x_unlabeled: &Tensor,
    cfg: &MixMatchConfig,
    leaky_slope: f64,
    rng: &mut impl Rng,
) -> Result<Var> {
    let a = cfg.augmentations;
    let mut sum: Option<Var> = None;
    for _ in 0..a {
        let xa = tape.constant(augment(x_unlabeled, cfg.noise_sigma, rng)?);
        let p = model::predict_probs(tape, params, xa, leaky_slope)?;
        sum = Some(match sum {
            None => p,
            Some(s) => tape.add(s, p)?,
        });
    }
    let mean = tape.scale(sum.unwrap(), 1.0 / a as f64)?;
    let frozen = tape.stop_gradient(mean);
    let avg = tape.value(frozen);
    let k = avg.cols();
    let sharpened: Vec<f64> = avg
        .row_iter()
        .flat_map(|row| sharpen(row, cfg.temperature))
        .collect();
    Ok(tape.constant(Tensor::new(vec![avg.rows(), k], sharpened)?))
}

/// `λ ~ Beta(α, α)` via two Gamma draws, folded to `max(λ, 1 − λ)`.
pub fn sample_mixup_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| invalid(e.to_string()))?;
    let a: f64 = gamma.sample(rng);
    let b: f64 = gamma.sample(rng);
    let lam = if a + b > 0.0 { a / (a + b) } else { 0.5 };
    Ok(lam.max(1.0 - lam))
}

/// Convex combination `λ' a + (1 − λ') b` of rows and labels.
pub fn mixup_pair(
    x1: &[f64],
    y1: &[f64],
    x2: &[f64],
    y2: &[f64],
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x1.len() != x2.len() || y1.len() != y2.len() {
        return Err(Error::Shape {
            op: "mixup_pair",
            lhs: vec![x1.len(), y1.len()],
            rhs: vec![x2.len(), y2.len()],
        });
    }
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(&u, &v)| lambda * u + (1.0 - lambda) * v)
            .collect()
    };
    Ok((mix(x1, x2), mix(y1, y2)))
}

/// Mixed labeled (`X'`) and unlabeled (`U'`) samples with soft labels.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    pub x_labeled: Tensor,
    pub y_labeled: Tensor,
    pub x_unlabeled: Tensor,
    pub y_unlabeled: Tensor,
    pub lambda: f64,
}

/// Builds `X'` and `U'` from a labeled batch (one-hot targets) and an
/// unlabeled batch.
pub fn mixmatch_batch(
    params: &Params,
    x_labeled: &Tensor,
    y_labeled: &Tensor,
    x_unlabeled: &Tensor,
    cfg: &MixMatchConfig,
    leaky_slope: f64,
    rng: &mut impl Rng,
) -> Result<MixedBatch> {
    cfg.validate()?;
    if x_labeled.rows() != y_labeled.rows() {
        return Err(invalid("labeled features and targets differ in rows"));
    }
    let k = y_labeled.cols();

    let x_hat = augment(x_labeled, cfg.noise_sigma, rng)?;
    let mut tape = Tape::new();
    let pv = params.as_constants(&mut tape);
    let guess = guess_label(&mut tape, &pv, x_unlabeled, cfg, leaky_slope, rng)?;
    let guess = tape.value(guess).clone();

    let mut u_parts = Vec::with_capacity(cfg.augmentations);
    let mut g_parts = Vec::with_capacity(cfg.augmentations);
    for _ in 0..cfg.augmentations {
        u_parts.push(augment(x_unlabeled, cfg.noise_sigma, rng)?);
        g_parts.push(guess.clone());
    }
    let u_hat = Tensor::vstack(&u_parts.iter().collect::<Vec<_>>())?;
    let q_hat = Tensor::vstack(&g_parts.iter().collect::<Vec<_>>())?;

    let all_x = Tensor::vstack(&[&x_hat, &u_hat])?;
    let all_y = Tensor::vstack(&[y_labeled, &q_hat])?;
    let mut w: Vec<usize> = (0..all_x.rows()).collect();
    w.shuffle(rng);

    let lambda = match cfg.fixed_lambda {
        Some(l) => l,
        None => sample_mixup_lambda(cfg.alpha, rng)?,
    };
    let n_l = x_hat.rows();
    let mix_block = |src_x: &Tensor, src_y: &Tensor, partners: &[usize]| -> Result<(Tensor, Tensor)> {
        let mut xs = Vec::with_capacity(src_x.numel());
        let mut ys = Vec::with_capacity(src_y.numel());
        for (i, &j) in partners.iter().enumerate() {
            let (x, y) = mixup_pair(src_x.row(i), src_y.row(i), all_x.row(j), all_y.row(j), lambda)?;
            xs.extend(x);
            ys.extend(y);
        }
        Ok((
            Tensor::matrix(partners.len(), src_x.cols(), xs)?,
            Tensor::matrix(partners.len(), k, ys)?,
        ))
    };
    let (xl, yl) = mix_block(&x_hat, y_labeled, &w[..n_l])?;
    let (xu, yu) = mix_block(&u_hat, &q_hat, &w[n_l..])?;
    Ok(MixedBatch {
        x_labeled: xl,
        y_labeled: yl,
        x_unlabeled: xu,
        y_unlabeled: yu,
        lambda,
    })
}

/// `CE(X') + w·λ₃·Brier(U') + w·λ₁·NS3L(X' ∪ U')`.
///
/// Negative labels come from thresholding the *generated* labels; the
/// negative-sampling loss itself is evaluated on the model's current
/// probabilities.
pub fn mixmatch_objective(
    tape: &mut Tape,
    params: &ParamVars,
    mixed: &MixedBatch,
    cfg: &MixMatchConfig,
    leaky_slope: f64,
    warmup: f64,
) -> Result<(Var, Breakdown)> {
    let mut br = Breakdown::default();
    let xl = tape.constant(mixed.x_labeled.clone());
    let mu_l = model::predict_probs(tape, params, xl, leaky_slope)?;
    let xu = tape.constant(mixed.x_unlabeled.clone());
    let mu_u = model::predict_probs(tape, params, xu, leaky_slope)?;

    let sup = supervised_ce(tape, mu_l, &mixed.y_labeled)?;
    br.push("supervised", tape.value(sup).item());
    let brier = brier_loss(tape, mu_u, &mixed.y_unlabeled)?;
    br.push("brier", tape.value(brier).item());
    let wb = tape.scale(brier, cfg.lambda3 * warmup)?;
    let mut total = tape.add(sup, wb)?;

    if let Some((threshold, lambda1)) = cfg.ns3l {
        let generated = Tensor::vstack(&[&mixed.y_labeled, &mixed.y_unlabeled])?;
        let mask = threshold_mask(&generated, threshold)?;
        let all_x = Tensor::vstack(&[&mixed.x_labeled, &mixed.x_unlabeled])?;
        let xa = tape.constant(all_x);
        let mu_all = model::predict_probs(tape, params, xa, leaky_slope)?;
        let l = ns3l_loss(tape, mu_all, &mask)?;
        br.push("ns3l", tape.value(l).item());
        let wl = tape.scale(l, lambda1 * warmup)?;
        total = tape.add(total, wl)?;
    }
    br.push("total", tape.value(total).item());
    Ok((total, br))
}
