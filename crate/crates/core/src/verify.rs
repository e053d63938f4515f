//! Finite-difference checks of every loss on small random instances.
//!
//! Each case draws an instance, freezes its non-differentiable parts
//! (masks, perturbations, mixed batches) and compares the tape gradient
//! with central differences. Losses over probabilities are checked through
//! a softmax of free logits; model-based objectives are checked with
//! respect to the network parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::SslBatch;
use crate::diffcore::{grad_check, grad_check_many, Tape, Tensor, Var};
use crate::error::Result;
use crate::losses::{
    entropy_min_loss, ns3l_loss, objective_with_targets, one_hot, pi_consistency_loss,
    prepare_targets, pseudo_label_loss, supervised_ce, vat_loss_with_perturbation,
    vat_perturbation, NegativeStrategy, ObjectiveConfig, UnsupervisedTerms, VatConfig,
};
use crate::mixmatch::{mixmatch_batch, mixmatch_objective, MixMatchConfig};
use crate::model::{self, init_params, MlpSpec, ParamVars, Params};
use crate::negselect::uniform_mask;
use crate::rng::{self, SslRng};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_INSTANCES: usize = 20;

const SLOPE: f64 = model::DEFAULT_LEAKY_SLOPE;

/// One instance check: draws from the rng and returns its max relative error.
pub type CaseFn = Box<dyn Fn(&mut SslRng) -> Result<f64> + Send + Sync>;

pub struct GradCase {
    pub name: &'static str,
    pub check: CaseFn,
}

impl GradCase {
    pub fn new(name: &'static str, check: impl Fn(&mut SslRng) -> Result<f64> + Send + Sync + 'static) -> Self {
        Self {
            name,
            check: Box::new(check),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub instances: usize,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// Runs every case on `instances` fresh draws. Case `i` uses its own
/// stream, so adding a case leaves the others' instances unchanged.
pub fn run_cases(cases: &[GradCase], instances: usize, seed: u64) -> Result<Vec<CaseReport>> {
    cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let mut r = rng::stream(seed, 1000 + i as u64);
            let mut worst = 0.0f64;
            for _ in 0..instances {
                worst = worst.max((case.check)(&mut r)?);
            }
            Ok(CaseReport {
                name: case.name,
                max_rel_error: worst,
                instances,
            })
        })
        .collect()
}

fn gaussian(shape: &[usize], std: f64, r: &mut SslRng) -> Tensor {
    let normal = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| normal.sample(r)).collect())
}

fn labels(n: usize, k: usize, r: &mut SslRng) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..k)).collect()
}

fn dims(r: &mut SslRng) -> (usize, usize) {
    (r.random_range(2..=6), r.random_range(2..=5))
}

fn tiny_model(d: usize, k: usize, r: &mut SslRng) -> Result<Params> {
    let hidden = r.random_range(3..=5);
    let spec = MlpSpec::new(vec![d, hidden, k], r.random())?;
    let mut p = init_params(&spec);
    // nonzero biases so no gradient coordinate is structurally tiny
    for l in &mut p.layers {
        l.bias = gaussian(l.bias.shape(), 0.3, r);
    }
    Ok(p)
}

fn param_vars(vars: &[Var]) -> ParamVars {
    ParamVars {
        layers: vars.chunks(2).map(|c| (c[0], c[1])).collect(),
    }
}

fn params_check<F>(params: &Params, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    let points: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    grad_check_many(|tape, vars| f(tape, &param_vars(vars)), &points, GRADCHECK_STEP)
}

fn supervised_case(r: &mut SslRng) -> Result<f64> {
    let (n, k) = dims(r);
    let z = gaussian(&[n, k], 1.5, r);
    let y = one_hot(&labels(n, k, r), k)?;
    grad_check(
        |tape, z| {
            let mu = tape.row_softmax(z)?;
            supervised_ce(tape, mu, &y)
        },
        &z,
        GRADCHECK_STEP,
    )
}

fn ns3l_case(r: &mut SslRng) -> Result<f64> {
    let (n, k) = dims(r);
    let z = gaussian(&[n, k], 1.5, r);
    let count = r.random_range(1..k);
    let mask = uniform_mask(n, k, count, r)?;
    grad_check(
        |tape, z| {
            let mu = tape.row_softmax(z)?;
            ns3l_loss(tape, mu, &mask)
        },
        &z,
        GRADCHECK_STEP,
    )
}

fn entmin_case(r: &mut SslRng) -> Result<f64> {
    let (n, k) = dims(r);
    let z = gaussian(&[n, k], 1.5, r);
    grad_check(
        |tape, z| {
            let mu = tape.row_softmax(z)?;
            entropy_min_loss(tape, mu)
        },
        &z,
        GRADCHECK_STEP,
    )
}

fn pseudo_label_case(r: &mut SslRng) -> Result<f64> {
    const TAU: f64 = 0.7;
    let (n, k) = dims(r);
    // redraw until no row sits on the confidence cut, where the selected
    // set would change under perturbation
    let z = loop {
        let z = gaussian(&[n, k], 3.0, r);
        let mu = softmax_rows(&z);
        let near = mu.row_iter().any(|row| {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            (m - TAU).abs() < 1e-3
        });
        if !near {
            break z;
        }
    };
    grad_check(
        |tape, z| {
            let mu = tape.row_softmax(z)?;
            pseudo_label_loss(tape, mu, TAU)
        },
        &z,
        GRADCHECK_STEP,
    )
}

fn softmax_rows(z: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let s = tape.row_softmax(v).expect("finite logits");
    tape.value(s).clone()
}

fn pi_case(r: &mut SslRng) -> Result<f64> {
    let (n, k) = dims(r);
    let a = gaussian(&[n, k], 1.5, r);
    let b = gaussian(&[n, k], 1.5, r);
    grad_check_many(
        |tape, v| {
            let pa = tape.row_softmax(v[0])?;
            let pb = tape.row_softmax(v[1])?;
            pi_consistency_loss(tape, pa, pb)
        },
        &[a, b],
        GRADCHECK_STEP,
    )
}

fn vat_case(r: &mut SslRng) -> Result<f64> {
    let (n, k) = dims(r);
    let d = r.random_range(2..=4);
    let params = tiny_model(d, k, r)?;
    let x = gaussian(&[n, d], 1.0, r);
    let cfg = VatConfig {
        epsilon: 0.5,
        ..VatConfig::default()
    };
    let r_adv = vat_perturbation(&params, &x, &cfg, SLOPE, r)?;
    let clean = model::probs(&params, &x, SLOPE)?;
    params_check(&params, |tape, pv| {
        vat_loss_with_perturbation(tape, pv, &x, &r_adv, &clean, SLOPE)
    })
}

fn mixmatch_case(r: &mut SslRng) -> Result<f64> {
    let (n, k) = dims(r);
    let d = r.random_range(2..=4);
    let params = tiny_model(d, k, r)?;
    let xl = gaussian(&[n, d], 1.0, r);
    let yl = one_hot(&labels(n, k, r), k)?;
    let xu = gaussian(&[n, d], 1.0, r);
    let cfg = MixMatchConfig {
        ns3l: Some((0.2, 1.0)),
        ..MixMatchConfig::default()
    };
    let mixed = mixmatch_batch(&params, &xl, &yl, &xu, &cfg, SLOPE, r)?;
    let warm = r.random_range(0.1..1.0);
    params_check(&params, |tape, pv| {
        Ok(mixmatch_objective(tape, pv, &mixed, &cfg, SLOPE, warm)?.0)
    })
}

fn combined_case(r: &mut SslRng) -> Result<f64> {
    let (n, k) = dims(r);
    let d = r.random_range(2..=4);
    let params = tiny_model(d, k, r)?;
    let batch = SslBatch::new(
        gaussian(&[n, d], 1.0, r),
        labels(n, k, r),
        Some(gaussian(&[n, d], 1.0, r)),
        labels(n, k, r),
    )?;
    let cfg = ObjectiveConfig {
        terms: UnsupervisedTerms {
            ns3l: true,
            vat: true,
            pi: true,
            entmin: true,
            pseudo_label: false,
        },
        negatives: NegativeStrategy::Uniform { count: 1 },
        vat: VatConfig {
            epsilon: 0.5,
            ..VatConfig::default()
        },
        ..ObjectiveConfig::default()
    };
    let targets = prepare_targets(&params, &batch, None, &cfg, r)?;
    let warm = r.random_range(0.1..1.0);
    params_check(&params, |tape, pv| {
        Ok(objective_with_targets(tape, pv, &batch, &cfg, warm, &targets)?.0)
    })
}

/// The standard suite: one case per loss, named after the function it checks.
pub fn loss_cases() -> Vec<GradCase> {
    vec![
        GradCase::new("supervised_ce", supervised_case),
        GradCase::new("ns3l_loss", ns3l_case),
        GradCase::new("entropy_min_loss", entmin_case),
        GradCase::new("pseudo_label_loss", pseudo_label_case),
        GradCase::new("pi_consistency_loss", pi_case),
        GradCase::new("vat_loss", vat_case),
        GradCase::new("mixmatch_objective", mixmatch_case),
        GradCase::new("combined_objective", combined_case),
    ]
}

/// The standard suite at the documented step size and instance count.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CaseReport>> {
    run_cases(&loss_cases(), GRADCHECK_INSTANCES, seed)
}
