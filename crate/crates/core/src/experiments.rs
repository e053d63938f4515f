//! Experiment drivers: seed fan-out, the threshold/weight sweep and the
//! one-dimensional toy demo.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::data::{gen_toy_1d, BatchStream, Dataset, SslSplit, ToyBias};
use crate::diffcore::{Tape, Tensor};
use crate::error::{invalid, Result};
use crate::losses::{
    combined_objective, ns3l_loss, one_hot, supervised_ce, NegativeStrategy, ObjectiveConfig,
    UnsupervisedTerms,
};
use crate::model::{self, init_params, MlpSpec, Params};
use crate::negselect::NegativeLabelMask;
use crate::rng;
use crate::train::{adam_step, train_run_on, AdamState, RunOutcome};

/// Sample mean and (n − 1) standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `cfg` with its seed replaced by each of `seeds`, run concurrently.
/// Results come back in seed order.
pub fn run_seeds(cfg: &ExperimentConfig, ds: &Dataset, seeds: &[u64]) -> Result<Vec<RunOutcome>> {
    seeds
        .par_iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.seed = s;
            train_run_on(&c, ds)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub threshold: f64,
    pub lambda1: f64,
    pub test_errors: Vec<f64>,
}

impl SweepCell {
    pub fn mean(&self) -> f64 {
        mean_std(&self.test_errors).0
    }
}

pub const DEFAULT_SWEEP_T: [f64; 4] = [0.01, 0.02, 0.04, 0.08];
pub const DEFAULT_SWEEP_LAMBDA1: [f64; 3] = [0.3, 1.0, 2.0];

/// Runs `base` for every `(T, λ₁)` pair and seed. The grid is flattened so
/// every run is an independent worker.
pub fn run_sweep(
    base: &ExperimentConfig,
    ds: &Dataset,
    thresholds: &[f64],
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepCell>> {
    if thresholds.is_empty() || lambdas.is_empty() || seeds.is_empty() {
        return Err(invalid("sweep grid and seed list must be nonempty"));
    }
    let jobs: Vec<(f64, f64, u64)> = thresholds
        .iter()
        .flat_map(|&t| lambdas.iter().flat_map(move |&l| seeds.iter().map(move |&s| (t, l, s))))
        .collect();
    let errors: Vec<f64> = jobs
        .par_iter()
        .map(|&(t, l, s)| {
            let mut c = base.clone();
            c.threshold = t;
            c.lambda1 = l;
            c.seed = s;
            train_run_on(&c, ds).map(|o| o.test_error)
        })
        .collect::<Result<_>>()?;
    Ok(errors
        .chunks(seeds.len())
        .zip(jobs.chunks(seeds.len()))
        .map(|(errs, job)| SweepCell {
            threshold: job[0].0,
            lambda1: job[0].1,
            test_errors: errs.to_vec(),
        })
        .collect())
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("T,lambda1,test_error\n");
    for c in cells {
        writeln!(out, "{},{},{}", c.threshold, c.lambda1, c.mean()).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDemoConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub bias: ToyBias,
    pub steps: usize,
    pub lr: f64,
    pub batch_unlabeled: usize,
    pub lambda1: f64,
    pub seeds: Vec<u64>,
    /// Boundary positions are recorded every this many steps.
    pub trace_interval: usize,
}

impl Default for ToyDemoConfig {
    fn default() -> Self {
        Self {
            n_labeled: 20,
            n_unlabeled: 500,
            bias: ToyBias {
                bias: 0.6,
                offset: 0.0,
            },
            steps: 2000,
            lr: 0.05,
            batch_unlabeled: 50,
            lambda1: 1.0,
            seeds: (0..20).collect(),
            trace_interval: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySeedResult {
    pub seed: u64,
    pub w_hat_supervised: f64,
    pub w_hat_ns3l: f64,
}

/// Per-sample gradients at one unlabeled point, in closed
/// form and as measured on the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientComparison {
    pub x_u: f64,
    /// Predicted probability of the class the point is pushed towards.
    pub mu_u: f64,
    /// `−(1 − μ_u)·x_u`.
    pub inductive: f64,
    /// `μ_u·x_u`.
    pub ns3l: f64,
    /// Gradient of the pseudo-label CE w.r.t. the boundary slope.
    pub measured_inductive: f64,
    /// Gradient of the negative-sampling loss (predicted-other class as
    /// the negative) w.r.t. the boundary slope.
    pub measured_ns3l: f64,
}

impl GradientComparison {
    pub fn opposite_signs(&self) -> bool {
        self.inductive.signum() == -self.ns3l.signum() && self.inductive != 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub seed: u64,
    pub step: usize,
    pub method: &'static str,
    pub boundary: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDemoReport {
    pub w_star: f64,
    pub seeds: Vec<ToySeedResult>,
    pub gradients: GradientComparison,
    pub trace: Vec<TracePoint>,
}

impl ToyDemoReport {
    /// Mean `|ŵ − w*|` for (supervised, supervised + negative sampling).
    pub fn mean_errors(&self) -> (f64, f64) {
        let n = self.seeds.len() as f64;
        let sup = self.seeds.iter().map(|r| (r.w_hat_supervised - self.w_star).abs()).sum::<f64>();
        let ns = self.seeds.iter().map(|r| (r.w_hat_ns3l - self.w_star).abs()).sum::<f64>();
        (sup / n, ns / n)
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("seed,step,method,boundary\n");
        for p in &self.trace {
            writeln!(out, "{},{},{},{}", p.seed, p.step, p.method, p.boundary).unwrap();
        }
        out
    }
}

/// Decision boundary `x` where the two logits of a linear model meet.
pub fn toy_boundary(params: &Params) -> f64 {
    let w = &params.layers[0].weight;
    let b = &params.layers[0].bias;
    -(b.data()[0] - b.data()[1]) / (w.data()[0] - w.data()[1])
}

/// Trains one linear two-class model on the toy problem; `lambda1 = 0`
/// is the supervised-only fit.
fn fit_toy(
    cfg: &ToyDemoConfig,
    ds: &Dataset,
    split: &SslSplit,
    seed: u64,
    lambda1: f64,
    method: &'static str,
    trace: &mut Vec<TracePoint>,
) -> Result<Params> {
    let spec = MlpSpec::new(vec![1, 2], seed)?;
    let mut params = init_params(&spec);
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut batches = BatchStream::new(ds, split, seed);
    let mut loss_rng = rng::stream(seed, rng::streams::LOSS);
    let objective = ObjectiveConfig {
        terms: UnsupervisedTerms {
            ns3l: lambda1 > 0.0,
            ..UnsupervisedTerms::default()
        },
        negatives: NegativeStrategy::Uniform { count: 1 },
        weights: crate::losses::LossWeights {
            lambda1,
            ..Default::default()
        },
        ..ObjectiveConfig::default()
    };
    let b2 = if lambda1 > 0.0 { cfg.batch_unlabeled } else { 0 };
    for step in 1..=cfg.steps {
        let batch = batches.next_batch(cfg.n_labeled, b2)?;
        let mut tape = Tape::new();
        let pv = params.on_tape(&mut tape);
        let (loss, _, _) =
            combined_objective(&mut tape, &params, &pv, &batch, None, &objective, 1.0, &mut loss_rng)?;
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = pv.vars().into_iter().map(|v| grads.wrt(v)).collect();
        adam_step(&mut params, &g, &mut adam)?;
        if step % cfg.trace_interval == 0 || step == cfg.steps {
            trace.push(TracePoint {
                seed,
                step,
                method,
                boundary: toy_boundary(&params),
            });
        }
    }
    Ok(params)
}

fn toy_dataset(cfg: &ToyDemoConfig, seed: u64) -> Result<(Dataset, SslSplit, f64)> {
    let problem = gen_toy_1d(cfg.n_labeled, cfg.n_unlabeled, cfg.bias, &mut rng::seeded(seed))?;
    let x = Tensor::vstack(&[&problem.labeled.x, &problem.unlabeled.x])?;
    let mut y = problem.labeled.y.clone();
    y.extend(&problem.unlabeled.y);
    let ds = Dataset::new(x, y, 2, "toy1d")?;
    let nl = problem.labeled.len();
    let split = SslSplit {
        labeled: (0..nl).collect(),
        unlabeled: (nl..ds.len()).collect(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    Ok((ds, split, problem.w_star))
}

/// Gradients at the first unlabeled point inside the labeled gap on the
/// class-1 side, under the supervised model of the first seed.
fn compare_gradients(params: &Params, ds: &Dataset, split: &SslSplit, gap: f64) -> Result<GradientComparison> {
    let x_u = split
        .unlabeled
        .iter()
        .map(|&i| ds.x.data()[i])
        .find(|&x| x < 0.0 && x > -gap.max(0.05))
        .or_else(|| split.unlabeled.iter().map(|&i| ds.x.data()[i]).find(|&x| x != 0.0))
        .ok_or_else(|| invalid("no usable unlabeled point"))?;
    let x = Tensor::from_rows(&[vec![x_u]])?;
    let probs = model::probs(params, &x, model::DEFAULT_LEAKY_SLOPE)?;
    let predicted = crate::diffcore::argmax(probs.row(0));
    let other = 1 - predicted;
    let mu_u = probs.get(0, predicted);

    // slope of the boundary direction: weight of the predicted class minus
    // the other, i.e. d/dw of the logit gap
    let measure = |ns: bool| -> Result<f64> {
        let mut tape = Tape::new();
        let pv = params.on_tape(&mut tape);
        let xv = tape.constant(x.clone());
        let mu = model::predict_probs(&mut tape, &pv, xv, model::DEFAULT_LEAKY_SLOPE)?;
        let loss = if ns {
            let mut row = vec![false; 2];
            row[other] = true;
            ns3l_loss(&mut tape, mu, &NegativeLabelMask::from_rows(vec![row])?)?
        } else {
            supervised_ce(&mut tape, mu, &one_hot(&[predicted], 2)?)?
        };
        let g = tape.backward(loss)?.wrt(pv.layers[0].0);
        Ok(g.data()[predicted] - g.data()[other])
    };
    Ok(GradientComparison {
        x_u,
        mu_u,
        inductive: -(1.0 - mu_u) * x_u,
        ns3l: mu_u * x_u,
        measured_inductive: measure(false)?,
        measured_ns3l: measure(true)?,
    })
}

/// Fits supervised and supervised + negative-sampling linear models on
/// every seed's toy problem.
pub fn run_toy_demo(cfg: &ToyDemoConfig) -> Result<ToyDemoReport> {
    if cfg.seeds.is_empty() || cfg.trace_interval == 0 {
        return Err(invalid("toy demo needs seeds and a positive trace interval"));
    }
    let per_seed: Vec<(ToySeedResult, Vec<TracePoint>, Option<GradientComparison>, f64)> = cfg
        .seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let (ds, split, w_star) = toy_dataset(cfg, seed)?;
            let mut trace = Vec::new();
            let sup = fit_toy(cfg, &ds, &split, seed, 0.0, "supervised", &mut trace)?;
            let ns = fit_toy(cfg, &ds, &split, seed, cfg.lambda1, "ns3l", &mut trace)?;
            let grads = if i == 0 {
                Some(compare_gradients(&sup, &ds, &split, cfg.bias.bias)?)
            } else {
                None
            };
            let res = ToySeedResult {
                seed,
                w_hat_supervised: toy_boundary(&sup),
                w_hat_ns3l: toy_boundary(&ns),
            };
            Ok((res, trace, grads, w_star))
        })
        .collect::<Result<_>>()?;

    let w_star = per_seed[0].3;
    let mut seeds = Vec::new();
    let mut trace = Vec::new();
    let mut gradients = None;
    for (res, tr, g, _) in per_seed {
        seeds.push(res);
        trace.extend(tr);
        gradients = gradients.or(g);
    }
    Ok(ToyDemoReport {
        w_star,
        seeds,
        gradients: gradients.expect("first seed always compares gradients"),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn boundary_of_linear_model() {
        let p = Params {
            layers: vec![crate::model::Layer {
                weight: Tensor::from_rows(&[vec![2.0, -2.0]]).unwrap(),
                bias: Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            }],
        };
        // 2x + 1 = -2x  ->  x = -0.25
        assert!((toy_boundary(&p) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn literal_gradients_have_opposite_signs() {
        let cfg = ToyDemoConfig {
            seeds: vec![3],
            steps: 50,
            ..ToyDemoConfig::default()
        };
        let rep = run_toy_demo(&cfg).unwrap();
        assert!(rep.gradients.opposite_signs());
        assert_eq!(rep.seeds.len(), 1);
        assert!(rep.trace_csv().starts_with("seed,step,method,boundary\n"));
    }

    #[test]
    fn sweep_csv_layout() {
        let cells = vec![
            SweepCell { threshold: 0.01, lambda1: 0.3, test_errors: vec![0.2, 0.4] },
            SweepCell { threshold: 0.02, lambda1: 1.0, test_errors: vec![0.1] },
        ];
        let csv = sweep_csv(&cells);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "T,lambda1,test_error");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0.01,0.3,0.3"));
    }
}
