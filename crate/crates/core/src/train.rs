//! Optimizer, parameter averaging, warmup and the training loop.

use std::fmt::Write as _;

use crate::config::ExperimentConfig;
use crate::data::{split_labeled_unlabeled, BatchStream, Dataset, SslSplit};
use crate::diffcore::{argmax, Tape, Tensor};
use crate::error::{invalid, Error, Result};
use crate::losses::{combined_objective, one_hot, Breakdown};
use crate::mixmatch::{mixmatch_batch, mixmatch_objective};
use crate::model::{self, init_params, MlpSpec, Params};
use crate::rng;

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &Params, lr: f64) -> Self {
        let zeros = |t: &&Tensor| Tensor::zeros(t.shape());
        let tensors = params.tensors();
        Self {
            m: tensors.iter().map(zeros).collect(),
            v: tensors.iter().map(zeros).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. `grads` follows [`Params::tensors`]
/// order.
pub fn adam_step(params: &mut Params, grads: &[Tensor], st: &mut AdamState) -> Result<()> {
    if grads.len() != st.m.len() {
        return Err(invalid(format!(
            "{} gradients for {} parameter tensors",
            grads.len(),
            st.m.len()
        )));
    }
    if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("adam gradient".into()));
    }
    st.t += 1;
    let t = st.t as i32;
    let bc1 = 1.0 - st.beta1.powi(t);
    let bc2 = 1.0 - st.beta2.powi(t);
    let (b1, b2, lr, eps) = (st.beta1, st.beta2, st.lr, st.eps);

    let mut updated = Vec::with_capacity(grads.len());
    for (i, (p, g)) in params.tensors().into_iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let m = st.m[i].zip_map(g, |m, g| b1 * m + (1.0 - b1) * g)?;
        let v = st.v[i].zip_map(g, |v, g| b2 * v + (1.0 - b2) * g * g)?;
        let step: Vec<f64> = m
            .data()
            .iter()
            .zip(v.data())
            .zip(p.data())
            .map(|((m, v), p)| p - lr * (m / bc1) / ((v / bc2).sqrt() + eps))
            .collect();
        updated.push(Tensor::new(p.shape().to_vec(), step)?);
        st.m[i] = m;
        st.v[i] = v;
    }
    *params = Params::from_tensors(updated)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EmaState {
    pub shadow: Params,
    pub decay: f64,
}

impl EmaState {
    pub fn new(params: &Params, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(invalid(format!("EMA decay {decay} outside [0, 1)")));
        }
        Ok(Self {
            shadow: params.clone(),
            decay,
        })
    }

    /// `θ' ← decay·θ' + (1 − decay)·θ`.
    pub fn update(&mut self, params: &Params) -> Result<()> {
        let d = self.decay;
        let blended = self
            .shadow
            .tensors()
            .into_iter()
            .zip(params.tensors())
            .map(|(s, p)| s.zip_map(p, |s, p| d * s + (1.0 - d) * p))
            .collect::<Result<Vec<_>>>()?;
        self.shadow = Params::from_tensors(blended)?;
        Ok(())
    }
}

/// Sigmoid-shaped ramp `exp(-5 (1 - min(t/T, 1))²)`; 1 when `T = 0`.
pub fn warmup_weight(step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        return 1.0;
    }
    let frac = (step as f64 / warmup_steps as f64).min(1.0);
    (-5.0 * (1.0 - frac).powi(2)).exp()
}

/// Fraction of rows whose argmax prediction differs from the label.
pub fn evaluate(params: &Params, x: &Tensor, y: &[usize], leaky_slope: f64) -> Result<f64> {
    if y.is_empty() || x.rows() != y.len() {
        return Err(invalid("evaluation slice must be nonempty and match its labels"));
    }
    let p = model::probs(params, x, leaky_slope)?;
    Ok(error_rate(&p, y))
}

pub fn error_rate(probs: &Tensor, y: &[usize]) -> f64 {
    let wrong = probs
        .row_iter()
        .zip(y)
        .filter(|(row, &label)| argmax(row) != label)
        .count();
    wrong as f64 / y.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub term: String,
    pub value: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,term,value\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.step, r.term, r.value).unwrap();
    }
    out
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub metrics: Vec<MetricRow>,
    pub final_params: Params,
    pub ema_params: Params,
    /// Parameters (raw or EMA, per config) at the best validation step.
    pub selected_params: Params,
    pub best_step: usize,
    pub best_val_error: f64,
    /// Test error at the best validation step.
    pub test_error: f64,
    /// Median test error over the last (up to) 20 evaluations.
    pub median_last_test_error: f64,
    pub split: SslSplit,
}

/// Builds the dataset the config describes.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.dataset.build()
}

pub fn train_run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let ds = load_dataset(cfg)?;
    train_run_on(cfg, &ds)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Runs one seeded training job on an already loaded dataset.
pub fn train_run_on(cfg: &ExperimentConfig, ds: &Dataset) -> Result<RunOutcome> {
    cfg.validate()?;
    let split = split_labeled_unlabeled(ds, &cfg.split_spec(), cfg.seed)?;
    let mut widths = vec![ds.dim()];
    widths.extend(&cfg.hidden);
    widths.push(ds.classes);
    let spec = MlpSpec {
        layer_widths: widths,
        leaky_slope: cfg.leaky_slope,
        seed: cfg.seed,
    };
    spec.validate()?;
    let slope = cfg.leaky_slope;

    let mut params = init_params(&spec);
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut ema = EmaState::new(&params, cfg.ema_decay)?;
    let mut batches = BatchStream::new(ds, &split, cfg.seed);
    let mut loss_rng = rng::stream(cfg.seed, rng::streams::LOSS);

    let objective = cfg.objective_config(ds.classes);
    let mix_cfg = cfg.mixmatch_config(ds.classes);
    let uses_unlabeled = cfg.method.uses_unlabeled();
    let b2 = if uses_unlabeled { cfg.batch_unlabeled } else { 0 };
    if uses_unlabeled && split.unlabeled.is_empty() {
        return Err(invalid("method needs unlabeled data but the pool is empty"));
    }

    let pool_x = ds.x.select_rows(&split.labeled);
    let pool_y: Vec<usize> = split.labeled.iter().map(|&i| ds.y[i]).collect();
    let eval_set = |idx: &[usize]| (!idx.is_empty()).then(|| (ds.x.select_rows(idx), idx.iter().map(|&i| ds.y[i]).collect::<Vec<_>>()));
    let val = eval_set(&split.validation);
    let test = eval_set(&split.test);

    let mut metrics = Vec::new();
    let mut best: Option<(usize, f64, f64, Params)> = None;
    let mut test_history = Vec::new();

    for step in 1..=cfg.steps {
        let warm = warmup_weight(step - 1, cfg.warmup_steps);
        adam.lr = match cfg.lr_decay_step {
            Some(s) if step > s => cfg.lr * 0.1,
            _ => cfg.lr,
        };
        let batch = batches.next_batch(cfg.batch_labeled, b2)?;

        let mut tape = Tape::new();
        let pv = params.on_tape(&mut tape);
        let (loss, mut breakdown, mask_error) = if cfg.method.is_mixmatch() {
            let xu = batch
                .x_unlabeled()
                .ok_or_else(|| invalid("MixMatch needs an unlabeled batch"))?;
            let y = one_hot(&batch.y_labeled, ds.classes)?;
            let mixed =
                mixmatch_batch(&params, &batch.x_labeled, &y, xu, &mix_cfg, slope, &mut loss_rng)?;
            let (l, br) = mixmatch_objective(&mut tape, &pv, &mixed, &mix_cfg, slope, warm)?;
            (l, br, None)
        } else {
            let (l, br, targets) = combined_objective(
                &mut tape,
                &params,
                &pv,
                &batch,
                Some((&pool_x, &pool_y)),
                &objective,
                warm,
                &mut loss_rng,
            )?;
            let err = targets
                .mask
                .as_ref()
                .and_then(|m| m.error_rate(batch.diagnostics().unlabeled_labels));
            (l, br, err)
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged(step));
        }
        let grads = tape.backward(loss).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged(step),
            other => other,
        })?;
        let g: Vec<Tensor> = pv.vars().into_iter().map(|v| grads.wrt(v)).collect();
        adam_step(&mut params, &g, &mut adam).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged(step),
            other => other,
        })?;
        ema.update(&params)?;

        if step % cfg.eval_interval == 0 || step == cfg.steps {
            breakdown.push("warmup", warm);
            breakdown.push("lr", adam.lr);
            if let Some(e) = mask_error {
                breakdown.push("neg_error_rate", e);
            }
            log_eval(
                &mut metrics,
                step,
                &breakdown,
                &params,
                &ema.shadow,
                val.as_ref(),
                test.as_ref(),
                slope,
            )?;
            let chosen = if cfg.eval_ema { &ema.shadow } else { &params };
            let test_err = match &test {
                Some((x, y)) => evaluate(chosen, x, y, slope)?,
                None => f64::NAN,
            };
            test_history.push(test_err);
            let val_err = match &val {
                Some((x, y)) => evaluate(chosen, x, y, slope)?,
                None => 0.0,
            };
            let better = best.as_ref().is_none_or(|b| val_err < b.1 || val.is_none());
            if better {
                best = Some((step, val_err, test_err, chosen.clone()));
            }
        }
    }

    let (best_step, best_val_error, test_error, selected_params) =
        best.ok_or_else(|| invalid("training ran zero steps"))?;
    let tail = &test_history[test_history.len().saturating_sub(20)..];
    Ok(RunOutcome {
        metrics,
        final_params: params,
        ema_params: ema.shadow,
        selected_params,
        best_step,
        best_val_error,
        test_error,
        median_last_test_error: median(tail),
        split,
    })
}

#[allow(clippy::too_many_arguments)]
fn log_eval(
    metrics: &mut Vec<MetricRow>,
    step: usize,
    breakdown: &Breakdown,
    params: &Params,
    ema: &Params,
    val: Option<&(Tensor, Vec<usize>)>,
    test: Option<&(Tensor, Vec<usize>)>,
    slope: f64,
) -> Result<()> {
    let mut push = |term: &str, value: f64| {
        metrics.push(MetricRow {
            step,
            term: term.to_string(),
            value,
        })
    };
    for (name, v) in &breakdown.terms {
        push(name, *v);
    }
    for (label, set) in [("val", val), ("test", test)] {
        if let Some((x, y)) = set {
            push(&format!("{label}_error"), evaluate(params, x, y, slope)?);
            push(&format!("ema_{label}_error"), evaluate(ema, x, y, slope)?);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;

    fn tiny() -> Params {
        Params {
            layers: vec![Layer {
                weight: Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap(),
                bias: Tensor::from_rows(&[vec![0.5, 0.0]]).unwrap(),
            }],
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = tiny();
        let before = p.clone();
        let mut st = AdamState::new(&p, 0.01);
        let zeros: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        adam_step(&mut p, &zeros, &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = tiny();
        let before = p.clone();
        let mut st = AdamState::new(&p, 0.01);
        let g = vec![
            Tensor::from_rows(&[vec![3.0, -0.5]]).unwrap(),
            Tensor::from_rows(&[vec![-2.0, 1e-2]]).unwrap(),
        ];
        adam_step(&mut p, &g, &mut st).unwrap();
        for ((a, b), gt) in p.tensors().iter().zip(before.tensors()).zip(&g) {
            for ((x, y), gv) in a.data().iter().zip(b.data()).zip(gt.data()) {
                assert!(((x - y) + 0.01 * gv.signum()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = tiny();
        let mut st = AdamState::new(&p, 0.01);
        let bad = vec![
            Tensor::from_parts(vec![1, 2], vec![f64::NAN, 0.0]),
            Tensor::zeros(&[1, 2]),
        ];
        assert!(adam_step(&mut p, &bad, &mut st).is_err());
    }

    #[test]
    fn ema_arithmetic() {
        let zero = Params {
            layers: vec![Layer {
                weight: Tensor::zeros(&[1, 1]),
                bias: Tensor::zeros(&[1, 1]),
            }],
        };
        let one = Params {
            layers: vec![Layer {
                weight: Tensor::full(&[1, 1], 1.0),
                bias: Tensor::full(&[1, 1], 1.0),
            }],
        };
        let mut ema = EmaState::new(&zero, 0.99).unwrap();
        ema.update(&one).unwrap();
        assert!((ema.shadow.layers[0].weight.item() - 0.01).abs() < 1e-15);
        let gap0 = 1.0 - ema.shadow.layers[0].weight.item();
        ema.update(&one).unwrap();
        let gap1 = 1.0 - ema.shadow.layers[0].weight.item();
        assert!((gap1 - 0.99 * gap0).abs() < 1e-15);

        let mut instant = EmaState::new(&zero, 0.0).unwrap();
        instant.update(&one).unwrap();
        assert_eq!(instant.shadow, one);
        assert!(EmaState::new(&zero, 1.0).is_err());
    }

    #[test]
    fn warmup_shape() {
        assert_eq!(warmup_weight(100, 100), 1.0);
        assert_eq!(warmup_weight(500, 100), 1.0);
        assert!((warmup_weight(50, 100) - (-1.25f64).exp()).abs() < 1e-15);
        assert!((warmup_weight(0, 100) - (-5.0f64).exp()).abs() < 1e-15);
        assert_eq!(warmup_weight(0, 0), 1.0);
        let mut prev = 0.0;
        for t in 0..150 {
            let w = warmup_weight(t, 100);
            assert!(w >= prev);
            prev = w;
        }
    }

    #[test]
    fn evaluate_counts_argmax_errors() {
        let p = tiny();
        // logits (x + 0.5, -2x): x=1 -> class 0, x=-1 -> class 1
        let x = Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        assert_eq!(evaluate(&p, &x, &[0, 1], 0.1).unwrap(), 0.0);
        assert_eq!(evaluate(&p, &x, &[1, 1], 0.1).unwrap(), 0.5);
        assert!(evaluate(&p, &x, &[], 0.1).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rows = vec![
            MetricRow { step: 10, term: "total".into(), value: 0.5 },
            MetricRow { step: 10, term: "val_error".into(), value: 0.25 },
        ];
        assert_eq!(metrics_csv(&rows), "step,term,value\n10,total,0.5\n10,val_error,0.25\n");
    }
}
