//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{gen_blobs, load_csv_dataset, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, NegativeStrategy, ObjectiveConfig, UnsupervisedTerms, VatConfig};
use crate::mixmatch::MixMatchConfig;
use crate::negselect::NnVariant;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Supervised,
    Pl,
    Ns3l,
    Pi,
    PiNs3l,
    Vat,
    VatEntmin,
    VatPl,
    VatNs3l,
    MixMatch,
    MixMatchNs3l,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Supervised,
        Method::Pl,
        Method::Ns3l,
        Method::Pi,
        Method::PiNs3l,
        Method::Vat,
        Method::VatEntmin,
        Method::VatPl,
        Method::VatNs3l,
        Method::MixMatch,
        Method::MixMatchNs3l,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::Pl => "pl",
            Method::Ns3l => "ns3l",
            Method::Pi => "pi",
            Method::PiNs3l => "pi+ns3l",
            Method::Vat => "vat",
            Method::VatEntmin => "vat+entmin",
            Method::VatPl => "vat+pl",
            Method::VatNs3l => "vat+ns3l",
            Method::MixMatch => "mixmatch",
            Method::MixMatchNs3l => "mixmatch+ns3l",
        }
    }

    pub fn is_mixmatch(self) -> bool {
        matches!(self, Method::MixMatch | Method::MixMatchNs3l)
    }

    pub fn uses_unlabeled(self) -> bool {
        !matches!(self, Method::Supervised)
    }

    pub fn has_ns3l(self) -> bool {
        matches!(
            self,
            Method::Ns3l | Method::PiNs3l | Method::VatNs3l | Method::MixMatchNs3l
        )
    }

    fn terms(self) -> UnsupervisedTerms {
        let mut t = UnsupervisedTerms {
            ns3l: self.has_ns3l(),
            ..UnsupervisedTerms::default()
        };
        match self {
            Method::Pl => t.pseudo_label = true,
            Method::Pi | Method::PiNs3l => t.pi = true,
            Method::Vat | Method::VatNs3l => t.vat = true,
            Method::VatEntmin => {
                t.vat = true;
                t.entmin = true;
            }
            Method::VatPl => {
                t.vat = true;
                t.pseudo_label = true;
            }
            _ => {}
        }
        t
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config {
                key: "method".into(),
                msg: format!(
                    "unknown method `{s}` (expected one of {})",
                    Method::ALL.map(|m| m.name()).join(", ")
                ),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    },
    Csv(PathBuf),
}

impl DatasetSpec {
    pub fn build(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Blobs {
                classes,
                per_class,
                dim,
                spread,
                seed,
            } => gen_blobs(*classes, *per_class, *dim, *spread, &mut rng::seeded(*seed)),
            DatasetSpec::Csv(path) => load_csv_dataset(path),
        }
    }
}

/// Which negative-label selector feeds the negative-sampling term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativesKind {
    Threshold,
    Uniform,
    Oracle,
    NnExclude1,
    NnExclude4,
    Furthest,
}

impl NegativesKind {
    const NAMES: [(&'static str, NegativesKind); 6] = [
        ("threshold", NegativesKind::Threshold),
        ("uniform", NegativesKind::Uniform),
        ("oracle", NegativesKind::Oracle),
        ("nn_exclude1", NegativesKind::NnExclude1),
        ("nn_exclude4", NegativesKind::NnExclude4),
        ("furthest", NegativesKind::Furthest),
    ];

    fn name(self) -> &'static str {
        Self::NAMES.iter().find(|(_, k)| *k == self).unwrap().0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub n_labeled: usize,
    /// 0 keeps the whole remainder.
    pub n_unlabeled: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub method: Method,
    pub threshold: f64,
    /// Rescales `T` to `T·10/K`, keeping `T` meaningful across class counts.
    pub scale_threshold_by_classes: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_entmin: f64,
    pub lambda_pl: f64,
    pub pl_tau: f64,
    pub negatives: NegativesKind,
    pub neg_count: usize,
    pub warmup_ns3l: bool,
    pub xi: f64,
    pub epsilon: f64,
    pub power_iterations: usize,
    pub pi_noise: f64,
    pub temperature: f64,
    pub augmentations: usize,
    pub alpha: f64,
    pub aug_noise: f64,
    pub steps: usize,
    pub warmup_steps: usize,
    pub eval_interval: usize,
    pub lr: f64,
    pub lr_decay_step: Option<usize>,
    pub ema_decay: f64,
    pub eval_ema: bool,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Defaults for `method`, including its method-specific `T`, `λ₁` and
    /// evaluation choice.
    pub fn defaults_for(method: Method) -> Self {
        let mixmatch = method.is_mixmatch();
        let (threshold, lambda1) = match method {
            Method::MixMatchNs3l => (0.05, 5.0),
            Method::VatNs3l => (0.04, 0.3),
            _ => (0.04, 1.0),
        };
        let w = LossWeights::default();
        let v = VatConfig::default();
        let m = MixMatchConfig::default();
        Self {
            dataset: DatasetSpec::Blobs {
                classes: 4,
                per_class: 750,
                dim: 8,
                spread: 0.5,
                seed: 0,
            },
            n_labeled: 20,
            n_unlabeled: 2000,
            val_fraction: 0.1,
            test_fraction: 0.1,
            hidden: vec![32, 32],
            leaky_slope: crate::model::DEFAULT_LEAKY_SLOPE,
            method,
            threshold,
            scale_threshold_by_classes: false,
            lambda1,
            lambda2: w.lambda2,
            lambda3: m.lambda3,
            lambda_entmin: w.entmin,
            lambda_pl: w.pseudo_label,
            pl_tau: 0.95,
            negatives: NegativesKind::Threshold,
            neg_count: 1,
            warmup_ns3l: true,
            xi: v.xi,
            epsilon: v.epsilon,
            power_iterations: v.power_iterations,
            pi_noise: 0.1,
            temperature: m.temperature,
            augmentations: m.augmentations,
            alpha: m.alpha,
            aug_noise: m.noise_sigma,
            steps: 2000,
            warmup_steps: 500,
            eval_interval: 50,
            lr: 6e-4,
            lr_decay_step: None,
            ema_decay: 0.999,
            eval_ema: mixmatch,
            batch_labeled: 50,
            batch_unlabeled: 50,
            seed: 0,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            n_labeled: self.n_labeled,
            n_unlabeled: (self.n_unlabeled > 0).then_some(self.n_unlabeled),
            val_fraction: self.val_fraction,
            test_fraction: self.test_fraction,
        }
    }

    /// Threshold actually applied for `classes` classes.
    pub fn effective_threshold(&self, classes: usize) -> f64 {
        if self.scale_threshold_by_classes {
            self.threshold * 10.0 / classes as f64
        } else {
            self.threshold
        }
    }

    pub fn negative_strategy(&self) -> NegativeStrategy {
        let count = self.neg_count;
        match self.negatives {
            NegativesKind::Threshold => NegativeStrategy::Threshold,
            NegativesKind::Uniform => NegativeStrategy::Uniform { count },
            NegativesKind::Oracle => NegativeStrategy::Oracle { count },
            NegativesKind::NnExclude1 => NegativeStrategy::NearestExclude {
                variant: NnVariant::Exclude1,
                count,
            },
            NegativesKind::NnExclude4 => NegativeStrategy::NearestExclude {
                variant: NnVariant::Exclude4,
                count,
            },
            NegativesKind::Furthest => NegativeStrategy::FurthestClass,
        }
    }

    pub fn objective_config(&self, classes: usize) -> ObjectiveConfig {
        ObjectiveConfig {
            terms: self.method.terms(),
            weights: LossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                lambda3: self.lambda3,
                entmin: self.lambda_entmin,
                pseudo_label: self.lambda_pl,
            },
            threshold: self.effective_threshold(classes),
            pl_tau: self.pl_tau,
            vat: VatConfig {
                xi: self.xi,
                epsilon: self.epsilon,
                power_iterations: self.power_iterations,
            },
            pi_noise: self.pi_noise,
            negatives: self.negative_strategy(),
            leaky_slope: self.leaky_slope,
            warmup_ns3l: self.warmup_ns3l,
        }
    }

    pub fn mixmatch_config(&self, classes: usize) -> MixMatchConfig {
        MixMatchConfig {
            temperature: self.temperature,
            augmentations: self.augmentations,
            alpha: self.alpha,
            lambda3: self.lambda3,
            noise_sigma: self.aug_noise,
            ns3l: (self.method == Method::MixMatchNs3l)
                .then(|| (self.effective_threshold(classes), self.lambda1)),
            fixed_lambda: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if self.steps == 0 {
            return bad("steps", "must be positive");
        }
        if self.warmup_steps > self.steps {
            return bad("warmup_steps", "must not exceed steps");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be positive");
        }
        if self.batch_labeled == 0 {
            return bad("batch_labeled", "must be positive");
        }
        if self.method.uses_unlabeled() && self.batch_unlabeled == 0 {
            return bad("batch_unlabeled", "this method needs unlabeled batches");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay", "must lie in [0, 1)");
        }
        if self.method.has_ns3l() && !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("T", "must lie in (0, 1)");
        }
        if matches!(self.method, Method::Pl | Method::VatPl) && !(self.pl_tau > 0.0 && self.pl_tau <= 1.0) {
            return bad("pl_tau", "must lie in (0, 1]");
        }
        if self.neg_count == 0 && matches!(self.negatives, NegativesKind::Uniform | NegativesKind::Oracle) {
            return bad("neg_count", "must be positive");
        }
        self.objective_config(2).weights.validate()?;
        self.objective_config(2).vat.validate()?;
        self.mixmatch_config(2).validate()
    }

    /// Every key with its current value, in a fixed order.
    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e: Vec<(&'static str, String)> = Vec::new();
        match &self.dataset {
            DatasetSpec::Blobs {
                classes,
                per_class,
                dim,
                spread,
                seed,
            } => {
                e.push(("dataset", "blobs".into()));
                e.push(("blob_classes", classes.to_string()));
                e.push(("blob_per_class", per_class.to_string()));
                e.push(("blob_dim", dim.to_string()));
                e.push(("blob_spread", spread.to_string()));
                e.push(("data_seed", seed.to_string()));
            }
            DatasetSpec::Csv(p) => {
                e.push(("dataset", "csv".into()));
                e.push(("data_path", p.display().to_string()));
            }
        }
        let hidden = self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
        e.extend([
            ("n_labeled", self.n_labeled.to_string()),
            ("n_unlabeled", self.n_unlabeled.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            ("hidden", hidden),
            ("leaky_slope", self.leaky_slope.to_string()),
            ("method", self.method.name().into()),
            ("T", self.threshold.to_string()),
            ("scale_threshold_by_classes", self.scale_threshold_by_classes.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("lambda3", self.lambda3.to_string()),
            ("lambda_entmin", self.lambda_entmin.to_string()),
            ("lambda_pl", self.lambda_pl.to_string()),
            ("pl_tau", self.pl_tau.to_string()),
            ("negatives", self.negatives.name().into()),
            ("neg_count", self.neg_count.to_string()),
            ("warmup_ns3l", self.warmup_ns3l.to_string()),
            ("xi", self.xi.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("power_iterations", self.power_iterations.to_string()),
            ("pi_noise", self.pi_noise.to_string()),
            ("E", self.temperature.to_string()),
            ("A", self.augmentations.to_string()),
            ("alpha", self.alpha.to_string()),
            ("aug_noise", self.aug_noise.to_string()),
            ("steps", self.steps.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay_step", self.lr_decay_step.unwrap_or(0).to_string()),
            ("ema_decay", self.ema_decay.to_string()),
            ("eval_ema", self.eval_ema.to_string()),
            ("batch_labeled", self.batch_labeled.to_string()),
            ("batch_unlabeled", self.batch_unlabeled.to_string()),
            ("seed", self.seed.to_string()),
        ]);
        e
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config {
                key: key.into(),
                msg: format!("cannot parse `{v}`"),
            })
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config {
                    key: key.into(),
                    msg: format!("expected true or false, got `{v}`"),
                }),
            }
        }
        match key {
            "dataset" => {
                self.dataset = match value {
                    "blobs" => Self::defaults_for(self.method).dataset,
                    "csv" => DatasetSpec::Csv(PathBuf::new()),
                    _ => {
                        return Err(Error::Config {
                            key: key.into(),
                            msg: format!("unknown dataset `{value}` (expected blobs or csv)"),
                        })
                    }
                }
            }
            "data_path" => match &mut self.dataset {
                DatasetSpec::Csv(p) => *p = PathBuf::from(value),
                DatasetSpec::Blobs { .. } => {
                    return Err(Error::Config {
                        key: key.into(),
                        msg: "only valid with dataset = csv".into(),
                    })
                }
            },
            "blob_classes" => *blob_fields(&mut self.dataset, key)?.0 = num(key, value)?,
            "blob_per_class" => *blob_fields(&mut self.dataset, key)?.1 = num(key, value)?,
            "blob_dim" => *blob_fields(&mut self.dataset, key)?.2 = num(key, value)?,
            "blob_spread" => *blob_fields(&mut self.dataset, key)?.3 = num(key, value)?,
            "data_seed" => *blob_fields(&mut self.dataset, key)?.4 = num(key, value)?,
            "n_labeled" => self.n_labeled = num(key, value)?,
            "n_unlabeled" => self.n_unlabeled = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "test_fraction" => self.test_fraction = num(key, value)?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "leaky_slope" => self.leaky_slope = num(key, value)?,
            "method" => self.method = value.parse()?,
            "T" => self.threshold = num(key, value)?,
            "scale_threshold_by_classes" => self.scale_threshold_by_classes = flag(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "lambda3" => self.lambda3 = num(key, value)?,
            "lambda_entmin" => self.lambda_entmin = num(key, value)?,
            "lambda_pl" => self.lambda_pl = num(key, value)?,
            "pl_tau" => self.pl_tau = num(key, value)?,
            "negatives" => {
                self.negatives = NegativesKind::NAMES
                    .iter()
                    .find(|(n, _)| *n == value)
                    .map(|&(_, k)| k)
                    .ok_or_else(|| Error::Config {
                        key: key.into(),
                        msg: format!("unknown strategy `{value}`"),
                    })?
            }
            "neg_count" => self.neg_count = num(key, value)?,
            "warmup_ns3l" => self.warmup_ns3l = flag(key, value)?,
            "xi" => self.xi = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "power_iterations" => self.power_iterations = num(key, value)?,
            "pi_noise" => self.pi_noise = num(key, value)?,
            "E" => self.temperature = num(key, value)?,
            "A" => self.augmentations = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "aug_noise" => self.aug_noise = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "eval_interval" => self.eval_interval = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay_step" => {
                let s: usize = num(key, value)?;
                self.lr_decay_step = (s > 0).then_some(s);
            }
            "ema_decay" => self.ema_decay = num(key, value)?,
            "eval_ema" => self.eval_ema = flag(key, value)?,
            "batch_labeled" => self.batch_labeled = num(key, value)?,
            "batch_unlabeled" => self.batch_unlabeled = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    /// Builds a config from `key = value` pairs. Later pairs win. The method
    /// is resolved first so its defaults sit under every explicit value.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let method = match pairs.iter().rev().find(|(k, _)| k == "method") {
            Some((_, v)) => v.parse()?,
            None => Method::Ns3l,
        };
        let mut cfg = Self::defaults_for(method);
        // dataset first, so blob_* / data_path land on the right variant
        if let Some((_, v)) = pairs.iter().rev().find(|(k, _)| k == "dataset") {
            cfg.set("dataset", v)?;
        }
        for (k, v) in pairs {
            if k != "dataset" && k != "method" {
                cfg.set(k, v)?;
            }
        }
        if let DatasetSpec::Csv(p) = &cfg.dataset {
            if p.as_os_str().is_empty() {
                return Err(Error::Config {
                    key: "data_path".into(),
                    msg: "required when dataset = csv".into(),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Reads `path` and applies `overrides` on top of its values.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => parse_pairs(&std::fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn emit(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}

type BlobFields<'a> = (&'a mut usize, &'a mut usize, &'a mut usize, &'a mut f64, &'a mut u64);

fn blob_fields<'a>(ds: &'a mut DatasetSpec, key: &str) -> Result<BlobFields<'a>> {
    match ds {
        DatasetSpec::Blobs {
            classes,
            per_class,
            dim,
            spread,
            seed,
        } => Ok((classes, per_class, dim, spread, seed)),
        DatasetSpec::Csv(_) => Err(Error::Config {
            key: key.into(),
            msg: "only valid with dataset = blobs".into(),
        }),
    }
}

fn known_keys() -> Vec<&'static str> {
    let mut keys: Vec<&str> = ExperimentConfig::defaults_for(Method::Ns3l)
        .entries()
        .into_iter()
        .map(|(k, _)| k)
        .collect();
    keys.push("data_path");
    keys
}

fn unknown_key(key: &str) -> Error {
    let suggestion = known_keys()
        .into_iter()
        .map(|k| (strsim::levenshtein(k, key), k))
        .filter(|&(d, _)| d <= 3)
        .min();
    let msg = match suggestion {
        Some((_, k)) => format!("unknown key (did you mean `{k}`?)"),
        None => "unknown key".into(),
    };
    Error::Config {
        key: key.into(),
        msg,
    }
}

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            key: line.to_string(),
            msg: format!("line {} is not `key = value`", i + 1),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
