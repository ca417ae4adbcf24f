//! Flat `key = value` run configuration.
//!
//! Resolution order, later wins: built-in defaults, per-command defaults,
//! config file (or the `config` object of a run manifest), explicit overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackFamily, AttackSpec, Norm};
use crate::data::LabelSpace;
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::model::{Activation, ModelSpec, OutputHead};
use crate::train::{LrSchedule, Method, TrainConfig};

/// Environment variable consulted when `data` is empty.
pub const DATA_ENV: &str = "CAAT_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($($name:literal = $default:literal : $help:literal),* $(,)?) => {
        &[$(KeySpec { name: $name, default: $default, help: $help }),*]
    };
}

/// Every recognized key with its built-in default.
pub const KEYS: &[KeySpec] = keys![
    "task" = "mnist" : "mnist, mnist_binary or blobs",
    "data" = "" : "MNIST directory (falls back to $CAAT_DATA_DIR, then data/mnist)",
    "out" = "runs" : "output directory",
    "seed" = "0" : "base random seed",
    "class_a" = "1" : "digit mapped to +1 for mnist_binary",
    "class_b" = "2" : "digit mapped to -1 for mnist_binary",
    "pad_to" = "32" : "zero-pad MNIST images to pad_to x pad_to",
    "train_limit" = "10000" : "use the first N training samples (0 = all)",
    "test_limit" = "1000" : "use the first N test samples (0 = all)",
    "blobs_per_class" = "500" : "blob samples per class",
    "blobs_dim" = "2" : "blob dimension",
    "blobs_separation" = "10" : "distance between blob centers",
    "model" = "mlp" : "logistic or mlp",
    "hidden" = "256" : "comma-separated hidden widths for mlp",
    "activation" = "relu" : "relu or tanh",
    "method" = "ca_at" : "standard, vanilla_at or ca_at",
    "lambda" = "0.5" : "vanilla_at mixing weight in [0, 1]",
    "gamma" = "0.8" : "ca_at cone threshold in [-1, 1]",
    "loss" = "softmax_ce" : "bce, softmax_ce, trades or clp",
    "beta" = "6" : "trades/clp regularization weight",
    "attack" = "pgd" : "none, fgsm, pgd or analytic_linear",
    "norm" = "linf" : "linf or l2",
    "delta" = "8/255" : "attack budget",
    "alpha" = "2/255" : "pgd step size",
    "steps" = "10" : "pgd steps",
    "random_init" = "true" : "pgd random start",
    "clip" = "true" : "clip adversarial inputs to [0, 1]",
    "epochs" = "20" : "training epochs",
    "batch_size" = "128" : "minibatch size",
    "lr_max" = "0.1" : "peak learning rate",
    "momentum" = "0.9" : "SGD momentum in [0, 1)",
    "lr_schedule" = "one_cycle" : "one_cycle or constant",
    "warmup_frac" = "0.3" : "one-cycle warmup fraction",
    "lr_div" = "25" : "one-cycle initial divisor",
    "lr_final_div" = "10000" : "one-cycle final divisor",
    "lambda_grid" = "0,0.25,0.5,0.75,1" : "sweep: vanilla_at lambdas",
    "gamma_grid" = "0.7,0.75,0.8,0.85,0.9,1" : "sweep: ca_at gammas",
    "workers" = "0" : "sweep: parallel runs (0 = available cores)",
    "svg" = "true" : "sweep: also write front.svg",
    "delta_list" = "0.05,0.1,0.15,0.2,0.25,0.3" : "synthetic: budgets to train at",
    "audit_samples" = "32" : "synthetic: samples per budget for the bound audit",
    "checkpoint" = "" : "model checkpoint for eval, bound-check and export-gradients",
    "samples" = "100" : "samples for bound-check and export-gradients",
];

/// Keys that do not influence results and are left out of the run id.
const VOLATILE_KEYS: &[&str] = &["out", "data", "workers"];

pub fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    Eval,
    Sweep,
    Synthetic,
    BoundCheck,
    ExportGradients,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::Synthetic => "synthetic",
            Command::BoundCheck => "bound-check",
            Command::ExportGradients => "export-gradients",
        }
    }

    /// Defaults layered over [`KEYS`] for this command.
    pub fn defaults(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Command::Synthetic => &[
                ("task", "mnist_binary"),
                ("train_limit", "0"),
                ("test_limit", "0"),
                ("model", "logistic"),
                ("loss", "bce"),
                ("method", "vanilla_at"),
                ("lambda", "0.5"),
                ("attack", "analytic_linear"),
                ("clip", "false"),
                ("lr_max", "0.01"),
            ],
            Command::BoundCheck => &[("task", "mnist_binary"), ("model", "logistic"), ("loss", "bce")],
            _ => &[],
        }
    }
}

/// A fully resolved configuration: every key has a value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", i + 1), format!("expected key = value, got `{raw}`")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Config {
    /// Built-in and per-command defaults only.
    pub fn defaults(command: Command) -> Self {
        let mut values: BTreeMap<String, String> =
            KEYS.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect();
        for (k, v) in command.defaults() {
            values.insert((*k).to_string(), (*v).to_string());
        }
        let mut cfg = Self { values };
        cfg.resolve_data_dir();
        cfg
    }

    /// Defaults, then `file` (key=value text or a manifest JSON), then `overrides`.
    pub fn resolve<'a>(
        command: Command,
        file: Option<&Path>,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut cfg = Self::defaults(command);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in Self::parse_text(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.resolve_data_dir();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses key=value text, or the `config` object of a run manifest.
    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
        if text.trim_start().starts_with('{') {
            #[derive(Deserialize)]
            struct Snapshot {
                config: BTreeMap<String, String>,
            }
            let snap: Snapshot = serde_json::from_str(text)?;
            Ok(snap.config.into_iter().collect())
        } else {
            parse_pairs(text)
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key_spec(key).is_none() {
            return Err(Error::config(key, "unknown key"));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    fn resolve_data_dir(&mut self) {
        if self.values.get("data").is_some_and(|v| !v.is_empty()) {
            return;
        }
        let dir = std::env::var(DATA_ENV)
            .ok()
            .filter(|v| !v.is_empty())
            .unwrap_or_else(|| DEFAULT_DATA_DIR.to_string());
        self.values.insert("data".into(), dir);
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::config(key, "missing"))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        parse_f64(self.raw(key)?).map_err(|r| Error::config(key, r))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| Error::config(key, format!("expected a non-negative integer, got `{v}`")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| Error::config(key, format!("expected a non-negative integer, got `{v}`")))
    }

    pub fn i64(&self, key: &str) -> Result<i64> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| Error::config(key, format!("expected an integer, got `{v}`")))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.raw(key)?.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => Err(Error::config(key, format!("expected true or false, got `{other}`"))),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.raw(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| parse_f64(s.trim()).map_err(|r| Error::config(key, r)))
            .collect()
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.raw(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::config(key, format!("expected integers, got `{s}`")))
            })
            .collect()
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.raw(key)?))
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        self.path("out")
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("seed")
    }

    pub fn method(&self) -> Result<Method> {
        let m = match self.raw("method")? {
            "standard" => Method::Standard,
            "vanilla_at" => Method::VanillaAt { lambda: self.f64("lambda")? },
            "ca_at" => Method::CaAt { gamma: self.f64("gamma")? },
            other => return Err(Error::config("method", format!("unknown method `{other}`"))),
        };
        m.validate().map_err(|e| Error::config("method", e.to_string()))?;
        Ok(m)
    }

    pub fn loss(&self) -> Result<LossKind> {
        let l = match self.raw("loss")? {
            "bce" => LossKind::Bce,
            "softmax_ce" => LossKind::SoftmaxCe,
            "trades" => LossKind::Trades { beta: self.f64("beta")? },
            "clp" => LossKind::Clp { beta: self.f64("beta")? },
            other => return Err(Error::config("loss", format!("unknown loss `{other}`"))),
        };
        l.validate().map_err(|e| Error::config("beta", e.to_string()))?;
        Ok(l)
    }

    pub fn activation(&self) -> Result<Activation> {
        match self.raw("activation")? {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::config("activation", format!("unknown activation `{other}`"))),
        }
    }

    /// The attack described by the `attack`, `norm`, `delta`, ... keys, with
    /// `delta` replaced when given.
    pub fn attack_with_delta(&self, delta: Option<f64>) -> Result<AttackSpec> {
        let family = match self.raw("attack")? {
            "none" => AttackFamily::None,
            "fgsm" => AttackFamily::Fgsm,
            "pgd" => AttackFamily::Pgd,
            "analytic_linear" => AttackFamily::AnalyticLinear,
            other => return Err(Error::config("attack", format!("unknown attack `{other}`"))),
        };
        let norm = match self.raw("norm")? {
            "linf" => Norm::Linf,
            "l2" => Norm::L2,
            other => return Err(Error::config("norm", format!("unknown norm `{other}`"))),
        };
        let delta = match delta {
            Some(d) => d,
            None => self.f64("delta")?,
        };
        let mut spec = match family {
            AttackFamily::None => AttackSpec::none(),
            AttackFamily::Fgsm => AttackSpec::fgsm(delta),
            AttackFamily::Pgd => AttackSpec::pgd(
                norm,
                delta,
                self.f64("alpha")?,
                self.usize("steps")?,
                self.bool("random_init")?,
            ),
            AttackFamily::AnalyticLinear => AttackSpec::analytic_linear(delta),
        };
        spec.norm = norm;
        if family != AttackFamily::Pgd && norm != Norm::Linf {
            return Err(Error::config("norm", format!("{} supports only linf", self.raw("attack")?)));
        }
        if !self.bool("clip")? {
            spec = spec.unclipped();
        }
        spec.validate().map_err(|e| Error::config("attack", e.to_string()))?;
        Ok(spec)
    }

    pub fn attack(&self) -> Result<AttackSpec> {
        self.attack_with_delta(None)
    }

    pub fn lr_schedule(&self) -> Result<LrSchedule> {
        let s = match self.raw("lr_schedule")? {
            "constant" => LrSchedule::Constant,
            "one_cycle" => LrSchedule::OneCycle {
                warmup_frac: self.f64("warmup_frac")?,
                div: self.f64("lr_div")?,
                final_div: self.f64("lr_final_div")?,
            },
            other => return Err(Error::config("lr_schedule", format!("unknown schedule `{other}`"))),
        };
        s.validate().map_err(|e| Error::config("lr_schedule", e.to_string()))?;
        Ok(s)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            method: self.method()?,
            loss: self.loss()?,
            attack: self.attack()?,
            eval_attack: None,
            epochs: self.usize("epochs")?,
            batch_size: self.usize("batch_size")?,
            lr_max: self.f64("lr_max")?,
            momentum: self.f64("momentum")?,
            lr_schedule: self.lr_schedule()?,
            seed: self.seed()?,
        };
        cfg.validate().map_err(|e| Error::config("training", e.to_string()))?;
        Ok(cfg)
    }

    /// Architecture for inputs of width `input_dim` and the given labels.
    pub fn model_spec(&self, input_dim: usize, labels: LabelSpace) -> Result<ModelSpec> {
        let loss = self.loss()?;
        let out = match (loss, labels) {
            (LossKind::Bce, LabelSpace::Binary) => 1,
            (LossKind::Bce, LabelSpace::Classes(_)) => {
                return Err(Error::config("loss", "bce needs a binary task (mnist_binary or blobs)"))
            }
            (_, LabelSpace::Classes(k)) => k,
            (_, LabelSpace::Binary) => {
                return Err(Error::config("loss", "binary tasks use bce"))
            }
        };
        let spec = match self.raw("model")? {
            "logistic" => {
                if out != 1 {
                    return Err(Error::config("model", "logistic needs loss = bce"));
                }
                ModelSpec::logistic(input_dim)
            }
            "mlp" => {
                let mut dims = vec![input_dim];
                dims.extend(self.usize_list("hidden")?);
                dims.push(out);
                let head = if out == 1 {
                    OutputHead::SingleLogit
                } else {
                    OutputHead::MultiLogit
                };
                ModelSpec::new(dims, self.activation()?, head)
            }
            other => return Err(Error::config("model", format!("unknown model `{other}`"))),
        };
        spec.map_err(|e| Error::config("model", e.to_string()))
    }

    /// Checks every typed key so errors surface before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.train_config()?;
        self.activation()?;
        self.usize_list("hidden")?;
        for k in ["class_a", "class_b"] {
            self.i64(k)?;
        }
        for k in [
            "pad_to",
            "train_limit",
            "test_limit",
            "blobs_per_class",
            "blobs_dim",
            "workers",
            "audit_samples",
            "samples",
        ] {
            self.usize(k)?;
        }
        self.f64("blobs_separation")?;
        for (k, lo, hi) in [("lambda", 0.0, 1.0), ("gamma", -1.0, 1.0)] {
            let grid = format!("{k}_grid");
            for v in std::iter::once(self.f64(k)?).chain(self.f64_list(&grid)?) {
                if !(lo..=hi).contains(&v) {
                    return Err(Error::config(k, format!("{v} outside [{lo}, {hi}]")));
                }
            }
        }
        self.f64_list("delta_list")?;
        self.bool("svg")?;
        match self.raw("task")? {
            "mnist" | "mnist_binary" | "blobs" => Ok(()),
            other => Err(Error::config("task", format!("unknown task `{other}`"))),
        }
    }

    /// Deterministic digest of the result-relevant keys.
    pub fn digest(&self, command: Command) -> String {
        let mut h = Sha256::new();
        h.update(command.name().as_bytes());
        h.update(b"\n");
        for (k, v) in &self.values {
            if VOLATILE_KEYS.contains(&k.as_str()) {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Renders the configuration as key=value text.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Parses a float, also accepting `a/b` fractions such as `8/255`.
pub fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let v = if let Some((a, b)) = s.split_once('/') {
        let a: f64 = a.trim().parse().map_err(|_| format!("bad number `{s}`"))?;
        let b: f64 = b.trim().parse().map_err(|_| format!("bad number `{s}`"))?;
        if b == 0.0 {
            return Err(format!("division by zero in `{s}`"));
        }
        a / b
    } else {
        s.parse().map_err(|_| format!("bad number `{s}`"))?
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}
