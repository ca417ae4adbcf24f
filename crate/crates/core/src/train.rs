//! Standard, vanilla adversarial and conflict-aware adversarial training with
//! heavy-ball SGD, a one-cycle learning-rate schedule and per-batch conflict
//! telemetry.

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{self, LossKind};
use crate::model::{self, Model, ParamVector};
use crate::surgery::{self, Branch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Method {
    Standard,
    VanillaAt { lambda: f64 },
    CaAt { gamma: f64 },
}

impl Method {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Method::Standard => Ok(()),
            Method::VanillaAt { lambda } if (0.0..=1.0).contains(&lambda) => Ok(()),
            Method::VanillaAt { lambda } => Err(Error::arg("lambda", format!("must be in [0, 1], got {lambda}"))),
            Method::CaAt { gamma } if (-1.0..=1.0).contains(&gamma) => Ok(()),
            Method::CaAt { gamma } => Err(Error::arg("gamma", format!("must be in [-1, 1], got {gamma}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::VanillaAt { .. } => "vanilla_at",
            Method::CaAt { .. } => "ca_at",
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match *self {
            Method::VanillaAt { lambda } => Some(lambda),
            _ => None,
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match *self {
            Method::CaAt { gamma } => Some(gamma),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "schedule")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup from `lr_max/div` over the first `warmup_frac` of all
    /// steps, then cosine anneal down to `lr_max/final_div`.
    OneCycle { warmup_frac: f64, div: f64, final_div: f64 },
}

impl LrSchedule {
    pub const ONE_CYCLE: LrSchedule = LrSchedule::OneCycle {
        warmup_frac: 0.3,
        div: 25.0,
        final_div: 1e4,
    };

    pub fn validate(&self) -> Result<()> {
        if let LrSchedule::OneCycle {
            warmup_frac,
            div,
            final_div,
        } = *self
        {
            if !(0.0..1.0).contains(&warmup_frac) {
                return Err(Error::arg("warmup_frac", format!("must be in [0, 1), got {warmup_frac}")));
            }
            if !(div.is_finite() && div >= 1.0) {
                return Err(Error::arg("div", format!("must be finite and >= 1, got {div}")));
            }
            if !(final_div.is_finite() && final_div >= 1.0) {
                return Err(Error::arg("final_div", format!("must be finite and >= 1, got {final_div}")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
        if step >= total_steps {
            return Err(Error::arg(
                "step",
                format!("{step} is outside [0, {total_steps})"),
            ));
        }
        match *self {
            LrSchedule::Constant => Ok(lr_max),
            LrSchedule::OneCycle {
                warmup_frac,
                div,
                final_div,
            } => {
                let start = lr_max / div;
                let floor = lr_max / final_div;
                let peak = warmup_frac * total_steps as f64;
                let s = step as f64;
                if peak > 0.0 && s <= peak {
                    return Ok(start + (lr_max - start) * s / peak);
                }
                let span = (total_steps - 1) as f64 - peak;
                let progress = if span > 0.0 { ((s - peak) / span).min(1.0) } else { 1.0 };
                Ok(floor + (lr_max - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
            }
        }
    }
}

/// Learning rate of the default one-cycle schedule at `step`.
pub fn one_cycle_lr(step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    LrSchedule::ONE_CYCLE.lr_at(step, total_steps, lr_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub loss: LossKind,
    pub attack: AttackSpec,
    /// Attack used for the per-epoch adversarial accuracy; `None` reuses `attack`.
    pub eval_attack: Option<AttackSpec>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::CaAt { gamma: 0.8 },
            loss: LossKind::SoftmaxCe,
            attack: AttackSpec::default(),
            eval_attack: None,
            epochs: 20,
            batch_size: 128,
            lr_max: 0.1,
            momentum: 0.9,
            lr_schedule: LrSchedule::ONE_CYCLE,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.loss.validate()?;
        self.attack.validate()?;
        if let Some(a) = &self.eval_attack {
            a.validate()?;
        }
        self.lr_schedule.validate()?;
        if self.epochs == 0 {
            return Err(Error::arg("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size", "must be >= 1"));
        }
        if !(self.lr_max.is_finite() && self.lr_max > 0.0) {
            return Err(Error::arg("lr_max", format!("must be finite and > 0, got {}", self.lr_max)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg("momentum", format!("must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    pub fn eval_attack(&self) -> &AttackSpec {
        self.eval_attack.as_ref().unwrap_or(&self.attack)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub projected: usize,
    pub standard: usize,
    pub fallback: usize,
}

impl BranchCounts {
    pub fn record(&mut self, branch: Branch) {
        match branch {
            Branch::Projected => self.projected += 1,
            Branch::StandardOnly => self.standard += 1,
            Branch::FallbackDegenerate => self.fallback += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.projected + self.standard + self.fallback
    }
}

/// Telemetry for one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchTelemetry {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub lr: f64,
    pub norm_gc: f64,
    pub norm_ga: f64,
    pub phi: f64,
    pub mu: f64,
    pub lambda_star: Option<f64>,
    /// Only set for conflict-aware training.
    pub branch: Option<Branch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub std_acc: f64,
    pub adv_acc: f64,
    pub mean_loss: f64,
    pub mean_mu: f64,
    pub mean_phi: f64,
    /// Mean over projected batches; absent when none were projected.
    pub mean_lambda_star: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub branch_counts: BranchCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub record: TrainRecord,
    pub batches: Vec<BatchTelemetry>,
}

/// Derives an independent stream seed from a base seed and a path of indices.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

const EVAL_STREAM: u64 = 0xE7A1;
const EVAL_BATCH: usize = 256;

/// Fraction of samples classified correctly after `attack` (clean if the
/// attack is the identity). Deterministic in `seed`.
pub fn evaluate(model: &Model, data: &Dataset, attack: &AttackSpec, loss: &LossKind, seed: u64) -> Result<f64> {
    loss.check_head(model.spec().output_head())?;
    let n = data.len();
    let mut correct = 0usize;
    let mut start = 0;
    let mut batch = 0u64;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let x = data.images().slice(ndarray::s![start..end, ..]);
        let y = &data.labels()[start..end];
        let x = if attack.is_identity() {
            x.to_owned()
        } else {
            attack::perturb_batch(model, x, y, loss, attack, derive_seed(seed, &[batch]))?
        };
        let logits = model.logits(x.view())?;
        correct += model
            .predict(logits.view())
            .iter()
            .zip(y)
            .filter(|(p, t)| p == t)
            .count();
        start = end;
        batch += 1;
    }
    Ok(correct as f64 / n as f64)
}

/// Owns the optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    velocity: ParamVector,
    step: usize,
    steps_per_epoch: usize,
    total_steps: usize,
}

struct StepResult {
    update: ParamVector,
    telemetry: BatchTelemetry,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: &Model, n_samples: usize) -> Result<Self> {
        cfg.validate()?;
        cfg.loss.check_head(model.spec().output_head())?;
        if n_samples == 0 {
            return Err(Error::arg("data", "training set is empty"));
        }
        let steps_per_epoch = n_samples.div_ceil(cfg.batch_size);
        Ok(Self {
            velocity: ParamVector::zeros(model.spec().param_count()),
            step: 0,
            steps_per_epoch,
            total_steps: steps_per_epoch * cfg.epochs,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Batch order for `epoch`: a seeded permutation of `0..n`.
    pub fn batch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        order
    }

    fn combine(
        &self,
        model: &Model,
        x: ArrayView2<'_, f64>,
        y: &[i64],
        epoch: usize,
        batch: usize,
        lr: f64,
    ) -> Result<StepResult> {
        let cfg = &self.cfg;
        let head = model.spec().output_head();
        let seed = derive_seed(cfg.seed, &[epoch as u64, batch as u64]);
        let x_adv = attack::perturb_batch(model, x, y, &cfg.loss, &cfg.attack, seed)?;
        let (clean_logits, clean_cache) = model.forward(x)?;
        let (adv_logits, adv_cache) = model.forward(x_adv.view())?;
        let split = loss::split_batch_loss(&cfg.loss, head, clean_logits.view(), adv_logits.view(), y)?;
        if !split.mean_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at epoch {epoch}, batch {batch} (lr {lr})"
            )));
        }
        let g_c = model.param_gradient(&clean_cache, split.d_clean.view())?;
        let g_a = model.param_gradient(&adv_cache, split.d_adv.view())?;
        let (update, report) = match cfg.method {
            Method::Standard => (g_c.clone(), None),
            Method::VanillaAt { lambda } => (surgery::combine_vanilla(&g_c, &g_a, lambda)?, None),
            Method::CaAt { gamma } => {
                let (g, r) = surgery::project_conflict_aware(&g_c, &g_a, gamma)?;
                (g, Some(r))
            }
        };
        let telemetry = match report {
            Some(r) => BatchTelemetry {
                epoch,
                batch,
                loss: split.mean_loss,
                lr,
                norm_gc: r.norm_gc,
                norm_ga: r.norm_ga,
                phi: r.phi,
                mu: r.mu,
                lambda_star: r.lambda_star,
                branch: Some(r.branch),
            },
            None => {
                let c = surgery::conflict_mu(&g_c, &g_a)?;
                BatchTelemetry {
                    epoch,
                    batch,
                    loss: split.mean_loss,
                    lr,
                    norm_gc: c.norm_gc,
                    norm_ga: c.norm_ga,
                    phi: c.phi,
                    mu: c.mu,
                    lambda_star: None,
                    branch: None,
                }
            }
        };
        if !update.is_finite() {
            return Err(Error::NonFinite(format!(
                "combined gradient at epoch {epoch}, batch {batch}"
            )));
        }
        Ok(StepResult { update, telemetry })
    }

    /// Runs one epoch of training on `train` and scores the result on `eval`.
    pub fn train_epoch(&mut self, model: &mut Model, train: &Dataset, eval: &Dataset, epoch: usize) -> Result<EpochOutcome> {
        if train.dim() != model.spec().input_dim() {
            return Err(Error::DimensionMismatch {
                context: "training data width",
                expected: model.spec().input_dim(),
                actual: train.dim(),
            });
        }
        if train.len().div_ceil(self.cfg.batch_size) != self.steps_per_epoch {
            return Err(Error::arg("data", "training set size changed between epochs"));
        }
        let order = self.batch_order(train.len(), epoch);
        let mut batches = Vec::with_capacity(self.steps_per_epoch);
        let mut params = model.to_params();
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            if self.step >= self.total_steps {
                return Err(Error::arg("epoch", "trainer has already run all configured epochs"));
            }
            let lr = self.cfg.lr_schedule.lr_at(self.step, self.total_steps, self.cfg.lr_max)?;
            let x = train.images().select(Axis(0), idx);
            let y: Vec<i64> = idx.iter().map(|&i| train.labels()[i]).collect();
            let step = self.combine(model, x.view(), &y, epoch, b, lr)?;
            model::sgd_step(&mut params, &mut self.velocity, &step.update, lr, self.cfg.momentum)?;
            model.set_params(&params)?;
            self.step += 1;
            batches.push(step.telemetry);
        }

        let eval_seed = derive_seed(self.cfg.seed, &[EVAL_STREAM, epoch as u64]);
        let base = self.cfg.loss.base();
        let std_acc = evaluate(model, eval, &AttackSpec::none(), &base, eval_seed)?;
        let adv_acc = evaluate(model, eval, self.cfg.eval_attack(), &base, eval_seed)?;
        Ok(EpochOutcome {
            record: summarize(epoch, std_acc, adv_acc, &batches),
            batches,
        })
    }

    /// Runs every configured epoch, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        model: &mut Model,
        train: &Dataset,
        eval: &Dataset,
        mut on_epoch: impl FnMut(&EpochOutcome),
    ) -> Result<Vec<TrainRecord>> {
        let mut records = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let outcome = self.train_epoch(model, train, eval, epoch)?;
            on_epoch(&outcome);
            records.push(outcome.record);
        }
        Ok(records)
    }
}

/// Averages batch telemetry into an epoch record.
pub fn summarize(epoch: usize, std_acc: f64, adv_acc: f64, batches: &[BatchTelemetry]) -> TrainRecord {
    let n = batches.len().max(1) as f64;
    let mut counts = BranchCounts::default();
    let mut lambdas = Vec::new();
    for b in batches {
        if let Some(branch) = b.branch {
            counts.record(branch);
        }
        if let Some(l) = b.lambda_star {
            lambdas.push(l);
        }
    }
    TrainRecord {
        epoch,
        std_acc,
        adv_acc,
        mean_loss: batches.iter().map(|b| b.loss).sum::<f64>() / n,
        mean_mu: batches.iter().map(|b| b.mu).sum::<f64>() / n,
        mean_phi: batches.iter().map(|b| b.phi).sum::<f64>() / n,
        mean_lambda_star: (!lambdas.is_empty()).then(|| lambdas.iter().sum::<f64>() / lambdas.len() as f64),
        lr: batches.last().map_or(0.0, |b| b.lr),
        branch_counts: counts,
    }
}

/// Trains a fresh copy of `model` for all configured epochs.
pub fn train(model: &Model, train: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<TrainRecord>)> {
    let mut model = model.clone();
    let mut trainer = Trainer::new(cfg.clone(), &model, train.len())?;
    let records = trainer.run(&mut model, train, eval, |_| {})?;
    Ok((model, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::model::ModelSpec;

    #[test]
    fn one_cycle_shape() {
        let lr = 0.1;
        assert!((one_cycle_lr(0, 100, lr).unwrap() - lr / 25.0).abs() < 1e-15);
        assert!((one_cycle_lr(30, 100, lr).unwrap() - lr).abs() < 1e-15);
        assert!((one_cycle_lr(99, 100, lr).unwrap() - lr / 1e4).abs() < 1e-15);
        assert!(one_cycle_lr(100, 100, lr).is_err());
        assert!(one_cycle_lr(0, 1, lr).unwrap() > 0.0);
    }

    #[test]
    fn method_domain() {
        assert!(Method::VanillaAt { lambda: 1.5 }.validate().is_err());
        assert!(Method::CaAt { gamma: -1.5 }.validate().is_err());
        assert!(Method::CaAt { gamma: 1.0 }.validate().is_ok());
    }

    #[test]
    fn seeds_differ_by_path() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
        assert_eq!(derive_seed(7, &[3]), derive_seed(7, &[3]));
    }

    #[test]
    fn constant_model_scores_half_on_balanced_set() {
        let data = synthetic_blobs(0, 20, 2, 4.0).unwrap();
        let m = Model::init(ModelSpec::logistic(2).unwrap(), 0);
        let zero = Model::from_params(m.spec().clone(), &ParamVector::zeros(3), 0).unwrap();
        let acc = evaluate(&zero, &data, &AttackSpec::none(), &LossKind::Bce, 0).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn branch_counts_cover_every_batch() {
        let data = synthetic_blobs(1, 30, 3, 4.0).unwrap();
        let cfg = TrainConfig {
            method: Method::CaAt { gamma: 0.9 },
            loss: LossKind::Bce,
            attack: AttackSpec::fgsm(0.1),
            epochs: 2,
            batch_size: 16,
            lr_max: 0.1,
            ..TrainConfig::default()
        };
        let m = Model::init(ModelSpec::logistic(3).unwrap(), 0);
        let (_, records) = train(&m, &data, &data, &cfg).unwrap();
        for r in &records {
            assert_eq!(r.branch_counts.total(), 4);
        }
    }

    #[test]
    fn rejects_head_mismatch() {
        let m = Model::init(ModelSpec::logistic(3).unwrap(), 0);
        let cfg = TrainConfig::default();
        assert!(Trainer::new(cfg, &m, 10).is_err());
    }
}
