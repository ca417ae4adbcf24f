//! Experiment runners behind the command-line front end: single training
//! runs, λ/γ sweeps, the MNIST 1-vs-2 logistic study, bound audits and
//! gradient export. Each writes its artifacts plus a `manifest.json` into the
//! configured output directory.

pub mod config;
pub mod front;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

pub use config::{Command, Config, KeySpec, DATA_ENV, KEYS};
pub use front::{dominates, front_svg, mark_dominated, read_front_csv, write_front_csv, FrontRow};

use crate::attack::{self, AttackSpec};
use crate::data::{self, Dataset, MetricsRow};
use crate::error::{Error, Result};
use crate::model::{Label, Model};
use crate::surgery;
use crate::theory::{self, BoundReport};
use crate::train::{derive_seed, evaluate, Method, TrainConfig, TrainRecord, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Digest of the result-relevant configuration; equal for reruns.
    pub run_id: String,
    /// Unique per invocation.
    pub invocation_id: String,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub duration_secs: f64,
    pub deviations: Vec<String>,
    pub failures: Vec<String>,
}

struct RunContext {
    command: Command,
    cfg: Config,
    run_id: String,
    out: PathBuf,
    started: Instant,
    artifacts: BTreeMap<String, PathBuf>,
    failures: Vec<String>,
}

impl RunContext {
    fn new(command: Command, cfg: &Config) -> Result<Self> {
        let out = cfg.out_dir()?;
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self {
            command,
            cfg: cfg.clone(),
            run_id: cfg.digest(command),
            out,
            started: Instant::now(),
            artifacts: BTreeMap::new(),
            failures: Vec::new(),
        })
    }

    fn artifact(&mut self, name: &str, file: &str) -> PathBuf {
        let p = self.out.join(file);
        self.artifacts.insert(name.to_string(), p.clone());
        p
    }

    fn finish(mut self) -> Result<RunManifest> {
        let path = self.artifact("manifest", "manifest.json");
        let nanos = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos());
        let manifest = RunManifest {
            invocation_id: format!("{}-{nanos:x}-{}", self.run_id, std::process::id()),
            run_id: self.run_id,
            command: self.command.name().to_string(),
            config: self.cfg.values().clone(),
            artifacts: self.artifacts,
            duration_secs: self.started.elapsed().as_secs_f64(),
            deviations: deviations(self.command, &self.cfg)?,
            failures: self.failures,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Departures of this configuration from the full-scale reference setup.
pub fn deviations(command: Command, cfg: &Config) -> Result<Vec<String>> {
    let mut out = Vec::new();
    match command {
        Command::Train | Command::Sweep => {
            out.push(format!("dataset: {} instead of CIFAR-10", cfg.raw("task")?));
            out.push(format!("architecture: {} instead of ResNet-18", cfg.raw("model")?));
            let epochs = cfg.usize("epochs")?;
            if epochs != 200 {
                out.push(format!("epochs: {epochs} instead of 200"));
            }
            out.push("no data augmentation (random crop, flip and rotation omitted)".into());
        }
        Command::Synthetic => {
            let epochs = cfg.usize("epochs")?;
            if epochs != 20 {
                out.push(format!("epochs: {epochs} instead of 20"));
            }
            let pad = cfg.usize("pad_to")?;
            if pad != 32 {
                out.push(format!("resolution: {pad}x{pad} instead of 32x32"));
            }
        }
        _ => {}
    }
    Ok(out)
}

/// Training and evaluation splits for the configured task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}

fn limit(ds: Dataset, n: usize) -> Result<Dataset> {
    if n == 0 {
        Ok(ds)
    } else {
        ds.take(n)
    }
}

pub fn load_task(cfg: &Config) -> Result<TaskData> {
    let seed = cfg.seed()?;
    match cfg.raw("task")? {
        "blobs" => {
            let per = cfg.usize("blobs_per_class")?;
            let d = cfg.usize("blobs_dim")?;
            let sep = cfg.f64("blobs_separation")?;
            Ok(TaskData {
                train: data::synthetic_blobs(seed, per, d, sep)?,
                test: data::synthetic_blobs(derive_seed(seed, &[1]), per, d, sep)?,
            })
        }
        task @ ("mnist" | "mnist_binary") => {
            let dir = cfg.path("data")?;
            let pad = cfg.usize("pad_to")?;
            let split = |train: bool, n: usize| -> Result<Dataset> {
                let raw = data::load_mnist(&dir, train)?;
                if task == "mnist" {
                    limit(raw, n)?.pad_to(pad)
                } else {
                    let bin = data::select_binary_task(&raw, cfg.i64("class_a")?, cfg.i64("class_b")?, pad)?;
                    limit(bin, n)
                }
            };
            Ok(TaskData {
                train: split(true, cfg.usize("train_limit")?)?,
                test: split(false, cfg.usize("test_limit")?)?,
            })
        }
        other => Err(Error::config("task", format!("unknown task `{other}`"))),
    }
}

fn metrics_row(run_id: &str, tc: &TrainConfig, rec: &TrainRecord) -> MetricsRow {
    MetricsRow {
        run_id: run_id.to_string(),
        epoch: rec.epoch,
        method: tc.method.name().to_string(),
        lambda: tc.method.lambda(),
        gamma: tc.method.gamma(),
        delta: if tc.attack.family == attack::AttackFamily::None {
            0.0
        } else {
            tc.attack.delta
        },
        std_acc: rec.std_acc,
        adv_acc: rec.adv_acc,
        mean_mu: rec.mean_mu,
        mean_phi: rec.mean_phi,
        mean_lambda_star: rec.mean_lambda_star,
        lr: rec.lr,
        branch_projected: rec.branch_counts.projected,
        branch_standard: rec.branch_counts.standard,
        branch_fallback: rec.branch_counts.fallback,
    }
}

/// Trains a freshly initialized model; returns it with its epoch records.
pub fn train_model(cfg: &Config, tc: &TrainConfig, data: &TaskData) -> Result<(Model, Vec<TrainRecord>)> {
    let spec = cfg.model_spec(data.train.dim(), data.train.label_space())?;
    let mut model = Model::init(spec, tc.seed);
    let mut trainer = Trainer::new(tc.clone(), &model, data.train.len())?;
    let records = trainer.run(&mut model, &data.train, &data.test, |_| {})?;
    Ok((model, records))
}

pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub model: Model,
    pub records: Vec<TrainRecord>,
}

/// Trains per the configuration, writing `metrics.csv`, `model.ckpt` and
/// `manifest.json`.
pub fn cmd_train(cfg: &Config) -> Result<TrainOutcome> {
    let mut ctx = RunContext::new(Command::Train, cfg)?;
    let tc = cfg.train_config()?;
    let data = load_task(cfg)?;
    let (model, records) = train_model(cfg, &tc, &data)?;
    let rows: Vec<MetricsRow> = records.iter().map(|r| metrics_row(&ctx.run_id, &tc, r)).collect();
    data::write_metrics_csv(ctx.artifact("metrics", "metrics.csv"), &rows)?;
    data::write_checkpoint(ctx.artifact("checkpoint", "model.ckpt"), &model)?;
    Ok(TrainOutcome {
        manifest: ctx.finish()?,
        model,
        records,
    })
}

fn load_checkpoint(cfg: &Config) -> Result<Model> {
    let path = cfg.path("checkpoint")?;
    if path.as_os_str().is_empty() {
        return Err(Error::config("checkpoint", "required for this command"));
    }
    data::read_checkpoint(&path, cfg.activation()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub std_acc: f64,
    pub adv_acc: f64,
}

/// Clean and attacked accuracy of a checkpoint on the test split.
pub fn cmd_eval(cfg: &Config) -> Result<(RunManifest, EvalReport)> {
    let mut ctx = RunContext::new(Command::Eval, cfg)?;
    let model = load_checkpoint(cfg)?;
    let test = load_task(cfg)?.test;
    let loss = cfg.loss()?.base();
    let seed = cfg.seed()?;
    let report = EvalReport {
        samples: test.len(),
        std_acc: evaluate(&model, &test, &AttackSpec::none(), &loss, seed)?,
        adv_acc: evaluate(&model, &test, &cfg.attack()?, &loss, seed)?,
    };
    let path = ctx.artifact("eval", "eval.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok((ctx.finish()?, report))
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub method: Method,
    pub knob: f64,
}

/// Vanilla points for every λ, then conflict-aware points for every γ.
pub fn sweep_points(cfg: &Config) -> Result<Vec<SweepPoint>> {
    let mut pts = Vec::new();
    for lambda in cfg.f64_list("lambda_grid")? {
        pts.push(SweepPoint {
            method: Method::VanillaAt { lambda },
            knob: lambda,
        });
    }
    for gamma in cfg.f64_list("gamma_grid")? {
        pts.push(SweepPoint {
            method: Method::CaAt { gamma },
            knob: gamma,
        });
    }
    if pts.is_empty() {
        return Err(Error::config("lambda_grid", "both grids are empty"));
    }
    Ok(pts)
}

fn point_config(cfg: &Config, p: &SweepPoint) -> Result<Config> {
    let mut c = cfg.clone();
    match p.method {
        Method::VanillaAt { lambda } => {
            c.set("method", "vanilla_at")?;
            c.set("lambda", &lambda.to_string())?;
        }
        Method::CaAt { gamma } => {
            c.set("method", "ca_at")?;
            c.set("gamma", &gamma.to_string())?;
        }
        Method::Standard => c.set("method", "standard")?,
    }
    Ok(c)
}

pub struct SweepOutcome {
    pub manifest: RunManifest,
    pub front: Vec<FrontRow>,
}

/// One training run per grid point on a bounded worker pool. A failing point
/// is reported in the manifest and left out of the front.
pub fn cmd_sweep(cfg: &Config) -> Result<SweepOutcome> {
    let mut ctx = RunContext::new(Command::Sweep, cfg)?;
    let points = sweep_points(cfg)?;
    let data = load_task(cfg)?;
    let workers = match cfg.usize("workers")? {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(points.len());
    let point_dir = ctx.out.join("points");
    fs::create_dir_all(&point_dir).map_err(|e| Error::io(&point_dir, e))?;

    let next = AtomicUsize::new(0);
    let mut results: Vec<Option<FrontRow>> = vec![None; points.len()];
    let mut failures = Vec::new();
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::channel();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, points, data) = (&next, &points, &data);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= points.len() {
                    break;
                }
                let run = point_config(cfg, &points[i]).and_then(|pc| {
                    let tc = pc.train_config()?;
                    let (_, records) = train_model(&pc, &tc, data)?;
                    Ok((pc.digest(Command::Train), tc, records))
                });
                if tx.send((i, run)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, run) in rx {
            let p = &points[i];
            let name = format!("{}_{}", p.method.name(), p.knob);
            match run {
                Ok((run_id, tc, records)) => {
                    let rows: Vec<MetricsRow> = records.iter().map(|r| metrics_row(&run_id, &tc, r)).collect();
                    let path = point_dir.join(format!("{name}.csv"));
                    data::write_metrics_csv(&path, &rows)?;
                    ctx.artifacts.insert(format!("metrics_{name}"), path);
                    let last = records.last().expect("at least one epoch");
                    results[i] = Some(FrontRow {
                        method: p.method.name().to_string(),
                        knob: p.knob,
                        std_acc: last.std_acc,
                        adv_acc: last.adv_acc,
                        dominated: false,
                    });
                }
                Err(e) => failures.push(format!("{name}: {e}")),
            }
        }
        Ok(())
    })?;

    let mut front: Vec<FrontRow> = results.into_iter().flatten().collect();
    failures.sort();
    ctx.failures = failures;
    if front.is_empty() {
        return Err(Error::config("sweep", format!("every point failed: {}", ctx.failures.join("; "))));
    }
    mark_dominated(&mut front);
    write_front_csv(ctx.artifact("front", "front.csv"), &front)?;
    if cfg.bool("svg")? {
        let path = ctx.artifact("front_svg", "front.svg");
        fs::write(&path, front_svg(&front)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(SweepOutcome {
        manifest: ctx.finish()?,
        front,
    })
}

/// Per-sample conflict statistics of a model over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictStats {
    pub mean_mu: f64,
    pub mean_norm_gc: f64,
    pub mean_norm_ga: f64,
    pub mean_one_minus_cos: f64,
}

/// Averages `μ`, the gradient norms and `1 − cos` over every sample, using
/// per-sample gradients of the base loss at clean and attacked inputs.
pub fn conflict_stats(model: &Model, data: &Dataset, cfg_loss: &crate::loss::LossKind, attack: &AttackSpec, seed: u64) -> Result<ConflictStats> {
    const CHUNK: usize = 512;
    let base = cfg_loss.base();
    let (mut mu, mut nc, mut na, mut omc) = (0.0, 0.0, 0.0, 0.0);
    for (b, start) in (0..data.len()).step_by(CHUNK).enumerate() {
        let end = (start + CHUNK).min(data.len());
        let x = data.images().slice(s![start..end, ..]);
        let y = &data.labels()[start..end];
        let x_adv = attack::perturb_batch(model, x, y, cfg_loss, attack, derive_seed(seed, &[b as u64]))?;
        let gc = theory::per_sample_gradients(model, x, y, &base)?;
        let ga = theory::per_sample_gradients(model, x_adv.view(), y, &base)?;
        for (rc, ra) in gc.axis_iter(Axis(0)).zip(ga.axis_iter(Axis(0))) {
            let c = surgery::conflict_mu(
                &crate::model::ParamVector::from_vec(rc.to_vec()),
                &crate::model::ParamVector::from_vec(ra.to_vec()),
            )?;
            mu += c.mu;
            nc += c.norm_gc;
            na += c.norm_ga;
            omc += 1.0 - c.phi;
        }
    }
    let n = data.len() as f64;
    Ok(ConflictStats {
        mean_mu: mu / n,
        mean_norm_gc: nc / n,
        mean_norm_ga: na / n,
        mean_one_minus_cos: omc / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRow {
    pub delta: f64,
    pub std_acc: f64,
    pub adv_acc: f64,
    /// Batch-averaged `μ` over the last training epoch.
    pub final_batch_mu: f64,
    /// Per-sample `μ` of the final model, averaged over the training set.
    pub mean_mu: f64,
    pub mean_norm_gc: f64,
    pub mean_norm_ga: f64,
    pub mean_one_minus_cos: f64,
    pub audit_samples: usize,
    pub audit_satisfied: usize,
    pub audit_mu_mean: f64,
    pub audit_bound_mean: f64,
    /// Smallest `bound − μ` over the audited samples.
    pub audit_min_slack: f64,
    pub lambda_max_mean: f64,
}

/// One bound report tagged with the sample it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundLine {
    pub sample: usize,
    pub label: Label,
    #[serde(flatten)]
    pub report: BoundReport,
}

fn audit(
    model: &Model,
    data: &Dataset,
    n: usize,
    loss: &crate::loss::LossKind,
    attack: &AttackSpec,
    seed: u64,
) -> Result<Vec<BoundLine>> {
    (0..n.min(data.len()))
        .map(|i| {
            let y = data.labels()[i];
            let report = theory::verify_bound(model, data.images().row(i), y, loss, attack, derive_seed(seed, &[i as u64]))?;
            Ok(BoundLine { sample: i, label: y, report })
        })
        .collect()
}

fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct SyntheticOutcome {
    pub manifest: RunManifest,
    pub rows: Vec<SyntheticRow>,
    pub bounds: Vec<BoundLine>,
}

/// For every budget in `delta_list`: train the configured model (by default
/// vanilla adversarial logistic regression on MNIST 1-vs-2 under the exact
/// linear attack), then record conflict statistics and a bound audit.
pub fn cmd_synthetic(cfg: &Config) -> Result<SyntheticOutcome> {
    let mut ctx = RunContext::new(Command::Synthetic, cfg)?;
    let deltas = cfg.f64_list("delta_list")?;
    if deltas.is_empty() {
        return Err(Error::config("delta_list", "must not be empty"));
    }
    let data = load_task(cfg)?;
    let audit_n = cfg.usize("audit_samples")?;
    let loss = cfg.loss()?;
    let mut rows = Vec::with_capacity(deltas.len());
    let mut bounds = Vec::new();
    let mut metrics = Vec::new();
    for &delta in &deltas {
        let mut pc = cfg.clone();
        pc.set("delta", &delta.to_string())?;
        let mut tc = pc.train_config()?;
        tc.attack = pc.attack_with_delta(Some(delta))?;
        let run_id = pc.digest(Command::Synthetic);
        let (model, records) = train_model(&pc, &tc, &data)?;
        metrics.extend(records.iter().map(|r| metrics_row(&run_id, &tc, r)));
        let last = records.last().expect("at least one epoch");
        let stats_seed = derive_seed(tc.seed, &[0x57A7]);
        let stats = conflict_stats(&model, &data.train, &loss, &tc.attack, stats_seed)?;
        let lines = audit(&model, &data.train, audit_n, &loss, &tc.attack, stats_seed)?;
        let k = lines.len().max(1) as f64;
        rows.push(SyntheticRow {
            delta,
            std_acc: last.std_acc,
            adv_acc: last.adv_acc,
            final_batch_mu: last.mean_mu,
            mean_mu: stats.mean_mu,
            mean_norm_gc: stats.mean_norm_gc,
            mean_norm_ga: stats.mean_norm_ga,
            mean_one_minus_cos: stats.mean_one_minus_cos,
            audit_samples: lines.len(),
            audit_satisfied: lines.iter().filter(|l| l.report.satisfied).count(),
            audit_mu_mean: lines.iter().map(|l| l.report.mu_observed).sum::<f64>() / k,
            audit_bound_mean: lines.iter().map(|l| l.report.mu_bound).sum::<f64>() / k,
            audit_min_slack: lines
                .iter()
                .map(|l| l.report.mu_bound - l.report.mu_observed)
                .fold(f64::INFINITY, f64::min),
            lambda_max_mean: lines.iter().map(|l| l.report.lambda_max).sum::<f64>() / k,
        });
        bounds.extend(lines);
    }
    data::write_metrics_csv(ctx.artifact("metrics", "metrics.csv"), &metrics)?;
    let path = ctx.artifact("report", "synthetic.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json_lines(&ctx.artifact("bounds", "bounds.jsonl"), &bounds)?;
    Ok(SyntheticOutcome {
        manifest: ctx.finish()?,
        rows,
        bounds,
    })
}

pub fn read_synthetic_csv(path: impl AsRef<Path>) -> Result<Vec<SyntheticRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn check_guard(model: &Model) -> Result<()> {
    let required = model.spec().param_count().saturating_mul(model.spec().input_dim());
    if required > theory::SIZE_GUARD {
        return Err(Error::SizeGuard {
            required,
            limit: theory::SIZE_GUARD,
        });
    }
    Ok(())
}

/// Bound reports for the first `samples` test inputs, written as JSON lines.
pub fn cmd_bound_check(cfg: &Config) -> Result<(RunManifest, Vec<BoundLine>)> {
    let model = load_checkpoint(cfg)?;
    check_guard(&model)?;
    let mut ctx = RunContext::new(Command::BoundCheck, cfg)?;
    let test = load_task(cfg)?.test;
    let lines = audit(&model, &test, cfg.usize("samples")?, &cfg.loss()?, &cfg.attack()?, cfg.seed()?)?;
    write_json_lines(&ctx.artifact("bounds", "bounds.jsonl"), &lines)?;
    Ok((ctx.finish()?, lines))
}

/// Per-sample clean and adversarial parameter gradients of the first
/// `samples` test inputs, as CSV.
pub fn cmd_export_gradients(cfg: &Config) -> Result<RunManifest> {
    let model = load_checkpoint(cfg)?;
    let mut ctx = RunContext::new(Command::ExportGradients, cfg)?;
    let test = load_task(cfg)?.test;
    let n = cfg.usize("samples")?.min(test.len());
    if n == 0 {
        return Err(Error::config("samples", "must be >= 1"));
    }
    let x = test.images().slice(s![..n, ..]);
    let y = &test.labels()[..n];
    let loss = cfg.loss()?;
    let x_adv = attack::perturb_batch(&model, x, y, &loss, &cfg.attack()?, cfg.seed()?)?;
    let gc = theory::per_sample_gradients(&model, x, y, &loss.base())?;
    let ga = theory::per_sample_gradients(&model, x_adv.view(), y, &loss.base())?;
    data::write_gradient_csv(ctx.artifact("gradients", "gradients.csv"), y, &gc, &ga)?;
    ctx.finish()
}
