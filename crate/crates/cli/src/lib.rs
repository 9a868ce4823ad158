//! Command implementations behind the `tempo-ode` binary. Each command is
//! a plain function returning a report, so tests drive them without a
//! subprocess.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tempo_ode::checkpoint::Checkpoint;
use tempo_ode::config::RunConfig;
use tempo_ode::data::{
    batch, generate_synthetic, load_dataset, write_dataset, DatasetSplit, IrregularSeries,
    SyntheticSpec,
};
use tempo_ode::models::{LatentOdeModel, ModelConfig};
use tempo_ode::tensor::{Parameterized, Tape};
use tempo_ode::training::{
    evaluate, fit, heldout_errors, mean_loss, train_epoch, AdamaxState, MetricsRecord, SampleError,
    Task,
};
use tempo_ode::{Error, Result};

/// Column name of the single synthetic feature.
pub const SYNTHETIC_FEATURE: &str = "value";

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

// ---------------------------------------------------------------- generate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateStats {
    pub n_samples: usize,
    pub grid_size: usize,
    pub observed_cells: usize,
    pub heldout_cells: usize,
    pub observed_per_sample_min: usize,
    pub observed_per_sample_max: usize,
    pub sparsity_requested: f64,
    /// Observed cells over all grid cells.
    pub sparsity_realized: f64,
    pub seed: u64,
}

/// Writes `out`, its `.heldout.csv` sibling and a `.stats.json` sidecar.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<GenerateStats> {
    let spec: &SyntheticSpec = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Config("generate needs a synthetic data section".into()))?;
    let series = generate_synthetic(spec)?;
    write_dataset(out, &[SYNTHETIC_FEATURE.to_string()], &series)?;
    let per: Vec<usize> = series.iter().map(IrregularSeries::n_observed).collect();
    let observed: usize = per.iter().sum();
    let heldout = series.iter().map(IrregularSeries::n_heldout).sum();
    let cells: usize = series.iter().map(|s| s.n_times() * s.n_features()).sum();
    let stats = GenerateStats {
        n_samples: series.len(),
        grid_size: spec.grid_size,
        observed_cells: observed,
        heldout_cells: heldout,
        observed_per_sample_min: per.iter().copied().min().unwrap_or(0),
        observed_per_sample_max: per.iter().copied().max().unwrap_or(0),
        sparsity_requested: spec.sparsity,
        sparsity_realized: if cells == 0 {
            0.0
        } else {
            observed as f64 / cells as f64
        },
        seed: spec.seed,
    };
    std::fs::write(
        sibling(out, ".stats.json"),
        serde_json::to_string_pretty(&stats)? + "\n",
    )?;
    Ok(stats)
}

// ------------------------------------------------------------------- train

pub struct TrainPaths {
    pub dir: PathBuf,
}

impl TrainPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt.json")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("final.ckpt.json")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Completed epochs after this run.
    pub epoch: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Metrics of the kept (best) parameters on the test split.
    pub test_metrics: BTreeMap<String, f64>,
}

/// Split scored in the epoch-0 record: validation when present, else
/// test. (Selection during training only ever uses validation.)
fn monitor_set(split: &DatasetSplit) -> &[IrregularSeries] {
    if split.validation.is_empty() {
        &split.test
    } else {
        &split.validation
    }
}

/// Trains from scratch or resumes from `resume`. Writes the canonical
/// config, `metrics.jsonl` (appended to when resuming), and the best and
/// final checkpoints under `paths.dir`.
pub fn cmd_train(
    cfg: &RunConfig,
    paths: &TrainPaths,
    resume: Option<&Checkpoint>,
) -> Result<TrainSummary> {
    std::fs::create_dir_all(&paths.dir)?;
    let split = cfg.dataset()?;
    let (mut model, mut opt, start) = match resume {
        Some(ck) => {
            if ck.config.model != cfg.model {
                return Err(Error::IncompatibleCheckpoint(
                    "model section differs from the config".into(),
                ));
            }
            if ck.norm != split.stats {
                return Err(Error::IncompatibleCheckpoint(
                    "normalization differs from the config's data".into(),
                ));
            }
            (ck.model()?, ck.optimizer.clone(), ck.epoch)
        }
        None => (
            LatentOdeModel::new(&cfg.model, cfg.training.seed)?,
            AdamaxState::new(cfg.training.lr, cfg.training.decay),
            0,
        ),
    };
    cfg.save(&paths.config())?;
    let mut log = if resume.is_some() {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(paths.metrics())?
    } else {
        File::create(paths.metrics())?
    };
    let eval_batch = cfg.training.batch_size;
    if resume.is_none() {
        let started = Instant::now();
        let loss = mean_loss(
            &model,
            &split.train,
            &cfg.task,
            &cfg.training,
            &cfg.solver.eval,
            0,
        )?;
        let metrics = evaluate(
            &model,
            monitor_set(&split),
            &cfg.task,
            &cfg.training.loss,
            &split.stats,
            &cfg.solver.eval,
            eval_batch,
        )?;
        let record = MetricsRecord {
            epoch: 0,
            loss,
            metrics,
            lr: opt.lr(0),
            seconds: started.elapsed().as_secs_f64(),
        };
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
    }
    let mut io_err: Option<std::io::Error> = None;
    let result = fit(
        &mut model,
        &split,
        &cfg.task,
        &cfg.training,
        &cfg.solver.train,
        &cfg.solver.eval,
        &mut opt,
        start,
        |r| {
            let line = serde_json::to_string(r).expect("record serializes");
            if let Err(e) = writeln!(log, "{line}") {
                io_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let completed = result.history.last().map_or(start, |r| r.epoch);
    Checkpoint::capture(cfg, &model, &opt, result.best_epoch, &split.stats).save(&paths.best())?;
    let mut last = model.clone();
    for (p, v) in last.params_mut().into_iter().zip(&result.final_params) {
        p.set_value(v.clone())?;
    }
    Checkpoint::capture(cfg, &last, &opt, completed, &split.stats).save(&paths.last())?;
    let test_metrics = evaluate(
        &model,
        &split.test,
        &cfg.task,
        &cfg.training.loss,
        &split.stats,
        &cfg.solver.eval,
        eval_batch,
    )?;
    Ok(TrainSummary {
        epoch: completed,
        best_epoch: result.best_epoch,
        stopped_early: result.stopped_early,
        test_metrics,
    })
}

// -------------------------------------------------------------------- eval

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
    All,
}

/// Where evaluation data comes from.
pub enum EvalData<'a> {
    /// Rebuild the checkpoint config's dataset and take one part.
    Config(SplitPart),
    /// Every series of a CSV dataset (heldout sibling merged).
    Csv(&'a Path),
}

fn eval_series(ck: &Checkpoint, data: &EvalData<'_>) -> Result<Vec<IrregularSeries>> {
    let raw = match data {
        EvalData::Config(part) => {
            let split = ck.config.raw_split()?;
            match part {
                SplitPart::Train => split.train,
                SplitPart::Validation => split.validation,
                SplitPart::Test => split.test,
                SplitPart::All => [split.train, split.validation, split.test].concat(),
            }
        }
        EvalData::Csv(path) => load_dataset(path)?.series,
    };
    let d = ck.config.model.n_features;
    if let Some(s) = raw.iter().find(|s| s.n_features() != d) {
        return Err(Error::IncompatibleCheckpoint(format!(
            "sample {} has {} features, model expects {d}",
            s.id(),
            s.n_features()
        )));
    }
    if ck.norm.n_features() != d {
        return Err(Error::IncompatibleCheckpoint(
            "normalization width differs from the model".into(),
        ));
    }
    raw.iter().map(|s| ck.norm.apply(s)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<SampleError>>,
}

pub fn cmd_eval(
    ck: &Checkpoint,
    data: &EvalData<'_>,
    task: Option<Task>,
    per_sample: bool,
) -> Result<EvalReport> {
    let model = ck.model()?;
    let series = eval_series(ck, data)?;
    let task = task.unwrap_or(ck.config.task);
    let batch_size = ck.config.training.batch_size;
    let metrics = evaluate(
        &model,
        &series,
        &task,
        &ck.config.training.loss,
        &ck.norm,
        &ck.config.solver.eval,
        batch_size,
    )?;
    let per_sample = if per_sample {
        Some(heldout_errors(
            &model,
            &series,
            &task,
            &ck.norm,
            &ck.config.solver.eval,
            batch_size,
        )?)
    } else {
        None
    };
    Ok(EvalReport {
        metrics,
        per_sample,
    })
}

// ------------------------------------------------------- export-trajectory

#[derive(Clone, Debug, PartialEq)]
pub enum TimesSpec {
    /// The sample's own grid.
    Sample,
    /// `n` evenly spaced times over the sample's span.
    Uniform(usize),
    Explicit(Vec<f64>),
}

impl std::str::FromStr for TimesSpec {
    type Err = String;

    /// `observed`, `uniform:N` or a comma-separated list.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "observed" {
            return Ok(TimesSpec::Sample);
        }
        if let Some(n) = s.strip_prefix("uniform:") {
            let n: usize = n
                .parse()
                .map_err(|e| format!("uniform:N needs an integer: {e}"))?;
            return if n == 0 {
                Err("uniform:N needs N ≥ 1".into())
            } else {
                Ok(TimesSpec::Uniform(n))
            };
        }
        s.split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| format!("bad time {t:?}: {e}"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(TimesSpec::Explicit)
    }
}

fn feature_names(ck: &Checkpoint) -> Result<Vec<String>> {
    Ok(match &ck.config.data.csv {
        Some(path) if path.exists() => load_dataset(path)?.features,
        _ if ck.config.model.n_features == 1 => vec![SYNTHETIC_FEATURE.to_string()],
        _ => (0..ck.config.model.n_features)
            .map(|f| format!("x{f}"))
            .collect(),
    })
}

/// Decodes one sample at the requested times. Columns: `time`, each
/// feature's value (empty when not observed there), its observed flag,
/// and its prediction, all in original units.
pub fn cmd_export_trajectory(
    ck: &Checkpoint,
    data: &EvalData<'_>,
    sample: &str,
    times: &TimesSpec,
) -> Result<String> {
    let model = ck.model()?;
    let series = eval_series(ck, data)?;
    let s = series
        .iter()
        .find(|s| s.id() == sample)
        .ok_or_else(|| Error::SampleNotFound(sample.to_string()))?;
    let grid = s.times();
    let (t0, t_last) = (grid[0], grid[grid.len() - 1]);
    let times: Vec<f64> = match times {
        TimesSpec::Sample => grid.to_vec(),
        TimesSpec::Uniform(1) => vec![t0],
        TimesSpec::Uniform(n) => (0..*n)
            .map(|k| {
                if k + 1 == *n {
                    t_last
                } else {
                    t0 + (t_last - t0) * k as f64 / (*n - 1) as f64
                }
            })
            .collect(),
        TimesSpec::Explicit(ts) => ts.clone(),
    };
    if times.iter().any(|t| !t.is_finite() || *t < t0) || times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::NonMonotoneTimes(format!(
            "export times must be finite, strictly increasing and not before {t0}"
        )));
    }
    let b = batch(std::slice::from_ref(s), &[0])?;
    let tape = Tape::no_grad();
    let (mu, _) = model.encode(&tape, &b, &ck.config.solver.eval)?;
    let preds = model.decode(&tape, &mu, t0, &times, &ck.config.solver.eval)?;
    let names = feature_names(ck)?;
    let d = s.n_features();
    let mut out = String::from("time");
    for n in &names {
        out.push_str(&format!(",{n},{n}_observed"));
    }
    for n in &names {
        out.push_str(&format!(",{n}_pred"));
    }
    out.push('\n');
    for (k, &t) in times.iter().enumerate() {
        out.push_str(&format!("{t:?}"));
        let row = grid.iter().position(|&g| g == t);
        for f in 0..d {
            match row.filter(|&r| s.is_observed(r, f)) {
                Some(r) => out.push_str(&format!(
                    ",{:?},1",
                    ck.norm.denormalize_value(f, s.value(r, f))
                )),
                None => out.push_str(",,0"),
            }
        }
        for f in 0..d {
            out.push_str(&format!(
                ",{:?}",
                ck.norm.denormalize_value(f, preds[k].data()[f])
            ));
        }
        out.push('\n');
    }
    Ok(out)
}

// ------------------------------------------------------------- param-count

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCount {
    pub temporal: bool,
    pub components: BTreeMap<String, usize>,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub model: ModelCount,
    pub baseline: Option<ModelCount>,
    /// `baseline.total / model.total`.
    pub baseline_over_model: Option<f64>,
}

fn count(cfg: &ModelConfig) -> Result<ModelCount> {
    let m = LatentOdeModel::new(cfg, 0)?;
    Ok(ModelCount {
        temporal: cfg.temporal,
        components: m.param_breakdown(),
        total: m.param_count(),
    })
}

pub fn cmd_param_count(cfg: &RunConfig) -> Result<ParamReport> {
    let model = count(&cfg.model)?;
    let baseline = cfg.baseline.as_ref().map(count).transpose()?;
    let ratio = baseline
        .as_ref()
        .map(|b| b.total as f64 / model.total as f64);
    Ok(ParamReport {
        model,
        baseline,
        baseline_over_model: ratio,
    })
}

impl ParamReport {
    /// Fixed-width table for the terminal.
    pub fn render(&self) -> String {
        let kind = |c: &ModelCount| if c.temporal { "temporal" } else { "static" };
        let mut keys: Vec<&String> = self.model.components.keys().collect();
        if let Some(b) = &self.baseline {
            keys.extend(b.components.keys());
        }
        keys.sort();
        keys.dedup();
        let mut out = format!(
            "{:<16} {:>12}",
            "component",
            format!("model ({})", kind(&self.model))
        );
        if let Some(b) = &self.baseline {
            out.push_str(&format!(" {:>18}", format!("baseline ({})", kind(b))));
        }
        out.push('\n');
        let cell = |c: &ModelCount, k: &str| {
            c.components
                .get(k)
                .map_or("-".to_string(), |n| n.to_string())
        };
        for k in keys {
            out.push_str(&format!("{k:<16} {:>12}", cell(&self.model, k)));
            if let Some(b) = &self.baseline {
                out.push_str(&format!(" {:>18}", cell(b, k)));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<16} {:>12}", "total", self.model.total));
        if let Some(b) = &self.baseline {
            out.push_str(&format!(" {:>18}", b.total));
        }
        out.push('\n');
        if let Some(r) = self.baseline_over_model {
            out.push_str(&format!("baseline/model = {r:.3}\n"));
        }
        out
    }
}

// ---------------------------------------------------------- bench-overhead

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub epochs: usize,
    /// Median epoch wall time of the `model` section.
    pub temporal_s_per_epoch: f64,
    /// Median epoch wall time of the `baseline` section (the model with
    /// temporal weights switched off when absent).
    pub static_s_per_epoch: f64,
    pub ratio: f64,
    pub temporal_epoch_seconds: Vec<f64>,
    pub static_epoch_seconds: Vec<f64>,
    pub temporal_params: usize,
    pub static_params: usize,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains both models on the same data and seed, alternating epochs so
/// machine-load drift hits both equally.
pub fn cmd_bench_overhead(cfg: &RunConfig, epochs: usize) -> Result<BenchReport> {
    if epochs == 0 {
        return Err(Error::InvalidArgument(
            "bench needs at least one epoch".into(),
        ));
    }
    let split = cfg.dataset()?;
    let static_cfg = cfg.baseline.clone().unwrap_or_else(|| ModelConfig {
        temporal: false,
        temporal_encoder: false,
        temporal_gru: false,
        ..cfg.model.clone()
    });
    let train = &cfg.training;
    let mut models = [
        LatentOdeModel::new(&cfg.model, train.seed)?,
        LatentOdeModel::new(&static_cfg, train.seed)?,
    ];
    let mut opts = [
        AdamaxState::new(train.lr, train.decay),
        AdamaxState::new(train.lr, train.decay),
    ];
    let mut seconds = [Vec::with_capacity(epochs), Vec::with_capacity(epochs)];
    for epoch in 0..epochs {
        for k in 0..2 {
            let started = Instant::now();
            train_epoch(
                &mut models[k],
                &split.train,
                &cfg.task,
                train,
                &cfg.solver.train,
                &mut opts[k],
                epoch,
            )?;
            seconds[k].push(started.elapsed().as_secs_f64());
        }
    }
    let (t, s) = (median(&seconds[0]), median(&seconds[1]));
    let [temporal_epoch_seconds, static_epoch_seconds] = seconds;
    Ok(BenchReport {
        epochs,
        temporal_s_per_epoch: t,
        static_s_per_epoch: s,
        ratio: t / s,
        temporal_epoch_seconds,
        static_epoch_seconds,
        temporal_params: models[0].param_count(),
        static_params: models[1].param_count(),
    })
}
