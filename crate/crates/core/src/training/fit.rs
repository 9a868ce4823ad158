use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::loss::{
    bce_with_logits, cross_entropy, elbo, gaussian_nll_sum, masked_mse_seq, LossKind, LossSpec,
    Target,
};
use super::metrics::{accuracy, argmax_rows, auc};
use super::optim::{clip_grad_norm, AdamaxState};
use crate::data::{batch, Batch, Cells, DatasetSplit, IrregularSeries, Label, NormStats};
use crate::error::{Error, Result};
use crate::models::LatentOdeModel;
use crate::seed::{rng_for, RunRng};
use crate::solver::SolverConfig;
use crate::tensor::{Parameterized, Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    /// Encode observed cells, score heldout cells anywhere on the grid.
    #[default]
    Reconstruction,
    /// Encode observed cells up to `cut`, score cells after it.
    Extrapolation { cut: f64 },
    /// One label per series.
    Classification,
    /// One label per time point.
    PerTimeClassification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub clip_norm: f64,
    pub loss: LossSpec,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            decay: 0.999,
            epochs: 50,
            batch_size: 20,
            seed: 0,
            patience: 20,
            clip_norm: 10.0,
            loss: LossSpec::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, task: &Task) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr {} / decay {} out of range",
                self.lr, self.decay
            )));
        }
        if self.batch_size == 0 || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "batch_size and clip_norm must be positive".into(),
            ));
        }
        self.loss.validate()?;
        let classify = matches!(task, Task::Classification | Task::PerTimeClassification);
        let class_loss = matches!(self.loss.kind, LossKind::Bce | LossKind::CrossEntropy);
        if classify != class_loss {
            return Err(Error::Config(format!(
                "loss {:?} does not fit task {task:?}",
                self.loss.kind
            )));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Epochs completed, counting from 1.
    pub epoch: usize,
    pub loss: f64,
    pub metrics: BTreeMap<String, f64>,
    pub lr: f64,
    pub seconds: f64,
}

fn encoder_view(b: &Batch, task: &Task) -> Batch {
    match *task {
        Task::Extrapolation { cut } => b.observed_where(|t| t <= cut),
        _ => b.clone(),
    }
}

fn training_targets(b: &Batch, task: &Task) -> Batch {
    match *task {
        Task::Extrapolation { cut } => b.observed_where(|t| t > cut),
        _ => b.clone(),
    }
}

fn binary_labels(b: &Batch) -> Result<Vec<f64>> {
    let labels = b.class_labels().ok_or_else(|| {
        Error::InvalidSeries("classification needs one class label per series".into())
    })?;
    Ok(labels
        .into_iter()
        .map(|c| if c > 0 { 1.0 } else { 0.0 })
        .collect())
}

/// Per-time labels for row `i` at union index `t`, if present.
fn per_time_labels(b: &Batch, t: usize) -> Vec<Option<usize>> {
    (0..b.size())
        .map(|i| {
            if !b.present[i * b.n_times() + t] {
                return None;
            }
            // position of union index t within the sample's own grid
            let k = b.present[i * b.n_times()..i * b.n_times() + t]
                .iter()
                .filter(|&&p| p)
                .count();
            match &b.labels[i] {
                Some(Label::PerTime(l)) => l.get(k).copied(),
                Some(Label::Class(c)) => Some(*c),
                None => None,
            }
        })
        .collect()
}

/// Training loss of one batch on `tape`.
pub(crate) fn batch_loss(
    model: &LatentOdeModel,
    tape: &Tape,
    b: &Batch,
    task: &Task,
    loss: &LossSpec,
    epoch: usize,
    solver: &SolverConfig,
    rng: &mut RunRng,
) -> Result<Tensor> {
    let enc = encoder_view(b, task);
    let noise = (loss.kind == LossKind::Elbo).then(|| {
        let shape = [b.size(), model.config().latent];
        let data: Vec<f64> = (0..shape[0] * shape[1])
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("finite noise")
    });
    let out = model.forward(tape, &enc, noise.as_ref(), solver)?;
    match loss.kind {
        LossKind::MaskedMse | LossKind::GaussianNll | LossKind::Elbo => {
            let tb = training_targets(b, task);
            let cells: Vec<(Tensor, Tensor)> = (0..tb.n_times())
                .map(|t| tb.target_at(t, Cells::Observed))
                .collect();
            let targets: Vec<Target<'_>> = cells
                .iter()
                .map(|(v, m)| Target { values: v, mask: m })
                .collect();
            match loss.kind {
                LossKind::MaskedMse => masked_mse_seq(tape, &out.preds, &targets),
                LossKind::GaussianNll => {
                    let nll = gaussian_nll_sum(tape, &out.preds, &targets, loss.obs_noise_std)?;
                    tape.scale(&nll, 1.0 / b.size() as f64)
                }
                _ => elbo(
                    tape,
                    &out.preds,
                    &targets,
                    &out.mu,
                    &out.sigma,
                    loss.obs_noise_std,
                    loss.kl.weight(epoch),
                ),
            }
        }
        LossKind::Bce => {
            let logits = model.task_logits(tape, &out)?;
            bce_with_logits(tape, &logits[0], &binary_labels(b)?)
        }
        LossKind::CrossEntropy => {
            let logits = model.task_logits(tape, &out)?;
            if logits.len() == 1 {
                let labels: Vec<Option<usize>> = b
                    .labels
                    .iter()
                    .map(|l| match l {
                        Some(Label::Class(c)) => Some(*c),
                        _ => None,
                    })
                    .collect();
                cross_entropy(tape, &logits[0], &labels)
            } else {
                let mut total: Option<Tensor> = None;
                let mut terms = 0.0;
                for (t, lg) in logits.iter().enumerate() {
                    let labels = per_time_labels(b, t);
                    if labels.iter().all(Option::is_none) {
                        continue;
                    }
                    let ce = cross_entropy(tape, lg, &labels)?;
                    terms += 1.0;
                    total = Some(match total {
                        Some(acc) => tape.add(&acc, &ce)?,
                        None => ce,
                    });
                }
                let total = total.ok_or(Error::EmptyMask)?;
                tape.scale(&total, 1.0 / terms)
            }
        }
    }
}

/// One shuffled pass over `train`; returns the mean batch loss.
pub fn train_epoch(
    model: &mut LatentOdeModel,
    train: &[IrregularSeries],
    task: &Task,
    cfg: &TrainingConfig,
    solver: &SolverConfig,
    opt: &mut AdamaxState,
    epoch: usize,
) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng_for(cfg.seed, &format!("shuffle-{epoch}")));
    let mut noise_rng = rng_for(cfg.seed, &format!("noise-{epoch}"));
    let mut total = 0.0;
    let mut n_batches = 0usize;
    for idx in order.chunks(cfg.batch_size) {
        let b = batch(train, idx)?;
        let tape = Tape::new();
        let loss = batch_loss(
            model,
            &tape,
            &b,
            task,
            &cfg.loss,
            epoch,
            solver,
            &mut noise_rng,
        )?;
        if !loss.item().is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = tape.backward(&loss)?;
        grads.apply_to(model.params_mut());
        clip_grad_norm(model.params_mut(), cfg.clip_norm);
        opt.step(model.params_mut(), epoch)?;
        total += loss.item();
        n_batches += 1;
    }
    Ok(total / n_batches as f64)
}

/// Metrics of `model` on `series` with gradients off. Reconstruction and
/// extrapolation errors are measured on heldout cells in original units.
pub fn evaluate(
    model: &LatentOdeModel,
    series: &[IrregularSeries],
    task: &Task,
    loss: &LossSpec,
    stats: &NormStats,
    solver: &SolverConfig,
    batch_size: usize,
) -> Result<BTreeMap<String, f64>> {
    let tape = Tape::no_grad();
    let idx: Vec<usize> = (0..series.len()).collect();
    let mut out = BTreeMap::new();
    match task {
        Task::Reconstruction | Task::Extrapolation { .. } => {
            let per = heldout_errors(model, series, task, stats, solver, batch_size)?;
            let count: usize = per.iter().map(|p| p.count).sum();
            if count == 0 {
                return Err(Error::EmptyHeldout);
            }
            out.insert(
                "mse".into(),
                per.iter().map(|p| p.sse).sum::<f64>() / count as f64,
            );
        }
        Task::Classification | Task::PerTimeClassification => {
            let (mut scores, mut truth_bin) = (Vec::new(), Vec::new());
            let (mut predicted, mut truth) = (Vec::new(), Vec::new());
            for chunk in idx.chunks(batch_size.max(1)) {
                let b = batch(series, chunk)?;
                let res = model.forward(&tape, &b, None, solver)?;
                let logits = model.task_logits(&tape, &res)?;
                if loss.kind == LossKind::Bce {
                    scores.extend_from_slice(logits[0].data());
                    truth_bin.extend(binary_labels(&b)?.into_iter().map(|y| y > 0.5));
                    continue;
                }
                for (t, lg) in logits.iter().enumerate() {
                    let cols = lg.shape()[1];
                    let labels = if logits.len() == 1 {
                        b.class_labels()
                            .map(|l| l.into_iter().map(Some).collect())
                            .unwrap_or_default()
                    } else {
                        per_time_labels(&b, t)
                    };
                    let arg = argmax_rows(lg.data(), cols);
                    for (i, l) in labels.iter().enumerate() {
                        if let Some(l) = l {
                            predicted.push(arg[i]);
                            truth.push(*l);
                            if cols == 2 {
                                scores.push(lg.data()[i * 2 + 1] - lg.data()[i * 2]);
                                truth_bin.push(*l == 1);
                            }
                        }
                    }
                }
            }
            if !truth.is_empty() {
                out.insert("accuracy".into(), accuracy(&predicted, &truth)?);
            }
            if !scores.is_empty() {
                match auc(&scores, &truth_bin) {
                    Ok(a) => {
                        out.insert("auc".into(), a);
                    }
                    Err(Error::SingleClass) if !truth.is_empty() => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(out)
}

/// Squared heldout error of one series, in original units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub id: String,
    pub sse: f64,
    pub count: usize,
}

impl SampleError {
    pub fn mse(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sse / self.count as f64)
    }
}

/// Per-series heldout errors for reconstruction and extrapolation tasks.
pub fn heldout_errors(
    model: &LatentOdeModel,
    series: &[IrregularSeries],
    task: &Task,
    stats: &NormStats,
    solver: &SolverConfig,
    batch_size: usize,
) -> Result<Vec<SampleError>> {
    if matches!(task, Task::Classification | Task::PerTimeClassification) {
        return Err(Error::InvalidArgument(
            "heldout errors need a reconstruction or extrapolation task".into(),
        ));
    }
    let tape = Tape::no_grad();
    let idx: Vec<usize> = (0..series.len()).collect();
    let mut out = Vec::with_capacity(series.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let mut b = batch(series, chunk)?;
        if let Task::Extrapolation { cut } = *task {
            b = b.heldout_after(cut);
        }
        let mut errs: Vec<SampleError> = b
            .ids
            .iter()
            .map(|id| SampleError {
                id: id.clone(),
                sse: 0.0,
                count: 0,
            })
            .collect();
        if b.count(Cells::Heldout) > 0 {
            let res = model.forward(&tape, &encoder_view(&b, task), None, solver)?;
            let d = b.n_features;
            for (t, pred) in res.preds.iter().enumerate() {
                for (i, e) in errs.iter_mut().enumerate() {
                    for f in 0..d {
                        let c = (i * b.n_times() + t) * d + f;
                        if b.heldout[c] {
                            let err = (pred.data()[i * d + f] - b.values[c]) * stats.std[f];
                            e.sse += err * err;
                            e.count += 1;
                        }
                    }
                }
            }
        }
        out.extend(errs);
    }
    Ok(out)
}

/// Mean training objective over `series` in index order, without updates.
pub fn mean_loss(
    model: &LatentOdeModel,
    series: &[IrregularSeries],
    task: &Task,
    cfg: &TrainingConfig,
    solver: &SolverConfig,
    epoch: usize,
) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    let idx: Vec<usize> = (0..series.len()).collect();
    let mut noise_rng = rng_for(cfg.seed, &format!("noise-eval-{epoch}"));
    let tape = Tape::no_grad();
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        let b = batch(series, chunk)?;
        total += batch_loss(
            model,
            &tape,
            &b,
            task,
            &cfg.loss,
            epoch,
            solver,
            &mut noise_rng,
        )?
        .item();
        n += 1;
    }
    Ok(total / n as f64)
}

/// Metric used for model selection, and whether larger is better.
fn selection_metric(metrics: &BTreeMap<String, f64>) -> Option<(f64, bool)> {
    if let Some(&m) = metrics.get("mse") {
        return Some((m, false));
    }
    metrics
        .get("auc")
        .or(metrics.get("accuracy"))
        .map(|&m| (m, true))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub history: Vec<MetricsRecord>,
    /// Completed-epoch count whose parameters were kept (the last one
    /// without validation).
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Parameters after the last epoch, in `params()` order, before the
    /// best ones were restored.
    pub final_params: Vec<Tensor>,
}

/// Trains for `cfg.epochs` epochs from `opt`'s current state. With a
/// validation set the best epoch's parameters are restored at the end and
/// training stops after `cfg.patience` epochs without improvement.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut LatentOdeModel,
    split: &DatasetSplit,
    task: &Task,
    cfg: &TrainingConfig,
    train_solver: &SolverConfig,
    eval_solver: &SolverConfig,
    opt: &mut AdamaxState,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<FitResult> {
    cfg.validate(task)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut stopped_early = false;
    let mut completed = start_epoch;
    for epoch in start_epoch..start_epoch + cfg.epochs {
        let started = Instant::now();
        let loss = train_epoch(model, &split.train, task, cfg, train_solver, opt, epoch)?;
        let seconds = started.elapsed().as_secs_f64();
        let metrics = if split.validation.is_empty() {
            BTreeMap::new()
        } else {
            evaluate(
                model,
                &split.validation,
                task,
                &cfg.loss,
                &split.stats,
                eval_solver,
                cfg.batch_size,
            )?
        };
        let record = MetricsRecord {
            epoch: epoch + 1,
            loss,
            metrics,
            lr: opt.lr(epoch),
            seconds,
        };
        on_epoch(&record);
        completed = epoch + 1;
        if let Some((value, larger)) = selection_metric(&record.metrics) {
            let improved = match &best {
                None => true,
                Some((b, _, _)) => {
                    if larger {
                        value > *b
                    } else {
                        value < *b
                    }
                }
            };
            if improved {
                let snapshot = model.params().iter().map(|p| p.value().clone()).collect();
                best = Some((value, completed, snapshot));
            } else if let Some((_, at, _)) = &best {
                if completed - at >= cfg.patience {
                    history.push(record);
                    stopped_early = true;
                    break;
                }
            }
        }
        history.push(record);
    }
    let final_params = model.params().iter().map(|p| p.value().clone()).collect();
    let best_epoch = match best {
        Some((_, epoch, snapshot)) => {
            for (p, v) in model.params_mut().into_iter().zip(snapshot) {
                p.set_value(v)?;
            }
            epoch
        }
        None => completed,
    };
    Ok(FitResult {
        history,
        best_epoch,
        stopped_early,
        final_params,
    })
}
