//! Loss, optimizer, schedule, metrics and the train / evaluate loops.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::data::{Dataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion::Mode;
use crate::model::{predict, SkillFormer, ViewBatch};
use crate::numerics::{Gradients, Tape, Tensor};
use crate::params::ParamStore;
use crate::rng;

/// Samples per tape. Fixed so gradients do not depend on the thread count.
pub const TAPE_CHUNK: usize = 4;
const EVAL_CHUNK: usize = 8;

/// Cosine annealing from `base_lr` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let progress = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// AdamW with decoupled weight decay. Frozen parameters are never touched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let p = store.value_mut(id);
            if g.len() != p.len() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let decay = 1.0 - lr * self.weight_decay;
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w *= decay;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScenarioAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Evaluation summary: overall and per-scenario accuracy plus a confusion
/// matrix indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    pub per_scenario: BTreeMap<u8, ScenarioAccuracy>,
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub mean_loss: Option<f64>,
    pub loss_curve: Vec<f64>,
}

impl Metrics {
    pub fn from_predictions(labels: &[usize], preds: &[usize], scenarios: &[u8]) -> Self {
        assert_eq!(labels.len(), preds.len());
        assert_eq!(labels.len(), scenarios.len());
        let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
        let mut per: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
        let mut correct = 0;
        for ((&y, &p), &s) in labels.iter().zip(preds).zip(scenarios) {
            confusion[y][p] += 1;
            let e = per.entry(s).or_default();
            e.1 += 1;
            if y == p {
                e.0 += 1;
                correct += 1;
            }
        }
        Self {
            overall_accuracy: if labels.is_empty() {
                0.0
            } else {
                correct as f64 / labels.len() as f64
            },
            per_scenario: per
                .into_iter()
                .map(|(s, (c, t))| {
                    (
                        s,
                        ScenarioAccuracy {
                            correct: c,
                            total: t,
                            accuracy: c as f64 / t as f64,
                        },
                    )
                })
                .collect(),
            confusion,
            mean_loss: None,
            loss_curve: Vec::new(),
        }
    }

    /// Per-scenario accuracies averaged with scenario sizes as weights.
    pub fn weighted_scenario_mean(&self) -> f64 {
        let total: usize = self.per_scenario.values().map(|s| s.total).sum();
        self.per_scenario
            .values()
            .map(|s| s.accuracy * s.total as f64)
            .sum::<f64>()
            / total as f64
    }

    /// Human-readable report: overall accuracy, per-scenario table, confusion.
    pub fn report(&self) -> String {
        let mut s = format!("overall accuracy: {:.2}%\n", 100.0 * self.overall_accuracy);
        if let Some(l) = self.mean_loss {
            s += &format!("mean loss: {l:.6}\n");
        }
        s += "\nscenario   samples   accuracy\n";
        for (id, a) in &self.per_scenario {
            s += &format!("{id:>8}   {:>7}   {:>7.2}%\n", a.total, 100.0 * a.accuracy);
        }
        s += "\nconfusion (rows = true, cols = predicted)\n      ";
        for p in 0..NUM_CLASSES {
            s += &format!("{p:>6}");
        }
        s.push('\n');
        for (y, row) in self.confusion.iter().enumerate() {
            s += &format!("{y:>6}");
            for c in row {
                s += &format!("{c:>6}");
            }
            s.push('\n');
        }
        s
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub per_scenario: BTreeMap<String, f64>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub struct TrainOptions<'a> {
    pub exec: Exec,
    /// Dataset views fed to the model, in order. Defaults to all views.
    pub views: Option<Vec<usize>>,
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            exec: Exec::default(),
            views: None,
            on_epoch: None,
        }
    }
}

pub struct TrainOutcome {
    /// Best-validation weights (ties go to the earlier epoch).
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Mean batch loss at every optimizer step.
    pub loss_curve: Vec<f64>,
    pub model: SkillFormer,
    pub initial_store: ParamStore,
    pub final_store: ParamStore,
    pub best_store: ParamStore,
}

/// Per-scenario split, `fraction` of each scenario (rounded) held out.
pub fn stratified_split(scenarios: &[u8], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &s) in scenarios.iter().enumerate() {
        by.entry(s).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, mut idx) in by {
        idx.shuffle(&mut rng::stream(seed, 1 << 32 | s as u64));
        let n_val = (fraction * idx.len() as f64).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Views fed to the model: an explicit subset, or every dataset view when
/// the dataset has exactly as many views as the model.
fn resolve_views(cfg: &RunConfig, dataset: &Dataset, views: Option<&[usize]>) -> Result<Vec<usize>> {
    match views {
        Some(v) => Ok(v.to_vec()),
        None if dataset.views == cfg.model.views => Ok((0..dataset.views).collect()),
        None => Err(Error::Config(format!(
            "model expects {} views, dataset has {}",
            cfg.model.views, dataset.views
        ))),
    }
}

fn check_geometry(cfg: &RunConfig, dataset: &Dataset, views: &[usize]) -> Result<()> {
    let b = &cfg.model.backbone;
    if views.len() != cfg.model.views {
        return Err(Error::Config(format!(
            "model expects {} views, {} selected",
            cfg.model.views,
            views.len()
        )));
    }
    if let Some(v) = views.iter().find(|&&v| v >= dataset.views) {
        return Err(Error::Config(format!("view {v} not in a {}-view dataset", dataset.views)));
    }
    if dataset.channels != b.channels || dataset.height < b.image_size || dataset.width < b.image_size {
        return Err(Error::Config(format!(
            "dataset frames [{}, {}, {}] do not fit backbone input [{}, {}, {}]",
            dataset.channels, dataset.height, dataset.width, b.channels, b.image_size, b.image_size
        )));
    }
    Ok(())
}

fn slice_batch(batch: &ViewBatch, range: std::ops::Range<usize>) -> Result<ViewBatch> {
    let per = batch.clips.len() / batch.batch();
    let mut shape = batch.clips.shape().to_vec();
    shape[0] = range.len();
    Ok(ViewBatch {
        clips: Tensor::new(shape, batch.clips.data()[range.start * per..range.end * per].to_vec())?,
        labels: batch.labels[range.clone()].to_vec(),
        scenarios: batch.scenarios[range].to_vec(),
    })
}

/// Predictions and mean cross-entropy over `indices`, in eval mode.
pub fn predict_dataset(
    model: &SkillFormer,
    store: &ParamStore,
    dataset: &Dataset,
    indices: &[usize],
    views: &[usize],
    exec: Exec,
) -> Result<(Vec<usize>, f64)> {
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_CHUNK).collect();
    let frames = model.cfg.frames;
    let crop = model.cfg.backbone.image_size;
    let parts = exec.try_map(chunks.len(), |c| -> Result<(Vec<usize>, f64)> {
        let batch = dataset.view_batch(chunks[c], views, frames, crop)?;
        let mut tape = Tape::new(store);
        let logits = model.forward(&mut tape, &batch.clips, &Mode::Eval)?;
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        Ok((predict(tape.value(logits)), tape.value(loss).item() * chunks[c].len() as f64))
    })?;
    let mut preds = Vec::with_capacity(indices.len());
    let mut loss = 0.0;
    for (p, l) in parts {
        preds.extend(p);
        loss += l;
    }
    Ok((preds, loss / indices.len().max(1) as f64))
}

/// Metrics of a model on `indices` of `dataset`.
pub fn evaluate_model(
    model: &SkillFormer,
    store: &ParamStore,
    dataset: &Dataset,
    indices: &[usize],
    views: &[usize],
    exec: Exec,
) -> Result<Metrics> {
    let (preds, loss) = predict_dataset(model, store, dataset, indices, views, exec)?;
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.samples[i].label as usize).collect();
    let scen: Vec<u8> = indices.iter().map(|&i| dataset.samples[i].scenario).collect();
    let mut m = Metrics::from_predictions(&labels, &preds, &scen);
    m.mean_loss = Some(loss);
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Fold adapters into base weights before evaluating.
    pub merge: bool,
    pub exec: Exec,
    pub views: Option<Vec<usize>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            merge: true,
            exec: Exec::default(),
            views: None,
        }
    }
}

/// Evaluate a checkpoint on a whole dataset in eval mode.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, opts: &EvalOptions) -> Result<Metrics> {
    let cfg = checkpoint.run_config();
    let views = resolve_views(&cfg, dataset, opts.views.as_deref())?;
    check_geometry(&cfg, dataset, &views)?;
    let (mut model, mut store) = checkpoint.model()?;
    if opts.merge && model.has_adapters() {
        (model, store) = model.merged(&store)?;
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    evaluate_model(&model, &store, dataset, &all, &views, opts.exec)
}

/// Fine-tune adapters, fusion and head with AdamW under a cosine schedule.
pub fn train(cfg: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, dataset, TrainOptions::default())
}

pub fn train_with(cfg: &RunConfig, dataset: &Dataset, mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let views = resolve_views(cfg, dataset, opts.views.as_deref())?;
    check_geometry(cfg, dataset, &views)?;
    let tc = &cfg.train;
    let (train_idx, val_idx) = stratified_split(&dataset.scenarios(), tc.val_fraction, tc.seed);
    if train_idx.is_empty() {
        return Err(Error::Data("validation split leaves no training samples".into()));
    }

    let (model, mut store) = SkillFormer::new(&cfg.model, tc.seed)?;
    let initial_store = store.clone();
    let mut adam = AdamW::from_config(tc);
    let steps_per_epoch = train_idx.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;
    let frames = cfg.model.frames;
    let crop = cfg.model.backbone.image_size;

    let mut history = Vec::with_capacity(tc.epochs);
    let mut loss_curve = Vec::with_capacity(total_steps);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..tc.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng::stream(tc.seed, 2 << 32 | epoch as u64));
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (bi, batch_idx) in order.chunks(tc.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + bi;
            lr = cosine_lr(step, total_steps, tc.lr);
            let batch = dataset.view_batch(batch_idx, &views, frames, crop)?;
            let (loss, grads) = batch_gradients(&model, &store, &batch, batch_idx, tc.seed, step, opts.exec)?;
            adam.step(&mut store, &grads, lr)?;
            loss_curve.push(loss);
            epoch_loss += loss;
        }
        let val_metrics = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate_model(&model, &store, dataset, &val_idx, &views, opts.exec)?)
        };
        let val_acc = val_metrics.as_ref().map_or(f64::NAN, |m| m.overall_accuracy);
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_acc,
            per_scenario: val_metrics
                .map(|m| m.per_scenario.iter().map(|(k, v)| (k.to_string(), v.accuracy)).collect())
                .unwrap_or_default(),
        };
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&record);
        }
        history.push(record);
        let score = if val_acc.is_nan() { f64::NEG_INFINITY } else { val_acc };
        let improved = match &best {
            None => true,
            Some((b, _, _)) => score > *b || val_idx.is_empty(),
        };
        if improved {
            best = Some((score, epoch, store.clone()));
        }
    }

    let (best_epoch, best_store) = match best {
        Some((_, e, s)) => (e, s),
        None => (0, store.clone()),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_model(cfg, &model, &best_store),
        best_epoch,
        history,
        loss_curve,
        model,
        initial_store,
        final_store: store,
        best_store,
    })
}

/// Mean loss and gradient of one batch, computed over fixed-size chunks on
/// separate tapes and summed in chunk order.
pub fn batch_gradients(
    model: &SkillFormer,
    store: &ParamStore,
    batch: &ViewBatch,
    sample_ids: &[usize],
    seed: u64,
    step: usize,
    exec: Exec,
) -> Result<(f64, Gradients)> {
    let b = batch.batch();
    let n_chunks = b.div_ceil(TAPE_CHUNK);
    let step_seed = rng::mix(seed, step as u64);
    let parts = exec.try_map(n_chunks, |c| -> Result<(f64, Gradients)> {
        let range = c * TAPE_CHUNK..((c + 1) * TAPE_CHUNK).min(b);
        let sub = slice_batch(batch, range.clone())?;
        let seeds = sample_ids[range.clone()].iter().map(|&i| rng::mix(step_seed, i as u64)).collect();
        let mut tape = Tape::new(store);
        let logits = model.forward(&mut tape, &sub.clips, &Mode::Train { dropout_seeds: seeds })?;
        let ce = tape.cross_entropy(logits, &sub.labels)?;
        let weight = range.len() as f64 / b as f64;
        let loss = tape.scale(ce, weight);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            let (layer, op) = tape
                .first_non_finite()
                .unwrap_or_else(|| ("loss".into(), "cross_entropy"));
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}; first non-finite value in {layer} ({op})"
            )));
        }
        Ok((value, tape.backward(loss)?))
    })?;
    let mut grads = Gradients::zeros_like(store);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grads.accumulate(g);
    }
    Ok((loss, grads))
}
