//! Adam, the mini-batch training loop with early stopping, evaluation
//! metrics, and the ablation and depth-sweep drivers built on them.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Tensor};
use crate::data::{Sample, N_CLASSES};
use crate::error::{Error, Result};
use crate::model::{argmax, loss, Ablations, DualKanbaFormer, ModelConfig};
use crate::params::{Ctx, Mode, ParamStore};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            batch_size: 32,
            max_epochs: 10,
            patience: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be a non-negative number, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be at least 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One bias-corrected update. Fails, leaving `store` untouched, if any
    /// gradient entry is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], cfg: &TrainConfig) -> Result<()> {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(store.names()[i].clone()));
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, (p, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &g)) in p.values_mut().iter_mut().zip(g.values()).enumerate() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                *w -= cfg.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub loss: f64,
}

/// Per-class F1 over the three classes; a class absent from both labels
/// and predictions scores 0.
pub fn per_class_f1(labels: &[usize], preds: &[usize]) -> [f64; N_CLASSES] {
    let mut f1 = [0.0; N_CLASSES];
    for (c, f) in f1.iter_mut().enumerate() {
        let tp = labels.iter().zip(preds).filter(|&(&y, &p)| y == c && p == c).count() as f64;
        let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
        let actual = labels.iter().filter(|&&y| y == c).count() as f64;
        if tp > 0.0 {
            let (precision, recall) = (tp / predicted, tp / actual);
            *f = 2.0 * precision * recall / (precision + recall);
        }
    }
    f1
}

pub fn accuracy(labels: &[usize], preds: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().zip(preds).filter(|(y, p)| y == p).count() as f64 / labels.len() as f64
}

pub fn macro_f1(labels: &[usize], preds: &[usize]) -> f64 {
    per_class_f1(labels, preds).iter().sum::<f64>() / N_CLASSES as f64
}

pub fn evaluate(model: &DualKanbaFormer, data: &[Sample]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut labels = Vec::with_capacity(data.len());
    let mut preds = Vec::with_capacity(data.len());
    let mut total = 0.0;
    for s in data {
        let p = model.predict_proba(s)?;
        total += loss(&p, s.label)?;
        labels.push(s.label);
        preds.push(argmax(&p));
    }
    Ok(Metrics {
        accuracy: accuracy(&labels, &preds),
        macro_f1: macro_f1(&labels, &preds),
        loss: total / data.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acc: f64,
    pub dev_macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the best dev accuracy.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_dev: Metrics,
    pub history: Vec<EpochRecord>,
}

pub fn train_loop(model: &mut DualKanbaFormer, train: &[Sample], dev: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_loop_with(model, train, dev, cfg, |_| {})
}

/// Trains `model` in place and leaves it holding the best parameters.
/// `on_epoch` sees every history row as it is produced.
pub fn train_loop_with(
    model: &mut DualKanbaFormer,
    train: &[Sample],
    dev: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    for s in train.iter().chain(dev) {
        model.check_sample(s)?;
    }
    let mut adam = Adam::new(&model.store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, Metrics, ParamStore)> = None;
    let mut stagnant = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &format!("shuffle.{epoch}")));
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let dropout_seed = rng::stream_seed(cfg.seed, &format!("dropout.{epoch}.{step}"));
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &model.store, Mode::Train, dropout_seed);
            let l = model.batch_loss(&mut ctx, &batch)?;
            let vars = ctx.param_vars().to_vec();
            loss_sum += ctx.value(l).item() * batch.len() as f64;
            let mut grads = tape.backward(l)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .zip(model.store.tensors())
                .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            adam.step(&mut model.store, &grads, cfg)?;
        }
        let dev_metrics = evaluate(model, if dev.is_empty() { train } else { dev })?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            dev_acc: dev_metrics.accuracy,
            dev_macro_f1: dev_metrics.macro_f1,
        };
        on_epoch(&record);
        history.push(record);
        match &best {
            Some((_, m, _)) if dev_metrics.accuracy <= m.accuracy => stagnant += 1,
            _ => {
                best = Some((epoch, dev_metrics, model.store.clone()));
                stagnant = 0;
            }
        }
        if stagnant >= cfg.patience {
            break;
        }
    }
    let (best_epoch, best_dev, best) = best.expect("at least one epoch ran");
    model.store = best.clone();
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_dev,
        history,
    })
}

pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["epoch", "train_loss", "dev_acc", "dev_macro_f1"]).map_err(csv_error)?;
    for r in history {
        w.write_record(&[
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.dev_acc.to_string(),
            r.dev_macro_f1.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

/// Dev metrics of one configuration after training from `seed`.
pub fn train_and_score(
    cfg: ModelConfig,
    train: &[Sample],
    dev: &[Sample],
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<Metrics> {
    let mut model = DualKanbaFormer::new(cfg, seed)?;
    let tc = TrainConfig { seed, ..*train_cfg };
    Ok(train_loop(&mut model, train, dev, &tc)?.best_dev)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub component: String,
    pub seeds: Vec<u64>,
    pub baseline: Vec<Metrics>,
    pub ablated: Vec<Metrics>,
}

impl AblationResult {
    fn mean(ms: &[Metrics], f: impl Fn(&Metrics) -> f64) -> f64 {
        ms.iter().map(f).sum::<f64>() / ms.len() as f64
    }

    pub fn baseline_accuracy(&self) -> f64 {
        Self::mean(&self.baseline, |m| m.accuracy)
    }

    pub fn ablated_accuracy(&self) -> f64 {
        Self::mean(&self.ablated, |m| m.accuracy)
    }

    /// Mean ablated minus mean baseline dev accuracy.
    pub fn delta_accuracy(&self) -> f64 {
        self.ablated_accuracy() - self.baseline_accuracy()
    }
}

/// Trains the baseline and the model without `component` from each seed.
pub fn run_ablation(
    base: ModelConfig,
    component: &str,
    train: &[Sample],
    dev: &[Sample],
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationResult> {
    let ablated_cfg = ModelConfig {
        ablations: Ablations::without(component)?,
        ..base
    };
    let run = |cfg: ModelConfig| -> Result<Vec<Metrics>> {
        seeds.iter().map(|&s| train_and_score(cfg, train, dev, train_cfg, s)).collect()
    };
    Ok(AblationResult {
        component: component.to_string(),
        seeds: seeds.to_vec(),
        baseline: run(base)?,
        ablated: run(ablated_cfg)?,
    })
}

/// Dev metrics for each depth in `depths`.
pub fn sweep_layers(
    base: ModelConfig,
    depths: std::ops::RangeInclusive<usize>,
    train: &[Sample],
    dev: &[Sample],
    train_cfg: &TrainConfig,
) -> Result<Vec<(usize, Metrics)>> {
    depths
        .map(|n_layers| {
            let cfg = ModelConfig { n_layers, ..base };
            Ok((n_layers, train_and_score(cfg, train, dev, train_cfg, train_cfg.seed)?))
        })
        .collect()
}
