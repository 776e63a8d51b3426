//! Prune-while-finetuning: score filters every mini-batch, smooth the scores,
//! and every `interval_minibatches` steps mask the lowest-ranked filters until
//! the target number remains.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::domains::{BatchIterator, Dataset, DomainBatch, SplitPlan};
use crate::error::{Error, Result};
use crate::importance::{ior_importance, per_domain_risks, score_gradients, taylor_importance, ImportanceTable, IoRConfig};
use crate::metrics::accuracy;
use crate::nn::{FilterId, ForwardPass, GatedModel, ParamId};
use crate::objective::{objective_loss, PretrainLoss};
use crate::scalar::Scalar;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSchedule {
    pub interval_minibatches: u64,
    pub max_filters_per_event: usize,
    /// Fraction of filters left when pruning stops, in (0, 1].
    pub target_remaining_ratio: f64,
    pub per_layer_floor: usize,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self {
            interval_minibatches: 30,
            max_filters_per_event: 4,
            target_remaining_ratio: 0.5,
            per_layer_floor: 1,
        }
    }
}

impl PruneSchedule {
    /// Number of filters that remain once pruning is done: `ceil(ratio * total)`.
    pub fn target_count(&self, total: usize) -> usize {
        // Guards against products such as 0.3 * 80 landing a hair above an integer.
        let exact = self.target_remaining_ratio * total as f64;
        let rounded = exact.round();
        if (exact - rounded).abs() < 1e-9 {
            rounded as usize
        } else {
            exact.ceil() as usize
        }
    }

    pub fn validate(&self, layer_sizes: &[usize]) -> Result<()> {
        if self.interval_minibatches == 0 || self.max_filters_per_event == 0 || self.per_layer_floor == 0 {
            return Err(Error::Config(
                "interval, filters per event and per-layer floor must all be positive".into(),
            ));
        }
        if !(self.target_remaining_ratio > 0.0 && self.target_remaining_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "target remaining ratio must lie in (0, 1], got {}",
                self.target_remaining_ratio
            )));
        }
        let total: usize = layer_sizes.iter().sum();
        let floor_total: usize = layer_sizes.iter().map(|&n| n.min(self.per_layer_floor)).sum();
        if self.target_count(total) < floor_total {
            return Err(Error::Config(format!(
                "target of {} filters is below the {} the per-layer floor keeps",
                self.target_count(total),
                floor_total
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// SGD-with-momentum state.
#[derive(Clone, Debug)]
pub struct TrainState<S> {
    velocity: Vec<Vec<S>>,
    pub learning_rate: f64,
    momentum: f64,
    minibatch_counter: u64,
    rng_seed: u64,
    rng: ChaCha8Rng,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(model: &GatedModel<S>, optimizer: &OptimizerConfig, rng_seed: u64) -> Self {
        Self {
            velocity: model
                .param_ids()
                .into_iter()
                .map(|id| vec![S::zero(); model.param_values(id).len()])
                .collect(),
            learning_rate: optimizer.learning_rate,
            momentum: optimizer.momentum,
            minibatch_counter: 0,
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn minibatch_counter(&self) -> u64 {
        self.minibatch_counter
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// `v <- mu v + grad; p <- p - lr v` for every parameter, in declaration order.
    /// Gradients of pruned gates are discarded.
    pub fn apply_gradients(&mut self, model: &mut GatedModel<S>, grads: &[Vec<S>]) -> Result<()> {
        let ids = model.param_ids();
        if grads.len() != ids.len() {
            return Err(Error::MissingGradient(format!("{} gradient tensors for {} parameters", grads.len(), ids.len())));
        }
        let mu = S::of(self.momentum);
        let lr = S::of(self.learning_rate);
        for ((id, grad), vel) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let pruned = match id {
                ParamId::Gates(l) => Some(model.gates(l).pruned_mask().to_vec()),
                _ => None,
            };
            let delta: Vec<S> = vel
                .iter_mut()
                .zip(grad)
                .enumerate()
                .map(|(i, (v, &g))| {
                    let g = match &pruned {
                        Some(mask) if mask[i] => S::zero(),
                        _ => g,
                    };
                    *v = mu * *v + g;
                    -(lr * *v)
                })
                .collect();
            model.apply_update(id, &delta);
        }
        self.minibatch_counter += 1;
        Ok(())
    }
}

/// Gradient of every parameter after a backward pass, in declaration order.
pub fn collect_gradients<S: Scalar>(tape: &Tape<S>, fwd: &ForwardPass, model: &GatedModel<S>) -> Result<Vec<Vec<S>>> {
    model
        .param_ids()
        .into_iter()
        .map(|id| {
            tape.grad(fwd.params.var(id))
                .map(<[S]>::to_vec)
                .ok_or_else(|| Error::MissingGradient(format!("{id:?}")))
        })
        .collect()
}

/// One optimizer step on `loss`; returns the loss before the update.
pub fn train_step<S: Scalar>(
    model: &mut GatedModel<S>,
    state: &mut TrainState<S>,
    batch: &DomainBatch<S>,
    loss: &PretrainLoss,
) -> Result<S> {
    batch.domain_rows()?;
    let mut tape = Tape::new();
    let (root, fwd) = objective_loss(&mut tape, model, batch, loss, &mut state.rng)?;
    let value = tape.scalar(root);
    if !value.is_finite() {
        return Err(Error::Divergence {
            step: state.minibatch_counter,
            loss: value.to_f64_lossy(),
        });
    }
    tape.backward(root)?;
    let grads = collect_gradients(&tape, &fwd, model)?;
    state.apply_gradients(model, &grads)?;
    Ok(value)
}

/// Unpruned filters by ascending EMA score, ties by (layer, channel). Layers
/// already at `floor` are left out.
pub fn rank_filters<S: Scalar>(table: &ImportanceTable<S>, model: &GatedModel<S>, floor: usize) -> Vec<FilterId> {
    let mut ids: Vec<FilterId> = model
        .filter_ids()
        .filter(|&id| !model.is_pruned(id) && model.remaining_in_layer(id.layer) > floor)
        .collect();
    ids.sort_by(|a, b| {
        table
            .entry(*a)
            .ema
            .partial_cmp(&table.entry(*b).ema)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    ids
}

/// Masks up to `max_filters_per_event` lowest-ranked filters without going
/// below the target count or any layer floor. Returns the filters pruned.
pub fn prune_event<S: Scalar>(
    model: &mut GatedModel<S>,
    table: &mut ImportanceTable<S>,
    schedule: &PruneSchedule,
) -> Result<Vec<FilterId>> {
    let target = schedule.target_count(model.total_filters());
    let budget = schedule
        .max_filters_per_event
        .min(model.remaining_filters().saturating_sub(target));
    let mut pruned = Vec::with_capacity(budget);
    for id in rank_filters(table, model, schedule.per_layer_floor) {
        if pruned.len() == budget {
            break;
        }
        if model.remaining_in_layer(id.layer) <= schedule.per_layer_floor {
            continue;
        }
        model.mask_filter(id)?;
        table.mark_pruned(id);
        pruned.push(id);
    }
    Ok(pruned)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    Taylor,
    Ior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub schedule: PruneSchedule,
    pub optimizer: OptimizerConfig,
    /// Minimum number of epochs; training runs on until the target is reached.
    pub epochs: u64,
    pub batch_size: usize,
    pub ema_coefficient: f64,
    /// Zero the smoothed scores after every prune event.
    pub reset_ema_after_prune: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            schedule: PruneSchedule::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 30,
            batch_size: 63,
            ema_coefficient: 0.9,
            reset_ema_after_prune: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Prune,
    Epoch,
    Best,
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub step: u64,
    pub event: EventKind,
    pub payload: Value,
}

/// Writes events as line-delimited JSON.
pub fn write_event_log(events: &[LogEvent], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PrunedModelRecord<S> {
    pub final_model: GatedModel<S>,
    /// Best validation accuracy among epochs that ended at the target count.
    pub best_model: GatedModel<S>,
    pub best_epoch: Option<u64>,
    pub best_validation_accuracy: f64,
    pub events: Vec<LogEvent>,
    pub table: ImportanceTable<S>,
    pub epochs_run: u64,
}

impl<S: Scalar> PrunedModelRecord<S> {
    pub fn prune_events(&self) -> impl Iterator<Item = &LogEvent> {
        self.events.iter().filter(|e| e.event == EventKind::Prune)
    }
}

/// Finetunes with ERM on the mean per-domain risk while pruning by `criterion`.
///
/// Runs at least `cfg.epochs` epochs and keeps going to the end of the epoch
/// in which the target count is reached. Scoring stops once the target is hit.
pub fn prune_finetune_loop<S: Scalar>(
    model: &GatedModel<S>,
    dataset: &Dataset,
    plan: &SplitPlan,
    cfg: &FinetuneConfig,
    criterion: Criterion,
    ior: &IoRConfig,
    seed: u64,
) -> Result<PrunedModelRecord<S>> {
    let sizes: Vec<usize> = model.blocks().iter().map(|b| b.gates.len()).collect();
    cfg.schedule.validate(&sizes)?;
    cfg.optimizer.validate()?;
    ior.validate()?;
    let mut model = model.clone();
    let target = cfg.schedule.target_count(model.total_filters());
    let mut table = ImportanceTable::for_model(&model, cfg.ema_coefficient)?;
    let mut state = TrainState::new(&model, &cfg.optimizer, seed);
    let batches = BatchIterator::new(dataset, plan, cfg.batch_size, seed)?;
    let validation = plan.validation_indices();
    let mut events = Vec::new();
    let mut best: Option<(f64, u64, GatedModel<S>)> = None;
    let mut epoch = 0u64;

    while epoch < cfg.epochs || model.remaining_filters() > target {
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in batches.epoch::<S>(epoch) {
            let pruning = model.remaining_filters() > target;
            let variance = (pruning && criterion == Criterion::Ior).then_some(ior.variance_kind);
            let mut eval = per_domain_risks(&model, &batch)?;
            let (mean, snapshot, grads) = score_gradients(&model, &mut eval, variance)?;
            let loss = eval.tape.scalar(mean);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: state.minibatch_counter(),
                    loss: loss.to_f64_lossy(),
                }
                .context(format!("prune-finetune epoch {epoch}")));
            }
            if pruning {
                let raw = match criterion {
                    Criterion::Taylor => taylor_importance(&snapshot)?,
                    Criterion::Ior => ior_importance(&snapshot, ior)?,
                };
                table.ema_update(&raw)?;
            }
            state.apply_gradients(&mut model, &grads)?;
            loss_sum += loss.to_f64_lossy();
            n_batches += 1;
            let step = state.minibatch_counter();
            if pruning && step.is_multiple_of(cfg.schedule.interval_minibatches) {
                let pruned = prune_event(&mut model, &mut table, &cfg.schedule)?;
                let detail: Vec<Value> = pruned
                    .iter()
                    .map(|id| {
                        let e = table.entry(*id);
                        json!({"layer": id.layer, "channel": id.channel, "ema_score": e.ema.to_f64_lossy(), "raw_score": e.raw.to_f64_lossy()})
                    })
                    .collect();
                events.push(LogEvent {
                    step,
                    event: EventKind::Prune,
                    payload: json!({"epoch": epoch, "pruned": detail, "remaining": model.remaining_filters()}),
                });
                if cfg.reset_ema_after_prune {
                    table.reset_ema();
                }
            }
        }
        if n_batches == 0 {
            return Err(Error::Config("split yields no training batches".into()));
        }
        let acc = accuracy(&model, dataset, &validation)?;
        let step = state.minibatch_counter();
        events.push(LogEvent {
            step,
            event: EventKind::Epoch,
            payload: json!({
                "epoch": epoch,
                "mean_loss": loss_sum / n_batches as f64,
                "validation_accuracy": acc,
                "remaining": model.remaining_filters(),
            }),
        });
        if model.remaining_filters() <= target && best.as_ref().is_none_or(|(b, _, _)| acc >= *b) {
            events.push(LogEvent {
                step,
                event: EventKind::Best,
                payload: json!({"epoch": epoch, "validation_accuracy": acc}),
            });
            best = Some((acc, epoch, model.clone()));
        }
        epoch += 1;
    }

    let (best_validation_accuracy, best_epoch, best_model) = match best {
        Some((acc, e, m)) => (acc, Some(e), m),
        None => (accuracy(&model, dataset, &validation)?, None, model.clone()),
    };
    Ok(PrunedModelRecord {
        final_model: model,
        best_model,
        best_epoch,
        best_validation_accuracy,
        events,
        table,
        epochs_run: epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchConfig;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            height: 8,
            width: 8,
            channels: vec![4, 4],
            kernel_sizes: vec![3, 3],
            ..ArchConfig::default()
        }
    }

    fn table_with(model: &GatedModel<f64>, scores: &[f64]) -> ImportanceTable<f64> {
        let mut t = ImportanceTable::for_model(model, 0.5).unwrap();
        let mut it = scores.iter();
        let raw = model
            .blocks()
            .iter()
            .enumerate()
            .map(|(l, b)| {
                (0..b.gates.len())
                    .map(|c| (!model.is_pruned(FilterId::new(l, c))).then(|| 2.0 * *it.next().unwrap()))
                    .collect()
            })
            .collect();
        t.ema_update(&raw).unwrap();
        t
    }

    #[test]
    fn ranking_order_and_ties() {
        let model = GatedModel::<f64>::build(&small_arch(), 0).unwrap();
        let t = table_with(&model, &[3.0, 1.0, 2.0, 5.0, 0.5, 5.0, 5.0, 5.0]);
        let r = rank_filters(&t, &model, 1);
        let expect = [(1, 0), (0, 1), (0, 2), (0, 0), (0, 3), (1, 1), (1, 2), (1, 3)];
        assert_eq!(r, expect.iter().map(|&(l, c)| FilterId::new(l, c)).collect::<Vec<_>>());
    }

    #[test]
    fn ranking_skips_layers_at_floor() {
        let mut model = GatedModel::<f64>::build(&small_arch(), 0).unwrap();
        for c in 0..3 {
            model.mask_filter(FilterId::new(0, c)).unwrap();
        }
        let t = table_with(&model, &[0.0, 1.0, 1.0, 1.0, 1.0]);
        let r = rank_filters(&t, &model, 1);
        assert!(r.iter().all(|id| id.layer == 1));
        assert_eq!(r.len(), 4);
    }

    #[test]
    fn target_counts() {
        let s = |r| PruneSchedule {
            target_remaining_ratio: r,
            ..PruneSchedule::default()
        };
        assert_eq!(s(0.5).target_count(80), 40);
        assert_eq!(s(0.3).target_count(80), 24);
        assert_eq!(s(0.3).target_count(81), 25);
        assert_eq!(s(1.0).target_count(80), 80);
        assert!(s(0.0).validate(&[16, 32, 32]).is_err());
        assert!(s(0.01).validate(&[16, 32, 32]).is_err());
        assert!(s(0.5).validate(&[16, 32, 32]).is_ok());
    }

    #[test]
    fn prune_event_clips_to_target() {
        let mut model = GatedModel::<f64>::build(&small_arch(), 0).unwrap();
        let mut t = ImportanceTable::for_model(&model, 0.9).unwrap();
        let schedule = PruneSchedule {
            max_filters_per_event: 100,
            target_remaining_ratio: 0.5,
            ..PruneSchedule::default()
        };
        assert_eq!(prune_event(&mut model, &mut t, &schedule).unwrap().len(), 4);
        assert_eq!(model.remaining_filters(), 4);
        assert!(prune_event(&mut model, &mut t, &schedule).unwrap().is_empty());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut model = GatedModel::<f64>::build(&small_arch(), 1).unwrap();
        let before = model.clone();
        let opt = OptimizerConfig {
            learning_rate: 0.0,
            ..OptimizerConfig::default()
        };
        let mut state = TrainState::new(&model, &opt, 0);
        let grads: Vec<Vec<f64>> = model.param_ids().iter().map(|&id| vec![1.0; model.param_values(id).len()]).collect();
        state.apply_gradients(&mut model, &grads).unwrap();
        state.apply_gradients(&mut model, &grads).unwrap();
        assert_eq!(model, before);
        assert_eq!(state.minibatch_counter(), 2);
    }

    #[test]
    fn pruned_gate_ignores_gradients() {
        let mut model = GatedModel::<f64>::build(&small_arch(), 1).unwrap();
        model.mask_filter(FilterId::new(1, 2)).unwrap();
        let mut state = TrainState::new(&model, &OptimizerConfig::default(), 0);
        let grads: Vec<Vec<f64>> = model.param_ids().iter().map(|&id| vec![0.5; model.param_values(id).len()]).collect();
        for _ in 0..5 {
            state.apply_gradients(&mut model, &grads).unwrap();
        }
        assert_eq!(model.gate_value(FilterId::new(1, 2)).unwrap(), 0.0);
        assert_ne!(model.gate_value(FilterId::new(1, 1)).unwrap(), 1.0);
    }
}
