//! Training loop, evaluation, transfer between subtasks, ensembling and
//! learning curves.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{group_name, Checkpoint, CheckpointMeta};
use crate::data::{hint_of, subsample, ComveInstance, DatasetSplit};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::models::{ComveModel, ModelConfig, Task};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::param::{Grads, ParamStore};
use crate::rng::{derive_seed, seeded};
use crate::tokenizer::{train_vocab, TokenSequence, Vocab};

const SHUFFLE_STREAM: u64 = 10;
const DROPOUT_STREAM: u64 = 11;

/// Where a run's initial weights come from. The transfer path is resolved
/// by the caller, which loads the checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    #[default]
    Fresh,
    Transfer(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate on dev every this many steps; 0 means once per epoch.
    pub eval_every: usize,
    /// Evaluations without improvement tolerated before stopping.
    pub patience: usize,
    pub hint_enabled: bool,
    pub init: InitSpec,
    /// Stop as soon as dev accuracy reaches this value.
    pub target_dev_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::SenMaking,
            model: ModelConfig::default(),
            learning_rate: 3e-4,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            eval_every: 0,
            patience: 3,
            hint_enabled: true,
            init: InitSpec::Fresh,
            target_dev_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// One dev evaluation during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EvalRecord>,
    pub best_step: u64,
    pub best_dev_accuracy: f64,
    pub final_test_accuracy: Option<f64>,
}

pub struct TrainData<'a> {
    pub train: &'a DatasetSplit,
    pub dev: &'a DatasetSplit,
    pub test: Option<&'a DatasetSplit>,
}

pub struct TrainOutcome {
    /// Weights at the best dev evaluation.
    pub model: ComveModel,
    pub checkpoint: Checkpoint,
    pub history: RunHistory,
}

/// Every text of a split, for vocabulary training.
pub fn split_texts(split: &DatasetSplit) -> Vec<&str> {
    split
        .instances()
        .iter()
        .flat_map(|i| {
            let opts = i.options.iter().flatten().map(String::as_str);
            [i.s1.as_str(), i.s2.as_str()].into_iter().chain(opts)
        })
        .collect()
}

/// A BPE vocabulary over every text of `split`.
pub fn build_vocab(split: &DatasetSplit, target_size: usize) -> Result<Vocab> {
    train_vocab(&split_texts(split), target_size)
}

/// Freshly initialized model for `config`.
pub fn fresh_model(config: &TrainConfig, vocab: Vocab) -> Result<ComveModel> {
    ComveModel::init(config.task, &config.model, vocab, config.seed)
}

/// Encoder weights from `source`, fusion and head freshly initialized for
/// `task` under `seed`. The target architecture must embed the same
/// vocabulary with the same shapes.
pub fn transfer_init(source: &Checkpoint, task: Task, config: &ModelConfig, seed: u64) -> Result<ComveModel> {
    let mut model = ComveModel::init(task, config, source.vocab.clone(), seed)?;
    let mut bad = BTreeSet::new();
    let mut copies = Vec::new();
    for id in model.store.ids() {
        let entry = model.store.entry(id);
        if !entry.group.is_encoder() {
            continue;
        }
        match source.params.iter().find(|e| e.name == entry.name) {
            Some(src) if src.value.shape() == entry.value.shape() && src.group == entry.group => {
                copies.push((id, src.value.clone()))
            }
            _ => {
                bad.insert(group_name(entry.group));
            }
        }
    }
    let extra = source
        .params
        .iter()
        .filter(|e| e.group.is_encoder() && model.store.find(&e.name).is_none());
    for e in extra {
        bad.insert(group_name(e.group));
    }
    if !bad.is_empty() {
        return Err(Error::GroupShapes(bad.into_iter().map(String::from).collect()));
    }
    for (id, value) in copies {
        model.store.set(id, value)?;
    }
    Ok(model)
}

/// Candidate sequences of one instance and the index of the right one.
pub fn instance_inputs(model: &ComveModel, inst: &ComveInstance, hint_enabled: bool) -> Result<(Vec<TokenSequence>, usize)> {
    match model.task {
        Task::SenMaking => Ok((model.dual_order_inputs(&inst.s1, &inst.s2)?, inst.sensible_index())),
        Task::BaselineSenMaking => Ok((model.independent_inputs(&inst.s1, &inst.s2)?, inst.sensible_index())),
        Task::Explanation => {
            let (Some(options), Some(label)) = (&inst.options, inst.reason_index) else {
                return Err(Error::Config(format!(
                    "explanation task needs options and reason_index, instance {} has none",
                    inst.id
                )));
            };
            let hint = if hint_enabled { hint_of(inst) } else { "" };
            let opts: Vec<&str> = options.iter().map(String::as_str).collect();
            Ok((model.explanation_inputs(inst.nonsense(), hint, &opts)?, label))
        }
    }
}

/// The target index of `inst` under `task`, if the instance is labelled for it.
pub fn gold_label(task: Task, inst: &ComveInstance) -> Option<usize> {
    match task {
        Task::SenMaking | Task::BaselineSenMaking => Some(inst.sensible_index()),
        Task::Explanation => inst.reason_index,
    }
}

fn prepare(model: &ComveModel, split: &DatasetSplit, hint_enabled: bool) -> Result<Vec<(Vec<TokenSequence>, usize)>> {
    split
        .instances()
        .iter()
        .map(|i| instance_inputs(model, i, hint_enabled))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean `−ln p(label)`.
    pub loss: f64,
    pub predictions: Vec<Prediction>,
}

/// Index of the largest value; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 32;

fn evaluate_prepared(model: &ComveModel, ids: &[&str], prepared: &[(Vec<TokenSequence>, usize)]) -> Result<Evaluation> {
    if prepared.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let mut predictions = Vec::with_capacity(prepared.len());
    let (mut correct, mut loss) = (0usize, 0.0);
    for (chunk_ids, chunk) in ids.chunks(EVAL_CHUNK).zip(prepared.chunks(EVAL_CHUNK)) {
        let mut tape = Tape::with_params(&model.store);
        let groups: Vec<&[TokenSequence]> = chunk.iter().map(|(g, _)| g.as_slice()).collect();
        let probs = model.probabilities_on_tape(&mut tape, &groups, &mut Mode::Eval)?;
        let p = tape.value(probs);
        for (row, ((_, label), id)) in chunk.iter().zip(chunk_ids).enumerate() {
            let probabilities = p.row(row).to_vec();
            let predicted = argmax(&probabilities);
            correct += usize::from(predicted == *label);
            loss -= libm::log(probabilities[*label]);
            predictions.push(Prediction {
                id: String::from(*id),
                predicted,
                probabilities,
            });
        }
    }
    let n = prepared.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
        predictions,
    })
}

/// Eval-mode accuracy, loss and per-instance predictions on `split`.
pub fn evaluate(model: &ComveModel, split: &DatasetSplit, hint_enabled: bool) -> Result<Evaluation> {
    let prepared = prepare(model, split, hint_enabled)?;
    let ids: Vec<&str> = split.instances().iter().map(|i| i.id.as_str()).collect();
    evaluate_prepared(model, &ids, &prepared)
}

/// Mean cross entropy of one mini-batch, with gradients accumulated into
/// `grads`. Returns the loss.
pub fn batch_gradient(
    model: &ComveModel,
    batch: &[&(Vec<TokenSequence>, usize)],
    grads: &mut Grads,
    mode: &mut Mode<'_>,
) -> Result<f64> {
    let mut tape = Tape::with_params(&model.store);
    let groups: Vec<&[TokenSequence]> = batch.iter().map(|(g, _)| g.as_slice()).collect();
    let probs = model.probabilities_on_tape(&mut tape, &groups, mode)?;
    let mut total = None;
    for (i, (_, label)) in batch.iter().enumerate() {
        let row = tape.row(probs, i)?;
        let nll = tape.cross_entropy(row, *label)?;
        total = Some(match total {
            None => nll,
            Some(t) => tape.add(t, nll)?,
        });
    }
    let total = total.ok_or_else(|| Error::Input("empty batch".into()))?;
    let loss = tape.scale(total, 1.0 / batch.len() as f64);
    tape.backward(loss)?;
    tape.accumulate_param_grads(grads);
    Ok(tape.value(loss).data()[0])
}

/// Trains `model` on `data.train` with AdamW, evaluating on `data.dev` and
/// keeping the weights of the best evaluation (the earliest on ties).
/// `observe` sees every evaluation as it happens.
pub fn train(
    config: &TrainConfig,
    mut model: ComveModel,
    data: &TrainData<'_>,
    mut observe: Option<&mut dyn FnMut(&EvalRecord)>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if model.task != config.task {
        return Err(Error::Config(format!(
            "model was built for {} but the config trains {}",
            model.task.name(),
            config.task.name()
        )));
    }
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(Error::Input("train and dev splits must be non-empty".into()));
    }
    let train_set = prepare(&model, data.train, config.hint_enabled)?;
    let dev_set = prepare(&model, data.dev, config.hint_enabled)?;
    let dev_ids: Vec<&str> = data.dev.instances().iter().map(|i| i.id.as_str()).collect();

    let mut shuffle_rng = seeded(derive_seed(config.seed, SHUFFLE_STREAM));
    let mut dropout_rng = seeded(derive_seed(config.seed, DROPOUT_STREAM));
    let mut state = AdamWState::new(
        AdamWConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        &model.store,
    );
    let mut grads = Grads::for_store(&model.store);
    let mut history = RunHistory::default();
    let mut best: Option<(f64, u64, ParamStore)> = None;
    let (mut loss_sum, mut loss_steps) = (0.0, 0usize);
    let mut stale = 0usize;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let chunks: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for (i, chunk) in chunks.iter().enumerate() {
            let batch: Vec<&(Vec<TokenSequence>, usize)> = chunk.iter().map(|&j| &train_set[j]).collect();
            grads.zero();
            loss_sum += batch_gradient(&model, &batch, &mut grads, &mut Mode::Train(&mut dropout_rng))?;
            loss_steps += 1;
            adamw_step(&mut model.store, &grads, &mut state)?;
            step += 1;

            let epoch_end = i + 1 == chunks.len();
            let due = if config.eval_every == 0 {
                epoch_end
            } else {
                step % config.eval_every as u64 == 0 || (epoch_end && epoch + 1 == config.epochs)
            };
            if !due {
                continue;
            }
            let eval = evaluate_prepared(&model, &dev_ids, &dev_set)?;
            let record = EvalRecord {
                step,
                train_loss: loss_sum / loss_steps as f64,
                dev_accuracy: eval.accuracy,
            };
            (loss_sum, loss_steps) = (0.0, 0);
            if let Some(f) = observe.as_mut() {
                f(&record);
            }
            history.records.push(record);
            if best.as_ref().map_or(true, |(acc, _, _)| eval.accuracy > *acc) {
                best = Some((eval.accuracy, step, model.store.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
            let reached = config.target_dev_accuracy.is_some_and(|t| eval.accuracy >= t);
            if reached || stale > config.patience {
                break 'epochs;
            }
        }
    }

    let (best_acc, best_step, store) = match best {
        Some(b) => b,
        None => {
            // No update happened (zero epochs): report the initial weights.
            let eval = evaluate_prepared(&model, &dev_ids, &dev_set)?;
            (eval.accuracy, 0, model.store.clone())
        }
    };
    model.store = store;
    history.best_step = best_step;
    history.best_dev_accuracy = best_acc;
    if let Some(test) = data.test {
        history.final_test_accuracy = Some(evaluate(&model, test, config.hint_enabled)?.accuracy);
    }
    let checkpoint = Checkpoint::from_model(
        &model,
        CheckpointMeta {
            seed: config.seed,
            step: best_step,
            dev_accuracy: Some(best_acc),
        },
    );
    Ok(TrainOutcome {
        model,
        checkpoint,
        history,
    })
}

/// Plurality vote per id over the members' predicted indices. Ties go to
/// the tied index with the largest summed probability, then the lowest
/// index. Output follows the first member's order.
pub fn ensemble_predict(members: &[Vec<Prediction>]) -> Result<Vec<(String, usize)>> {
    let first = members
        .first()
        .ok_or_else(|| Error::Input("ensemble needs at least one member".into()))?;
    let index: Vec<BTreeMap<&str, &Prediction>> = members
        .iter()
        .map(|m| m.iter().map(|p| (p.id.as_str(), p)).collect())
        .collect();
    let ids: BTreeSet<&str> = first.iter().map(|p| p.id.as_str()).collect();
    for (k, m) in index.iter().enumerate() {
        let other: BTreeSet<&str> = m.keys().copied().collect();
        if other != ids || m.len() != members[k].len() {
            return Err(Error::Input(format!("ensemble member {k} covers a different id set")));
        }
    }
    first
        .iter()
        .map(|p| {
            let preds: Vec<&Prediction> = index.iter().map(|m| m[p.id.as_str()]).collect();
            let classes = preds.iter().map(|q| q.probabilities.len()).max().unwrap_or(0);
            let mut votes = alloc::vec![0usize; classes.max(1)];
            let mut mass = alloc::vec![0.0f64; classes.max(1)];
            for q in &preds {
                if q.predicted >= votes.len() {
                    return Err(Error::Index {
                        index: q.predicted,
                        len: votes.len(),
                    });
                }
                votes[q.predicted] += 1;
                for (m, &x) in mass.iter_mut().zip(&q.probabilities) {
                    *m += x;
                }
            }
            let top = votes.iter().copied().max().unwrap_or(0);
            let mut winner = None::<usize>;
            for c in (0..votes.len()).filter(|&c| votes[c] == top) {
                if winner.map_or(true, |w| mass[c] > mass[w]) {
                    winner = Some(c);
                }
            }
            Ok((p.id.clone(), winner.unwrap_or(0)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fresh,
    Transfer,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Fresh => "fresh",
            Variant::Transfer => "transfer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub fraction: f64,
    pub seed: u64,
    pub variant: Variant,
    pub dev_accuracy: f64,
}

/// One learning-curve grid point: train on the `fraction` subsample drawn
/// with `seed`, from fresh weights or from `source`'s encoder.
pub fn curve_point(
    base: &TrainConfig,
    vocab: &Vocab,
    data: &TrainData<'_>,
    fraction: f64,
    seed: u64,
    source: Option<&Checkpoint>,
) -> Result<CurveRow> {
    let train_part = subsample(data.train, fraction, seed)?;
    let config = TrainConfig { seed, ..base.clone() };
    let model = match source {
        Some(src) => transfer_init(src, config.task, &config.model, seed)?,
        None => fresh_model(&config, vocab.clone())?,
    };
    let part = TrainData {
        train: &train_part,
        dev: data.dev,
        test: None,
    };
    let outcome = train(&config, model, &part, None)?;
    Ok(CurveRow {
        fraction,
        seed,
        variant: if source.is_some() { Variant::Transfer } else { Variant::Fresh },
        dev_accuracy: outcome.history.best_dev_accuracy,
    })
}

/// Every `(fraction, seed, variant)` grid point, fractions outermost. The
/// transfer variant is included when `source` is given.
pub fn learning_curve(
    base: &TrainConfig,
    vocab: &Vocab,
    data: &TrainData<'_>,
    fractions: &[f64],
    seeds: &[u64],
    source: Option<&Checkpoint>,
) -> Result<Vec<CurveRow>> {
    if let Some(&f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Input(format!("fraction {f} outside (0, 1]")));
    }
    let mut rows = Vec::new();
    for &fraction in fractions {
        for &seed in seeds {
            rows.push(curve_point(base, vocab, data, fraction, seed, None)?);
            if source.is_some() {
                rows.push(curve_point(base, vocab, data, fraction, seed, source)?);
            }
        }
    }
    Ok(rows)
}

