//! Optimization, evaluation and run aggregation.

mod adam;
mod metrics;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use metrics::{aggregate_runs, compute_auc, summarize, Summary};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{epoch_batches, CascadeDataset};
use crate::error::{Error, Result};
use crate::models::{multitask_loss, ForwardMode, ModelConfig, MultiTaskModel};
use crate::numerics::Graph;

/// Learning rates searched by the comparison sweep.
pub const LEARNING_RATE_SWEEP: [f64; 4] = [0.0005, 0.001, 0.0015, 0.002];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Number of epochs; the curriculum sees epoch indices `0..epochs`.
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub validation_fraction: f64,
    /// Rows per forward pass during evaluation.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 256,
            epochs: 10,
            seeds: vec![1, 2, 3, 4, 5],
            validation_fraction: 0.1,
            eval_batch_size: 4096,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "train.learning_rate = {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("train.seeds must list at least one seed".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "train.validation_fraction = {} must be in [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Label-selection probability used by the premise path.
    pub sampling_probability: f64,
    /// Row-weighted mean of the joint training loss.
    pub train_loss: f64,
    /// Share of premise draws that took the label, when there were draws.
    pub label_pick_rate: Option<f64>,
    /// Validation AUC per task; `None` when undefined.
    pub validation_auc: Vec<Option<f64>>,
}

pub struct TrainedModel {
    pub model: MultiTaskModel,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub selected_epoch: usize,
}

/// Random streams of one run, all derived from its seed.
struct RunStreams {
    init: ChaCha8Rng,
    premise: ChaCha8Rng,
    shuffle_base: u64,
}

impl RunStreams {
    fn new(seed: u64) -> Self {
        let mut premise = ChaCha8Rng::seed_from_u64(seed);
        premise.set_stream(1);
        Self {
            init: ChaCha8Rng::seed_from_u64(seed),
            premise,
            shuffle_base: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        }
    }
}

/// Trains one model from `seed` and keeps the parameters of the epoch with
/// the best validation AUC on the last task (the last epoch when validation
/// AUC is unavailable).
pub fn train_loop(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seed: u64,
    train: &CascadeDataset,
    validation: &CascadeDataset,
) -> Result<TrainedModel> {
    train_config.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut streams = RunStreams::new(seed);
    let mut model = MultiTaskModel::new(model_config.clone(), train.schema(), &mut streams.init)?;
    let adam = AdamConfig::new(train_config.learning_rate);
    let mut state = AdamState::new(model.params().values());
    let last_task = model_config.num_tasks - 1;
    let weights: Vec<f64> = (0..model_config.num_tasks)
        .map(|t| model_config.loss_weight(t))
        .collect();

    let mut history = Vec::with_capacity(train_config.epochs);
    let mut best: Option<(f64, usize, crate::layers::ParamSet)> = None;

    for epoch in 0..train_config.epochs {
        let batches = epoch_batches(train.len(), train_config.batch_size, streams.shuffle_base, epoch)?;
        let mut loss_sum = 0.0;
        let (mut picks, mut draws) = (0usize, 0usize);

        for (b, rows) in batches.iter().enumerate() {
            let context = |e: Error| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}"));
            let batch = train.batch(rows);
            let mut graph = Graph::new();
            let bound = model.params().bind(&mut graph);
            let outputs = model
                .forward(
                    &mut graph,
                    &bound,
                    &batch,
                    ForwardMode::Train {
                        labels: &batch.labels,
                        epoch,
                        rng: &mut streams.premise,
                    },
                )
                .map_err(|e| match e {
                    Error::NonFinite { .. } | Error::Numeric(_) => context(e),
                    other => other,
                })?;
            let loss = multitask_loss(&mut graph, &outputs, &batch.labels, &weights)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => context(e),
                    other => other,
                })?;
            let loss_value = graph.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(context(Error::Numeric("loss is not finite".into())));
            }
            loss_sum += loss_value * rows.len() as f64;
            picks += outputs.label_picks;
            draws += outputs.premise_draws;

            let grads = graph.backward(loss).map_err(context)?;
            let grads: Vec<_> = bound
                .nodes()
                .iter()
                .map(|&id| grads.get_or_zeros(id, &graph))
                .collect();
            adam_step(model.params_mut().values_mut(), &grads, &mut state, &adam).map_err(context)?;
        }

        let validation_auc = if validation.is_empty() {
            vec![None; model_config.num_tasks]
        } else {
            evaluate_auc(&model, validation, train_config.eval_batch_size)?
                .into_iter()
                .map(Result::ok)
                .collect()
        };
        let score = validation_auc[last_task];
        match (&best, score) {
            (Some((best_auc, _, _)), Some(auc)) if auc <= *best_auc => {}
            (_, Some(auc)) => best = Some((auc, epoch, model.params().clone())),
            (_, None) => {}
        }
        history.push(EpochRecord {
            epoch,
            sampling_probability: model_config.schedule.sampling_probability(epoch),
            train_loss: loss_sum / train.len() as f64,
            label_pick_rate: (draws > 0).then(|| picks as f64 / draws as f64),
            validation_auc,
        });
    }

    let selected_epoch = match best {
        Some((_, epoch, params)) => {
            *model.params_mut() = params;
            epoch
        }
        None => train_config.epochs - 1,
    };
    Ok(TrainedModel {
        model,
        history,
        selected_epoch,
    })
}

/// Inference-mode probabilities, `[task][row]`.
pub fn predict(model: &MultiTaskModel, dataset: &CascadeDataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let m = dataset.schema().num_tasks();
    let mut out = vec![Vec::with_capacity(dataset.len()); m];
    let rows: Vec<usize> = (0..dataset.len()).collect();
    for chunk in rows.chunks(batch_size.max(1)) {
        let batch = dataset.batch(chunk);
        let mut graph = Graph::new();
        let bound = model.params().bind(&mut graph);
        let outputs = model.forward(&mut graph, &bound, &batch, ForwardMode::Infer)?;
        for (t, &p) in outputs.probabilities.iter().enumerate() {
            out[t].extend_from_slice(graph.value(p).data());
        }
    }
    Ok(out)
}

/// Per-task AUC of inference-mode predictions.
pub fn evaluate_auc(
    model: &MultiTaskModel,
    dataset: &CascadeDataset,
    batch_size: usize,
) -> Result<Vec<Result<f64>>> {
    let scores = predict(model, dataset, batch_size)?;
    Ok(scores
        .iter()
        .enumerate()
        .map(|(t, s)| compute_auc(s, &dataset.task_labels(t)))
        .collect())
}
