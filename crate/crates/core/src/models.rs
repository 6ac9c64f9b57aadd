//! Multi-task architectures for sequentially dependent tasks.
//!
//! * `pimm`: per-task towers over shared embeddings; task `t` attends over
//!   its tower output and a message from task `t-1` that merges the embedded
//!   premise (label or prediction, scheduled) with the transferred hidden
//!   representation.
//! * `aitm`: the same without the premise path; the message is the
//!   transferred representation alone.
//! * `esmm`: per-task towers whose outputs are chained products of
//!   conditional probabilities.
//! * `shared_bottom`: shared MLP trunk, independent towers, no transfer.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};

use crate::data::{cascade_violation, Batch, DatasetSchema};
use crate::error::{Error, Result};
use crate::layers::{embed_lookup, AttentionUnit, Bound, Dense, EmbeddingTable, ParamSet, Tower};
use crate::numerics::{Array, Graph, NodeId};
use crate::pim::{merge_messages, select_premise, Phase, PremiseEmbedder, ScheduleConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Pimm,
    SharedBottom,
    Esmm,
    Aitm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::SharedBottom,
        ModelKind::Esmm,
        ModelKind::Aitm,
        ModelKind::Pimm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Pimm => "pimm",
            ModelKind::SharedBottom => "shared_bottom",
            ModelKind::Esmm => "esmm",
            ModelKind::Aitm => "aitm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pimm" => Ok(ModelKind::Pimm),
            "shared_bottom" => Ok(ModelKind::SharedBottom),
            "esmm" => Ok(ModelKind::Esmm),
            "aitm" => Ok(ModelKind::Aitm),
            other => Err(Error::Config(format!(
                "unknown model kind {other:?} (expected pimm, shared_bottom, esmm or aitm)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_tasks: usize,
    pub embedding_dim: usize,
    /// Widths of every task tower; the last one is the transfer width `d`.
    pub tower_dims: Vec<usize>,
    /// Shared trunk widths, used by `shared_bottom` only.
    pub bottom_dims: Vec<usize>,
    /// Used by `pimm` only.
    pub schedule: ScheduleConfig,
    /// Per-task loss weights; empty means all ones.
    pub loss_weights: Vec<f64>,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, num_tasks: usize) -> Self {
        Self {
            kind,
            num_tasks,
            embedding_dim: 5,
            tower_dims: vec![128, 64, 32],
            bottom_dims: vec![128],
            schedule: ScheduleConfig::default(),
            loss_weights: Vec::new(),
        }
    }

    /// Width of the vectors exchanged between tasks.
    pub fn transfer_dim(&self) -> usize {
        *self.tower_dims.last().expect("validated tower dims")
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks < 2 {
            return Err(Error::Config(format!(
                "need at least 2 tasks, got {}",
                self.num_tasks
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("model.embedding_dim must be positive".into()));
        }
        if self.tower_dims.is_empty() || self.tower_dims.contains(&0) {
            return Err(Error::Config(format!(
                "model.tower_dims must be non-empty positive widths, got {:?}",
                self.tower_dims
            )));
        }
        if self.kind == ModelKind::SharedBottom
            && (self.bottom_dims.is_empty() || self.bottom_dims.contains(&0))
        {
            return Err(Error::Config(format!(
                "model.bottom_dims must be non-empty positive widths, got {:?}",
                self.bottom_dims
            )));
        }
        if !self.loss_weights.is_empty() {
            if self.loss_weights.len() != self.num_tasks {
                return Err(Error::Config(format!(
                    "model.loss_weights has {} entries for {} tasks",
                    self.loss_weights.len(),
                    self.num_tasks
                )));
            }
            if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::Config("model.loss_weights must be finite and >= 0".into()));
            }
        }
        if self.kind == ModelKind::Pimm {
            self.schedule.validate()?;
        }
        Ok(())
    }

    pub fn loss_weight(&self, task: usize) -> f64 {
        self.loss_weights.get(task).copied().unwrap_or(1.0)
    }
}

/// How a forward pass treats the premise path.
pub enum ForwardMode<'a> {
    /// Labels (one `[rows x 1]` column per task) and the epoch drive the
    /// scheduled premise selection.
    Train {
        labels: &'a [Array],
        epoch: usize,
        rng: &'a mut dyn RngCore,
    },
    /// Labels withheld, premises are always predictions.
    Infer,
}

/// Intermediate nodes of one task, kept for inspection.
#[derive(Clone, Copy, Debug, Default)]
pub struct TaskHidden {
    /// Tower output `v_t`.
    pub tower: Option<NodeId>,
    /// Merged message received from the previous task.
    pub message: Option<NodeId>,
    /// Attention output `U_t`.
    pub fused: Option<NodeId>,
    /// `[rows x 2]` attention weights.
    pub attention: Option<NodeId>,
    /// Representation `H_t` sent to the next task.
    pub transfer: Option<NodeId>,
    /// ESMM conditional probability.
    pub conditional: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct TaskOutputs {
    /// Reported probability per task, each `[rows x 1]`.
    pub probabilities: Vec<NodeId>,
    pub hidden: Vec<TaskHidden>,
    /// Premise draws that picked the true label, and all premise draws.
    pub label_picks: usize,
    pub premise_draws: usize,
    /// Feature ids remapped to row 0.
    pub oov: usize,
}

impl TaskOutputs {
    /// `[rows x num_tasks]` probability matrix.
    pub fn probability_matrix(&self, graph: &Graph) -> Array {
        let rows = graph.value(self.probabilities[0]).shape()[0];
        let m = self.probabilities.len();
        let mut data = vec![0.0; rows * m];
        for (t, &p) in self.probabilities.iter().enumerate() {
            for (i, &v) in graph.value(p).data().iter().enumerate() {
                data[i * m + t] = v;
            }
        }
        Array::matrix(rows, m, data).expect("finite probabilities")
    }
}

#[derive(Clone, Debug)]
struct TaskHead {
    tower: Tower,
    head: Dense,
}

#[derive(Clone, Debug)]
enum Architecture {
    /// PIMM when `premise` is non-empty, AITM otherwise.
    Transfer {
        tasks: Vec<TaskHead>,
        /// `transfers[t]` produces `H_t` for `t < M - 1`.
        transfers: Vec<Dense>,
        /// `attention[t - 1]` belongs to task `t`.
        attention: Vec<AttentionUnit>,
        /// `premise[t - 1]` belongs to task `t`.
        premise: Vec<PremiseEmbedder>,
    },
    SharedBottom {
        bottom: Tower,
        tasks: Vec<TaskHead>,
    },
    Esmm {
        tasks: Vec<TaskHead>,
    },
}

#[derive(Clone, Debug)]
pub struct MultiTaskModel {
    config: ModelConfig,
    tables: Vec<EmbeddingTable>,
    params: ParamSet,
    arch: Architecture,
}

impl MultiTaskModel {
    pub fn new(config: ModelConfig, schema: &DatasetSchema, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if schema.num_tasks() != config.num_tasks {
            return Err(Error::Config(format!(
                "model has {} tasks, dataset schema has {}",
                config.num_tasks,
                schema.num_tasks()
            )));
        }
        let mut params = ParamSet::new();
        let tables: Vec<EmbeddingTable> = schema
            .fields()
            .iter()
            .zip(schema.vocab_sizes())
            .map(|(name, &vocab)| {
                EmbeddingTable::new(&mut params, rng, name, vocab, config.embedding_dim)
            })
            .collect();
        let input_dim = tables.len() * config.embedding_dim;
        let d = config.transfer_dim();
        let m = config.num_tasks;

        let task_heads = |params: &mut ParamSet, rng: &mut _, input: usize| -> Vec<TaskHead> {
            (0..m)
                .map(|t| TaskHead {
                    tower: Tower::new(params, rng, &format!("tower{t}"), input, &config.tower_dims),
                    head: Dense::new(params, rng, &format!("head{t}"), d, 1),
                })
                .collect()
        };

        let arch = match config.kind {
            ModelKind::Pimm | ModelKind::Aitm => {
                let tasks = task_heads(&mut params, rng, input_dim);
                let transfers = (0..m - 1)
                    .map(|t| Dense::new(&mut params, rng, &format!("transfer{t}"), d, d))
                    .collect();
                let attention = (1..m)
                    .map(|t| AttentionUnit::new(&mut params, rng, t, d))
                    .collect();
                let premise = if config.kind == ModelKind::Pimm {
                    (1..m)
                        .map(|t| PremiseEmbedder::new(&mut params, rng, t, d))
                        .collect()
                } else {
                    Vec::new()
                };
                Architecture::Transfer {
                    tasks,
                    transfers,
                    attention,
                    premise,
                }
            }
            ModelKind::SharedBottom => {
                let bottom = Tower::new(&mut params, rng, "bottom", input_dim, &config.bottom_dims);
                let tasks = task_heads(&mut params, rng, bottom.output_dim());
                Architecture::SharedBottom { bottom, tasks }
            }
            ModelKind::Esmm => Architecture::Esmm {
                tasks: task_heads(&mut params, rng, input_dim),
            },
        };
        Ok(Self {
            config,
            tables,
            params,
            arch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Runs the model on `batch`. All architectures share this entry point.
    pub fn forward(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        batch: &Batch,
        mode: ForwardMode<'_>,
    ) -> Result<TaskOutputs> {
        let embedded = embed_lookup(graph, bound, &self.tables, &batch.columns)?;
        let mut out = match &self.arch {
            Architecture::Transfer {
                tasks,
                transfers,
                attention,
                premise,
            } => self.forward_transfer(graph, bound, embedded.node, tasks, transfers, attention, premise, mode)?,
            Architecture::SharedBottom { bottom, tasks } => {
                let trunk = bottom.forward(graph, bound, embedded.node)?;
                let trunk = graph.relu(trunk)?;
                independent_heads(graph, bound, trunk, tasks)?
            }
            Architecture::Esmm { tasks } => {
                let mut out = independent_heads(graph, bound, embedded.node, tasks)?;
                for t in 0..out.probabilities.len() {
                    out.hidden[t].conditional = Some(out.probabilities[t]);
                    if t > 0 {
                        out.probabilities[t] =
                            graph.mul(out.probabilities[t - 1], out.probabilities[t])?;
                    }
                }
                out
            }
        };
        out.oov = embedded.oov;
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_transfer(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        input: NodeId,
        tasks: &[TaskHead],
        transfers: &[Dense],
        attention: &[AttentionUnit],
        premise: &[PremiseEmbedder],
        mode: ForwardMode<'_>,
    ) -> Result<TaskOutputs> {
        let (phase, labels, p, mut rng) = match mode {
            ForwardMode::Train { labels, epoch, rng } => {
                if labels.len() != tasks.len() {
                    return Err(Error::Contract(format!(
                        "training needs {} label columns, got {}",
                        tasks.len(),
                        labels.len()
                    )));
                }
                (
                    Phase::Train,
                    Some(labels),
                    self.config.schedule.sampling_probability(epoch),
                    Some(rng),
                )
            }
            ForwardMode::Infer => (Phase::Infer, None, 0.0, None),
        };

        let mut probabilities = Vec::with_capacity(tasks.len());
        let mut hidden = vec![TaskHidden::default(); tasks.len()];
        let mut label_picks = 0;
        let mut premise_draws = 0;
        let mut previous_transfer: Option<NodeId> = None;

        for (t, task) in tasks.iter().enumerate() {
            let tower = task.tower.forward(graph, bound, input)?;
            hidden[t].tower = Some(tower);
            let representation = match previous_transfer {
                None => tower,
                Some(implicit) => {
                    let message = if premise.is_empty() {
                        implicit
                    } else {
                        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
                        let rng: &mut dyn RngCore = match rng.as_deref_mut() {
                            Some(r) => r,
                            None => &mut no_rng,
                        };
                        let chosen = select_premise(
                            graph,
                            labels.map(|l| &l[t - 1]),
                            probabilities[t - 1],
                            p,
                            rng,
                            phase,
                        )?;
                        if phase == Phase::Train {
                            label_picks += chosen.label_picks;
                            premise_draws += graph.value(chosen.node).shape()[0];
                        }
                        let explicit = premise[t - 1].embed(graph, bound, chosen.node)?;
                        merge_messages(graph, explicit, implicit)?.merged
                    };
                    let fused = attention[t - 1].fuse(graph, bound, tower, message)?;
                    hidden[t].message = Some(message);
                    hidden[t].fused = Some(fused.output);
                    hidden[t].attention = Some(fused.weights);
                    fused.output
                }
            };
            let logit = task.head.forward(graph, bound, representation)?;
            probabilities.push(graph.sigmoid(logit)?);
            if let Some(fc) = transfers.get(t) {
                let h = fc.forward(graph, bound, representation)?;
                hidden[t].transfer = Some(h);
                previous_transfer = Some(h);
            }
        }
        Ok(TaskOutputs {
            probabilities,
            hidden,
            label_picks,
            premise_draws,
            oov: 0,
        })
    }
}

fn independent_heads(
    graph: &mut Graph,
    bound: &Bound,
    input: NodeId,
    tasks: &[TaskHead],
) -> Result<TaskOutputs> {
    let mut probabilities = Vec::with_capacity(tasks.len());
    let mut hidden = Vec::with_capacity(tasks.len());
    for task in tasks {
        let tower = task.tower.forward(graph, bound, input)?;
        let logit = task.head.forward(graph, bound, tower)?;
        probabilities.push(graph.sigmoid(logit)?);
        hidden.push(TaskHidden {
            tower: Some(tower),
            ..TaskHidden::default()
        });
    }
    Ok(TaskOutputs {
        probabilities,
        hidden,
        label_picks: 0,
        premise_draws: 0,
        oov: 0,
    })
}

/// Weighted sum over tasks of the mean binary cross-entropy of each reported
/// probability. Rows whose labels break the cascade order are rejected.
pub fn multitask_loss(
    graph: &mut Graph,
    outputs: &TaskOutputs,
    labels: &[Array],
    weights: &[f64],
) -> Result<NodeId> {
    if labels.len() != outputs.probabilities.len() {
        return Err(Error::shape(
            "multitask_loss",
            format!(
                "{} label columns for {} tasks",
                labels.len(),
                outputs.probabilities.len()
            ),
        ));
    }
    let rows = labels[0].len();
    let mut row = vec![0u8; labels.len()];
    for i in 0..rows {
        for (t, col) in labels.iter().enumerate() {
            row[t] = col.data()[i] as u8;
        }
        if let Some(t) = cascade_violation(&row) {
            return Err(Error::Validation(format!(
                "batch row {}: tasks {t} -> {} labelled (0, 1)",
                i + 1,
                t + 1
            )));
        }
    }
    let mut total: Option<NodeId> = None;
    for (t, (&p, y)) in outputs.probabilities.iter().zip(labels).enumerate() {
        let mut loss = graph.bce(p, y.clone())?;
        let w = weights.get(t).copied().unwrap_or(1.0);
        if w != 1.0 {
            loss = graph.scale(loss, w)?;
        }
        total = Some(match total {
            None => loss,
            Some(acc) => graph.add(acc, loss)?,
        });
    }
    total.ok_or_else(|| Error::Contract("no tasks to score".into()))
}
