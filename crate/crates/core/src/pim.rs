//! Prior information merging between adjacent tasks.
//!
//! During training each sample feeds either the true label of the previous
//! task or that task's predicted probability into the next task, picking the
//! label with a probability that decays linearly per epoch down to a floor.
//! The chosen premise is embedded, then added to the implicit representation
//! transferred from the previous task's tower.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{glorot_uniform, Bound, ParamId, ParamSet};
use crate::numerics::{Array, Graph, NodeId};

/// Curriculum for the label-selection probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    /// Probability at epoch 0.
    pub alpha: f64,
    /// Decrease per epoch.
    pub speed: f64,
    /// Floor.
    pub beta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            speed: 0.25,
            beta: 0.25,
        }
    }
}

impl ScheduleConfig {
    pub fn new(alpha: f64, speed: f64, beta: f64) -> Result<Self> {
        let cfg = Self { alpha, speed, beta };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The three-task setting: start at 2/3, drop 1/3 per epoch, floor 0.
    pub fn three_stage() -> Self {
        Self {
            alpha: 2.0 / 3.0,
            speed: 1.0 / 3.0,
            beta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Self { alpha, speed, beta } = *self;
        if !(alpha.is_finite() && speed.is_finite() && beta.is_finite()) {
            return Err(Error::Config("schedule values must be finite".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("pim.alpha = {alpha} is outside [0, 1]")));
        }
        if speed < 0.0 {
            return Err(Error::Config(format!("pim.speed = {speed} is negative")));
        }
        if !(0.0..=alpha).contains(&beta) {
            return Err(Error::Config(format!(
                "pim.beta = {beta} is outside [0, pim.alpha = {alpha}]"
            )));
        }
        Ok(())
    }

    /// `max(alpha - epoch * speed, beta)`.
    pub fn sampling_probability(&self, epoch: usize) -> f64 {
        (self.alpha - epoch as f64 * self.speed).max(self.beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Output of [`select_premise`].
#[derive(Clone, Copy, Debug)]
pub struct Premise {
    /// `[batch x 1]`, gradient-truncated.
    pub node: NodeId,
    /// Number of samples that took the true label.
    pub label_picks: usize,
}

/// Chooses the explicit premise for each sample.
///
/// In training, sample `i` takes `labels[i]` with probability `p` and the
/// prediction otherwise, using an independent draw per sample. In inference
/// the prediction is always used and neither `labels` nor `rng` is touched.
/// The result passes through a stop-gradient, so no derivative reaches the
/// previous task along this path.
pub fn select_premise<R: Rng + ?Sized>(
    graph: &mut Graph,
    labels: Option<&Array>,
    prediction: NodeId,
    p: f64,
    rng: &mut R,
    phase: Phase,
) -> Result<Premise> {
    let (rows, cols) = graph.value(prediction).dims2("select_premise")?;
    if cols != 1 {
        return Err(Error::shape(
            "select_premise",
            format!("prediction must be a column, got {:?}", graph.value(prediction).shape()),
        ));
    }
    let truncated = graph.stop_gradient(prediction)?;
    if phase == Phase::Infer {
        return Ok(Premise {
            node: truncated,
            label_picks: 0,
        });
    }

    let labels = labels.ok_or_else(|| {
        Error::Contract("premise selection in training requires labels".into())
    })?;
    if labels.shape() != [rows, 1] {
        return Err(Error::shape(
            "select_premise",
            format!("labels {:?} vs prediction [{rows}, 1]", labels.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!("selection probability {p} outside [0, 1]")));
    }

    let mut mask = Vec::with_capacity(rows);
    let mut label_picks = 0;
    for _ in 0..rows {
        let take_label = rng.gen::<f64>() < p;
        label_picks += take_label as usize;
        mask.push(if take_label { 1.0 } else { 0.0 });
    }
    let keep = Array::column(mask.iter().map(|m| 1.0 - m).collect())?;
    let mask = Array::column(mask)?;

    let mask = graph.leaf(mask);
    let keep = graph.leaf(keep);
    let truth = graph.leaf(labels.clone());
    let from_labels = graph.mul(mask, truth)?;
    let from_prediction = graph.mul(keep, truncated)?;
    let mixed = graph.add(from_labels, from_prediction)?;
    let node = graph.stop_gradient(mixed)?;
    Ok(Premise { node, label_picks })
}

/// Trainable `[1 x d]` map from the scalar premise to a `d`-wide vector.
#[derive(Clone, Debug)]
pub struct PremiseEmbedder {
    pub weight: ParamId,
    pub dim: usize,
    pub owner_task: usize,
}

impl PremiseEmbedder {
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, owner_task: usize, dim: usize) -> Self {
        let weight = params.add(format!("premise{owner_task}.weight"), glorot_uniform(rng, 1, dim));
        Self {
            weight,
            dim,
            owner_task,
        }
    }

    /// `sigmoid(premise * W)`, elementwise.
    pub fn embed(&self, graph: &mut Graph, bound: &Bound, premise: NodeId) -> Result<NodeId> {
        let scaled = graph.matmul(premise, bound.node(self.weight))?;
        graph.sigmoid(scaled)
    }
}

/// Explicit and implicit information handed from task `t-1` to task `t`.
#[derive(Clone, Copy, Debug)]
pub struct TaskMessage {
    pub implicit: NodeId,
    pub explicit: NodeId,
    pub merged: NodeId,
}

/// Elementwise sum of the explicit premise embedding and the implicit
/// representation; both must have the same shape.
pub fn merge_messages(graph: &mut Graph, explicit: NodeId, implicit: NodeId) -> Result<TaskMessage> {
    let (a, b) = (graph.value(explicit).shape(), graph.value(implicit).shape());
    if a != b {
        return Err(Error::shape(
            "merge_messages",
            format!("explicit {a:?} vs implicit {b:?}"),
        ));
    }
    let merged = graph.add(explicit, implicit)?;
    Ok(TaskMessage {
        implicit,
        explicit,
        merged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_schedule_sequence() {
        let s = ScheduleConfig::default();
        assert_eq!(s.sampling_probability(0), 0.5);
        assert_eq!(s.sampling_probability(1), 0.25);
        assert_eq!(s.sampling_probability(5), 0.25);
    }

    #[test]
    fn three_stage_schedule_reaches_zero() {
        let s = ScheduleConfig::three_stage();
        assert_eq!(s.sampling_probability(0), 2.0 / 3.0);
        assert_eq!(s.sampling_probability(1), 1.0 / 3.0);
        assert_eq!(s.sampling_probability(2), 0.0);
        assert_eq!(s.sampling_probability(9), 0.0);
    }

    #[test]
    fn floor_equal_to_start_is_constant() {
        let s = ScheduleConfig::new(0.4, 0.3, 0.4).unwrap();
        assert!((0..20).all(|e| s.sampling_probability(e) == 0.4));
    }

    #[test]
    fn invalid_schedules() {
        assert!(ScheduleConfig::new(1.2, 0.1, 0.0).is_err());
        assert!(ScheduleConfig::new(0.5, -0.1, 0.0).is_err());
        assert!(ScheduleConfig::new(0.5, 0.1, 0.6).is_err());
        assert!(ScheduleConfig::new(0.5, f64::NAN, 0.0).is_err());
    }

    fn setup(n: usize) -> (Graph, NodeId, Array) {
        let mut g = Graph::new();
        let preds: Vec<f64> = (0..n).map(|i| 0.1 + 0.8 * (i as f64 / n as f64)).collect();
        let labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let pred = g.leaf(Array::column(preds).unwrap());
        (g, pred, Array::column(labels).unwrap())
    }

    #[test]
    fn degenerate_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut g, pred, labels) = setup(50);
        let all = select_premise(&mut g, Some(&labels), pred, 1.0, &mut rng, Phase::Train).unwrap();
        assert_eq!(g.value(all.node), &labels);
        assert_eq!(all.label_picks, 50);
        let none = select_premise(&mut g, Some(&labels), pred, 0.0, &mut rng, Phase::Train).unwrap();
        assert_eq!(g.value(none.node), g.value(pred));
        assert_eq!(none.label_picks, 0);
    }

    #[test]
    fn training_without_labels_is_a_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut g, pred, _) = setup(4);
        assert!(matches!(
            select_premise(&mut g, None, pred, 0.5, &mut rng, Phase::Train),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn inference_ignores_rng_and_labels() {
        let (mut g, pred, labels) = setup(8);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = select_premise(&mut g, Some(&labels), pred, 1.0, &mut r1, Phase::Infer).unwrap();
        let b = select_premise(&mut g, None, pred, 0.3, &mut r2, Phase::Infer).unwrap();
        assert_eq!(g.value(a.node), g.value(b.node));
        assert_eq!(g.value(a.node), g.value(pred));
        // rng untouched
        assert_eq!(r1.gen::<u64>(), ChaCha8Rng::seed_from_u64(1).gen::<u64>());
    }

    #[test]
    fn selection_carries_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut g, pred, labels) = setup(6);
        let w = g.leaf(Array::full(&[6, 1], 2.0));
        let premise = select_premise(&mut g, Some(&labels), pred, 0.5, &mut rng, Phase::Train).unwrap();
        let prod = g.mul(premise.node, w).unwrap();
        let loss = g.mean(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(pred).is_none());
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn premise_embedding_values() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let emb = PremiseEmbedder::new(&mut params, &mut rng, 1, 2);

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let zero = g.leaf(Array::column(vec![0.0]).unwrap());
        let z = emb.embed(&mut g, &bound, zero).unwrap();
        assert_eq!(g.value(z).data(), &[0.5, 0.5]);

        params.set(emb.weight, Array::zeros(&[1, 2])).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let one = g.leaf(Array::column(vec![1.0]).unwrap());
        let z = emb.embed(&mut g, &bound, one).unwrap();
        assert_eq!(g.value(z).data(), &[0.5, 0.5]);

        params.set(emb.weight, Array::row(vec![2.0, -2.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let one = g.leaf(Array::column(vec![1.0]).unwrap());
        let z = emb.embed(&mut g, &bound, one).unwrap();
        let expected = [1.0 / (1.0 + (-2.0f64).exp()), 1.0 / (1.0 + 2.0f64.exp())];
        for (got, want) in g.value(z).data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((expected[0] - 0.8808).abs() < 5e-5 && (expected[1] - 0.1192).abs() < 5e-5);
    }

    #[test]
    fn merge_is_elementwise_sum() {
        let mut g = Graph::new();
        let z = g.leaf(Array::row(vec![1.0, 2.0]).unwrap());
        let h = g.leaf(Array::row(vec![3.0, -1.0]).unwrap());
        let zero = g.leaf(Array::zeros(&[1, 2]));
        let m = merge_messages(&mut g, z, h).unwrap();
        assert_eq!(g.value(m.merged).data(), &[4.0, 1.0]);
        let m = merge_messages(&mut g, zero, h).unwrap();
        assert_eq!(g.value(m.merged), g.value(h));
        let m = merge_messages(&mut g, z, zero).unwrap();
        assert_eq!(g.value(m.merged), g.value(z));
        let wide = g.leaf(Array::zeros(&[1, 3]));
        assert!(merge_messages(&mut g, z, wide).is_err());
    }
}
