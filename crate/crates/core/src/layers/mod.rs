//! Embedding tables, MLP towers and the two-candidate attention fusion.

pub mod checkpoint;
mod params;

pub use params::{glorot_uniform, uniform, Bound, ParamId, ParamSet};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId};

/// Half-width of the uniform range used to initialize embedding rows.
pub const EMBEDDING_INIT_RANGE: f64 = 0.01;

/// Lookup table for one categorical feature field.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub field: String,
    pub vocab_size: usize,
    pub dim: usize,
    pub weights: ParamId,
}

impl EmbeddingTable {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        field: &str,
        vocab_size: usize,
        dim: usize,
    ) -> Self {
        let weights = params.add(
            format!("embedding.{field}"),
            uniform(rng, &[vocab_size, dim], EMBEDDING_INIT_RANGE),
        );
        Self {
            field: field.to_string(),
            vocab_size,
            dim,
            weights,
        }
    }

    /// Maps raw ids to row indices. Ids outside the vocabulary fall back to
    /// the reserved row 0; the second value counts them.
    pub fn indices(&self, ids: &[u32]) -> (Vec<usize>, usize) {
        let mut oov = 0;
        let rows = ids
            .iter()
            .map(|&id| {
                let id = id as usize;
                if id < self.vocab_size {
                    id
                } else {
                    oov += 1;
                    0
                }
            })
            .collect();
        (rows, oov)
    }
}

/// Concatenated field embeddings for a batch.
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    /// `[batch x (fields * dim)]`
    pub node: NodeId,
    /// Ids that fell outside their table and were mapped to row 0.
    pub oov: usize,
}

/// Looks up one id per field for every row and concatenates the rows in
/// table order. `columns[f]` holds the ids of field `f` for the whole batch.
pub fn embed_lookup(
    graph: &mut Graph,
    bound: &Bound,
    tables: &[EmbeddingTable],
    columns: &[Vec<u32>],
) -> Result<Embedded> {
    if tables.len() != columns.len() {
        return Err(Error::shape(
            "embed_lookup",
            format!("{} tables but {} feature columns", tables.len(), columns.len()),
        ));
    }
    let mut oov = 0;
    let mut parts = Vec::with_capacity(tables.len());
    for (table, ids) in tables.iter().zip(columns) {
        let (rows, missing) = table.indices(ids);
        oov += missing;
        parts.push(graph.gather(bound.node(table.weights), rows)?);
    }
    let node = if parts.len() == 1 {
        parts[0]
    } else {
        graph.concat(&parts)?
    };
    Ok(Embedded { node, oov })
}

/// Fully connected layer `x W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Dense {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        input_dim: usize,
        output_dim: usize,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            glorot_uniform(rng, input_dim, output_dim),
        );
        let bias = params.add(
            format!("{name}.bias"),
            crate::numerics::Array::zeros(&[1, output_dim]),
        );
        Self {
            weight,
            bias,
            input_dim,
            output_dim,
        }
    }

    pub fn forward(&self, graph: &mut Graph, bound: &Bound, input: NodeId) -> Result<NodeId> {
        let width = graph.value(input).dims2("dense")?.1;
        if width != self.input_dim {
            return Err(Error::shape(
                "dense",
                format!("input width {width}, layer expects {}", self.input_dim),
            ));
        }
        let xw = graph.matmul(input, bound.node(self.weight))?;
        graph.add(xw, bound.node(self.bias))
    }
}

/// Stack of dense layers: rectifier after every hidden layer, linear output.
#[derive(Clone, Debug)]
pub struct Tower {
    pub layers: Vec<Dense>,
}

impl Tower {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        input_dim: usize,
        layer_dims: &[usize],
    ) -> Self {
        assert!(!layer_dims.is_empty(), "a tower needs at least one layer");
        let mut layers = Vec::with_capacity(layer_dims.len());
        let mut fan_in = input_dim;
        for (i, &width) in layer_dims.iter().enumerate() {
            layers.push(Dense::new(params, rng, &format!("{name}.{i}"), fan_in, width));
            fan_in = width;
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty tower").output_dim
    }

    pub fn forward(&self, graph: &mut Graph, bound: &Bound, input: NodeId) -> Result<NodeId> {
        let mut x = input;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(graph, bound, x)?;
            if i < last {
                x = graph.relu(x)?;
            }
        }
        Ok(x)
    }
}

/// Per-task self-attention over the two candidates `{v_t, merged message}`
/// with a residual connection back to `v_t`.
#[derive(Clone, Debug)]
pub struct AttentionUnit {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub dim: usize,
    pub owner_task: usize,
}

/// Output of [`AttentionUnit::fuse`].
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    /// `[batch x d]`
    pub output: NodeId,
    /// `[batch x 2]`: weight of the tower output, then of the message.
    pub weights: NodeId,
}

impl AttentionUnit {
    pub fn new(params: &mut ParamSet, rng: &mut impl Rng, owner_task: usize, dim: usize) -> Self {
        let mut proj =
            |role: &str| params.add(format!("attention{owner_task}.{role}"), glorot_uniform(rng, dim, dim));
        let query = proj("query");
        let key = proj("key");
        let value = proj("value");
        Self {
            query,
            key,
            value,
            dim,
            owner_task,
        }
    }

    /// `U = v + sum_a w_a V(a)` with `w = softmax_a(Q(a).K(a) / sqrt(d))`
    /// over `a in {tower_out, message}`.
    pub fn fuse(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        tower_out: NodeId,
        message: NodeId,
    ) -> Result<Fused> {
        for id in [tower_out, message] {
            let width = graph.value(id).dims2("attention_fuse")?.1;
            if width != self.dim {
                return Err(Error::shape(
                    "attention_fuse",
                    format!("input width {width}, unit expects {}", self.dim),
                ));
            }
        }
        let inv_sqrt_d = 1.0 / (self.dim as f64).sqrt();
        let mut logits = [tower_out; 2];
        let mut values = [tower_out; 2];
        for (slot, candidate) in [tower_out, message].into_iter().enumerate() {
            let q = graph.matmul(candidate, bound.node(self.query))?;
            let k = graph.matmul(candidate, bound.node(self.key))?;
            let qk = graph.mul(q, k)?;
            let dot = graph.sum_rows(qk)?;
            logits[slot] = graph.scale(dot, inv_sqrt_d)?;
            values[slot] = graph.matmul(candidate, bound.node(self.value))?;
        }
        let logits = graph.concat(&logits)?;
        let weights = graph.softmax(logits)?;
        let mut output = tower_out;
        for (slot, value) in values.into_iter().enumerate() {
            let w = graph.slice_cols(weights, slot, slot + 1)?;
            let weighted = graph.mul(w, value)?;
            output = graph.add(output, weighted)?;
        }
        Ok(Fused { output, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn lookup_concatenates_in_field_order() {
        let mut params = ParamSet::new();
        let mut r = rng();
        let a = EmbeddingTable::new(&mut params, &mut r, "a", 2, 3);
        let b = EmbeddingTable::new(&mut params, &mut r, "b", 2, 3);
        params
            .set(a.weights, Array::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap())
            .unwrap();
        params
            .set(b.weights, Array::matrix(2, 3, vec![7., 8., 9., 10., 11., 12.]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let out = embed_lookup(&mut g, &bound, &[a, b], &[vec![0], vec![1]]).unwrap();
        assert_eq!(g.value(out.node).data(), &[1., 2., 3., 10., 11., 12.]);
        assert_eq!(out.oov, 0);
    }

    #[test]
    fn lookup_on_zero_table_is_zero() {
        let mut params = ParamSet::new();
        let t = EmbeddingTable::new(&mut params, &mut rng(), "f", 4, 5);
        params.zero_all();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let out = embed_lookup(&mut g, &bound, &[t], &[vec![0, 3, 2]]).unwrap();
        assert!(g.value(out.node).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_vocabulary_maps_to_row_zero() {
        let mut params = ParamSet::new();
        let t = EmbeddingTable::new(&mut params, &mut rng(), "f", 3, 2);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let out = embed_lookup(&mut g, &bound, &[t.clone()], &[vec![3, 0]]).unwrap();
        assert_eq!(out.oov, 1);
        let row0 = &params.get(t.weights).data()[..2];
        assert_eq!(&g.value(out.node).data()[..2], row0);
        assert_eq!(&g.value(out.node).data()[2..], row0);
    }

    #[test]
    fn zero_tower_outputs_zero() {
        let mut params = ParamSet::new();
        let tower = Tower::new(&mut params, &mut rng(), "t", 4, &[8, 3]);
        params.zero_all();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.leaf(Array::full(&[2, 4], 1.5));
        let out = tower.forward(&mut g, &bound, x).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 3]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut params = ParamSet::new();
        let tower = Tower::new(&mut params, &mut rng(), "t", 3, &[3]);
        params.set(tower.layers[0].weight, Array::identity(3)).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let input = Array::matrix(2, 3, vec![1., -2., 3., -4., 5., -6.]).unwrap();
        let x = g.leaf(input.clone());
        let out = tower.forward(&mut g, &bound, x).unwrap();
        assert_eq!(g.value(out), &input);
    }

    #[test]
    fn tower_width_mismatch_is_shape_error() {
        let mut params = ParamSet::new();
        let tower = Tower::new(&mut params, &mut rng(), "t", 3, &[2]);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.leaf(Array::zeros(&[1, 4]));
        assert!(matches!(
            tower.forward(&mut g, &bound, x),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn identical_candidates_get_equal_weight() {
        let mut params = ParamSet::new();
        let unit = AttentionUnit::new(&mut params, &mut rng(), 1, 3);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let v = g.leaf(Array::matrix(1, 3, vec![0.3, -1.2, 2.0]).unwrap());
        let fused = unit.fuse(&mut g, &bound, v, v).unwrap();
        assert_eq!(g.value(fused.weights).data(), &[0.5, 0.5]);

        let vv = g.matmul(v, bound.node(unit.value)).unwrap();
        let expected: Vec<f64> = g
            .value(v)
            .data()
            .iter()
            .zip(g.value(vv).data())
            .map(|(a, b)| a + b)
            .collect();
        for (got, want) in g.value(fused.output).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_value_projection_keeps_residual_exactly() {
        let mut params = ParamSet::new();
        let unit = AttentionUnit::new(&mut params, &mut rng(), 1, 2);
        params.set(unit.value, Array::zeros(&[2, 2])).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let v = g.leaf(Array::matrix(2, 2, vec![0.1, 0.2, -3.0, 4.5]).unwrap());
        let z = g.leaf(Array::matrix(2, 2, vec![9.0, -1.0, 0.5, 0.25]).unwrap());
        let fused = unit.fuse(&mut g, &bound, v, z).unwrap();
        assert_eq!(g.value(fused.output), g.value(v));
    }

    #[test]
    fn attention_width_mismatch() {
        let mut params = ParamSet::new();
        let unit = AttentionUnit::new(&mut params, &mut rng(), 1, 2);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let v = g.leaf(Array::zeros(&[1, 2]));
        let z = g.leaf(Array::zeros(&[1, 3]));
        assert!(unit.fuse(&mut g, &bound, v, z).is_err());
    }

    #[test]
    fn glorot_range() {
        let w = glorot_uniform(&mut rng(), 10, 6);
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
    }
}
