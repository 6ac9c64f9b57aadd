//! Central finite-difference gradient oracle.

#![allow(dead_code)]

use pimm::numerics::{Array, Graph, NodeId};
use pimm::Result;

/// Step used for every central difference.
pub const STEP: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element of every input.
pub fn numeric_gradients(inputs: &[Array], f: impl Fn(&[Array]) -> f64) -> Vec<Array> {
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for a in 0..inputs.len() {
        let mut g = vec![0.0; inputs[a].len()];
        for (j, slot) in g.iter_mut().enumerate() {
            let x = inputs[a].data()[j];
            work[a] = with_element(&inputs[a], j, x + STEP);
            let up = f(&work);
            work[a] = with_element(&inputs[a], j, x - STEP);
            let down = f(&work);
            *slot = (up - down) / (2.0 * STEP);
        }
        work[a] = inputs[a].clone();
        grads.push(Array::new(inputs[a].shape().to_vec(), g).unwrap());
    }
    grads
}

fn with_element(a: &Array, j: usize, value: f64) -> Array {
    let mut data = a.data().to_vec();
    data[j] = value;
    Array::new(a.shape().to_vec(), data).unwrap()
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(analytic: &Array, numeric: &Array) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.data().iter().zip(numeric.data()).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.data().iter().copied()).max(norm(&mut numeric.data().iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Largest relative error between backward-pass and finite-difference
/// gradients of the scalar produced by `build` over leaves holding `inputs`.
pub fn check_graph(inputs: &[Array], build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>) -> f64 {
    let eval = |values: &[Array]| -> (Graph, Vec<NodeId>, NodeId) {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = values.iter().map(|v| g.leaf(v.clone())).collect();
        let out = build(&mut g, &leaves).unwrap();
        (g, leaves, out)
    };
    let (graph, leaves, loss) = eval(inputs);
    let grads = graph.backward(loss).unwrap();
    let numeric = numeric_gradients(inputs, |values| {
        let (g, _, out) = eval(values);
        g.value(out).data()[0]
    });
    leaves
        .iter()
        .zip(&numeric)
        .map(|(&id, n)| relative_error(&grads.get_or_zeros(id, &graph), n))
        .fold(0.0, f64::max)
}

/// Random array with entries in `[-1, -0.1] U [0.1, 1]`, away from relu kinks.
pub fn random(rng: &mut impl rand::Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen() { m } else { -m }
        })
        .collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Reduces any node to a scalar through a fixed random projection, so every
/// output element influences the checked loss.
pub fn project(g: &mut Graph, node: NodeId, seed: u64) -> Result<NodeId> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(node).shape().to_vec();
    let weights = g.leaf(random(&mut rng, &shape));
    let prod = g.mul(node, weights)?;
    let rows = g.sum_rows(prod)?;
    g.mean(rows)
}
