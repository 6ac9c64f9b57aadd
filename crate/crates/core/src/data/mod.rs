//! Cascade datasets: categorical features plus one binary label per task,
//! where a task can only be positive if the task before it is.

mod csv_io;
mod synthetic;

pub use csv_io::{encode_csv, load_csv_dataset, write_csv_dataset, Loaded};
pub use synthetic::{generate_cascade, SyntheticConfig};

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Array;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSchema {
    fields: Vec<String>,
    vocab_sizes: Vec<usize>,
    tasks: Vec<String>,
}

impl DatasetSchema {
    pub fn new(fields: Vec<String>, vocab_sizes: Vec<usize>, tasks: Vec<String>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::Config("schema needs at least one feature field".into()));
        }
        if fields.len() != vocab_sizes.len() {
            return Err(Error::Config(format!(
                "{} feature fields but {} vocabulary sizes",
                fields.len(),
                vocab_sizes.len()
            )));
        }
        if let Some((name, size)) = fields.iter().zip(&vocab_sizes).find(|(_, &v)| v < 2) {
            return Err(Error::Config(format!(
                "vocabulary of field {name} has size {size}, needs at least 2"
            )));
        }
        if tasks.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 dependent tasks, got {}",
                tasks.len()
            )));
        }
        for names in [&fields, &tasks] {
            for (i, n) in names.iter().enumerate() {
                if n.is_empty() || n.contains(',') || names[..i].contains(n) {
                    return Err(Error::Config(format!("invalid or duplicate name {n:?}")));
                }
            }
        }
        Ok(Self {
            fields,
            vocab_sizes,
            tasks,
        })
    }

    pub fn fields(&self) -> &[String] {
        &self.fields
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        &self.vocab_sizes
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// CSV header: `f_<field>...,y_<task>...`.
    pub fn header(&self) -> Vec<String> {
        self.fields
            .iter()
            .map(|f| format!("f_{f}"))
            .chain(self.tasks.iter().map(|t| format!("y_{t}")))
            .collect()
    }
}

/// One `(0, 1)` pair of adjacent labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// 1-based data row.
    pub row: usize,
    /// Index of the upstream task of the offending pair.
    pub task: usize,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "row {}: tasks {} -> {} labelled (0, 1)",
            self.row,
            self.task,
            self.task + 1
        )
    }
}

/// First adjacent pair with `y_t = 0, y_{t+1} = 1`, if any.
pub fn cascade_violation(labels: &[u8]) -> Option<usize> {
    labels.windows(2).position(|w| w[0] == 0 && w[1] == 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeDataset {
    schema: DatasetSchema,
    /// Row-major `[len x num_fields]`.
    features: Vec<u32>,
    /// Row-major `[len x num_tasks]`, values 0/1.
    labels: Vec<u8>,
}

impl CascadeDataset {
    /// Validates shapes, label values and the cascade constraint.
    pub fn new(schema: DatasetSchema, features: Vec<u32>, labels: Vec<u8>) -> Result<Self> {
        let (f, m) = (schema.num_fields(), schema.num_tasks());
        if features.len() % f != 0 || labels.len() % m != 0 || features.len() / f != labels.len() / m {
            return Err(Error::Validation(format!(
                "{} feature values and {} labels do not describe whole rows of {f} fields and {m} tasks",
                features.len(),
                labels.len()
            )));
        }
        if let Some(pos) = labels.iter().position(|&y| y > 1) {
            return Err(Error::Validation(format!(
                "row {}: label {} is not 0/1",
                pos / m + 1,
                labels[pos]
            )));
        }
        let violations: Vec<Violation> = labels
            .chunks(m)
            .enumerate()
            .filter_map(|(i, row)| cascade_violation(row).map(|task| Violation { row: i + 1, task }))
            .collect();
        if !violations.is_empty() {
            return Err(Error::Validation(describe_violations(&violations)));
        }
        Ok(Self {
            schema,
            features,
            labels,
        })
    }

    pub fn empty(schema: DatasetSchema) -> Self {
        Self {
            schema,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.labels.len() / self.schema.num_tasks()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self, row: usize) -> &[u32] {
        let f = self.schema.num_fields();
        &self.features[row * f..(row + 1) * f]
    }

    pub fn labels(&self, row: usize) -> &[u8] {
        let m = self.schema.num_tasks();
        &self.labels[row * m..(row + 1) * m]
    }

    /// All labels of task `t`, in row order.
    pub fn task_labels(&self, task: usize) -> Vec<u8> {
        let m = self.schema.num_tasks();
        self.labels.iter().skip(task).step_by(m).copied().collect()
    }

    /// Empirical `P(y_t = 1)` per task; zeros for an empty dataset.
    pub fn positive_rates(&self) -> Vec<f64> {
        let m = self.schema.num_tasks();
        let mut counts = vec![0usize; m];
        for row in self.labels.chunks(m) {
            for (c, &y) in counts.iter_mut().zip(row) {
                *c += y as usize;
            }
        }
        let n = self.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }

    /// Rows `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.schema.num_fields());
        let mut labels = Vec::with_capacity(indices.len() * self.schema.num_tasks());
        for &i in indices {
            features.extend_from_slice(self.features(i));
            labels.extend_from_slice(self.labels(i));
        }
        Self {
            schema: self.schema.clone(),
            features,
            labels,
        }
    }

    /// Splits into the first `at` rows and the rest.
    pub fn split_at(&self, at: usize) -> (Self, Self) {
        let at = at.min(self.len());
        let head: Vec<usize> = (0..at).collect();
        let tail: Vec<usize> = (at..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Seeded shuffle, then the last `fraction` of rows becomes the second
    /// part.
    pub fn split_shuffled(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - held.min(self.len());
        (self.subset(&order[..cut]), self.subset(&order[cut..]))
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let (f, m) = (self.schema.num_fields(), self.schema.num_tasks());
        let mut columns = vec![Vec::with_capacity(indices.len()); f];
        let mut labels = vec![Vec::with_capacity(indices.len()); m];
        for &i in indices {
            for (col, &id) in columns.iter_mut().zip(self.features(i)) {
                col.push(id);
            }
            for (col, &y) in labels.iter_mut().zip(self.labels(i)) {
                col.push(y as f64);
            }
        }
        Batch {
            columns,
            labels: labels
                .into_iter()
                .map(|l| Array::column(l).expect("non-empty batch"))
                .collect(),
        }
    }
}

fn describe_violations(violations: &[Violation]) -> String {
    const SHOWN: usize = 10;
    let mut msg = format!(
        "{} row(s) violate the cascade constraint: ",
        violations.len()
    );
    let listed: Vec<String> = violations.iter().take(SHOWN).map(|v| v.to_string()).collect();
    msg.push_str(&listed.join("; "));
    if violations.len() > SHOWN {
        msg.push_str("; ...");
    }
    msg
}

/// Model input for a set of rows.
#[derive(Clone, Debug)]
pub struct Batch {
    /// One id column per feature field.
    pub columns: Vec<Vec<u32>>,
    /// One `[rows x 1]` label column per task.
    pub labels: Vec<Array>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    /// `[rows x num_tasks]` label matrix.
    pub fn label_matrix(&self) -> Array {
        let rows = self.rows();
        let m = self.labels.len();
        let mut data = vec![0.0; rows * m];
        for (t, col) in self.labels.iter().enumerate() {
            for (i, &y) in col.data().iter().enumerate() {
                data[i * m + t] = y;
            }
        }
        Array::matrix(rows, m, data).expect("non-empty batch")
    }
}

/// Row order for one pass over `len` rows: a seeded permutation cut into
/// batches of `batch_size`, the last one possibly shorter.
pub fn batch_iter(len: usize, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Batches for `epoch`, reshuffled with `seed + epoch`.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    batch_iter(len, batch_size, seed.wrapping_add(epoch as u64))
}
