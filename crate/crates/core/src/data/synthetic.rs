use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{CascadeDataset, DatasetSchema};
use crate::error::{Error, Result};

/// Parameters of the synthetic cascade generator.
///
/// Every task has a hidden logit built from a fixed random linear map over
/// the one-hot features plus, when `interaction` is non-zero, a pairwise
/// term `sum_{f<g} <e_f, e_g>` over random latent vectors of the row's ids
/// (rescaled to standard deviation `interaction`). Downstream logits also add `dependence` times the
/// previous task's hidden logit, so the upstream task carries information
/// about the downstream one. Task 0 is drawn for every row; task `t` is
/// drawn only for rows positive on task `t - 1`, with an intercept chosen so
/// that its conditional positive rate is `rates[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub vocab_sizes: Vec<usize>,
    /// Standard deviation of each task's own feature logit.
    pub weight_scale: f64,
    pub dependence: f64,
    /// Standard deviation of each task's pairwise interaction logit.
    pub interaction: f64,
    /// Conditional positive rate per task, in `[0, 1]`.
    pub rates: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_samples: 60_000,
            vocab_sizes: vec![100; 8],
            weight_scale: 1.0,
            dependence: 1.0,
            interaction: 0.0,
            rates: vec![0.3, 0.2],
            seed: 2023,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_sizes.is_empty() || self.vocab_sizes.iter().any(|&v| v < 2 || v > u32::MAX as usize) {
            return Err(Error::Config(format!(
                "data.vocab_sizes must be non-empty with every size >= 2, got {:?}",
                self.vocab_sizes
            )));
        }
        if self.rates.len() < 2 {
            return Err(Error::Config(format!(
                "data.rates needs one rate per task and at least 2 tasks, got {:?}",
                self.rates
            )));
        }
        if let Some(r) = self.rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("data.rates entry {r} is outside [0, 1]")));
        }
        if !(self.weight_scale.is_finite() && self.weight_scale >= 0.0) {
            return Err(Error::Config(format!(
                "data.weight_scale = {} must be finite and >= 0",
                self.weight_scale
            )));
        }
        if !(self.interaction.is_finite() && self.interaction >= 0.0) {
            return Err(Error::Config(format!(
                "data.interaction = {} must be finite and >= 0",
                self.interaction
            )));
        }
        if !self.dependence.is_finite() {
            return Err(Error::Config("data.dependence must be finite".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<DatasetSchema> {
        let fields = (0..self.vocab_sizes.len()).map(|i| format!("x{i}")).collect();
        let tasks = default_task_names(self.rates.len());
        DatasetSchema::new(fields, self.vocab_sizes.clone(), tasks)
    }
}

/// `click, conversion, core_conversion` for three tasks, `task<i>` beyond.
pub fn default_task_names(m: usize) -> Vec<String> {
    let named: &[&str] = match m {
        2 => &["click", "purchase"],
        3 => &["click", "conversion", "core_conversion"],
        _ => &[],
    };
    if named.is_empty() {
        (0..m).map(|i| format!("task{i}")).collect()
    } else {
        named.iter().map(|s| s.to_string()).collect()
    }
}

/// Width of the latent vectors behind the interaction term.
const LATENT_DIM: usize = 4;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intercept `b` with `mean(sigmoid(logit + b)) = rate`, by bisection.
fn calibrate_intercept(logits: &[f64], rate: f64) -> f64 {
    let mean_at = |b: f64| logits.iter().map(|&l| sigmoid(l + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn generate_cascade(config: &SyntheticConfig) -> Result<CascadeDataset> {
    config.validate()?;
    let schema = config.schema()?;
    let n = config.num_samples;
    let (f, m) = (config.vocab_sizes.len(), config.rates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let norm = config.weight_scale / (f as f64).sqrt();
    // weights[t][field][id]
    let weights: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|_| {
            config
                .vocab_sizes
                .iter()
                .map(|&v| {
                    (0..v)
                        .map(|_| norm * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        })
        .collect();

    // latent[t][field][id], only drawn when used
    let pairs = (f * f.saturating_sub(1) / 2).max(1) as f64;
    let latent_norm = config.interaction / ((LATENT_DIM as f64) * pairs).sqrt();
    let latent: Vec<Vec<Vec<[f64; LATENT_DIM]>>> = if config.interaction > 0.0 {
        (0..m)
            .map(|_| {
                config
                    .vocab_sizes
                    .iter()
                    .map(|&v| {
                        (0..v)
                            .map(|_| std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal)))
                            .collect()
                    })
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut features = Vec::with_capacity(n * f);
    for _ in 0..n {
        for &v in &config.vocab_sizes {
            features.push(rng.gen_range(0..v as u32));
        }
    }

    // hidden[t][i]
    let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(m);
    for t in 0..m {
        let own = features.chunks(f).map(|row| {
            let linear = row
                .iter()
                .enumerate()
                .map(|(field, &id)| weights[t][field][id as usize])
                .sum::<f64>();
            if latent.is_empty() {
                return linear;
            }
            // sum_{f<g} <e_f, e_g> = (|sum e|^2 - sum |e|^2) / 2
            let mut total = [0.0; LATENT_DIM];
            let mut squares = 0.0;
            for (field, &id) in row.iter().enumerate() {
                let e = &latent[t][field][id as usize];
                for k in 0..LATENT_DIM {
                    total[k] += e[k];
                    squares += e[k] * e[k];
                }
            }
            let total_sq: f64 = total.iter().map(|v| v * v).sum();
            linear + latent_norm * 0.5 * (total_sq - squares)
        });
        let logits: Vec<f64> = match hidden.last() {
            Some(prev) => own.zip(prev).map(|(s, &p)| s + config.dependence * p).collect(),
            None => own.collect(),
        };
        hidden.push(logits);
    }

    let mut labels = vec![0u8; n * m];
    let mut active: Vec<usize> = (0..n).collect();
    for (t, &rate) in config.rates.iter().enumerate() {
        if active.is_empty() {
            break;
        }
        let probs: Vec<f64> = if rate <= 0.0 {
            vec![0.0; active.len()]
        } else if rate >= 1.0 {
            vec![1.0; active.len()]
        } else {
            let logits: Vec<f64> = active.iter().map(|&i| hidden[t][i]).collect();
            let b = calibrate_intercept(&logits, rate);
            logits.iter().map(|&l| sigmoid(l + b)).collect()
        };
        let mut next = Vec::with_capacity(active.len());
        for (&i, &p) in active.iter().zip(&probs) {
            if rng.gen::<f64>() < p {
                labels[i * m + t] = 1;
                next.push(i);
            }
        }
        active = next;
    }

    CascadeDataset::new(schema, features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(rates: Vec<f64>, n: usize) -> SyntheticConfig {
        SyntheticConfig {
            num_samples: n,
            vocab_sizes: vec![10, 20, 5],
            rates,
            seed: 7,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn degenerate_rates() {
        let ds = generate_cascade(&config(vec![1.0, 1.0, 1.0], 500)).unwrap();
        assert!((0..ds.len()).all(|i| ds.labels(i) == [1, 1, 1]));
        let ds = generate_cascade(&config(vec![0.0, 0.7], 500)).unwrap();
        assert!((0..ds.len()).all(|i| ds.labels(i) == [0, 0]));
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = generate_cascade(&config(vec![0.4, 0.5], 2000)).unwrap();
        let b = generate_cascade(&config(vec![0.4, 0.5], 2000)).unwrap();
        assert_eq!(a, b);
        let mut other = config(vec![0.4, 0.5], 2000);
        other.seed = 8;
        assert_ne!(a, generate_cascade(&other).unwrap());
    }

    #[test]
    fn calibrated_rates() {
        let ds = generate_cascade(&config(vec![0.5, 0.5], 100_000)).unwrap();
        let rates = ds.positive_rates();
        assert!((rates[0] - 0.5).abs() < 0.01, "{rates:?}");
        assert!((rates[1] - 0.25).abs() < 0.01, "{rates:?}");
    }

    #[test]
    fn interaction_keeps_calibration_and_changes_labels() {
        let mut cfg = config(vec![0.3, 0.2], 100_000);
        let plain = generate_cascade(&cfg).unwrap();
        cfg.interaction = 2.0;
        let mixed = generate_cascade(&cfg).unwrap();
        let rates = mixed.positive_rates();
        assert!((rates[0] - 0.3).abs() < 0.02, "{rates:?}");
        assert!((rates[1] - 0.06).abs() < 0.02, "{rates:?}");
        assert_ne!(plain.task_labels(0), mixed.task_labels(0));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_cascade(&config(vec![0.5], 10)).is_err());
        assert!(generate_cascade(&config(vec![0.5, 1.5], 10)).is_err());
        let mut c = config(vec![0.5, 0.5], 10);
        c.vocab_sizes = vec![1];
        assert!(generate_cascade(&c).is_err());
    }

    #[test]
    fn intercept_bisection_hits_rate() {
        let logits = [-2.0, 0.0, 1.0, 3.5];
        let b = calibrate_intercept(&logits, 0.3);
        let mean = logits.iter().map(|&l| sigmoid(l + b)).sum::<f64>() / 4.0;
        assert!((mean - 0.3).abs() < 1e-12);
    }
}
