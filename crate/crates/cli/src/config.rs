//! Flat sectioned `key = value` configuration.
//!
//! ```text
//! # comment
//! [model]
//! kind = pimm
//! tower_dims = 128, 64, 32
//!
//! [pim]
//! alpha = 0.5
//! ```
//!
//! Keys may also be written fully qualified (`pim.alpha = 0.5`) outside a
//! section. Unknown and repeated keys are rejected, so the parse does not
//! depend on line order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use pimm::data::{DatasetSchema, SyntheticConfig};
use pimm::models::{ModelConfig, ModelKind};
use pimm::pim::ScheduleConfig;
use pimm::training::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Setting reported for the published experiments.
    Paper,
    /// Choice made for this tool.
    Artifact,
}

impl Provenance {
    fn label(self) -> &'static str {
        match self {
            Provenance::Paper => "paper",
            Provenance::Artifact => "artifact",
        }
    }
}

pub struct KeySpec {
    pub key: &'static str,
    /// `None` marks a key with no silent default.
    pub default: Option<&'static str>,
    pub provenance: Provenance,
    pub help: &'static str,
}

use Provenance::{Artifact, Paper};

pub const KEYS: &[KeySpec] = &[
    KeySpec { key: "data.source", default: Some("synthetic"), provenance: Artifact, help: "synthetic | csv" },
    KeySpec { key: "data.train_path", default: Some(""), provenance: Artifact, help: "training CSV (data.source = csv)" },
    KeySpec { key: "data.test_path", default: Some(""), provenance: Artifact, help: "test CSV (data.source = csv)" },
    KeySpec { key: "data.fields", default: Some(""), provenance: Artifact, help: "feature field names, CSV columns f_<name> (data.source = csv)" },
    KeySpec { key: "data.vocab_sizes", default: Some("100"), provenance: Artifact, help: "vocabulary size per field; a single value applies to every field" },
    KeySpec { key: "data.tasks", default: Some(""), provenance: Artifact, help: "task names in dependence order, CSV columns y_<name> (data.source = csv)" },
    KeySpec { key: "data.num_fields", default: Some("8"), provenance: Artifact, help: "synthetic feature fields" },
    KeySpec { key: "data.num_samples", default: Some("50000"), provenance: Artifact, help: "synthetic training rows" },
    KeySpec { key: "data.test_samples", default: Some("10000"), provenance: Artifact, help: "synthetic test rows" },
    KeySpec { key: "data.rates", default: Some("0.3, 0.2"), provenance: Artifact, help: "conditional positive rate per task; its length sets the task count" },
    KeySpec { key: "data.weight_scale", default: Some("1.0"), provenance: Artifact, help: "std of each task's own feature logit" },
    KeySpec { key: "data.dependence", default: Some("2.0"), provenance: Artifact, help: "weight of the previous task's logit in the next one" },
    KeySpec { key: "data.interaction", default: Some("1.0"), provenance: Artifact, help: "std of each task's pairwise feature-interaction logit" },
    KeySpec { key: "data.seed", default: Some("2023"), provenance: Artifact, help: "generator seed; also seeds the validation split" },
    KeySpec { key: "model.kind", default: Some("pimm"), provenance: Artifact, help: "pimm | aitm | esmm | shared_bottom (train command)" },
    KeySpec { key: "model.embedding_dim", default: Some("5"), provenance: Paper, help: "embedding width per field" },
    KeySpec { key: "model.tower_dims", default: Some("128, 64, 32"), provenance: Paper, help: "task tower widths; the last is the transfer width" },
    KeySpec { key: "model.bottom_dims", default: Some("128"), provenance: Artifact, help: "shared trunk widths (shared_bottom)" },
    KeySpec { key: "model.loss_weights", default: Some(""), provenance: Artifact, help: "per-task loss weights; empty = all 1" },
    KeySpec { key: "pim.alpha", default: None, provenance: Paper, help: "initial label-selection probability (0.5 in the two-task setting)" },
    KeySpec { key: "pim.speed", default: None, provenance: Paper, help: "decrease per epoch (0.25 in the two-task setting)" },
    KeySpec { key: "pim.beta", default: None, provenance: Paper, help: "probability floor (0.25 in the two-task setting)" },
    KeySpec { key: "train.learning_rate", default: Some("0.001"), provenance: Paper, help: "Adam step size (sweep: 0.0005, 0.001, 0.0015, 0.002)" },
    KeySpec { key: "train.batch_size", default: Some("256"), provenance: Artifact, help: "rows per step" },
    KeySpec { key: "train.epochs", default: Some("10"), provenance: Artifact, help: "epochs per run" },
    KeySpec { key: "train.seeds", default: Some("1, 2, 3, 4, 5"), provenance: Paper, help: "one run per seed (five runs reported)" },
    KeySpec { key: "train.validation_fraction", default: Some("0.1"), provenance: Paper, help: "share of training rows held out for epoch selection" },
    KeySpec { key: "compare.models", default: Some("shared_bottom, esmm, aitm, pimm"), provenance: Artifact, help: "models run by the compare command" },
];

pub fn key_spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

/// Key listing appended to `--help`.
pub fn keys_help() -> String {
    let width = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys (file sections or --set section.key=value):\n");
    for k in KEYS {
        let default = match k.default {
            Some("") => "(empty)".to_string(),
            Some(d) => d.to_string(),
            None => "(required for pimm)".to_string(),
        };
        let _ = writeln!(
            out,
            "  {:width$}  {:<20} [{}] {}",
            k.key,
            default,
            k.provenance.label(),
            k.help
        );
    }
    out
}

/// Resolved configuration: defaults, then file values, then overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self {
            values: KEYS
                .iter()
                .filter_map(|k| k.default.map(|d| (k.key.to_string(), d.to_string())))
                .collect(),
        }
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::defaults();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            for (key, value) in parse_file(&text)? {
                cfg.values.insert(key, value);
            }
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects section.key=value, got {o:?}")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if key_spec(key).is_none() {
            return Err(CliError::Config(format!("unknown key {key}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Sectioned text that parses back to the same configuration.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for k in KEYS {
            let Some(value) = self.values.get(k.key) else { continue };
            let (sec, name) = k.key.split_once('.').expect("qualified key");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }

    pub fn raw(&self, key: &str) -> Result<&str, CliError> {
        debug_assert!(key_spec(key).is_some(), "unregistered key {key}");
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::Config(format!("missing required key {key}")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T, CliError> {
        let raw = self.raw(key)?;
        raw.trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{key} = {raw:?} is not {what}")))
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        self.parsed(key, "a number")
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn list(&self, key: &str) -> Result<Vec<String>, CliError> {
        Ok(self
            .raw(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect())
    }

    fn parsed_list<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Vec<T>, CliError> {
        self.list(key)?
            .into_iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Config(format!("{key}: entry {s:?} is not {what}")))
            })
            .collect()
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>, CliError> {
        self.parsed_list(key, "a number")
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        self.parsed_list(key, "a non-negative integer")
    }

    pub fn u64_list(&self, key: &str) -> Result<Vec<u64>, CliError> {
        self.parsed_list(key, "a non-negative integer")
    }

    pub fn synthetic(&self) -> Result<SyntheticConfig, CliError> {
        let num_fields = self.usize("data.num_fields")?;
        let vocab_sizes = broadcast_sizes(self.usize_list("data.vocab_sizes")?, num_fields, "data.vocab_sizes")?;
        let cfg = SyntheticConfig {
            num_samples: self.usize("data.num_samples")? + self.usize("data.test_samples")?,
            vocab_sizes,
            weight_scale: self.f64("data.weight_scale")?,
            dependence: self.f64("data.dependence")?,
            interaction: self.f64("data.interaction")?,
            rates: self.f64_list("data.rates")?,
            seed: self.u64("data.seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Schema for CSV input.
    pub fn csv_schema(&self) -> Result<DatasetSchema, CliError> {
        let fields = self.list("data.fields")?;
        if fields.is_empty() {
            return Err(CliError::Config("missing required key data.fields for data.source = csv".into()));
        }
        let vocab = broadcast_sizes(self.usize_list("data.vocab_sizes")?, fields.len(), "data.vocab_sizes")?;
        let tasks = self.list("data.tasks")?;
        if tasks.is_empty() {
            return Err(CliError::Config("missing required key data.tasks for data.source = csv".into()));
        }
        Ok(DatasetSchema::new(fields, vocab, tasks)?)
    }

    pub fn model_kinds(&self, key: &str) -> Result<Vec<ModelKind>, CliError> {
        let kinds = self
            .list(key)?
            .iter()
            .map(|s| s.parse::<ModelKind>())
            .collect::<Result<Vec<_>, _>>()?;
        if kinds.is_empty() {
            return Err(CliError::Config(format!("{key} lists no models")));
        }
        Ok(kinds)
    }

    pub fn schedule(&self) -> Result<ScheduleConfig, CliError> {
        Ok(ScheduleConfig::new(
            self.f64("pim.alpha")?,
            self.f64("pim.speed")?,
            self.f64("pim.beta")?,
        )?)
    }

    pub fn model(&self, kind: ModelKind, num_tasks: usize) -> Result<ModelConfig, CliError> {
        let mut cfg = ModelConfig::new(kind, num_tasks);
        cfg.embedding_dim = self.usize("model.embedding_dim")?;
        cfg.tower_dims = self.usize_list("model.tower_dims")?;
        cfg.bottom_dims = self.usize_list("model.bottom_dims")?;
        cfg.loss_weights = self.f64_list("model.loss_weights")?;
        if kind == ModelKind::Pimm {
            cfg.schedule = self.schedule()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            learning_rate: self.f64("train.learning_rate")?,
            batch_size: self.usize("train.batch_size")?,
            epochs: self.usize("train.epochs")?,
            seeds: self.u64_list("train.seeds")?,
            validation_fraction: self.f64("train.validation_fraction")?,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn broadcast_sizes(sizes: Vec<usize>, n: usize, key: &str) -> Result<Vec<usize>, CliError> {
    match sizes.len() {
        1 => Ok(vec![sizes[0]; n]),
        len if len == n => Ok(sizes),
        len => Err(CliError::Config(format!("{key} has {len} entries for {n} fields"))),
    }
}

/// Parses config text into fully qualified `(key, value)` pairs.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut section: Option<String> = None;
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if name.is_empty() || name.contains('.') {
                return Err(CliError::Config(format!("line {line_no}: bad section header {line:?}")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {line_no}: expected key = value, got {line:?}")))?;
        let key = key.trim();
        let full = match (&section, key.contains('.')) {
            (_, true) => key.to_string(),
            (Some(s), false) => format!("{s}.{key}"),
            (None, false) => {
                return Err(CliError::Config(format!(
                    "line {line_no}: key {key:?} is outside any section"
                )))
            }
        };
        if key_spec(&full).is_none() {
            return Err(CliError::Config(format!("line {line_no}: unknown key {full}")));
        }
        if let Some(first) = seen.insert(full.clone(), line_no) {
            return Err(CliError::Config(format!(
                "line {line_no}: key {full} already set on line {first}"
            )));
        }
        out.push((full, value.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_qualified_keys() {
        let pairs = parse_file("# c\n[model]\nkind = esmm\n\npim.alpha = 0.7\n[train]\nepochs=3\n").unwrap();
        assert_eq!(
            pairs,
            vec![
                ("model.kind".to_string(), "esmm".to_string()),
                ("pim.alpha".to_string(), "0.7".to_string()),
                ("train.epochs".to_string(), "3".to_string()),
            ]
        );
    }

    #[test]
    fn rejects_unknown_duplicate_and_orphan_keys() {
        assert!(parse_file("[model]\nwidth = 3\n").unwrap_err().to_string().contains("model.width"));
        assert!(parse_file("[train]\nepochs = 1\nepochs = 2\n").is_err());
        assert!(parse_file("epochs = 1\n").is_err());
        assert!(parse_file("[train]\nepochs\n").is_err());
    }

    #[test]
    fn order_independent() {
        let a = parse_file("[train]\nepochs = 2\n[pim]\nalpha = 0.4\n").unwrap();
        let mut b = parse_file("[pim]\nalpha = 0.4\n[train]\nepochs = 2\n").unwrap();
        b.sort();
        let mut a = a;
        a.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn pim_keys_have_no_silent_default() {
        let cfg = RunConfig::defaults();
        let err = cfg.model(ModelKind::Pimm, 2).unwrap_err().to_string();
        assert!(err.contains("pim.alpha"), "{err}");
        assert!(cfg.model(ModelKind::Aitm, 2).is_ok());
    }

    #[test]
    fn typed_getters() {
        let mut cfg = RunConfig::defaults();
        assert_eq!(cfg.usize_list("model.tower_dims").unwrap(), vec![128, 64, 32]);
        assert!(cfg.f64_list("model.loss_weights").unwrap().is_empty());
        cfg.set("train.epochs", "x").unwrap();
        assert!(cfg.train().unwrap_err().to_string().contains("train.epochs"));
        assert!(cfg.set("train.nope", "1").is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let help = keys_help();
        for k in KEYS {
            assert!(help.contains(k.key), "{}", k.key);
        }
        assert!(help.contains("[paper]") && help.contains("[artifact]"));
    }
}
