use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use pimm::data::{generate_cascade, load_csv_dataset, write_csv_dataset, CascadeDataset};
use pimm::fsutil::write_atomic;
use pimm::layers::checkpoint;
use pimm::models::{ModelConfig, ModelKind};
use pimm::training::{aggregate_runs, evaluate_auc, train_loop, EpochRecord, Summary, TrainConfig};

use crate::config::RunConfig;
use crate::error::CliError;

/// Options shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    /// Replaces `train.seeds` with this single seed.
    pub seed: Option<u64>,
    /// Runs trained concurrently; 0 and 1 both mean sequential.
    pub jobs: usize,
    pub out: PathBuf,
    /// `section.key=value` overrides, applied after the file.
    pub set: Vec<String>,
}

impl Options {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.set)?;
        if let Some(seed) = self.seed {
            cfg.set("train.seeds", &seed.to_string())?;
        }
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

#[derive(Serialize)]
struct SplitSummary {
    rows: usize,
    positives: Vec<usize>,
    /// Share of all rows positive on each task.
    rates: Vec<f64>,
    /// Share of rows positive on the previous task that are also positive.
    conditional_rates: Vec<Option<f64>>,
}

impl SplitSummary {
    fn of(ds: &CascadeDataset) -> Self {
        let m = ds.schema().num_tasks();
        let positives: Vec<usize> = (0..m)
            .map(|t| ds.task_labels(t).iter().filter(|&&y| y == 1).count())
            .collect();
        let rows = ds.len();
        let conditional_rates = (0..m)
            .map(|t| {
                let base = if t == 0 { rows } else { positives[t - 1] };
                (base > 0).then(|| positives[t] as f64 / base as f64)
            })
            .collect();
        Self {
            rows,
            rates: ds.positive_rates(),
            positives,
            conditional_rates,
        }
    }
}

#[derive(Serialize)]
struct DataSummary {
    seed: u64,
    fields: Vec<String>,
    vocab_sizes: Vec<usize>,
    tasks: Vec<String>,
    all: SplitSummary,
    train: SplitSummary,
    test: SplitSummary,
}

/// Writes `train.csv`, `test.csv` and `summary.json` for the synthetic
/// benchmark described by the configuration.
pub fn cmd_gen_data(opts: &Options) -> Result<Vec<PathBuf>, CliError> {
    let cfg = opts.resolve()?;
    if cfg.raw("data.source")? != "synthetic" {
        return Err(CliError::Config("gen-data needs data.source = synthetic".into()));
    }
    let synth = cfg.synthetic()?;
    let all = generate_cascade(&synth)?;
    let (train, test) = all.split_at(cfg.usize("data.num_samples")?);
    create_dir(&opts.out)?;

    let schema = all.schema();
    let summary = DataSummary {
        seed: synth.seed,
        fields: schema.fields().to_vec(),
        vocab_sizes: schema.vocab_sizes().to_vec(),
        tasks: schema.tasks().to_vec(),
        all: SplitSummary::of(&all),
        train: SplitSummary::of(&train),
        test: SplitSummary::of(&test),
    };
    let paths = [
        opts.out.join("train.csv"),
        opts.out.join("test.csv"),
        opts.out.join("summary.json"),
    ];
    write_csv_dataset(&train, &paths[0])?;
    write_csv_dataset(&test, &paths[1])?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&paths[2], &(json + "\n"))?;
    Ok(paths.to_vec())
}

/// Train, validation and test splits of one experiment.
pub struct Prepared {
    pub train: CascadeDataset,
    pub validation: CascadeDataset,
    pub test: CascadeDataset,
    /// Ids outside their field vocabulary, remapped on load.
    pub oov: usize,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let (train, test, oov) = match cfg.raw("data.source")? {
        "synthetic" => {
            let all = generate_cascade(&cfg.synthetic()?)?;
            let (train, test) = all.split_at(cfg.usize("data.num_samples")?);
            (train, test, 0)
        }
        "csv" => {
            let schema = cfg.csv_schema()?;
            let path = |key: &str| -> Result<PathBuf, CliError> {
                match cfg.raw(key)? {
                    "" => Err(CliError::Config(format!("missing required key {key} for data.source = csv"))),
                    p => Ok(PathBuf::from(p)),
                }
            };
            let train = load_csv_dataset(&path("data.train_path")?, &schema)?;
            let test = load_csv_dataset(&path("data.test_path")?, &schema)?;
            (train.dataset, test.dataset, train.oov + test.oov)
        }
        other => {
            return Err(CliError::Config(format!(
                "data.source = {other:?}; expected synthetic or csv"
            )))
        }
    };
    let fraction = cfg.f64("train.validation_fraction")?;
    let (train, validation) = train.split_shuffled(fraction, cfg.u64("data.seed")?);
    Ok(Prepared {
        train,
        validation,
        test,
        oov,
    })
}

/// Outcome of one (model, seed) run.
pub struct RunResult {
    pub kind: ModelKind,
    pub seed: u64,
    /// Test AUC per task.
    pub test_auc: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub selected_epoch: usize,
}

pub struct Report {
    pub tasks: Vec<String>,
    pub runs: Vec<RunResult>,
    /// Per model in run order, per task.
    pub summaries: Vec<(ModelKind, Vec<Summary>)>,
    pub files: Vec<PathBuf>,
}

/// Runs every `(kind, seed)` pair on `jobs` threads; results keep job order.
fn run_parallel<T: Send, F>(count: usize, jobs: usize, work: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync,
{
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, count.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let out = work(i);
                slots.lock().expect("no panics while holding the lock")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("no panics while holding the lock")
        .into_iter()
        .map(|s| s.expect("every job ran"))
        .collect()
}

fn history_csv(tasks: &[String], run: &RunResult) -> String {
    let mut out = String::from("epoch,sampling_probability,train_loss,label_pick_rate");
    for t in tasks {
        let _ = write!(out, ",val_auc_{t}");
    }
    out.push_str(",selected\n");
    for r in &run.history {
        let pick = r.label_pick_rate.map(|v| v.to_string()).unwrap_or_default();
        let _ = write!(out, "{},{},{},{}", r.epoch, r.sampling_probability, r.train_loss, pick);
        for auc in &r.validation_auc {
            let _ = write!(out, ",{}", auc.map(|v| v.to_string()).unwrap_or_default());
        }
        let _ = writeln!(out, ",{}", u8::from(r.epoch == run.selected_epoch));
    }
    out
}

/// Trains each model in `kinds` once per configured seed, then writes
/// checkpoints, training histories and metric tables under `opts.out`.
pub fn run_experiment(opts: &Options, kinds: &[ModelKind]) -> Result<Report, CliError> {
    let cfg = opts.resolve()?;
    let train_cfg: TrainConfig = cfg.train()?;
    let data = prepare_data(&cfg)?;
    let tasks = data.train.schema().tasks().to_vec();
    let model_cfgs = kinds
        .iter()
        .map(|&k| cfg.model(k, tasks.len()))
        .collect::<Result<Vec<ModelConfig>, _>>()?;
    if data.oov > 0 {
        eprintln!("warning: {} feature ids outside their vocabulary were mapped to id 0", data.oov);
    }

    let pairs: Vec<(usize, u64)> = (0..kinds.len())
        .flat_map(|k| train_cfg.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let runs_dir = opts.out.join("runs");
    create_dir(&runs_dir)?;

    let results = run_parallel(pairs.len(), opts.jobs, |i| -> Result<RunResult, CliError> {
        let (k, seed) = pairs[i];
        let started = Instant::now();
        let trained = train_loop(&model_cfgs[k], &train_cfg, seed, &data.train, &data.validation)?;
        let test_auc = evaluate_auc(&trained.model, &data.test, train_cfg.eval_batch_size)?
            .into_iter()
            .collect::<Result<Vec<f64>, _>>()?;
        let run = RunResult {
            kind: kinds[k],
            seed,
            test_auc,
            history: trained.history,
            selected_epoch: trained.selected_epoch,
        };
        let stem = format!("{}_seed{seed}", run.kind);
        checkpoint::save(trained.model.params(), &runs_dir.join(format!("{stem}.ckpt")))?;
        write_text(&runs_dir.join(format!("{stem}_history.csv")), &history_csv(&tasks, &run))?;
        eprintln!(
            "{} seed {seed}: test auc {} (epoch {}, {:.1}s)",
            run.kind,
            run.test_auc.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" "),
            run.selected_epoch,
            started.elapsed().as_secs_f64()
        );
        Ok(run)
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    // runs are grouped per model entry, seeds in order
    let mut summaries = Vec::new();
    for (kind, group) in kinds.iter().zip(runs.chunks(train_cfg.seeds.len())) {
        let aucs: Vec<Vec<f64>> = group.iter().map(|r| r.test_auc.clone()).collect();
        summaries.push((*kind, aggregate_runs(&aucs)?));
    }

    let mut metrics = String::from("model,task,seed,auc\n");
    for r in &runs {
        for (t, auc) in r.test_auc.iter().enumerate() {
            let _ = writeln!(metrics, "{},{},{},{auc}", r.kind, tasks[t], r.seed);
        }
    }
    let mut summary = String::from("model,task,mean,std\n");
    for (kind, per_task) in &summaries {
        for (t, s) in per_task.iter().enumerate() {
            let _ = writeln!(summary, "{kind},{},{},{}", tasks[t], s.mean, s.std);
        }
    }
    let files = vec![
        opts.out.join("metrics.csv"),
        opts.out.join("summary.csv"),
        opts.out.join("summary.txt"),
        opts.out.join("config.txt"),
    ];
    write_text(&files[0], &metrics)?;
    write_text(&files[1], &summary)?;
    write_text(&files[2], &format_table(&tasks, &summaries))?;
    write_text(&files[3], &cfg.render())?;
    Ok(Report {
        tasks,
        runs,
        summaries,
        files,
    })
}

/// Aligned `mean ± std` table, one row per model.
pub fn format_table(tasks: &[String], summaries: &[(ModelKind, Vec<Summary>)]) -> String {
    let mut rows = vec![std::iter::once("model".to_string()).chain(tasks.iter().cloned()).collect::<Vec<_>>()];
    for (kind, per_task) in summaries {
        rows.push(
            std::iter::once(kind.to_string())
                .chain(per_task.iter().map(Summary::to_string))
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

pub fn cmd_train(opts: &Options) -> Result<Report, CliError> {
    let kind = opts.resolve()?.model_kinds("model.kind")?;
    if kind.len() != 1 {
        return Err(CliError::Config("model.kind names exactly one model; use compare for several".into()));
    }
    run_experiment(opts, &kind)
}

pub fn cmd_compare(opts: &Options) -> Result<Report, CliError> {
    let kinds = opts.resolve()?.model_kinds("compare.models")?;
    run_experiment(opts, &kinds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_keeps_order() {
        for jobs in [0, 1, 3, 16] {
            assert_eq!(run_parallel(7, jobs, |i| i * i), vec![0, 1, 4, 9, 16, 25, 36]);
        }
        assert!(run_parallel(0, 4, |i| i).is_empty());
    }

    #[test]
    fn table_aligns_columns() {
        let s = Summary { mean: 0.65, std: 0.01 };
        let table = format_table(
            &["click".into(), "purchase".into()],
            &[(ModelKind::Pimm, vec![s, s]), (ModelKind::SharedBottom, vec![s, s])],
        );
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "model          click            purchase");
        assert_eq!(lines[1], "pimm           0.6500 ± 0.0100  0.6500 ± 0.0100");
        assert!(lines[2].starts_with("shared_bottom  0.6500"));
    }
}
