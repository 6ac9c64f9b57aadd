use std::path::Path;
use std::process::{Command, Output};

use pimm_cli::config::{RunConfig, KEYS};

const TINY: &str = "\
[data]
num_fields = 3
vocab_sizes = 10
num_samples = 400
test_samples = 300
rates = 0.6, 0.5

[model]
embedding_dim = 2
tower_dims = 8, 4
bottom_dims = 8

[pim]
alpha = 0.5
speed = 0.25
beta = 0.25

[train]
epochs = 2
batch_size = 64
seeds = 1, 2
";

fn pimm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pimm")).args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn help_lists_every_key_with_provenance() {
    let out = pimm(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for k in KEYS {
        assert!(text.contains(k.key), "missing {}", k.key);
    }
    assert!(text.contains("[paper]") && text.contains("[artifact]"));
}

#[test]
fn every_key_can_be_overridden_on_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let file: String = KEYS.iter().map(|k| format!("{} = from-file\n", k.key)).collect();
    let path = dir.path().join("all.cfg");
    std::fs::write(&path, file).unwrap();
    for k in KEYS {
        let cfg = RunConfig::load(Some(&path), &[format!("{}=from-flag", k.key)]).unwrap();
        assert_eq!(cfg.raw(k.key).unwrap(), "from-flag", "{}", k.key);
        let untouched = KEYS.iter().find(|o| o.key != k.key).unwrap();
        assert_eq!(cfg.raw(untouched.key).unwrap(), "from-file");
    }
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[data]\nnum_samples = 700\ntest_samples = 300\nseed = 7\n",
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = pimm(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(res.status.success(), "{}", stderr(&res));
    }
    for f in ["train.csv", "test.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let train = read(&a.join("train.csv"));
    assert_eq!(train.lines().count(), 701);
    assert!(train.starts_with("f_x0,f_x1,"));
}

fn summary_rates(dir: &Path, rates: &str, samples: usize) -> Vec<f64> {
    let out = dir.join(rates.replace(',', "_"));
    let res = pimm(&[
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--set",
        &format!("data.rates={rates}"),
        "--set",
        &format!("data.num_samples={samples}"),
        "--set",
        "data.test_samples=0",
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let json: serde_json::Value = serde_json::from_str(&read(&out.join("summary.json"))).unwrap();
    json["all"]["rates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect()
}

#[test]
fn gen_data_summary_rates() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(summary_rates(dir.path(), "1,1", 1000), vec![1.0, 1.0]);
    let half = summary_rates(dir.path(), "0.5,0.5", 100_000);
    assert!((half[1] - 0.25).abs() < 0.01, "{half:?}");
}

#[test]
fn train_writes_checkpoints_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let res = pimm(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--jobs", "2"]);
    assert!(res.status.success(), "{}", stderr(&res));
    let metrics = read(&out.join("metrics.csv"));
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "model,task,seed,auc");
    // two tasks for each of two seeds
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(lines[1].starts_with("pimm,click,1,"));
    for seed in [1, 2] {
        assert!(out.join(format!("runs/pimm_seed{seed}.ckpt")).exists());
        let history = read(&out.join(format!("runs/pimm_seed{seed}_history.csv")));
        assert_eq!(history.lines().count(), 3);
    }
    let summary = read(&out.join("summary.csv"));
    assert_eq!(summary.lines().count(), 3);
    assert!(String::from_utf8_lossy(&res.stdout).contains(" ± "));

    // the written config reproduces the run
    let again = dir.path().join("again");
    let res = pimm(&[
        "train",
        "--config",
        out.join("config.txt").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    assert_eq!(metrics, read(&again.join("metrics.csv")));
}

#[test]
fn seed_flag_replaces_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let res = pimm(&["train", "--config", &cfg, "--seed", "9", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));
    let metrics = read(&out.join("metrics.csv"));
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.lines().skip(1).all(|l| l.split(',').nth(2) == Some("9")));
}

#[test]
fn missing_premise_schedule_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let without_pim = TINY.replace("[pim]\nalpha = 0.5\n", "[pim]\n");
    let cfg = write_config(dir.path(), &without_pim);
    let res = pimm(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("pim.alpha"), "{}", stderr(&res));

    // not needed when PIMM is not requested
    let res = pimm(&[
        "train",
        "--config",
        &cfg,
        "--set",
        "model.kind=esmm",
        "--set",
        "train.seeds=1",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nepoch = 3\n");
    let res = pimm(&["train", "--config", &cfg]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("train.epoch"));
    let res = pimm(&["train", "--set", "model.depth=3"]);
    assert_eq!(res.status.code(), Some(2));
}

fn csv_config(dir: &Path, train: &str, test: &str) -> String {
    std::fs::write(dir.join("train.csv"), train).unwrap();
    std::fs::write(dir.join("test.csv"), test).unwrap();
    let text = format!(
        "{TINY}\n[data]\nsource = csv\ntrain_path = {}\ntest_path = {}\nfields = user, item\nvocab_sizes = 4, 6\ntasks = click, buy\n",
        dir.join("train.csv").display(),
        dir.join("test.csv").display()
    )
    // the csv section replaces the synthetic one
    .replacen("[data]\nnum_fields = 3\nvocab_sizes = 10\nnum_samples = 400\ntest_samples = 300\nrates = 0.6, 0.5\n", "", 1);
    write_config(dir, &text)
}

fn csv_rows(n: usize) -> String {
    let mut s = String::from("f_user,f_item,y_click,y_buy\n");
    for i in 0..n {
        let labels = ["0,0", "1,0", "1,1"][i % 3];
        s.push_str(&format!("{},{},{labels}\n", i % 4, i % 6));
    }
    s
}

#[test]
fn csv_training_and_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let rows = csv_rows(120);
    let cfg = csv_config(dir.path(), &rows, &rows);
    let out = dir.path().join("out");
    let res = pimm(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "1"]);
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(read(&out.join("metrics.csv")).contains("pimm,buy,1,"));

    // a downstream positive without the upstream positive, on data row 3
    let mut bad = csv_rows(6).lines().map(str::to_string).collect::<Vec<_>>();
    bad[3] = "1,1,0,1".into();
    let cfg = csv_config(dir.path(), &(bad.join("\n") + "\n"), &rows);
    let res = pimm(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
    assert!(stderr(&res).contains("row 3"), "{}", stderr(&res));

    // header does not match the configured schema
    let cfg = csv_config(dir.path(), &rows.replace("f_item", "f_product"), &rows);
    let res = pimm(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
    assert!(stderr(&res).contains("f_item"), "{}", stderr(&res));
}

#[test]
fn compare_rows_and_duplicate_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let res = pimm(&[
        "compare",
        "--config",
        &cfg,
        "--set",
        "compare.models=aitm, aitm",
        "--set",
        "train.seeds=1",
        "--jobs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let metrics = read(&out.join("metrics.csv"));
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 2);
    assert_eq!(rows[0..2], rows[2..4]);
    let table = read(&out.join("summary.txt"));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let res = pimm(&[
        "gen-data",
        "--set",
        "data.num_samples=10",
        "--set",
        "data.test_samples=0",
        "--out",
        blocker.join("sub").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("sub"), "{}", stderr(&res));
}
