//! End-to-end checks of the four verbs on a miniature benchmark.

use std::fs;
use std::path::{Path, PathBuf};

use cpl_cli::commands::{
    ablation_rows, cmd_ablate, cmd_eval, cmd_generate, cmd_train, latest_checkpoint, train_run, MATRIX_CSV, MODEL_LOSS_CSV,
};
use cpl_cli::datasets::load_tasks;
use cpl_cli::{ExperimentConfig, Overrides};
use cpl_core::replay::TrainMode;
use tempfile::TempDir;

fn tiny(num_tasks: usize, extra: &str) -> String {
    format!(
        r#"seed = 5
[benchmark]
num_tasks = {num_tasks}
resolution = 16
n_train = 6
n_test = 3
[model]
resolution = 16
hidden = 4
latent_dim = 2
embed_dim = 2
enc_channels = 2
summary_dim = 4
[generator]
resolution = 16
latent_dim = 2
enc_channels = 2
[schedule]
iterations = 3
generator_iterations = 2
batch_size = 2
[eval]
adapt_steps = 1
max_sequences = 2
strips = 1
{extra}"#
    )
}

fn config(dir: &Path, text: &str, mode: Option<TrainMode>) -> ExperimentConfig {
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    ExperimentConfig::load(
        &path,
        &Overrides {
            mode,
            ..Overrides::default()
        },
    )
    .unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn split_dirs(root: &Path) -> usize {
    fs::read_dir(root)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| fs::read_dir(e.path()).unwrap().filter(|s| s.as_ref().unwrap().path().is_dir()).count())
        .sum()
}

#[test]
fn generate_writes_a_train_and_test_split_per_task() {
    for (k, want) in [(3, 6), (1, 2)] {
        let tmp = TempDir::new().unwrap();
        let cfg = config(tmp.path(), &tiny(k, ""), None);
        let dirs = cmd_generate(&cfg, false).unwrap();
        assert_eq!(dirs.len(), want);
        assert_eq!(split_dirs(&cfg.data_dir), want);
    }
}

#[test]
fn generate_is_reproducible_and_refuses_to_overwrite() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let ca = config(a.path(), &tiny(2, ""), None);
    let cb = config(b.path(), &tiny(2, ""), None);
    cmd_generate(&ca, false).unwrap();
    cmd_generate(&cb, false).unwrap();
    assert_eq!(tree(&ca.data_dir), tree(&cb.data_dir));
    assert!(cmd_generate(&ca, false).is_err());
    cmd_generate(&ca, true).unwrap();
    assert_eq!(tree(&ca.data_dir), tree(&cb.data_dir));
}

#[test]
fn training_without_data_asks_for_generate() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), &tiny(2, ""), None);
    let err = cmd_train(&cfg, false, false).unwrap_err();
    assert!(format!("{err:#}").contains("generate"), "{err:#}");
}

#[test]
fn training_is_deterministic_and_writes_its_outputs() {
    let run = |dir: &Path| {
        let cfg = config(dir, &tiny(2, ""), None);
        cmd_generate(&cfg, false).unwrap();
        let state = cmd_train(&cfg, false, false).unwrap();
        (cfg, state)
    };
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let (ca, sa) = run(a.path());
    let (cb, sb) = run(b.path());
    assert_eq!(sa.matrix.num_rows(), 2);
    let dir = ca.run_dir();
    for f in [MATRIX_CSV, MODEL_LOSS_CSV, "eval_matrix_bars.png", "eval_matrix_heatmap.png", "config.toml"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    for f in [MATRIX_CSV, MODEL_LOSS_CSV] {
        assert_eq!(fs::read(dir.join(f)).unwrap(), fs::read(cb.run_dir().join(f)).unwrap(), "{f} differs");
    }
    assert_eq!(sa.model.params().fingerprint(), sb.model.params().fingerprint());
    let losses = fs::read_to_string(dir.join(MODEL_LOSS_CSV)).unwrap();
    assert_eq!(losses.lines().count(), 1 + 2 * 3);

    // A second run into the same directory needs an explicit choice.
    assert!(cmd_train(&ca, false, false).is_err());
    let again = cmd_train(&ca, false, true).unwrap();
    assert_eq!(again.model.params().fingerprint(), sa.model.params().fingerprint());
}

#[test]
fn resuming_after_an_interruption_matches_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), &tiny(3, ""), None);
    cmd_generate(&cfg, false).unwrap();
    let tasks = load_tasks(&cfg).unwrap();
    let full = train_run(&cfg, cfg.flags(), &tmp.path().join("full"), "cpl_full", &tasks, false, false).unwrap();

    // A run that stopped after its first period leaves only that period's files.
    let cut = tmp.path().join("cut");
    let src = tmp.path().join("full");
    for f in ["checkpoints/cpl_full_task1.ckpt", "losses/period1_model.csv", "losses/period1_generator.csv"] {
        let (from, to) = (src.join(f), cut.join(f));
        if from.exists() {
            fs::create_dir_all(to.parent().unwrap()).unwrap();
            fs::copy(from, to).unwrap();
        }
    }
    let (p, _) = latest_checkpoint(&cut.join("checkpoints"), "cpl_full").unwrap().unwrap();
    assert_eq!(p, 1);
    let resumed = train_run(&cfg, cfg.flags(), &cut, "cpl_full", &tasks, true, false).unwrap();

    assert_eq!(resumed.periods_done, 3);
    assert_eq!(resumed.model.params().fingerprint(), full.model.params().fingerprint());
    assert_eq!(resumed.matrix.to_csv(), full.matrix.to_csv());
    assert_eq!(
        fs::read(cut.join(MODEL_LOSS_CSV)).unwrap(),
        fs::read(tmp.path().join("full").join(MODEL_LOSS_CSV)).unwrap()
    );
}

#[test]
fn resume_rejects_a_different_configuration() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), &tiny(2, ""), None);
    cmd_generate(&cfg, false).unwrap();
    let tasks = load_tasks(&cfg).unwrap();
    let dir = tmp.path().join("run");
    train_run(&cfg, cfg.flags(), &dir, "r", &tasks, false, false).unwrap();
    let mut other = cfg.clone();
    other.schedule.iterations += 1;
    assert!(train_run(&other, other.flags(), &dir, "r", &tasks, true, false).is_err());
}

#[test]
fn eval_reports_every_task_and_rejects_a_task_count_mismatch() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), &tiny(2, ""), None);
    cmd_generate(&cfg, false).unwrap();
    cmd_train(&cfg, false, false).unwrap();
    let out = cmd_eval(&cfg, None).unwrap();
    assert_eq!(out.scores.len(), 2);
    let rows = fs::read_to_string(out.dir.join("evaluation.csv")).unwrap();
    assert!(rows.starts_with("task,sequence,true_task,inferred_task,psnr,ssim,probe_error_1,probe_error_2\n"));
    assert_eq!(rows.lines().count(), 1 + 2 * 2);
    assert!(out.dir.join("strip_task1.png").is_file());
    assert!(out.dir.join("summary.csv").is_file());

    let ckpt = latest_checkpoint(&cfg.run_dir().join("checkpoints"), "cpl_full").unwrap().unwrap().1;
    let three = config(tmp.path(), &tiny(3, ""), None);
    let err = cmd_eval(&three, Some(&ckpt)).unwrap_err();
    assert!(format!("{err:#}").contains("tasks"), "{err:#}");
}

#[test]
fn joint_training_fits_one_unconditioned_model() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), &tiny(2, ""), Some(TrainMode::Joint));
    cmd_generate(&cfg, false).unwrap();
    let state = cmd_train(&cfg, false, false).unwrap();
    assert!(state.generator.is_none());
    assert_eq!(state.matrix.num_rows(), 1);
    assert!(cmd_ablate(&cfg, false, false).is_err());
}

#[test]
fn ablate_writes_five_rows() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), &tiny(2, ""), None);
    cmd_generate(&cfg, false).unwrap();
    let rows = cmd_ablate(&cfg, false, false).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.iter().map(|r| r.flags).collect::<Vec<_>>(), ablation_rows());
    let r1 = rows[0].flags;
    assert!(!r1.replay && !r1.infer_k && !r1.random_k && !r1.adapt);
    let csv = fs::read_to_string(cfg.output_dir.join("ablation").join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().nth(1).unwrap().starts_with("1,false,false,false,false,5,"));
    assert!(rows.iter().all(|r| r.psnr.is_finite() && r.ssim.is_finite()));
}
