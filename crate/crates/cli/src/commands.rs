//! The four verbs: `generate`, `train`, `eval` and `ablate`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cpl_core::data::{sequence_seed, SplitRole};
use cpl_core::inference::deploy_predict;
use cpl_core::metrics::TaskScore;
use cpl_core::replay::{logs_to_csv, period_seed, RunState, TaskData, TrainMode, LOG_HEADER};
use cpl_core::{Checkpoint, FrameGenerator, Tensor, WorldModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AblationFlags, ExperimentConfig};
use crate::datasets::{self, load_tasks};
use crate::plots;

pub const MATRIX_CSV: &str = "eval_matrix.csv";
pub const MODEL_LOSS_CSV: &str = "loss_model.csv";
pub const GENERATOR_LOSS_CSV: &str = "loss_generator.csv";
pub const BARS_PNG: &str = "eval_matrix_bars.png";
pub const HEATMAP_PNG: &str = "eval_matrix_heatmap.png";
pub const ABLATION_CSV: &str = "ablation.csv";

pub fn cmd_generate(cfg: &ExperimentConfig, force: bool) -> Result<Vec<PathBuf>> {
    datasets::generate(cfg, force)
}

/// Fresh models and run state. The world model is drawn first from the
/// seed, so runs that differ only in their switches start from the same
/// weights.
pub fn build_state(cfg: &ExperimentConfig, flags: AblationFlags) -> Result<RunState<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = WorldModel::new(cfg.model.clone(), &mut rng)?;
    let generator = if flags.replay {
        Some(FrameGenerator::new(cfg.generator.clone(), &mut rng)?)
    } else {
        None
    };
    Ok(RunState::new(cfg.run_options(flags), cfg.schedule.clone(), model, generator)?)
}

fn checkpoint_name(run: &str, period: usize) -> String {
    format!("{run}_task{period}.ckpt")
}

/// Checkpoint of the most advanced period in `dir`, if any.
pub fn latest_checkpoint(dir: &Path, run: &str) -> Result<Option<(usize, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let prefix = format!("{run}_task");
    let mut best = None;
    for e in fs::read_dir(dir)? {
        let path = e?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let period = name
            .strip_prefix(&prefix)
            .and_then(|r| r.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(p) = period {
            if best.as_ref().map_or(true, |(b, _)| p > *b) {
                best = Some((p, path));
            }
        }
    }
    Ok(best)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Concatenates the per-period loss files with a leading period column.
fn combine_losses(loss_dir: &Path, suffix: &str, periods: usize) -> Result<String> {
    let mut out = format!("period,{LOG_HEADER}\n");
    for p in 1..=periods {
        let path = loss_dir.join(format!("period{p}_{suffix}.csv"));
        if !path.exists() {
            continue;
        }
        for line in fs::read_to_string(&path)?.lines().skip(1) {
            writeln!(out, "{p},{line}")?;
        }
    }
    Ok(out)
}

fn write_run_outputs(dir: &Path, state: &RunState<f32>) -> Result<()> {
    write(&dir.join(MATRIX_CSV), &state.matrix.to_csv())?;
    let loss_dir = dir.join("losses");
    write(&dir.join(MODEL_LOSS_CSV), &combine_losses(&loss_dir, "model", state.periods_done)?)?;
    write(&dir.join(GENERATOR_LOSS_CSV), &combine_losses(&loss_dir, "generator", state.periods_done)?)?;
    plots::psnr_bars(&state.matrix, &dir.join(BARS_PNG))?;
    plots::psnr_heatmap(&state.matrix, &dir.join(HEATMAP_PNG))
}

/// Trains one run into `dir`, checkpointing after every period. With
/// `resume`, continues from the latest checkpoint of the same configuration.
pub fn train_run(
    cfg: &ExperimentConfig,
    flags: AblationFlags,
    dir: &Path,
    run: &str,
    tasks: &[TaskData<f32>],
    resume: bool,
    force: bool,
) -> Result<RunState<f32>> {
    let ckpt_dir = dir.join("checkpoints");
    let existing = latest_checkpoint(&ckpt_dir, run)?;
    if existing.is_some() && !resume {
        if !force {
            bail!("{} already holds checkpoints; pass --resume to continue or --force to restart", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    let fresh = build_state(cfg, flags)?;
    let mut state = match existing.filter(|_| resume) {
        Some((_, path)) => {
            let ck = Checkpoint::<f32>::load(&path)?;
            if ck.num_tasks() != cfg.benchmark.num_tasks {
                bail!("checkpoint {} has {} tasks, config has {}", path.display(), ck.num_tasks(), cfg.benchmark.num_tasks);
            }
            if ck.state.options != fresh.options || ck.state.schedule != fresh.schedule {
                bail!("checkpoint {} was written by a different configuration", path.display());
            }
            ck.state
        }
        None => fresh,
    };
    fs::create_dir_all(&ckpt_dir)?;
    fs::create_dir_all(dir.join("losses"))?;
    write(&dir.join("config.toml"), &cfg.to_toml()?)?;
    while !state.is_finished(tasks.len()) {
        let report = match state.run_period(tasks) {
            Ok(r) => r,
            Err(e) => {
                let path = ckpt_dir.join(format!("{run}_aborted.ckpt"));
                Checkpoint::new(state).save(&path)?;
                return Err(anyhow::Error::new(e).context(format!("last finite state saved to {}", path.display())));
            }
        };
        let p = report.period;
        Checkpoint::new(state.clone()).save(&ckpt_dir.join(checkpoint_name(run, p)))?;
        write(&dir.join("losses").join(format!("period{p}_model.csv")), &logs_to_csv(&report.logs.model))?;
        if !report.logs.generator.is_empty() {
            write(
                &dir.join("losses").join(format!("period{p}_generator.csv")),
                &logs_to_csv(&report.logs.generator),
            )?;
        }
        write_run_outputs(dir, &state)?;
    }
    write_run_outputs(dir, &state)?;
    Ok(state)
}

pub fn cmd_train(cfg: &ExperimentConfig, resume: bool, force: bool) -> Result<RunState<f32>> {
    let tasks = load_tasks(cfg)?;
    train_run(cfg, cfg.flags(), &cfg.run_dir(), cfg.mode.as_str(), &tasks, resume, force)
}

/// Scores every task with the final model under `flags`' test-time policy.
/// The rng depends on the seed alone, so policies evaluated on the same
/// state are paired sequence by sequence.
pub fn evaluate_with(
    cfg: &ExperimentConfig,
    state: &RunState<f32>,
    tasks: &[TaskData<f32>],
    flags: AblationFlags,
) -> Result<Vec<TaskScore>> {
    let mut s = state.clone();
    s.options.eval.policy = flags.policy();
    s.options.eval.adapt = flags.adapt;
    s.options.eval.adapt_steps = cfg.eval.adapt_steps;
    s.options.eval.max_sequences = cfg.eval.max_sequences;
    let mut rng = ChaCha8Rng::seed_from_u64(period_seed(cfg.seed, 0));
    Ok(s.evaluate(tasks, s.periods_done.max(1), &mut rng)?)
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub dir: PathBuf,
    pub scores: Vec<TaskScore>,
}

fn evaluation_csv(scores: &[TaskScore], k: usize) -> String {
    let mut s = String::from("task,sequence,true_task,inferred_task,psnr,ssim");
    for j in 1..=k {
        write!(s, ",probe_error_{j}").unwrap();
    }
    s.push('\n');
    for (i, t) in scores.iter().enumerate() {
        for q in &t.sequences {
            write!(s, "{},{},{},{},{:.6},{:.6}", i + 1, q.index, q.true_label, q.label, q.psnr, q.ssim).unwrap();
            let probes = q.inference.as_ref().map(|r| r.probe_errors.as_slice()).unwrap_or(&[]);
            for j in 0..k {
                match probes.get(j) {
                    Some(e) => write!(s, ",{e:.8}").unwrap(),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
    }
    s
}

fn summary_csv(scores: &[TaskScore]) -> String {
    let mut s = String::from("task,psnr,ssim,inference_accuracy\n");
    for (i, t) in scores.iter().enumerate() {
        writeln!(s, "{},{:.6},{:.6},{:.6}", i + 1, t.psnr, t.ssim, t.inference_accuracy).unwrap();
    }
    s
}

fn as_batch(frame: Tensor<f32>) -> Tensor<f32> {
    Tensor::stack(&[frame])
}

/// Ground truth next to a rollout with the label evaluation chose.
fn strip_pairs(
    cfg: &ExperimentConfig,
    model: &WorldModel<f32>,
    task: &TaskData<f32>,
    score: &TaskScore,
) -> Result<Vec<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>> {
    let (t, h) = (cfg.benchmark.context_len, cfg.benchmark.horizon);
    let mut out = Vec::new();
    for q in score.sequences.iter().take(cfg.eval.strips) {
        let seq = &task.test.sequences()[q.index];
        let truth: Vec<Tensor<f32>> = (0..t + h).map(|i| seq.frame(i)).collect();
        let context: Vec<Tensor<f32>> = truth[..t].iter().cloned().map(as_batch).collect();
        let actions: Option<Vec<Tensor<f32>>> = seq
            .actions()
            .map(|a| (0..t + h - 1).map(|i| as_batch(a.item(i))).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(cfg.seed, task.test.task_id(), SplitRole::Test, q.index));
        let pred = deploy_predict(model, &context, actions.as_deref(), q.label, h, &mut rng)?;
        let mut row: Vec<Tensor<f32>> = truth[..t].to_vec();
        row.extend(pred.iter().map(|p| p.item(0)));
        out.push((truth, row));
    }
    Ok(out)
}

/// Evaluates a checkpoint (the latest of the configured run by default).
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalOutcome> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(&cfg.run_dir().join("checkpoints"), cfg.mode.as_str())?
            .map(|(_, p)| p)
            .with_context(|| format!("no checkpoint under {}", cfg.run_dir().display()))?,
    };
    let ck = Checkpoint::<f32>::load(&path)?;
    if ck.num_tasks() != cfg.benchmark.num_tasks {
        bail!(
            "checkpoint {} was trained on {} tasks but the config declares {}",
            path.display(),
            ck.num_tasks(),
            cfg.benchmark.num_tasks
        );
    }
    let tasks = load_tasks(cfg)?;
    let scores = evaluate_with(cfg, &ck.state, &tasks, cfg.flags())?;
    let dir = path
        .parent()
        .and_then(Path::parent)
        .unwrap_or(Path::new("."))
        .join("eval");
    fs::create_dir_all(&dir)?;
    write(&dir.join("evaluation.csv"), &evaluation_csv(&scores, cfg.benchmark.num_tasks))?;
    write(&dir.join("summary.csv"), &summary_csv(&scores))?;
    for (i, (task, score)) in tasks.iter().zip(&scores).enumerate() {
        let pairs = strip_pairs(cfg, &ck.state.model, task, score)?;
        plots::prediction_strip(&pairs, cfg.benchmark.context_len, &dir.join(format!("strip_task{}.png", i + 1)))?;
    }
    Ok(EvalOutcome { dir, scores })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub row: usize,
    pub flags: AblationFlags,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub inference_accuracy: f64,
}

/// The five switch settings of the ablation table, in order.
pub fn ablation_rows() -> [AblationFlags; 5] {
    let f = |replay, infer_k, random_k, adapt| AblationFlags {
        replay,
        infer_k,
        random_k,
        adapt,
    };
    [
        f(false, false, false, false),
        f(true, false, false, false),
        f(true, true, false, false),
        f(true, false, true, false),
        f(true, true, false, true),
    ]
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Trains the three distinct models of the table and scores all five rows
/// with one evaluation seed. Rows 3 to 5 differ only at test time and share
/// the row-3 model.
pub fn cmd_ablate(cfg: &ExperimentConfig, resume: bool, force: bool) -> Result<Vec<AblationRow>> {
    if cfg.mode == TrainMode::Joint {
        bail!("the ablation is defined for continual training, not joint mode");
    }
    let tasks = load_tasks(cfg)?;
    let root = cfg.output_dir.join("ablation");
    let rows = ablation_rows();
    let mut trained: Vec<RunState<f32>> = Vec::new();
    for (i, flags) in rows.iter().take(3).enumerate() {
        let name = format!("row{}", i + 1);
        trained.push(train_run(cfg, *flags, &root.join(&name), &name, &tasks, resume, force)?);
    }
    let mut out = Vec::new();
    let mut csv = String::from("row,replay,infer_k,random_k,adapt,seed,mean_psnr,mean_ssim,inference_accuracy\n");
    for (i, flags) in rows.iter().enumerate() {
        let state = &trained[i.min(2)];
        let scores = evaluate_with(cfg, state, &tasks, *flags)?;
        let row = AblationRow {
            row: i + 1,
            flags: *flags,
            seed: cfg.seed,
            psnr: mean(scores.iter().map(|s| s.psnr)),
            ssim: mean(scores.iter().map(|s| s.ssim)),
            inference_accuracy: mean(scores.iter().map(|s| s.inference_accuracy)),
        };
        writeln!(
            csv,
            "{},{},{},{},{},{},{:.6},{:.6},{:.6}",
            row.row, flags.replay, flags.infer_k, flags.random_k, flags.adapt, row.seed, row.psnr, row.ssim, row.inference_accuracy
        )?;
        out.push(row);
    }
    write(&root.join(ABLATION_CSV), &csv)?;
    Ok(out)
}
