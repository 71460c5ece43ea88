//! Materialising synthetic tasks to frame directories and loading them back
//! in training order.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cpl_core::data::{
    generate_shapeworld_task, load_frame_directory, save_frame_directory, DatasetSplit, LoadOptions, SplitRole,
    SyntheticTaskConfig,
};
use cpl_core::replay::TaskData;
use serde::{Deserialize, Serialize};

use crate::config::{BenchmarkKind, ExperimentConfig};

pub const MANIFEST: &str = "benchmark.toml";

/// Record of what `generate` wrote, checked before training.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    data_seed: u64,
    tasks: Vec<SyntheticTaskConfig>,
}

pub fn split_dir(root: &Path, task: usize, role: SplitRole) -> PathBuf {
    root.join(format!("task{task}")).join(role.as_str())
}

fn is_non_empty_dir(p: &Path) -> Result<bool> {
    Ok(p.is_dir() && fs::read_dir(p)?.next().is_some())
}

/// Writes every declared task's train and test split; returns the split
/// directories. Output is a pure function of the config and data seed.
pub fn generate(cfg: &ExperimentConfig, force: bool) -> Result<Vec<PathBuf>> {
    if cfg.benchmark.kind != BenchmarkKind::Shapeworld {
        bail!("generate only applies to the synthetic benchmark");
    }
    let root = &cfg.data_dir;
    if is_non_empty_dir(root)? {
        if !force {
            bail!("{} is not empty; pass --force to overwrite", root.display());
        }
        fs::remove_dir_all(root).with_context(|| format!("clearing {}", root.display()))?;
    }
    fs::create_dir_all(root)?;
    let tasks = cfg.synthetic_tasks()?;
    let mut dirs = Vec::new();
    for t in &tasks {
        let (train, test) = generate_shapeworld_task::<f32>(t, cfg.data_seed())?;
        for split in [&train, &test] {
            let dir = split_dir(root, t.task_id, split.role());
            save_frame_directory(split, &dir, &cfg.benchmark.action_file)?;
            dirs.push(dir);
        }
    }
    let manifest = Manifest {
        data_seed: cfg.data_seed(),
        tasks,
    };
    fs::write(root.join(MANIFEST), toml::to_string_pretty(&manifest)?)?;
    Ok(dirs)
}

fn check_manifest(cfg: &ExperimentConfig) -> Result<()> {
    let path = cfg.data_dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("{} missing; run `generate` first", path.display()))?;
    let found: Manifest = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let expected = Manifest {
        data_seed: cfg.data_seed(),
        tasks: cfg.synthetic_tasks()?,
    };
    if found != expected {
        bail!(
            "{} was generated from a different benchmark or seed; regenerate with --force",
            cfg.data_dir.display()
        );
    }
    Ok(())
}

/// Loads all tasks, reordered by `task_order` and relabelled `1..=K` in
/// training order.
pub fn load_tasks(cfg: &ExperimentConfig) -> Result<Vec<TaskData<f32>>> {
    if cfg.benchmark.kind == BenchmarkKind::Shapeworld {
        check_manifest(cfg)?;
    }
    let b = &cfg.benchmark;
    cfg.task_order()
        .iter()
        .enumerate()
        .map(|(i, &declared)| {
            let position = i + 1;
            let load = |role: SplitRole| -> Result<DatasetSplit<f32>> {
                let dir = split_dir(&cfg.data_dir, declared, role);
                let opts = LoadOptions {
                    context_len: b.context_len,
                    horizon: b.horizon,
                    action_filename: b.action_conditioned.then(|| b.action_file.clone()),
                    resolution: b.resolution,
                    rgb: b.channels == 3,
                    task_id: declared,
                    role,
                };
                let split = load_frame_directory(&dir, &opts).with_context(|| format!("loading {}", dir.display()))?;
                let seqs = split.sequences().iter().map(|s| s.clone().with_task_id(position)).collect();
                Ok(DatasetSplit::new(seqs, position, role)?)
            };
            Ok(TaskData {
                train: load(SplitRole::Train)?,
                test: load(SplitRole::Test)?,
            })
        })
        .collect()
}
