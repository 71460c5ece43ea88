//! Experiment configuration: one TOML file, full-scale defaults, and a desk-scale
//! profile selectable with a single flag.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cpl_core::data::{shapeworld_benchmark, validate_benchmark, SyntheticTaskConfig};
use cpl_core::metrics::KPolicy;
use cpl_core::replay::{EvalSpec, RunOptions, TrainMode, TrainSchedule};
use cpl_core::{GeneratorConfig, WorldModelConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Where task data comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    /// Synthetic tasks written by `generate`.
    Shapeworld,
    /// Existing frame directories under `data_dir/task<k>/{train,test}`.
    Frames,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub kind: BenchmarkKind,
    pub num_tasks: usize,
    pub action_conditioned: bool,
    pub resolution: usize,
    pub channels: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Declared task ids in training order; identity when absent.
    pub task_order: Option<Vec<usize>>,
    /// Explicit synthetic tasks replacing the built-in list.
    pub tasks: Option<Vec<SyntheticTaskConfig>>,
    /// Seed of the synthetic data; the experiment seed when absent.
    pub data_seed: Option<u64>,
    /// Name of the per-sequence action file.
    pub action_file: String,
}

/// Ablation switches. `random_k` and `infer_k` are exclusive; neither means the
/// model is trained and tested with one shared label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub replay: bool,
    pub infer_k: bool,
    pub random_k: bool,
    pub adapt: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.infer_k && self.random_k {
            bail!("ablation: random_k excludes infer_k");
        }
        Ok(())
    }

    pub fn conditioned(&self) -> bool {
        self.infer_k || self.random_k
    }

    pub fn policy(&self) -> KPolicy {
        if self.random_k {
            KPolicy::Random
        } else {
            KPolicy::Infer
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub adapt_steps: usize,
    /// Score at most this many test sequences per task.
    pub max_sequences: Option<usize>,
    /// Sequences rendered per task by `eval`.
    pub strips: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            adapt_steps: 5,
            max_sequences: None,
            strips: 4,
        }
    }
}

/// The file as written; every section optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    mode: Option<TrainMode>,
    desk_scale: Option<bool>,
    output_dir: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    benchmark: Option<toml::Table>,
    model: Option<toml::Table>,
    generator: Option<toml::Table>,
    schedule: Option<toml::Table>,
    ablation: Option<AblationFlags>,
    eval: Option<EvalConfig>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<TrainMode>,
    pub desk_scale: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: TrainMode,
    pub desk_scale: bool,
    pub output_dir: PathBuf,
    pub data_dir: PathBuf,
    pub benchmark: BenchmarkConfig,
    pub model: WorldModelConfig,
    pub generator: GeneratorConfig,
    pub schedule: TrainSchedule,
    pub ablation: Option<AblationFlags>,
    pub eval: EvalConfig,
}

fn full_benchmark() -> BenchmarkConfig {
    BenchmarkConfig {
        kind: BenchmarkKind::Shapeworld,
        num_tasks: 3,
        action_conditioned: false,
        resolution: 64,
        channels: 1,
        context_len: 5,
        horizon: 10,
        n_train: 300,
        n_test: 100,
        task_order: None,
        tasks: None,
        data_seed: None,
        action_file: "actions.txt".into(),
    }
}

fn desk_benchmark() -> BenchmarkConfig {
    BenchmarkConfig {
        resolution: 32,
        n_train: 100,
        n_test: 30,
        ..full_benchmark()
    }
}

fn desk_model() -> WorldModelConfig {
    WorldModelConfig {
        resolution: 32,
        hidden: 16,
        latent_dim: 8,
        enc_channels: 8,
        summary_dim: 32,
        ..WorldModelConfig::default()
    }
}

fn desk_generator() -> GeneratorConfig {
    GeneratorConfig {
        resolution: 32,
        latent_dim: 4,
        enc_channels: 8,
        ..GeneratorConfig::default()
    }
}

/// Reconstruction is a per-pixel mean, so the generator's KL weight and step
/// budget are raised for sharp samples within the short schedule. Replay
/// rolls out from a single generated frame, which the short schedule only
/// learns if training contexts vary down to one frame.
pub fn desk_schedule() -> TrainSchedule {
    TrainSchedule {
        batch_size: 8,
        generator_fraction: 0.5,
        beta: 1e-3,
        min_train_context: Some(1),
        ..TrainSchedule::desk_scale()
    }
}

/// Replaces the keys present in `table` on top of `base`.
fn overlay<T: Serialize + DeserializeOwned>(base: T, table: Option<toml::Table>, section: &str) -> Result<T> {
    let Some(table) = table else { return Ok(base) };
    let mut merged = toml::Table::try_from(&base).with_context(|| format!("[{section}] defaults"))?;
    for (k, v) in table {
        merged.insert(k, v);
    }
    merged.try_into().with_context(|| format!("invalid [{section}] section"))
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, overrides).with_context(|| format!("in {}", path.display()))
    }

    /// Relative directories resolve against `base`.
    pub fn parse(text: &str, base: &Path, overrides: &Overrides) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text)?;
        let desk = overrides.desk_scale || raw.desk_scale.unwrap_or(false);
        let (bench, model, generator, schedule) = if desk {
            (desk_benchmark(), desk_model(), desk_generator(), desk_schedule())
        } else {
            (full_benchmark(), WorldModelConfig::default(), GeneratorConfig::default(), TrainSchedule::full_scale())
        };
        let benchmark = overlay(bench, raw.benchmark, "benchmark")?;
        let mut model: WorldModelConfig = overlay(model, raw.model, "model")?;
        let mut generator: GeneratorConfig = overlay(generator, raw.generator, "generator")?;
        let schedule = overlay(schedule, raw.schedule, "schedule")?;

        // Frame layout and task count follow the benchmark.
        let action_dim = if benchmark.action_conditioned { 2 } else { 0 };
        model.channels = benchmark.channels;
        model.resolution = benchmark.resolution;
        model.num_tasks = benchmark.num_tasks;
        model.action_dim = action_dim;
        model.alpha = schedule.alpha;
        generator.channels = benchmark.channels;
        generator.resolution = benchmark.resolution;
        generator.num_tasks = benchmark.num_tasks;
        generator.action_dim = action_dim;
        generator.beta = schedule.beta;

        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let output_dir = resolve(raw.output_dir.unwrap_or_else(|| "runs".into()));
        let data_dir = raw.data_dir.map(resolve).unwrap_or_else(|| output_dir.join("data"));
        let cfg = Self {
            seed: overrides.seed.or(raw.seed).unwrap_or(0),
            mode: overrides.mode.or(raw.mode).unwrap_or(TrainMode::CplFull),
            desk_scale: desk,
            output_dir,
            data_dir,
            benchmark,
            model,
            generator,
            schedule,
            ablation: raw.ablation,
            eval: raw.eval.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.benchmark;
        if b.num_tasks == 0 {
            bail!("benchmark: num_tasks must be positive");
        }
        if b.context_len < 2 || b.horizon < 1 {
            bail!("benchmark: need context_len >= 2 and horizon >= 1");
        }
        let order = self.task_order();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (1..=b.num_tasks).collect::<Vec<_>>() {
            bail!("benchmark: task_order {order:?} is not a permutation of 1..={}", b.num_tasks);
        }
        if b.kind == BenchmarkKind::Shapeworld {
            validate_benchmark(&self.synthetic_tasks()?)?;
        }
        if let Some(f) = &self.ablation {
            f.validate()?;
            if self.mode == TrainMode::Joint && f.replay {
                bail!("ablation: joint training has no replay");
            }
        }
        self.model.validate()?;
        self.generator.validate()?;
        self.schedule.validate()?;
        Ok(())
    }

    pub fn task_order(&self) -> Vec<usize> {
        self.benchmark
            .task_order
            .clone()
            .unwrap_or_else(|| (1..=self.benchmark.num_tasks).collect())
    }

    pub fn data_seed(&self) -> u64 {
        self.benchmark.data_seed.unwrap_or(self.seed)
    }

    /// Declared synthetic tasks, numbered `1..=K` in declaration order.
    pub fn synthetic_tasks(&self) -> Result<Vec<SyntheticTaskConfig>> {
        let b = &self.benchmark;
        let tasks = match &b.tasks {
            Some(t) => t.clone(),
            None => shapeworld_benchmark(b.num_tasks, b.action_conditioned, b.resolution, b.n_train, b.n_test)?,
        };
        if tasks.len() != b.num_tasks {
            bail!("benchmark: {} tasks listed, num_tasks is {}", tasks.len(), b.num_tasks);
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.task_id != i + 1 {
                bail!("benchmark: task {} declared at position {}", t.task_id, i + 1);
            }
            if (t.resolution, t.channels, t.context_len, t.horizon) != (b.resolution, b.channels, b.context_len, b.horizon) {
                bail!("benchmark: task {} disagrees with the benchmark frame or sequence layout", t.task_id);
            }
        }
        Ok(tasks)
    }

    /// Switches in effect for `train`: the ablation section when present,
    /// otherwise the protocol of the mode.
    pub fn flags(&self) -> AblationFlags {
        self.ablation.unwrap_or(match self.mode {
            TrainMode::CplFull => AblationFlags {
                replay: true,
                infer_k: true,
                random_k: false,
                adapt: false,
            },
            TrainMode::SequentialBase | TrainMode::Joint => AblationFlags::default(),
        })
    }

    pub fn run_options(&self, flags: AblationFlags) -> RunOptions {
        let mut o = RunOptions::for_mode(self.mode, self.benchmark.context_len, self.benchmark.horizon, self.seed);
        o.replay = flags.replay;
        o.conditioned = flags.conditioned();
        o.eval = EvalSpec {
            policy: flags.policy(),
            adapt: flags.adapt,
            adapt_steps: self.eval.adapt_steps,
            max_sequences: self.eval.max_sequences,
        };
        o
    }

    /// Directory of one run.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.mode.as_str())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, o: &Overrides) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(text, Path::new("/base"), o)
    }

    #[test]
    fn empty_file_gives_full_scale_defaults() {
        let c = parse("", &Overrides::default()).unwrap();
        assert_eq!(c.schedule, TrainSchedule::full_scale());
        assert_eq!(c.model.resolution, 64);
        assert_eq!(c.benchmark.num_tasks, 3);
        assert_eq!(c.mode, TrainMode::CplFull);
        assert_eq!(c.output_dir, Path::new("/base/runs"));
        assert_eq!(c.data_dir, Path::new("/base/runs/data"));
        assert_eq!(c.task_order(), vec![1, 2, 3]);
    }

    #[test]
    fn desk_flag_selects_profile_and_file_values_win() {
        let o = Overrides {
            desk_scale: true,
            seed: Some(9),
            mode: Some(TrainMode::Joint),
        };
        let c = parse("seed = 1\nmode = \"cpl_full\"\n[schedule]\niterations = 50\n", &o).unwrap();
        assert_eq!(c.schedule.iterations, 50);
        assert_eq!(c.schedule.batch_size, desk_schedule().batch_size);
        assert_eq!(c.model.resolution, 32);
        assert_eq!((c.seed, c.mode), (9, TrainMode::Joint));
    }

    #[test]
    fn derived_fields_follow_the_benchmark() {
        let c = parse(
            "[benchmark]\nnum_tasks = 2\naction_conditioned = true\ncontext_len = 2\n[schedule]\nalpha = 0.5\n",
            &Overrides::default(),
        )
        .unwrap();
        assert_eq!((c.model.num_tasks, c.model.action_dim, c.generator.action_dim), (2, 2, 2));
        assert_eq!(c.model.alpha, 0.5);
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let o = Overrides::default();
        assert!(parse("[ablation]\ninfer_k = true\nrandom_k = true\n", &o).is_err());
        assert!(parse("[benchmark]\ntask_order = [1, 1, 2]\n", &o).is_err());
        assert!(parse("[schedule]\niteration = 5\n", &o).is_err());
        assert!(parse("unknown = 1\n", &o).is_err());
        assert!(parse("mode = \"joint\"\n[ablation]\nreplay = true\n", &o).is_err());
    }

    #[test]
    fn mode_protocols_map_to_flags() {
        let mut c = parse("", &Overrides::default()).unwrap();
        let f = c.flags();
        assert!(f.replay && f.infer_k && !f.random_k && !f.adapt);
        c.mode = TrainMode::SequentialBase;
        assert_eq!(c.flags(), AblationFlags::default());
        let o = c.run_options(c.flags());
        assert!(!o.replay && !o.conditioned);
    }
}
