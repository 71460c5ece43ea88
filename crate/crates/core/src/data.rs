//! Sequences, the synthetic ShapeWorld-CL benchmark and frame-directory IO.
//!
//! Every ShapeWorld-CL task renders one object on a black background. Tasks
//! differ jointly in the object's appearance (covariate shift) and its motion
//! rule (dynamics shift), so the future-frame distribution shifts as well.

use std::fs;
use std::path::{Path, PathBuf};

use cpl_tensor::{Scalar, Tensor};
use image::{imageops::FilterType, GrayImage, RgbImage};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CplError, Result};

/// Frames `[T+H, C, H, W]` in `[0, 1]` plus optional actions `[T+H-1, d_a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct VideoSequence<T> {
    frames: Tensor<T>,
    actions: Option<Tensor<T>>,
    task_id: usize,
}

impl<T: Scalar> VideoSequence<T> {
    pub fn new(frames: Tensor<T>, actions: Option<Tensor<T>>, task_id: usize) -> Result<Self> {
        if frames.shape().len() != 4 {
            return Err(CplError::Shape(format!(
                "frames must be [L, C, H, W], got {:?}",
                frames.shape()
            )));
        }
        if let Some(bad) = frames.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(CplError::Shape(format!("frame value {bad} outside [0, 1]")));
        }
        if let Some(a) = &actions {
            let l = frames.shape()[0];
            if a.shape().len() != 2 || a.shape()[0] + 1 != l {
                return Err(CplError::Shape(format!(
                    "actions {:?} must have {} rows for {l} frames",
                    a.shape(),
                    l.saturating_sub(1)
                )));
            }
        }
        Ok(Self {
            frames,
            actions,
            task_id,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames(&self) -> &Tensor<T> {
        &self.frames
    }

    pub fn actions(&self) -> Option<&Tensor<T>> {
        self.actions.as_ref()
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn with_task_id(mut self, task_id: usize) -> Self {
        self.task_id = task_id;
        self
    }

    /// `[C, H, W]`
    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[1], s[2], s[3]]
    }

    pub fn action_dim(&self) -> usize {
        self.actions.as_ref().map_or(0, |a| a.shape()[1])
    }

    /// Frame `i` (0-based) as `[C, H, W]`.
    pub fn frame(&self, i: usize) -> Tensor<T> {
        self.frames.item(i)
    }

    /// First `len` frames (and `len - 1` actions).
    pub fn truncated(&self, len: usize) -> Self {
        let n = self.frames.item_len();
        let mut shape = self.frames.shape().to_vec();
        shape[0] = len;
        let frames = Tensor::new(&shape, self.frames.data()[..len * n].to_vec());
        let actions = self.actions.as_ref().map(|a| {
            let d = a.shape()[1];
            Tensor::new(&[len - 1, d], a.data()[..(len - 1) * d].to_vec())
        });
        Self {
            frames,
            actions,
            task_id: self.task_id,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Appearance {
    Square,
    Disc,
    Triangle,
    Cross,
    Ring,
    Bar,
}

impl Appearance {
    /// Whether the pixel at offset `(dx, dy)` from the centre is covered by an
    /// object of half-extent `r`.
    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Appearance::Square => dx.abs() <= r && dy.abs() <= r,
            Appearance::Disc => dx * dx + dy * dy <= r * r,
            Appearance::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            Appearance::Cross => {
                (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
            }
            Appearance::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (r / 2.0) * (r / 2.0)
            }
            Appearance::Bar => dx.abs() <= r && dy.abs() <= r / 3.0,
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            Appearance::Square => [1.0, 0.3, 0.3],
            Appearance::Disc => [0.3, 1.0, 0.3],
            Appearance::Triangle => [0.3, 0.3, 1.0],
            Appearance::Cross => [1.0, 1.0, 0.3],
            Appearance::Ring => [1.0, 0.3, 1.0],
            Appearance::Bar => [0.3, 1.0, 1.0],
        }
    }
}

/// Motion rule of a task; speeds and radii in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dynamics {
    BounceHorizontal { speed: f64 },
    BounceVertical { speed: f64 },
    Diagonal { speed: f64 },
    Circular { radius: f64, angular_speed: f64 },
    ExpandContract { rate: f64 },
    ActionGain { gain: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    pub task_id: usize,
    pub appearance: Appearance,
    pub dynamics: Dynamics,
    #[serde(default)]
    pub action_dim: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Half-extent of the object in pixels; `resolution / 8` when absent.
    #[serde(default)]
    pub object_size: Option<f64>,
    pub context_len: usize,
    pub horizon: usize,
    pub n_train: usize,
    pub n_test: usize,
}

fn default_resolution() -> usize {
    64
}

fn default_channels() -> usize {
    1
}

impl SyntheticTaskConfig {
    pub fn seq_len(&self) -> usize {
        self.context_len + self.horizon
    }

    pub fn half_extent(&self) -> f64 {
        self.object_size.unwrap_or(self.resolution as f64 / 8.0)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CplError::Config(format!("task {}: {m}", self.task_id)));
        if self.task_id == 0 {
            return err("task ids are 1-based".into());
        }
        if self.context_len < 2 {
            return err(format!("context_len {} < 2", self.context_len));
        }
        if self.horizon < 1 {
            return err("horizon must be >= 1".into());
        }
        if !matches!(self.channels, 1 | 3) {
            return err(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if matches!(self.dynamics, Dynamics::ActionGain { .. }) && self.action_dim < 2 {
            return err("action_gain dynamics requires action_dim >= 2".into());
        }
        let r = self.half_extent();
        if !(r >= 1.0) || 2.0 * r + 3.0 > self.resolution as f64 {
            return err(format!(
                "object half-extent {r} does not fit a {}px frame",
                self.resolution
            ));
        }
        if let Dynamics::Circular { radius, .. } = self.dynamics {
            if 2.0 * (radius + r) + 1.0 > self.resolution as f64 {
                return err(format!("circular radius {radius} leaves the frame"));
            }
        }
        Ok(())
    }
}

/// Checks a whole benchmark: unique ids, and pairwise different appearance
/// *and* dynamics.
pub fn validate_benchmark(tasks: &[SyntheticTaskConfig]) -> Result<()> {
    for (i, a) in tasks.iter().enumerate() {
        a.validate()?;
        for b in &tasks[i + 1..] {
            if a.task_id == b.task_id {
                return Err(CplError::Config(format!("duplicate task id {}", a.task_id)));
            }
            if a.appearance == b.appearance {
                return Err(CplError::Config(format!(
                    "tasks {} and {} share appearance {:?}",
                    a.task_id, b.task_id, a.appearance
                )));
            }
            if a.dynamics == b.dynamics {
                return Err(CplError::Config(format!(
                    "tasks {} and {} share dynamics {:?}",
                    a.task_id, b.task_id, a.dynamics
                )));
            }
            if (a.resolution, a.channels, a.seq_len(), a.action_dim)
                != (b.resolution, b.channels, b.seq_len(), b.action_dim)
            {
                return Err(CplError::Config(format!(
                    "tasks {} and {} disagree on frame or sequence layout",
                    a.task_id, b.task_id
                )));
            }
        }
    }
    Ok(())
}

/// Default ShapeWorld-CL task list. Action-free tasks use `T=5, H=10`,
/// action-conditioned ones `T=2, H=10` with 2-D actions.
pub fn shapeworld_benchmark(
    num_tasks: usize,
    action_conditioned: bool,
    resolution: usize,
    n_train: usize,
    n_test: usize,
) -> Result<Vec<SyntheticTaskConfig>> {
    let s = resolution as f64 / 64.0;
    let free = [
        (Appearance::Square, Dynamics::BounceHorizontal { speed: 3.0 * s }),
        (
            Appearance::Disc,
            Dynamics::Circular {
                radius: 12.0 * s,
                angular_speed: 0.5,
            },
        ),
        (Appearance::Triangle, Dynamics::Diagonal { speed: 2.0 * s }),
        (Appearance::Cross, Dynamics::BounceVertical { speed: 3.0 * s }),
        (Appearance::Ring, Dynamics::ExpandContract { rate: 0.6 }),
        (Appearance::Bar, Dynamics::BounceHorizontal { speed: 1.5 * s }),
    ];
    let gains = [2.0, -2.0, 3.0, 1.0, -3.0, 1.5];
    if num_tasks == 0 || num_tasks > free.len() {
        return Err(CplError::Config(format!(
            "ShapeWorld-CL defines 1..={} tasks, asked for {num_tasks}",
            free.len()
        )));
    }
    let tasks: Vec<_> = (0..num_tasks)
        .map(|i| {
            let (appearance, dynamics) = if action_conditioned {
                (free[i].0, Dynamics::ActionGain { gain: gains[i] * s })
            } else {
                free[i]
            };
            SyntheticTaskConfig {
                task_id: i + 1,
                appearance,
                dynamics,
                action_dim: if action_conditioned { 2 } else { 0 },
                resolution,
                channels: 1,
                object_size: None,
                context_len: if action_conditioned { 2 } else { 5 },
                horizon: 10,
                n_train,
                n_test,
            }
        })
        .collect();
    validate_benchmark(&tasks)?;
    Ok(tasks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Test,
}

impl SplitRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DatasetSplit<T> {
    sequences: Vec<VideoSequence<T>>,
    task_id: usize,
    role: SplitRole,
}

impl<T: Scalar> DatasetSplit<T> {
    pub fn new(sequences: Vec<VideoSequence<T>>, task_id: usize, role: SplitRole) -> Result<Self> {
        if let Some(first) = sequences.first() {
            for s in &sequences {
                if s.task_id() != task_id {
                    return Err(CplError::Config(format!(
                        "sequence of task {} in split of task {task_id}",
                        s.task_id()
                    )));
                }
                if s.frame_shape() != first.frame_shape()
                    || s.action_dim() != first.action_dim()
                    || s.actions().is_some() != first.actions().is_some()
                {
                    return Err(CplError::Shape("split sequences disagree on layout".into()));
                }
            }
        }
        Ok(Self {
            sequences,
            task_id,
            role,
        })
    }

    pub fn sequences(&self) -> &[VideoSequence<T>] {
        &self.sequences
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn role(&self) -> SplitRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Per-pixel mean over every frame of every sequence, `[C, H, W]`.
    pub fn mean_frame(&self) -> Result<Tensor<T>> {
        let first = self.sequences.first().ok_or(CplError::EmptySplit)?;
        let [c, h, w] = first.frame_shape();
        let mut acc = vec![0.0f64; c * h * w];
        let mut count = 0usize;
        for s in &self.sequences {
            for chunk in s.frames().data().chunks(c * h * w) {
                for (a, v) in acc.iter_mut().zip(chunk) {
                    *a += v.as_f64();
                }
                count += 1;
            }
        }
        Ok(Tensor::new(
            &[c, h, w],
            acc.into_iter().map(|v| T::lit(v / count as f64)).collect(),
        ))
    }
}

/// Deterministic sub-seed for one generated sequence.
pub fn sequence_seed(seed: u64, task_id: usize, role: SplitRole, index: usize) -> u64 {
    let mut x = seed
        ^ (task_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((role as u64 + 1) << 56)
        ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finaliser
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Object state while simulating one sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub phase: f64,
    pub centre: (f64, f64),
    pub scale: f64,
}

fn reflect(p: f64, v: f64, lo: f64, hi: f64) -> (f64, f64) {
    let (mut p, mut v) = (p, v);
    // a few reflections cover speeds larger than the box
    for _ in 0..4 {
        if p < lo {
            p = 2.0 * lo - p;
            v = -v;
        } else if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        } else {
            break;
        }
    }
    (p.clamp(lo, hi), v)
}

impl SyntheticTaskConfig {
    fn bounds(&self) -> (f64, f64) {
        let r = self.half_extent().ceil();
        (r, self.resolution as f64 - 1.0 - r)
    }

    /// Random initial state respecting the task's motion rule.
    pub fn initial_state(&self, rng: &mut impl Rng) -> ObjectState {
        let (lo, hi) = self.bounds();
        let sign = |rng: &mut dyn rand::RngCore| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let mut st = ObjectState {
            x: rng.gen_range(lo..=hi),
            y: rng.gen_range(lo..=hi),
            vx: 0.0,
            vy: 0.0,
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            centre: (0.0, 0.0),
            scale: 1.0,
        };
        match self.dynamics {
            Dynamics::BounceHorizontal { speed } => st.vx = speed * sign(rng),
            Dynamics::BounceVertical { speed } => st.vy = speed * sign(rng),
            Dynamics::Diagonal { speed } => {
                st.vx = speed * sign(rng);
                st.vy = speed * sign(rng);
            }
            Dynamics::Circular { radius, .. } => {
                let c = (lo + radius)..=(hi - radius);
                st.centre = (rng.gen_range(c.clone()), rng.gen_range(c));
                st.x = st.centre.0 + radius * st.phase.cos();
                st.y = st.centre.1 + radius * st.phase.sin();
            }
            Dynamics::ExpandContract { .. } => st.scale = 0.75 + 0.25 * st.phase.sin(),
            Dynamics::ActionGain { .. } => {
                st.x = st.x.round();
                st.y = st.y.round();
            }
        }
        st
    }

    /// Deterministic state at `(x, y)` with positive velocity signs and zero
    /// phase; lets different tasks start from the same position.
    pub fn state_at(&self, x: f64, y: f64) -> ObjectState {
        let mut st = ObjectState {
            x,
            y,
            vx: 0.0,
            vy: 0.0,
            phase: 0.0,
            centre: (x, y),
            scale: 0.75,
        };
        match self.dynamics {
            Dynamics::BounceHorizontal { speed } => st.vx = speed,
            Dynamics::BounceVertical { speed } => st.vy = speed,
            Dynamics::Diagonal { speed } => (st.vx, st.vy) = (speed, speed),
            Dynamics::Circular { radius, .. } => st.centre = (x - radius, y),
            Dynamics::ExpandContract { .. } | Dynamics::ActionGain { .. } => {}
        }
        st
    }

    /// Advances one frame. `action` is consumed only by `ActionGain`.
    pub fn step(&self, st: &ObjectState, action: Option<&[f64]>) -> ObjectState {
        let (lo, hi) = self.bounds();
        let mut n = *st;
        match self.dynamics {
            Dynamics::BounceHorizontal { .. } | Dynamics::BounceVertical { .. } | Dynamics::Diagonal { .. } => {
                (n.x, n.vx) = reflect(st.x + st.vx, st.vx, lo, hi);
                (n.y, n.vy) = reflect(st.y + st.vy, st.vy, lo, hi);
            }
            Dynamics::Circular {
                radius,
                angular_speed,
            } => {
                n.phase = st.phase + angular_speed;
                n.x = st.centre.0 + radius * n.phase.cos();
                n.y = st.centre.1 + radius * n.phase.sin();
            }
            Dynamics::ExpandContract { rate } => {
                n.phase = st.phase + rate;
                n.scale = 0.75 + 0.25 * n.phase.sin();
            }
            Dynamics::ActionGain { gain } => {
                let a = action.expect("action_gain needs an action");
                n.x = (st.x + (gain * a[0]).round()).clamp(lo.ceil(), hi.floor());
                n.y = (st.y + (gain * a[1]).round()).clamp(lo.ceil(), hi.floor());
            }
        }
        n
    }

    /// Rasterises the object into `[C, H, W]` values.
    pub fn render(&self, st: &ObjectState) -> Vec<f64> {
        let res = self.resolution;
        let r = self.half_extent() * st.scale;
        let (cx, cy) = (st.x.round(), st.y.round());
        let color = self.appearance.color();
        let mut out = vec![0.0; self.channels * res * res];
        for y in 0..res {
            for x in 0..res {
                if self.appearance.covers(x as f64 - cx, y as f64 - cy, r) {
                    for c in 0..self.channels {
                        out[(c * res + y) * res + x] = if self.channels == 1 { 1.0 } else { color[c] };
                    }
                }
            }
        }
        out
    }

    fn generate_sequence<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Result<VideoSequence<T>> {
        let len = self.seq_len();
        let mut st = self.initial_state(rng);
        let mut frames = Vec::with_capacity(len * self.channels * self.resolution * self.resolution);
        let mut actions = Vec::new();
        frames.extend(self.render(&st));
        for _ in 1..len {
            let a: Vec<f64> = (0..self.action_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            st = self.step(&st, (!a.is_empty()).then_some(&a[..]));
            frames.extend(self.render(&st));
            actions.extend(a);
        }
        let frames = Tensor::new(
            &[len, self.channels, self.resolution, self.resolution],
            frames.into_iter().map(T::lit).collect(),
        );
        let actions = (self.action_dim > 0).then(|| {
            Tensor::new(
                &[len - 1, self.action_dim],
                actions.into_iter().map(T::lit).collect(),
            )
        });
        VideoSequence::new(frames, actions, self.task_id)
    }
}

/// Generates the `(train, test)` splits of one task. Sequence `i` of each
/// split depends only on `(config, seed, role, i)`.
pub fn generate_shapeworld_task<T: Scalar>(
    config: &SyntheticTaskConfig,
    seed: u64,
) -> Result<(DatasetSplit<T>, DatasetSplit<T>)> {
    config.validate()?;
    let make = |role: SplitRole, n: usize| -> Result<DatasetSplit<T>> {
        let seqs = (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(seed, config.task_id, role, i));
                config.generate_sequence(&mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        DatasetSplit::new(seqs, config.task_id, role)
    };
    Ok((
        make(SplitRole::Train, config.n_train)?,
        make(SplitRole::Test, config.n_test)?,
    ))
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:03}.png")
}

/// Writes a split as one directory per sequence of 8-bit PNG frames, plus an
/// action text file when the sequences carry actions.
pub fn save_frame_directory<T: Scalar>(
    split: &DatasetSplit<T>,
    root: &Path,
    action_filename: &str,
) -> Result<()> {
    fs::create_dir_all(root)?;
    for (i, seq) in split.sequences().iter().enumerate() {
        let dir = root.join(format!("seq_{i:04}"));
        fs::create_dir_all(&dir)?;
        let [c, h, w] = seq.frame_shape();
        for t in 0..seq.len() {
            let f = seq.frame(t);
            let px = |v: T| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
            let path = dir.join(frame_name(t));
            let saved = if c == 1 {
                GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    image::Luma([px(f.data()[y as usize * w + x as usize])])
                })
                .save(&path)
            } else {
                RgbImage::from_fn(w as u32, h as u32, |x, y| {
                    let at = |ch: usize| px(f.data()[(ch * h + y as usize) * w + x as usize]);
                    image::Rgb([at(0), at(1), at(2)])
                })
                .save(&path)
            };
            saved.map_err(|source| CplError::Image { path, source })?;
        }
        if let Some(a) = seq.actions() {
            let d = a.shape()[1];
            let text: String = a
                .data()
                .chunks(d)
                .map(|row| {
                    let cols: Vec<String> = row.iter().map(|v| format!("{:?}", v.as_f64())).collect();
                    cols.join(" ") + "\n"
                })
                .collect();
            fs::write(dir.join(action_filename), text)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    pub context_len: usize,
    pub horizon: usize,
    pub action_filename: Option<String>,
    /// Frames are resized to `resolution x resolution`.
    pub resolution: usize,
    pub rgb: bool,
    pub task_id: usize,
    pub role: SplitRole,
}

impl LoadOptions {
    pub fn new(context_len: usize, horizon: usize, task_id: usize) -> Self {
        Self {
            context_len,
            horizon,
            action_filename: None,
            resolution: 64,
            rgb: false,
            task_id,
            role: SplitRole::Train,
        }
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

fn frame_index(path: &Path) -> Option<usize> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    stem.parse().ok()
}

/// Reads a directory with one subdirectory per sequence. Keeps the first
/// `T+H` frames of each; the action file must hold one row per frame
/// transition of the directory.
pub fn load_frame_directory<T: Scalar>(root: &Path, opts: &LoadOptions) -> Result<DatasetSplit<T>> {
    let need = opts.context_len + opts.horizon;
    let mut sequences = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let seq_name = dir.display().to_string();
        let ingest = |reason: String| CplError::Ingestion {
            sequence: seq_name.clone(),
            reason,
        };
        let mut frames: Vec<(usize, PathBuf)> = sorted_entries(&dir)?
            .into_iter()
            .filter_map(|p| frame_index(&p).map(|i| (i, p)))
            .collect();
        frames.sort();
        for (expect, (i, _)) in frames.iter().enumerate() {
            if *i != expect {
                return Err(ingest(format!("missing frame {expect}")));
            }
        }
        let available = frames.len();
        if available < need {
            return Err(ingest(format!("{available} frames, need context + horizon = {need}")));
        }
        let ch = if opts.rgb { 3 } else { 1 };
        let res = opts.resolution;
        let mut data = Vec::with_capacity(need * ch * res * res);
        for (_, path) in frames.iter().take(need) {
            let img = image::open(path).map_err(|source| CplError::Image {
                path: path.clone(),
                source,
            })?;
            let img = if img.width() as usize != res || img.height() as usize != res {
                img.resize_exact(res as u32, res as u32, FilterType::Triangle)
            } else {
                img
            };
            if opts.rgb {
                let rgb = img.to_rgb8();
                for c in 0..3 {
                    for p in rgb.pixels() {
                        data.push(T::lit(p.0[c] as f64 / 255.0));
                    }
                }
            } else {
                data.extend(img.to_luma8().pixels().map(|p| T::lit(p.0[0] as f64 / 255.0)));
            }
        }
        let frames_t = Tensor::new(&[need, ch, res, res], data);
        let actions = match &opts.action_filename {
            None => None,
            Some(name) => {
                let text = fs::read_to_string(dir.join(name))
                    .map_err(|e| ingest(format!("action file {name}: {e}")))?;
                let rows: Vec<Vec<f64>> = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| {
                        l.split_whitespace()
                            .map(|v| v.parse::<f64>().map_err(|e| ingest(format!("bad action value {v:?}: {e}"))))
                            .collect::<Result<Vec<f64>>>()
                    })
                    .collect::<Result<_>>()?;
                if rows.len() + 1 != available {
                    return Err(ingest(format!(
                        "{} action rows for {available} frames, expected {}",
                        rows.len(),
                        available - 1
                    )));
                }
                let d = rows[0].len();
                if d == 0 || rows.iter().any(|r| r.len() != d) {
                    return Err(ingest("ragged action rows".into()));
                }
                let flat = rows.iter().take(need - 1).flatten().map(|&v| T::lit(v)).collect();
                Some(Tensor::new(&[need - 1, d], flat))
            }
        };
        sequences.push(VideoSequence::new(frames_t, actions, opts.task_id)?);
    }
    DatasetSplit::new(sequences, opts.task_id, opts.role)
}

/// Sequences stacked per time step, ready for the models.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    /// One `[N, C, H, W]` tensor per time step.
    pub frames: Vec<Tensor<T>>,
    /// One `[N, d_a]` tensor per transition.
    pub actions: Option<Vec<Tensor<T>>>,
    /// 1-based task label of every item.
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_sequences(seqs: &[&VideoSequence<T>]) -> Result<Self> {
        let first = seqs.first().ok_or(CplError::EmptySplit)?;
        let len = first.len();
        let [c, h, w] = first.frame_shape();
        let n = seqs.len();
        let fl = c * h * w;
        for s in seqs {
            if s.len() != len || s.frame_shape() != first.frame_shape() || s.action_dim() != first.action_dim() {
                return Err(CplError::Shape("batch sequences disagree on layout".into()));
            }
        }
        let frames = (0..len)
            .map(|t| {
                let mut d = Vec::with_capacity(n * fl);
                for s in seqs {
                    d.extend_from_slice(&s.frames().data()[t * fl..(t + 1) * fl]);
                }
                Tensor::new(&[n, c, h, w], d)
            })
            .collect();
        let actions = first.actions().map(|a| {
            let da = a.shape()[1];
            (0..len - 1)
                .map(|t| {
                    let mut d = Vec::with_capacity(n * da);
                    for s in seqs {
                        d.extend_from_slice(&s.actions().unwrap().data()[t * da..(t + 1) * da]);
                    }
                    Tensor::new(&[n, da], d)
                })
                .collect()
        });
        Ok(Self {
            frames,
            actions,
            labels: seqs.iter().map(|s| s.task_id()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.frames.len()
    }

    /// Items `idx` of the batch.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            frames: self.frames.iter().map(|f| f.select(idx)).collect(),
            actions: self
                .actions
                .as_ref()
                .map(|a| a.iter().map(|t| t.select(idx)).collect()),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Same batch with every label replaced.
    pub fn relabeled(&self, label: usize) -> Self {
        Self {
            labels: vec![label; self.labels.len()],
            ..self.clone()
        }
    }
}

/// Uniform sampling with replacement from `pool`.
pub fn sample_sequences<'a, T: Scalar>(
    pool: &'a [VideoSequence<T>],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<&'a VideoSequence<T>>> {
    if pool.is_empty() {
        return Err(CplError::EmptySplit);
    }
    Ok((0..batch_size).map(|_| &pool[rng.gen_range(0..pool.len())]).collect())
}

pub fn sample_batch<T: Scalar>(split: &DatasetSplit<T>, batch_size: usize, rng: &mut impl Rng) -> Result<Batch<T>> {
    Batch::from_sequences(&sample_sequences(split.sequences(), batch_size, rng)?)
}

/// `k` distinct indices of `0..n`, uniformly.
pub(crate) fn sample_without_replacement(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}
