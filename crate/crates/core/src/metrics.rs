//! Frame quality metrics, per-task evaluation and the evaluation matrix.

use std::fmt::Write as _;

use cpl_tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sequence_seed, DatasetSplit, SplitRole};
use crate::error::{CplError, Result};
use crate::inference::{adapt, deploy_predict, infer_task, InferenceReport, Window};
use crate::world_model::WorldModel;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(CplError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.shape().len() < 2 {
        return Err(CplError::Shape("metrics need at least [H, W] frames".into()));
    }
    Ok(())
}

/// PSNR of one frame given as flat slices, capped at 100 dB.
pub fn psnr_slice<T: Scalar>(pred: &[T], target: &[T], data_range: f64) -> f64 {
    let mse = pred
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP)
}

/// Mean per-frame PSNR of a `[N, ...]` batch of frames.
pub fn psnr<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, data_range: f64) -> Result<f64> {
    check_pair(pred, target)?;
    let n = if pred.shape().len() >= 4 { pred.shape()[0] } else { 1 };
    let len = pred.len() / n;
    Ok((0..n)
        .map(|i| psnr_slice(&pred.data()[i * len..(i + 1) * len], &target.data()[i * len..(i + 1) * len], data_range))
        .sum::<f64>()
        / n as f64)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).map(|j| k[j] * x[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM of two `h x w` planes over every fully contained window.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, data_range: f64) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CplError::Shape(format!(
            "{h}x{w} frame is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let k = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Mean SSIM over the frames (and channels) of a `[N, C, H, W]` or
/// `[C, H, W]` or `[H, W]` tensor pair.
pub fn ssim<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, data_range: f64) -> Result<f64> {
    check_pair(pred, target)?;
    let s = pred.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = pred.len() / (h * w);
    let mut total = 0.0;
    for p in 0..planes {
        let a: Vec<f64> = pred.data()[p * h * w..(p + 1) * h * w].iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = target.data()[p * h * w..(p + 1) * h * w].iter().map(|v| v.as_f64()).collect();
        total += ssim_plane(&a, &b, h, w, data_range)?;
    }
    Ok(total / planes as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub psnr: f64,
    pub ssim: f64,
    pub inference_accuracy: f64,
}

/// Row `j` holds the scores of every task after training period `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    num_tasks: usize,
    rows: Vec<Vec<EvalEntry>>,
}

impl EvalMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            rows: Vec::new(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn push_row(&mut self, row: Vec<EvalEntry>) -> Result<()> {
        if row.len() != self.num_tasks {
            return Err(CplError::Shape(format!(
                "evaluation row has {} entries for {} tasks",
                row.len(),
                self.num_tasks
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Period and task are 1-based.
    pub fn entry(&self, period: usize, task: usize) -> Option<&EvalEntry> {
        self.rows.get(period.checked_sub(1)?)?.get(task.checked_sub(1)?)
    }

    pub fn row(&self, period: usize) -> Option<&[EvalEntry]> {
        self.rows.get(period.checked_sub(1)?).map(Vec::as_slice)
    }

    pub fn last_row(&self) -> Option<&[EvalEntry]> {
        self.rows.last().map(Vec::as_slice)
    }

    /// Mean PSNR over tasks after the final period.
    pub fn final_mean_psnr(&self) -> Option<f64> {
        let r = self.last_row()?;
        Some(r.iter().map(|e| e.psnr).sum::<f64>() / r.len() as f64)
    }

    /// PSNR of task `i` after its own period minus after the final period.
    pub fn forgetting_gap(&self, task: usize) -> Result<f64> {
        let own = self.entry(task, task).ok_or_else(|| {
            CplError::Config(format!(
                "forgetting gap of task {task} needs at least {task} rows, matrix has {}",
                self.rows.len()
            ))
        })?;
        Ok(own.psnr - self.last_row().unwrap()[task - 1].psnr)
    }

    pub const CSV_HEADER: &'static str = "period,task,psnr,ssim,inference_accuracy";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for (j, row) in self.rows.iter().enumerate() {
            for (i, e) in row.iter().enumerate() {
                writeln!(s, "{},{},{:.6},{:.6},{:.6}", j + 1, i + 1, e.psnr, e.ssim, e.inference_accuracy).unwrap();
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |l: &str| CplError::Config(format!("malformed evaluation CSV line: {l}"));
        let mut entries: Vec<(usize, usize, EvalEntry)> = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(line));
            }
            let us = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(line));
            let fl = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(line));
            entries.push((
                us(f[0])?,
                us(f[1])?,
                EvalEntry {
                    psnr: fl(f[2])?,
                    ssim: fl(f[3])?,
                    inference_accuracy: fl(f[4])?,
                },
            ));
        }
        let k = entries.iter().map(|e| e.1).max().unwrap_or(0);
        let mut m = Self::new(k);
        let periods = entries.iter().map(|e| e.0).max().unwrap_or(0);
        for p in 1..=periods {
            let mut row: Vec<_> = entries.iter().filter(|e| e.0 == p).collect();
            row.sort_by_key(|e| e.1);
            m.push_row(row.into_iter().map(|e| e.2).collect())?;
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KPolicy {
    Infer,
    Oracle,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub policy: KPolicy,
    pub adapt: bool,
    pub adapt_steps: usize,
    pub adapt_lr: f64,
    /// Labels considered by inference and random choice: `1..=candidates`.
    pub candidates: usize,
    /// Label the model associates with this split.
    pub true_label: usize,
    pub context_len: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub index: usize,
    pub true_label: usize,
    pub label: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub inference: Option<InferenceReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub psnr: f64,
    pub ssim: f64,
    pub inference_accuracy: f64,
    pub sequences: Vec<SequenceScore>,
}

impl TaskScore {
    pub fn entry(&self) -> EvalEntry {
        EvalEntry {
            psnr: self.psnr,
            ssim: self.ssim,
            inference_accuracy: self.inference_accuracy,
        }
    }
}

/// Scores `model` on every sequence of `split`: pick a label by policy,
/// optionally adapt a clone on the context, roll out the horizon and compare
/// to ground truth. Each sequence gets its own rng stream derived from one
/// draw of `rng`, so policies evaluated from equal rng states are paired.
pub fn evaluate_task<T: Scalar>(
    model: &WorldModel<T>,
    split: &DatasetSplit<T>,
    opts: &EvalOptions,
    rng: &mut impl Rng,
) -> Result<TaskScore> {
    if split.is_empty() {
        return Err(CplError::EmptySplit);
    }
    let (t, h) = (opts.context_len, opts.horizon);
    let base: u64 = rng.gen();
    let mut sequences = Vec::with_capacity(split.len());
    for (idx, seq) in split.sequences().iter().enumerate() {
        if seq.len() < t + h {
            return Err(CplError::Shape(format!(
                "sequence {idx} has {} frames, evaluation needs {}",
                seq.len(),
                t + h
            )));
        }
        let mut r = ChaCha8Rng::seed_from_u64(sequence_seed(base, split.task_id(), SplitRole::Test, idx));
        let frames: Vec<Tensor<T>> = (0..t + h).map(|i| seq.frame(i).reshape(&batch1(seq.frame_shape()))).collect();
        let actions: Option<Vec<Tensor<T>>> = seq.actions().map(|a| {
            let d = a.shape()[1];
            (0..t + h - 1)
                .map(|i| Tensor::new(&[1, d], a.data()[i * d..(i + 1) * d].to_vec()))
                .collect()
        });
        let observed_actions = actions.as_ref().map(|a| &a[..t - 1]);
        let window = Window {
            frames: &frames[..t],
            actions: observed_actions,
        };
        let (label, inference) = match opts.policy {
            KPolicy::Oracle => (opts.true_label, None),
            KPolicy::Random => (r.gen_range(1..=opts.candidates), None),
            KPolicy::Infer => {
                let rep = infer_task(model, &window, opts.candidates, &mut r)?;
                (rep.task, Some(rep))
            }
        };
        let inference = inference.map(|mut rep| {
            rep.adapted = opts.adapt;
            rep.adapt_steps = if opts.adapt { opts.adapt_steps } else { 0 };
            rep
        });
        // Adaptation draws from a fork so the rollout noise is the same with
        // and without it.
        let preds = if opts.adapt {
            let mut fork = r.clone();
            fork.set_stream(1);
            let adapted = adapt(model, &window, label, opts.adapt_steps, opts.adapt_lr, &mut fork)?;
            deploy_predict(&adapted, &frames[..t], actions.as_deref(), label, h, &mut r)?
        } else {
            deploy_predict(model, &frames[..t], actions.as_deref(), label, h, &mut r)?
        };
        let pred = Tensor::stack(&preds);
        let truth = Tensor::stack(&frames[t..]);
        sequences.push(SequenceScore {
            index: idx,
            true_label: opts.true_label,
            label,
            psnr: psnr(&pred, &truth, 1.0)?,
            ssim: ssim(&pred, &truth, 1.0)?,
            inference,
        });
    }
    let n = sequences.len() as f64;
    Ok(TaskScore {
        psnr: sequences.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim: sequences.iter().map(|s| s.ssim).sum::<f64>() / n,
        inference_accuracy: sequences.iter().filter(|s| s.label == s.true_label).count() as f64 / n,
        sequences,
    })
}

fn batch1(frame: [usize; 3]) -> [usize; 4] {
    [1, frame[0], frame[1], frame[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Tensor::<f64>::full(&[1, 1, 4, 4], 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        let b = Tensor::<f64>::full(&[1, 1, 4, 4], 0.4);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let z = Tensor::<f32>::zeros(&[2, 1, 4, 4]);
        let o = Tensor::<f32>::full(&[2, 1, 4, 4], 1.0);
        assert_eq!(psnr(&z, &o, 1.0).unwrap(), 0.0);
        assert!(psnr(&z, &Tensor::zeros(&[1, 1, 4, 4]), 1.0).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = Tensor::<f64>::from_fn(&[1, 1, 16, 16], |i| ((i * 37) % 17) as f64 / 17.0);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let c = Tensor::<f64>::full(&[1, 1, 16, 16], 0.5);
        let d = Tensor::<f64>::full(&[1, 1, 16, 16], 0.25);
        let expect = (2.0 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4);
        assert!((ssim(&c, &d, 1.0).unwrap() - expect).abs() < 1e-12);
        // the closed form is 0.80006; the commonly quoted rounding 0.8003 is within 5e-4
        assert!((expect - 0.8003).abs() < 5e-4);
        assert_eq!(ssim(&a, &c, 1.0).unwrap(), ssim(&c, &a, 1.0).unwrap());
        let small = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        assert!(ssim(&small, &small, 1.0).is_err());
    }

    fn entry(p: f64) -> EvalEntry {
        EvalEntry {
            psnr: p,
            ssim: 0.5,
            inference_accuracy: 1.0,
        }
    }

    #[test]
    fn forgetting_gap_cases() {
        let mut m = EvalMatrix::new(1);
        m.push_row(vec![entry(25.0)]).unwrap();
        assert_eq!(m.forgetting_gap(1).unwrap(), 0.0);

        let mut m = EvalMatrix::new(2);
        m.push_row(vec![entry(25.0), entry(12.0)]).unwrap();
        m.push_row(vec![entry(25.0), entry(24.0)]).unwrap();
        assert_eq!(m.forgetting_gap(1).unwrap(), 0.0);
        m.push_row(vec![entry(21.5), entry(24.0)]).unwrap();
        assert_eq!(m.forgetting_gap(1).unwrap(), 3.5);
        assert!(m.push_row(vec![entry(1.0)]).is_err());

        let mut joint = EvalMatrix::new(3);
        joint.push_row(vec![entry(1.0); 3]).unwrap();
        assert!(joint.forgetting_gap(2).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut m = EvalMatrix::new(2);
        m.push_row(vec![entry(25.125), entry(12.5)]).unwrap();
        m.push_row(vec![entry(20.0), entry(24.0)]).unwrap();
        let csv = m.to_csv();
        assert!(csv.starts_with("period,task,psnr,ssim,inference_accuracy\n"));
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(EvalMatrix::from_csv(&csv).unwrap(), m);
    }
}
