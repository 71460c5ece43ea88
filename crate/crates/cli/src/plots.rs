//! Raster figures: per-period bar charts and a heatmap of the evaluation
//! matrix, and predicted-versus-truth frame strips.

use std::path::Path;

use anyhow::{Context, Result};
use cpl_core::metrics::EvalMatrix;
use cpl_core::Tensor;
use image::{Rgb, RgbImage};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

fn fill(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, c: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// One group of bars per training period, one bar per task, height = PSNR.
/// Horizontal grid lines every 10 dB.
pub fn psnr_bars(matrix: &EvalMatrix, path: &Path) -> Result<()> {
    let (bar, gap, margin, height) = (14u32, 18u32, 20u32, 240u32);
    let k = matrix.num_tasks() as u32;
    let rows = matrix.num_rows() as u32;
    let top = (0..matrix.num_rows())
        .flat_map(|p| matrix.row(p + 1).unwrap_or(&[]).iter().map(|e| e.psnr))
        .fold(40.0f64, f64::max);
    let width = 2 * margin + rows * (k * bar + gap);
    let mut img = RgbImage::from_pixel(width.max(2 * margin + 1), height + 2 * margin, WHITE);
    let base = margin + height;
    let mut db = 10.0;
    while db < top {
        let y = base - (db / top * height as f64) as u32;
        fill(&mut img, margin, y, width - 2 * margin, 1, GRID);
        db += 10.0;
    }
    for p in 0..rows {
        let row = matrix.row(p as usize + 1).unwrap_or(&[]);
        for (t, e) in row.iter().enumerate() {
            let h = ((e.psnr.max(0.0) / top) * height as f64).round() as u32;
            let x = margin + gap / 2 + p * (k * bar + gap) + t as u32 * bar;
            fill(&mut img, x, base - h, bar - 2, h, Rgb(PALETTE[t % PALETTE.len()]));
        }
    }
    fill(&mut img, margin, base, width - 2 * margin, 1, AXIS);
    fill(&mut img, margin, margin, 1, height, AXIS);
    save(&img, path)
}

/// Blue-to-yellow ramp.
fn ramp(u: f64) -> Rgb<u8> {
    let u = u.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * u).round() as u8;
    Rgb([lerp(48.0, 253.0), lerp(18.0, 231.0), lerp(120.0, 37.0)])
}

/// Rows are training periods, columns tasks; colour scales linearly between
/// the smallest and largest PSNR in the matrix.
pub fn psnr_heatmap(matrix: &EvalMatrix, path: &Path) -> Result<()> {
    let cell = 40u32;
    let k = matrix.num_tasks() as u32;
    let rows = matrix.num_rows().max(1) as u32;
    let values: Vec<f64> = (0..matrix.num_rows())
        .flat_map(|p| matrix.row(p + 1).unwrap_or(&[]).iter().map(|e| e.psnr))
        .collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::from_pixel(k * cell + 2, rows * cell + 2, WHITE);
    for p in 0..matrix.num_rows() {
        for (t, e) in matrix.row(p + 1).unwrap_or(&[]).iter().enumerate() {
            let c = ramp((e.psnr - lo) / span);
            fill(&mut img, 1 + t as u32 * cell, 1 + p as u32 * cell, cell - 1, cell - 1, c);
        }
    }
    save(&img, path)
}

fn pixel(frame: &Tensor<f32>, x: usize, y: usize) -> Rgb<u8> {
    let s = frame.shape();
    let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let at = |ch: usize| (frame.data()[(ch * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
    if c == 1 {
        let v = at(0);
        Rgb([v, v, v])
    } else {
        Rgb([at(0), at(1), at(2)])
    }
}

/// Pairs of rows per sequence: ground truth above, then the observed
/// context followed by the prediction. A red bar marks the first predicted
/// frame.
pub fn prediction_strip(pairs: &[(Vec<Tensor<f32>>, Vec<Tensor<f32>>)], context_len: usize, path: &Path) -> Result<()> {
    let Some((truth, _)) = pairs.first() else { return Ok(()) };
    let s = truth[0].shape();
    let (h, w) = (s[s.len() - 2] as u32, s[s.len() - 1] as u32);
    let sep = 2u32;
    let cols = truth.len() as u32;
    let row_h = h + sep;
    let mut img = RgbImage::from_pixel(cols * (w + sep) + sep, pairs.len() as u32 * (2 * row_h + sep) + sep, WHITE);
    for (i, (truth, pred)) in pairs.iter().enumerate() {
        let y0 = sep + i as u32 * (2 * row_h + sep);
        for (r, row) in [truth, pred].iter().enumerate() {
            for (t, f) in row.iter().enumerate() {
                let x0 = sep + t as u32 * (w + sep);
                let yy = y0 + r as u32 * row_h;
                for y in 0..h {
                    for x in 0..w {
                        img.put_pixel(x0 + x, yy + y, pixel(f, x as usize, y as usize));
                    }
                }
            }
        }
        let xm = sep + context_len as u32 * (w + sep) - sep;
        fill(&mut img, xm, y0 + row_h, sep, h, Rgb([220, 30, 30]));
    }
    save(&img, path)
}
