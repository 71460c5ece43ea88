//! Image pairs regenerated bit-exactly from the LCG in
//! `fixtures/metric_reference.py`, with scikit-image reference values.

pub const REFERENCE_CSV: &str = include_str!("../fixtures/metric_reference.csv");

struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

pub struct ReferencePair {
    pub h: usize,
    pub w: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn reference_pairs() -> Vec<ReferencePair> {
    let mut rng = Lcg(20240611);
    REFERENCE_CSV
        .lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let h = 11 + (rng.next() * 14.0) as usize;
            let w = 11 + (rng.next() * 14.0) as usize;
            assert_eq!((h, w), (f[0].parse().unwrap(), f[1].parse().unwrap()), "fixture out of sync");
            let level = 0.02 + rng.next() * 0.6;
            let mut a = Vec::with_capacity(h * w);
            let mut b = Vec::with_capacity(h * w);
            for _ in 0..h * w {
                let x = rng.next();
                a.push(x);
                b.push((x + (rng.next() - 0.5) * level).clamp(0.0, 1.0));
            }
            ReferencePair {
                h,
                w,
                a,
                b,
                psnr: f[2].parse().unwrap(),
                ssim: f[3].parse().unwrap(),
            }
        })
        .collect()
}
