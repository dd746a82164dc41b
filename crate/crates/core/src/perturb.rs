//! Image-like grids and the corruption operators used by the robustness
//! harness.
//!
//! Severity table (level 1..=5, level 0 is the identity):
//!
//! | kind                  | parameter                         | 1    | 2    | 3    | 4    | 5    |
//! |-----------------------|-----------------------------------|------|------|------|------|------|
//! | `blur`                | Gaussian sigma (px)               | 0.5  | 1    | 1.5  | 2    | 3    |
//! | `noise`               | additive std (fraction of [0,1])  | 0.02 | 0.05 | 0.1  | 0.2  | 0.4  |
//! | `brightness_contrast` | contrast change, shift = change/2 | 5%   | 10%  | 20%  | 35%  | 50%  |
//! | `rotation`            | degrees                           | 5    | 10   | 15   | 25   | 45   |
//!
//! Signs (contrast up or down, brightness up or down, rotation direction) are
//! drawn from `PerturbSpec::seed`. Outputs are clipped to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major `height x width` grid of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::dims(height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    fn get_clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clip_unit(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean_abs_diff(&self, other: &Grid) -> f64 {
        let n = self.data.len() as f64;
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Blur,
    Noise,
    BrightnessContrast,
    Rotation,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 4] =
        [PerturbKind::Blur, PerturbKind::Noise, PerturbKind::BrightnessContrast, PerturbKind::Rotation];

    pub fn as_str(&self) -> &'static str {
        match self {
            PerturbKind::Blur => "blur",
            PerturbKind::Noise => "noise",
            PerturbKind::BrightnessContrast => "brightness_contrast",
            PerturbKind::Rotation => "rotation",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown perturbation kind {s:?}")))
    }
}

pub const MAX_SEVERITY: u8 = 5;

const BLUR_SIGMA: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 3.0];
const NOISE_STD: [f64; 5] = [0.02, 0.05, 0.1, 0.2, 0.4];
const CONTRAST_CHANGE: [f64; 5] = [0.05, 0.10, 0.20, 0.35, 0.50];
const ROTATION_DEGREES: [f64; 5] = [5.0, 10.0, 15.0, 25.0, 45.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    pub severity: u8,
    pub seed: u64,
}

fn random_sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Applies the severity-indexed corruption. Severity 0 returns `img` unchanged.
pub fn perturb_image(img: &Grid, spec: &PerturbSpec) -> Result<Grid> {
    if spec.severity > MAX_SEVERITY {
        return Err(Error::invalid(format!("severity must be in 0..={MAX_SEVERITY}, got {}", spec.severity)));
    }
    if spec.severity == 0 {
        return Ok(img.clone());
    }
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("grid contains non-finite values"));
    }
    let level = (spec.severity - 1) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let out = match spec.kind {
        PerturbKind::Blur => gaussian_blur(img, BLUR_SIGMA[level]),
        PerturbKind::Noise => add_gaussian_noise(img, NOISE_STD[level], &mut rng),
        PerturbKind::BrightnessContrast => {
            let change = CONTRAST_CHANGE[level];
            let alpha = 1.0 + random_sign(&mut rng) * change;
            let beta = random_sign(&mut rng) * change / 2.0;
            brightness_contrast(img, alpha, beta)
        }
        PerturbKind::Rotation => rotate(img, random_sign(&mut rng) * ROTATION_DEGREES[level]),
    };
    Ok(out.clip_unit())
}

/// Normalized 1-D Gaussian kernel with half-width `ceil(2 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (2.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-half..=half).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &Grid, sigma: f64) -> Grid {
    let kernel = gaussian_kernel(sigma);
    let half = (kernel.len() / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * img.get_clamped(y as isize, x as isize + k as isize - half))
                .sum();
        }
    }
    let horiz = Grid { height: h, width: w, data: tmp };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * horiz.get_clamped(y as isize + k as isize - half, x as isize))
                .sum();
        }
    }
    Grid { height: h, width: w, data: out }
}

pub fn add_gaussian_noise(img: &Grid, std: f64, rng: &mut impl Rng) -> Grid {
    let data = img
        .data
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + std * z
        })
        .collect();
    Grid { height: img.height, width: img.width, data }
}

/// `alpha * (v - 0.5) + 0.5 + beta`, unclipped.
pub fn brightness_contrast(img: &Grid, alpha: f64, beta: f64) -> Grid {
    img.map(|v| alpha * (v - 0.5) + 0.5 + beta)
}

/// Exact rotation by `turns` quarter turns (square grids only).
fn quarter_turn(img: &Grid, turns: u32) -> Grid {
    let n = img.height;
    let mut cur = img.clone();
    for _ in 0..turns % 4 {
        let mut data = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                data[y * n + x] = cur.get(x, n - 1 - y);
            }
        }
        cur = Grid { height: n, width: n, data };
    }
    cur
}

/// Rotates about the grid center, bilinear resampling with zero padding.
///
/// Multiples of 90 degrees on square grids take an exact permutation path.
pub fn rotate(img: &Grid, degrees: f64) -> Grid {
    let wrapped = degrees.rem_euclid(360.0);
    if img.height == img.width && wrapped % 90.0 == 0.0 {
        return quarter_turn(img, (wrapped / 90.0) as u32);
    }
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (h, w) = (img.height, img.width);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let sample = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img.get(y as usize, x as usize)
        }
    };
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cx + cos * dx - sin * dy;
            let sy = cy + sin * dx + cos * dy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            data[y * w + x] = (1.0 - fy) * ((1.0 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1))
                + fy * ((1.0 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
        }
    }
    Grid { height: h, width: w, data }
}

/// Translates content by `(dy, dx)` pixels, replicating edges into the gap.
pub fn shift(img: &Grid, dy: isize, dx: isize) -> Grid {
    let (h, w) = (img.height, img.width);
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = img.get_clamped(y as isize - dy, x as isize - dx);
        }
    }
    Grid { height: h, width: w, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_grid(seed: u64, h: usize, w: usize) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn severity_zero_is_identity() {
        let g = random_grid(1, 7, 9);
        for kind in PerturbKind::ALL {
            let out = perturb_image(&g, &PerturbSpec { kind, severity: 0, seed: 5 }).unwrap();
            assert_eq!(out, g);
        }
    }

    #[test]
    fn four_quarter_turns_restore_grid() {
        let g = random_grid(2, 8, 8);
        let mut cur = g.clone();
        for _ in 0..4 {
            cur = rotate(&cur, 90.0);
        }
        assert_eq!(cur, g);
        assert_ne!(rotate(&g, 90.0), g);
    }

    #[test]
    fn bilinear_path_agrees_with_quarter_turn() {
        let g = random_grid(3, 6, 6);
        let exact = rotate(&g, 90.0);
        let near = rotate(&g, 90.0 + 1e-9);
        for (a, b) in exact.as_slice().iter().zip(near.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let g = Grid::filled(9, 11, 0.37);
        for sigma in BLUR_SIGMA {
            let out = gaussian_blur(&g, sigma);
            assert!(out.as_slice().iter().all(|v| (v - 0.37).abs() < 1e-12));
            let k = gaussian_kernel(sigma);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len(), 2 * (2.0 * sigma).ceil() as usize + 1);
        }
    }

    #[test]
    fn noise_is_reproducible() {
        let g = random_grid(4, 5, 5);
        let spec = PerturbSpec { kind: PerturbKind::Noise, severity: 3, seed: 77 };
        assert_eq!(perturb_image(&g, &spec).unwrap(), perturb_image(&g, &spec).unwrap());
        let other = PerturbSpec { seed: 78, ..spec };
        assert_ne!(perturb_image(&g, &spec).unwrap(), perturb_image(&g, &other).unwrap());
    }

    #[test]
    fn outputs_are_clipped() {
        let g = random_grid(5, 6, 6);
        for kind in PerturbKind::ALL {
            for severity in 1..=MAX_SEVERITY {
                let out = perturb_image(&g, &PerturbSpec { kind, severity, seed: 11 }).unwrap();
                assert!(out.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!((out.height(), out.width()), (6, 6));
            }
        }
    }

    #[test]
    fn unknown_kind_and_severity_rejected() {
        assert!("snow".parse::<PerturbKind>().is_err());
        assert_eq!("rotation".parse::<PerturbKind>().unwrap(), PerturbKind::Rotation);
        let g = random_grid(6, 3, 3);
        assert!(perturb_image(&g, &PerturbSpec { kind: PerturbKind::Blur, severity: 6, seed: 0 }).is_err());
    }

    #[test]
    fn shift_moves_content() {
        let g = Grid::new(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(shift(&g, 0, 1).as_slice(), &[0.0, 0.0, 1.0, 2.0]);
        assert_eq!(shift(&g, 0, -1).as_slice(), &[1.0, 2.0, 3.0, 3.0]);
    }
}
