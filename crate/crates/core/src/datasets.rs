//! Deterministic 2-D toy distributions with ground-truth region labels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    /// `[N×2]`
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub modes: usize,
}

/// Per-axis affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, v) in x.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 0.0 { s } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }
}

fn finish(name: &str, seed: u64, rows: Vec<[f64; 2]>, labels: Vec<usize>, modes: usize) -> Result<Dataset> {
    if rows.is_empty() {
        return Err(Error::arg(format!("{name}: dataset would be empty")));
    }
    Ok(Dataset {
        name: name.to_string(),
        seed,
        samples: Tensor::from_rows(&rows)?,
        labels,
        modes,
    })
}

fn noise(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::arg(format!("noise std {std}: {e}")))
}

/// `modes` isotropic Gaussians evenly spaced on a circle of `radius`.
/// Samples are ordered by mode.
pub fn make_ring(modes: usize, n_per_mode: usize, radius: f64, noise_std: f64, seed: u64) -> Result<Dataset> {
    if modes == 0 {
        return Err(Error::arg("ring needs at least one mode"));
    }
    let normal = noise(noise_std)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(modes * n_per_mode);
    let mut labels = Vec::with_capacity(modes * n_per_mode);
    for k in 0..modes {
        let angle = 2.0 * PI * k as f64 / modes as f64;
        let (s, c) = angle.sin_cos();
        let center = [radius * c, radius * s];
        for _ in 0..n_per_mode {
            rows.push([center[0] + normal.sample(&mut rng), center[1] + normal.sample(&mut rng)]);
            labels.push(k);
        }
    }
    finish(&format!("ring{modes}"), seed, rows, labels, modes)
}

/// Two interleaved unit half-circles: the upper arc centred at the origin
/// (label 0) and the lower arc centred at `(1, 0.5)` (label 1).
pub fn make_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    let normal = noise(noise_std)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_outer = n.div_ceil(2);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (label, count, idx) = if i < n_outer { (0, n_outer, i) } else { (1, n - n_outer, i - n_outer) };
        let theta = if count > 1 { PI * idx as f64 / (count - 1) as f64 } else { 0.0 };
        let (s, c) = theta.sin_cos();
        let p = if label == 0 { [c, s] } else { [1.0 - c, 0.5 - s] };
        rows.push([p[0] + normal.sample(&mut rng), p[1] + normal.sample(&mut rng)]);
        labels.push(label);
    }
    finish("moons", seed, rows, labels, 2)
}

/// Side length of one checkerboard cell; the board spans `[-2, 2]²`.
pub const CHECKER_CELL: f64 = 1.0;

/// Uniform samples over the 8 filled cells of a 4×4 board on `[-2, 2]²`.
/// Cell `(i, j)` (column `i`, row `j`) is filled when `i + j` is even and
/// carries label `2·i + j / 2`.
pub fn make_checkerboard(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..8usize);
        let (i, j) = checker_cell(label);
        let x = -2.0 + CHECKER_CELL * (i as f64 + rng.random::<f64>());
        let y = -2.0 + CHECKER_CELL * (j as f64 + rng.random::<f64>());
        rows.push([x, y]);
        labels.push(label);
    }
    finish("checkerboard", seed, rows, labels, 8)
}

/// Column and row of the filled cell with the given label.
pub fn checker_cell(label: usize) -> (usize, usize) {
    let i = label / 2;
    let j = 2 * (label % 2) + (i % 2);
    (i, j)
}

/// Builds a dataset by CLI/config name: `ring8`, `moons` or `checkerboard`.
pub fn by_name(name: &str, n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    match name {
        "ring8" => make_ring(8, n / 8, 1.0, noise_std, seed),
        "moons" => make_moons(n, noise_std, seed),
        "checkerboard" => make_checkerboard(n, seed),
        other => Err(Error::Config(format!(
            "unknown dataset `{other}` (expected ring8, moons or checkerboard)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_ring_hits_centres() {
        let d = make_ring(4, 3, 1.0, 0.0, 0).unwrap();
        let expected = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        for i in 0..12 {
            let e = expected[d.labels[i]];
            assert!((d.samples.get(i, 0) - e[0]).abs() < 1e-15);
            assert!((d.samples.get(i, 1) - e[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn generators_are_seed_deterministic() {
        assert_eq!(make_ring(8, 50, 1.0, 0.1, 3).unwrap(), make_ring(8, 50, 1.0, 0.1, 3).unwrap());
        assert_eq!(make_moons(99, 0.05, 3).unwrap(), make_moons(99, 0.05, 3).unwrap());
        assert_eq!(make_checkerboard(99, 3).unwrap(), make_checkerboard(99, 3).unwrap());
        assert_ne!(make_ring(8, 50, 1.0, 0.1, 3).unwrap(), make_ring(8, 50, 1.0, 0.1, 4).unwrap());
    }

    #[test]
    fn ring_mode_means_within_standard_error() {
        let (n, std) = (400, 0.1);
        let d = make_ring(8, n, 2.0, std, 11).unwrap();
        for k in 0..8 {
            let angle = 2.0 * PI * k as f64 / 8.0;
            let centre = [2.0 * angle.cos(), 2.0 * angle.sin()];
            for axis in 0..2 {
                let mean: f64 = (0..d.labels.len())
                    .filter(|&i| d.labels[i] == k)
                    .map(|i| d.samples.get(i, axis))
                    .sum::<f64>()
                    / n as f64;
                assert!((mean - centre[axis]).abs() < 3.0 * std / (n as f64).sqrt());
            }
        }
    }

    #[test]
    fn noiseless_moons_lie_on_unit_arcs() {
        let d = make_moons(101, 0.0, 1).unwrap();
        for i in 0..101 {
            let (x, y) = (d.samples.get(i, 0), d.samples.get(i, 1));
            let (cx, cy) = if d.labels[i] == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn checkerboard_cells_match_labels() {
        let d = make_checkerboard(2000, 5).unwrap();
        for i in 0..2000 {
            let ci = ((d.samples.get(i, 0) + 2.0) / CHECKER_CELL).floor() as usize;
            let cj = ((d.samples.get(i, 1) + 2.0) / CHECKER_CELL).floor() as usize;
            assert_eq!((ci + cj) % 2, 0);
            assert_eq!(d.labels[i], 2 * ci + cj / 2);
        }
    }

    #[test]
    fn standardizer_round_trip() {
        let d = make_moons(64, 0.1, 2).unwrap();
        let s = Standardizer::fit(&d.samples);
        let z = s.apply(&d.samples);
        let back = s.invert(&z);
        assert!(back.max_abs_diff(&d.samples) < 1e-12);
        let zs = Standardizer::fit(&z);
        for j in 0..2 {
            assert!(zs.mean[j].abs() < 1e-12);
            assert!((zs.std[j] - 1.0).abs() < 1e-12);
        }
    }
}
