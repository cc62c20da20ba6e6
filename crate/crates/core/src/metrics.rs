//! Clustering agreement (NMI, ARI), Gaussian Fréchet distance between sample
//! sets, and assignment histograms.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_lengths(a: &[usize], b: &[usize], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::arg(format!("labelings differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < min {
        return Err(Error::arg(format!("need at least {min} labels, got {}", a.len())));
    }
    Ok(())
}

/// Joint and marginal label counts.
struct Contingency {
    joint: BTreeMap<(usize, usize), u64>,
    rows: BTreeMap<usize, u64>,
    cols: BTreeMap<usize, u64>,
    n: u64,
}

impl Contingency {
    fn new(a: &[usize], b: &[usize]) -> Self {
        let mut c = Contingency {
            joint: BTreeMap::new(),
            rows: BTreeMap::new(),
            cols: BTreeMap::new(),
            n: a.len() as u64,
        };
        for (&x, &y) in a.iter().zip(b) {
            *c.joint.entry((x, y)).or_default() += 1;
            *c.rows.entry(x).or_default() += 1;
            *c.cols.entry(y).or_default() += 1;
        }
        c
    }
}

fn entropy(counts: &BTreeMap<usize, u64>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the geometric mean of the entropies.
/// Two constant labelings score 1; exactly one constant labeling scores 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a, b, 1)?;
    let c = Contingency::new(a, b);
    let n = c.n as f64;
    let (ha, hb) = (entropy(&c.rows, n), entropy(&c.cols, n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = c
        .joint
        .iter()
        .map(|(&(x, y), &nij)| {
            let nij = nij as f64;
            let (ai, bj) = (c.rows[&x] as f64, c.cols[&y] as f64);
            nij / n * (n * nij / (ai * bj)).ln()
        })
        .sum();
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

fn pairs(k: u64) -> u64 {
    k * k.saturating_sub(1) / 2
}

/// Adjusted Rand index. Degenerate cases where the index cannot exceed its
/// expectation (e.g. both labelings constant) score 1.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a, b, 2)?;
    let c = Contingency::new(a, b);
    let index = c.joint.values().map(|&v| pairs(v)).sum::<u64>() as i128;
    let sum_a = c.rows.values().map(|&v| pairs(v)).sum::<u64>() as i128;
    let sum_b = c.cols.values().map(|&v| pairs(v)).sum::<u64>() as i128;
    let total = pairs(c.n) as i128;
    // (index − E) / (max − E) with E = sa·sb/total, scaled by 2·total so that
    // only the final division rounds.
    let num = 2 * (index * total - sum_a * sum_b);
    let den = (sum_a + sum_b) * total - 2 * sum_a * sum_b;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

/// Exact per-cluster counts.
pub fn assignment_histogram(labels: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; k];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::arg(format!("label {l} out of range for {k} clusters")))? += 1;
    }
    Ok(counts)
}

/// Mean and (unbiased) covariance of a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major `d×d`.
    pub cov: Vec<f64>,
}

impl GaussianSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fits a summary to the rows of `samples`; needs at least `d + 1` rows.
    pub fn fit(samples: &Tensor) -> Result<Self> {
        let (n, d) = (samples.rows(), samples.cols());
        if samples.rank() != 2 || n < d + 1 {
            return Err(Error::arg(format!(
                "need at least {} samples of dimension {d}, got {n}",
                d + 1
            )));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(samples.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for i in 0..n {
            let r = samples.row(i);
            for p in 0..d {
                for q in p..d {
                    cov[p * d + q] += (r[p] - mean[p]) * (r[q] - mean[q]);
                }
            }
        }
        for p in 0..d {
            for q in p..d {
                let v = cov[p * d + q] / (n - 1) as f64;
                cov[p * d + q] = v;
                cov[q * d + p] = v;
            }
        }
        Ok(Self { mean, cov })
    }
}

const PSD_TOL: f64 = 1e-10;

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa·Σb)^½)` for 1- or 2-dimensional summaries,
/// with the matrix square root in closed form.
pub fn frechet_from_summaries(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::arg(format!("summary dims differ: {d} vs {}", b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let trace_sqrt = match d {
        1 => {
            let p = a.cov[0] * b.cov[0];
            if p < -PSD_TOL {
                return Err(Error::NonFinite(format!("covariance product {p} is negative")));
            }
            p.max(0.0).sqrt()
        }
        2 => {
            let (sa, sb) = (&a.cov, &b.cov);
            // A = Σa·Σb
            let a00 = sa[0] * sb[0] + sa[1] * sb[2];
            let a01 = sa[0] * sb[1] + sa[1] * sb[3];
            let a10 = sa[2] * sb[0] + sa[3] * sb[2];
            let a11 = sa[2] * sb[1] + sa[3] * sb[3];
            let tr = a00 + a11;
            let det = a00 * a11 - a01 * a10;
            if det < -PSD_TOL || tr < -PSD_TOL {
                return Err(Error::NonFinite(format!(
                    "covariance product is not PSD (trace {tr}, det {det})"
                )));
            }
            let inner = tr + 2.0 * det.max(0.0).sqrt();
            inner.max(0.0).sqrt()
        }
        _ => return Err(Error::arg(format!("closed-form Fréchet distance supports d ≤ 2, got {d}"))),
    };
    let trace_a: f64 = (0..d).map(|i| a.cov[i * d + i]).sum();
    let trace_b: f64 = (0..d).map(|i| b.cov[i * d + i]).sum();
    Ok((mean_term + trace_a + trace_b - 2.0 * trace_sqrt).max(0.0))
}

/// Fréchet distance between Gaussian fits of two sample sets.
pub fn frechet_distance(sa: &Tensor, sb: &Tensor) -> Result<f64> {
    frechet_from_summaries(&GaussianSummary::fit(sa)?, &GaussianSummary::fit(sb)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 0, 1, 2], &[0, 0, 1, 2]).unwrap(), 1.0);
        assert_eq!(nmi(&[3, 3, 3, 3], &[0, 1, 0, 2]).unwrap(), 0.0);
        assert_eq!(nmi(&[1, 1], &[4, 4]).unwrap(), 1.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-15);
        assert!(nmi(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn ari_examples() {
        assert_eq!(ari(&[0, 0, 1, 1, 2], &[0, 0, 1, 1, 2]).unwrap(), 1.0);
        assert!((ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() + 0.5).abs() < 1e-15);
        assert_eq!(ari(&[0, 0, 1, 2], &[5, 5, 7, 9]).unwrap(), 1.0);
        assert!(ari(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(assignment_histogram(&[0, 0, 1], 3).unwrap(), vec![2, 1, 0]);
        assert_eq!(assignment_histogram(&[], 4).unwrap(), vec![0; 4]);
        assert!(assignment_histogram(&[3], 3).is_err());
    }

    #[test]
    fn frechet_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = randn(&mut rng, 200, 2);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-9);

        let point = |x: f64, y: f64| Tensor::from_rows(&[[x, y]; 3]).unwrap();
        let d = frechet_distance(&point(1.0, 2.0), &point(-2.0, 6.0)).unwrap();
        assert!((d - 25.0).abs() < 1e-12);

        let unit = GaussianSummary {
            mean: vec![0.0, 0.0],
            cov: vec![1.0, 0.0, 0.0, 1.0],
        };
        let shifted = GaussianSummary {
            mean: vec![1.0, 0.0],
            ..unit.clone()
        };
        assert!((frechet_from_summaries(&unit, &shifted).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn frechet_rejects_small_sets_and_high_dims() {
        let t = Tensor::zeros(&[2, 2]);
        assert!(frechet_distance(&t, &t).is_err());
        let t3 = Tensor::zeros(&[5, 3]);
        assert!(frechet_distance(&t3, &t3).is_err());
    }

    proptest! {
        #[test]
        fn agreement_scores_symmetric_and_permutation_invariant(
            a in proptest::collection::vec(0usize..4, 2..30),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<usize> = a.iter().map(|_| rand::Rng::random_range(&mut rng, 0..3)).collect();
            let perm = [2usize, 0, 3, 1];
            let a_renamed: Vec<usize> = a.iter().map(|&l| perm[l]).collect();
            prop_assert!((nmi(&a, &b).unwrap() - nmi(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((ari(&a, &b).unwrap() - ari(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((nmi(&a, &b).unwrap() - nmi(&a_renamed, &b).unwrap()).abs() < 1e-12);
            prop_assert_eq!(ari(&a, &b).unwrap(), ari(&a_renamed, &b).unwrap());
        }

        #[test]
        fn frechet_symmetric_and_scales_quadratically(seed in 0u64..500, s in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = randn(&mut rng, 50, 2);
            let b = randn(&mut rng, 40, 2).map(|v| 1.5 * v + 0.7);
            let d = frechet_distance(&a, &b).unwrap();
            prop_assert!((d - frechet_distance(&b, &a).unwrap()).abs() < 1e-9);
            let ds = frechet_distance(&a.scale(s), &b.scale(s)).unwrap();
            prop_assert!((ds - s * s * d).abs() < 1e-9 * (1.0 + s * s * d));
        }
    }
}
