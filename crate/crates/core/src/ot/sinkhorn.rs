use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    /// Inverse entropic temperature; the kernel is `exp(λ·score)`.
    pub lambda: f64,
    /// Column/row normalization rounds.
    pub iters: usize,
    /// Stopping tolerance on the column-marginal residual, checked after each
    /// round. Zero always runs `iters` rounds.
    pub convergence_tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 20.0,
            iters: 3,
            convergence_tol: 0.0,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("sk_lambda must be positive, got {}", self.lambda)));
        }
        if self.iters == 0 {
            return Err(Error::Config("sk_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// A `K×B` coupling between prototypes (rows) and batch examples (columns)
/// with row mass `1/K` and column mass `1/B`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    p: Tensor,
}

impl TransportPlan {
    /// Wraps an arbitrary nonnegative matrix, e.g. for tests.
    pub fn from_matrix(p: Tensor) -> Result<Self> {
        if p.rank() != 2 || p.data().iter().any(|&v| v < 0.0) {
            return Err(Error::arg("a transport plan is a nonnegative matrix"));
        }
        Ok(Self { p })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.p
    }

    pub fn clusters(&self) -> usize {
        self.p.rows()
    }

    pub fn batch(&self) -> usize {
        self.p.cols()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.clusters()).map(|i| self.p.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.batch()];
        for i in 0..self.clusters() {
            for (acc, v) in s.iter_mut().zip(self.p.row(i)) {
                *acc += v;
            }
        }
        s
    }

    /// Rounds the plan to one cluster per column (argmax, lowest index on ties).
    pub fn hard_codes(&self) -> Vec<usize> {
        (0..self.batch())
            .map(|b| {
                let mut best = 0;
                for k in 1..self.clusters() {
                    if self.p.get(k, b) > self.p.get(best, b) {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

pub fn hard_codes(plan: &TransportPlan) -> Vec<usize> {
    plan.hard_codes()
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Entropic transport plan for similarity `scores[K×B]`, computed in the log
/// domain. Each round normalizes columns to `1/B` and then rows to `1/K`, so
/// the row marginals hold to rounding error on return.
pub fn sinkhorn(scores: &Tensor, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    if scores.rank() != 2 {
        return Err(Error::arg(format!("scores must be a matrix, got {:?}", scores.shape())));
    }
    if !scores.all_finite() {
        return Err(Error::NonFinite("sinkhorn scores".into()));
    }
    let (k, b) = (scores.rows(), scores.cols());
    let log_k: Vec<f64> = scores.data().iter().map(|s| cfg.lambda * s).collect();
    let at = |i: usize, j: usize| log_k[i * b + j];
    let (log_row, log_col) = (-(k as f64).ln(), -(b as f64).ln());
    let mut u = vec![0.0; k];
    let mut v = vec![0.0; b];

    for _ in 0..cfg.iters {
        for (j, vj) in v.iter_mut().enumerate() {
            let lse = log_sum_exp((0..k).map(|i| at(i, j) + u[i]));
            if lse == f64::NEG_INFINITY {
                return Err(Error::NonFinite(format!("sinkhorn column {j} has no mass")));
            }
            *vj = log_col - lse;
        }
        for (i, ui) in u.iter_mut().enumerate() {
            let lse = log_sum_exp((0..b).map(|j| at(i, j) + v[j]));
            if lse == f64::NEG_INFINITY {
                return Err(Error::NonFinite(format!("sinkhorn row {i} has no mass")));
            }
            *ui = log_row - lse;
        }
        if cfg.convergence_tol > 0.0 {
            let resid = (0..b)
                .map(|j| {
                    let s: f64 = (0..k).map(|i| (at(i, j) + u[i] + v[j]).exp()).sum();
                    (s - 1.0 / b as f64).abs()
                })
                .fold(0.0, f64::max);
            if resid < cfg.convergence_tol {
                break;
            }
        }
    }

    let mut p = Vec::with_capacity(k * b);
    for i in 0..k {
        for j in 0..b {
            p.push((at(i, j) + u[i] + v[j]).exp());
        }
    }
    Ok(TransportPlan {
        p: Tensor::new(vec![k, b], p)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(lambda: f64, iters: usize) -> SinkhornConfig {
        SinkhornConfig {
            lambda,
            iters,
            convergence_tol: 0.0,
        }
    }

    fn random_scores(seed: u64, k: usize, b: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(k, b, (0..k * b).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Exponential-domain scaling iterations run until both marginals hold to 1e-12.
    fn fixed_point_oracle(scores: &Tensor, lambda: f64) -> Vec<f64> {
        let (k, b) = (scores.rows(), scores.cols());
        let kern: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..b).map(|j| (lambda * scores.get(i, j)).exp()).collect())
            .collect();
        let mut r = vec![1.0; k];
        let mut c = vec![1.0; b];
        for _ in 0..1_000_000 {
            for j in 0..b {
                let s: f64 = (0..k).map(|i| r[i] * kern[i][j]).sum();
                c[j] = 1.0 / (b as f64 * s);
            }
            for i in 0..k {
                let s: f64 = (0..b).map(|j| kern[i][j] * c[j]).sum();
                r[i] = 1.0 / (k as f64 * s);
            }
            let col_resid = (0..b)
                .map(|j| ((0..k).map(|i| r[i] * kern[i][j] * c[j]).sum::<f64>() - 1.0 / b as f64).abs())
                .fold(0.0, f64::max);
            if col_resid < 1e-12 {
                break;
            }
        }
        let mut out = Vec::new();
        for i in 0..k {
            for j in 0..b {
                out.push(r[i] * kern[i][j] * c[j]);
            }
        }
        out
    }

    #[test]
    fn constant_scores_give_uniform_plan() {
        for (k, b) in [(1, 1), (3, 5), (8, 32)] {
            let s = Tensor::full(&[k, b], 0.37);
            let p = sinkhorn(&s, &cfg(20.0, 3)).unwrap();
            let want = 1.0 / (k * b) as f64;
            for &v in p.matrix().data() {
                assert!((v - want).abs() <= 4.0 * f64::EPSILON * want, "{v} vs {want}");
            }
        }
    }

    #[test]
    fn large_lambda_concentrates_on_permutation() {
        let s = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = sinkhorn(&s, &cfg(100.0, 3)).unwrap();
        let want = [0.5, 0.0, 0.0, 0.5];
        for (a, b) in p.matrix().data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn converged_plan_matches_oracle() {
        let s = random_scores(3, 3, 4);
        let p = sinkhorn(&s, &cfg(5.0, 500)).unwrap();
        let oracle = fixed_point_oracle(&s, 5.0);
        for (a, b) in p.matrix().data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn all_entries_positive() {
        let p = sinkhorn(&random_scores(9, 4, 6), &cfg(20.0, 3)).unwrap();
        assert!(p.matrix().data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let s = Tensor::from_parts(vec![1, 2], vec![0.0, f64::INFINITY]);
        assert!(sinkhorn(&s, &cfg(1.0, 1)).is_err());
        assert!(sinkhorn(&Tensor::zeros(&[2, 2]), &cfg(0.0, 1)).is_err());
        assert!(sinkhorn(&Tensor::zeros(&[2, 2]), &cfg(1.0, 0)).is_err());
    }

    #[test]
    fn column_marginals_approach_uniform_monotonically() {
        let s = random_scores(11, 5, 9);
        let kl = |p: &TransportPlan| {
            let b = p.batch() as f64;
            p.col_sums().iter().map(|&c| c * (c * b).ln()).sum::<f64>()
        };
        let mut last = f64::INFINITY;
        for iters in 1..30 {
            let d = kl(&sinkhorn(&s, &cfg(10.0, iters)).unwrap());
            assert!(d <= last + 1e-15, "iters {iters}: {d} > {last}");
            last = d;
        }
    }

    #[test]
    fn hard_code_examples() {
        let p = TransportPlan::from_matrix(Tensor::matrix(2, 2, vec![0.4, 0.1, 0.1, 0.4]).unwrap()).unwrap();
        assert_eq!(p.hard_codes(), vec![0, 1]);
        let u = TransportPlan::from_matrix(Tensor::full(&[3, 4], 1.0 / 12.0)).unwrap();
        assert_eq!(u.hard_codes(), vec![0; 4]);

        let plan = sinkhorn(&random_scores(5, 3, 8), &cfg(3.0, 3)).unwrap();
        let brute: Vec<usize> = (0..8)
            .map(|b| {
                let col: Vec<f64> = (0..3).map(|k| plan.matrix().get(k, b)).collect();
                let max = col.iter().cloned().fold(f64::MIN, f64::max);
                col.iter().position(|&v| v == max).unwrap()
            })
            .collect();
        assert_eq!(plan.hard_codes(), brute);
    }

    proptest! {
        #[test]
        fn row_marginals_exact_and_codes_in_range(seed in 0u64..500, k in 1usize..9, b in 1usize..33, lambda in 1.0f64..50.0) {
            let p = sinkhorn(&random_scores(seed, k, b), &cfg(lambda, 3)).unwrap();
            for r in p.row_sums() {
                prop_assert!((r - 1.0 / k as f64).abs() < 1e-14);
            }
            prop_assert!(p.hard_codes().iter().all(|&c| c < k));
        }

        #[test]
        fn shift_invariant(seed in 0u64..500, shift in -5.0f64..5.0) {
            let s = random_scores(seed, 4, 7);
            let shifted = s.map(|v| v + shift);
            let c = cfg(20.0, 3);
            let a = sinkhorn(&s, &c).unwrap();
            let b = sinkhorn(&shifted, &c).unwrap();
            prop_assert!(a.matrix().max_abs_diff(b.matrix()) < 1e-12);
        }
    }
}
