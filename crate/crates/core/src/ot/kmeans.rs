use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Tensor,
    pub labels: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(c: &Tensor, p: &[f64]) -> (usize, f64) {
    let mut best = (0, sq_dist(c.row(0), p));
    for k in 1..c.rows() {
        let d = sq_dist(c.row(k), p);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd's algorithm with farthest-point seeding.
///
/// The first centroid is a point chosen by `seed`; each further centroid is the
/// point farthest from those already chosen. A cluster that empties is moved
/// to the point farthest from its current centroid. Stops early once labels
/// stop changing.
pub fn kmeans(features: &Tensor, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    let n = features.rows();
    if features.rank() != 2 {
        return Err(Error::arg("kmeans expects an N×d matrix"));
    }
    if k == 0 || n < k {
        return Err(Error::arg(format!("kmeans needs 1 ≤ K ≤ N, got K = {k}, N = {n}")));
    }
    if iters == 0 {
        return Err(Error::arg("kmeans needs at least one iteration"));
    }
    let d = features.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![rng.random_range(0..n)];
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(features.row(i), features.row(chosen[0]))).collect();
    while chosen.len() < k {
        let mut far = 0;
        for i in 1..n {
            if min_d[i] > min_d[far] {
                far = i;
            }
        }
        chosen.push(far);
        for (i, md) in min_d.iter_mut().enumerate() {
            *md = md.min(sq_dist(features.row(i), features.row(far)));
        }
    }
    let mut centroids = features.gather_rows(&chosen)?;

    let mut labels = vec![usize::MAX; n];
    let mut objective = Vec::new();
    for _ in 0..iters {
        let mut changed = false;
        let mut obj = 0.0;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (l, dist) = nearest(&centroids, features.row(i));
            changed |= labels[i] != l;
            labels[i] = l;
            dists[i] = dist;
            obj += dist;
        }
        objective.push(obj);
        if !changed {
            break;
        }

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i] * d..(labels[i] + 1) * d].iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let mut far = 0;
                for i in 1..n {
                    if dists[i] > dists[far] {
                        far = i;
                    }
                }
                dists[far] = 0.0;
                centroids.row_mut(c).copy_from_slice(features.row(far));
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s * inv;
                }
            }
        }
    }
    for (i, l) in labels.iter_mut().enumerate() {
        *l = nearest(&centroids, features.row(i)).0;
    }
    Ok(KMeans {
        centroids,
        labels,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;

    #[test]
    fn separated_pairs() {
        let x = Tensor::from_rows(&[[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 12.0]]).unwrap();
        let km = kmeans(&x, 2, 10, 3).unwrap();
        let mut cs: Vec<Vec<f64>> = (0..2).map(|k| km.centroids.row(k).to_vec()).collect();
        cs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(cs, vec![vec![0.0, 0.5], vec![10.0, 11.0]]);
        assert_eq!(km.labels[0], km.labels[1]);
        assert_ne!(km.labels[0], km.labels[2]);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, 17, 3);
        let km = kmeans(&x, 1, 5, 0).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..17).map(|i| x.get(i, c)).sum::<f64>() / 17.0;
            assert!((km.centroids.get(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_points() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(kmeans(&x, 3, 5, 0).is_err());
    }

    /// Straight-line Lloyd reference from the same seeding.
    fn reference_lloyd(x: &Tensor, init: &Tensor, iters: usize) -> Vec<usize> {
        let (n, k, d) = (x.rows(), init.rows(), x.cols());
        let mut c: Vec<Vec<f64>> = (0..k).map(|i| init.row(i).to_vec()).collect();
        let mut labels = vec![0; n];
        for _ in 0..iters {
            for i in 0..n {
                let mut best = 0;
                let mut bd = f64::INFINITY;
                for (j, cj) in c.iter().enumerate() {
                    let dd: f64 = (0..d).map(|q| (x.get(i, q) - cj[q]).powi(2)).sum();
                    if dd < bd {
                        bd = dd;
                        best = j;
                    }
                }
                labels[i] = best;
            }
            for (j, cj) in c.iter_mut().enumerate() {
                let members: Vec<usize> = (0..n).filter(|&i| labels[i] == j).collect();
                if !members.is_empty() {
                    for q in 0..d {
                        cj[q] = members.iter().map(|&i| x.get(i, q)).sum::<f64>() / members.len() as f64;
                    }
                }
            }
        }
        labels
    }

    #[test]
    fn objective_monotone_and_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = randn(&mut rng, 30, 2);
        for i in 0..30 {
            let shift = (i % 3) as f64 * 4.0;
            x.row_mut(i)[0] += shift;
        }
        let km = kmeans(&x, 3, 50, 7).unwrap();
        for w in km.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        let seeds = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let first = rng.random_range(0..30);
            let mut chosen = vec![first];
            while chosen.len() < 3 {
                let far = (0..30)
                    .max_by(|&a, &b| {
                        let da = chosen.iter().map(|&c| sq_dist(x.row(a), x.row(c))).fold(f64::INFINITY, f64::min);
                        let db = chosen.iter().map(|&c| sq_dist(x.row(b), x.row(c))).fold(f64::INFINITY, f64::min);
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    })
                    .unwrap();
                chosen.push(far);
            }
            x.gather_rows(&chosen).unwrap()
        };
        assert_eq!(km.labels, reference_lloyd(&x, &seeds, 50));
    }
}
