//! Online prototype clustering with equipartitioned Sinkhorn codes.
//!
//! Unit-norm features are drawn around four directions on the sphere. Each
//! step computes the transport plan of a batch against the prototypes and
//! takes a gradient step on the Sinkhorn loss with respect to the prototypes
//! only, then re-normalizes them.
//!
//! ```text
//! cargo run --example sinkhorn_clustering
//! ```

use flowguide::autodiff::Graph;
use flowguide::metrics::{assignment_histogram, nmi};
use flowguide::nn::randn;
use flowguide::ot::{assign_all, sinkhorn, sk_loss, sk_loss_var, Prototypes, SinkhornConfig};
use flowguide::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CENTRES: [[f64; 3]; 4] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-0.6, -0.6, -0.5]];

fn features(rng: &mut ChaCha8Rng, n: usize) -> Result<(Tensor, Vec<usize>)> {
    let noise = randn(rng, n, 3).scale(0.15);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let l = rng.random_range(0..CENTRES.len());
        let v: Vec<f64> = (0..3).map(|j| CENTRES[l][j] + noise.get(i, j)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        rows.push(v.iter().map(|a| a / norm).collect::<Vec<_>>());
        labels.push(l);
    }
    Ok((Tensor::from_rows(&rows)?, labels))
}

/// Returns NMI between nearest-prototype assignments and the true groups.
pub fn run_example() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = SinkhornConfig::default();
    let mut protos = Prototypes::random(4, 3, &mut rng)?;
    let (eval_z, eval_labels) = features(&mut rng, 2000)?;

    let plan = sinkhorn(&protos.scores(&eval_z)?, &cfg)?;
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    println!(
        "plan marginals: rows in [{:.5}, {:.5}] (target {:.5}), columns in [{:.2e}, {:.2e}] (target {:.2e})",
        rows.iter().cloned().fold(f64::INFINITY, f64::min),
        rows.iter().cloned().fold(0.0, f64::max),
        1.0 / 4.0,
        cols.iter().cloned().fold(f64::INFINITY, f64::min),
        cols.iter().cloned().fold(0.0, f64::max),
        1.0 / 2000.0,
    );

    for step in 0..=300 {
        let (z, _) = features(&mut rng, 128)?;
        let plan = sinkhorn(&protos.scores(&z)?, &cfg)?;
        if step % 50 == 0 {
            let assigned = assign_all(&protos, &eval_z)?;
            println!(
                "step {step:>3}  loss {:>9.5}  nmi {:.3}",
                sk_loss(&plan, &protos, &z)?,
                nmi(&assigned, &eval_labels)?
            );
        }
        let mut g = Graph::new();
        let m = g.parameter(protos.matrix().clone());
        let zv = g.constant(z);
        let loss = sk_loss_var(&mut g, &plan, m, zv)?;
        let grads = g.backward(loss)?;
        let grad = grads.get(m).expect("prototype gradient");
        protos = Prototypes::from_matrix(protos.matrix().zip_with(grad, |p, d| p - 0.5 * d)?)?;
    }

    let assigned = assign_all(&protos, &eval_z)?;
    let score = nmi(&assigned, &eval_labels)?;
    println!("cluster sizes {:?}", assignment_histogram(&assigned, 4)?);
    println!("final nmi {score:.3}");
    Ok(score)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
