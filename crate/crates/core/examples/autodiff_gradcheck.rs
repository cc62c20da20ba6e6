//! Builds a small two-layer network on the tape, runs reverse mode and checks
//! every parameter gradient against central finite differences.
//!
//! ```text
//! cargo run --example autodiff_gradcheck
//! ```

use flowguide::autodiff::{grad_check, Graph, Var};
use flowguide::nn::randn;
use flowguide::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(g: &mut Graph, p: &[Var], x: &Tensor, y: &Tensor) -> Result<Var> {
    let x = g.constant(x.clone());
    let y = g.constant(y.clone());
    let h = g.matmul(x, p[0])?;
    let h = g.add(h, p[1])?;
    let h = g.silu(h)?;
    let out = g.matmul(h, p[2])?;
    let out = g.tanh(out)?;
    g.mse(out, y)
}

/// Returns the worst relative gradient error.
pub fn run_example() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, 16, 3);
    let y = randn(&mut rng, 16, 2);
    let params = vec![randn(&mut rng, 3, 8), randn(&mut rng, 1, 8), randn(&mut rng, 8, 2).scale(0.5)];

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.parameter(p.clone())).collect();
    let root = loss(&mut g, &vars, &x, &y)?;
    let grads = g.backward(root)?;
    println!("loss = {:.6}  ({} tape nodes)", g.value(root).item().unwrap_or(f64::NAN), g.len());
    for (name, v) in ["w1", "b1", "w2"].iter().zip(&vars) {
        let norm = grads.get(*v).map_or(0.0, |t| t.data().iter().map(|a| a * a).sum::<f64>().sqrt());
        println!("|d loss / d {name}| = {norm:.6}");
    }

    let err = grad_check(|g, p| loss(g, p, &x, &y), &params, 1e-6)?;
    println!("max relative gradient error = {err:.3e}");
    Ok(err)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
