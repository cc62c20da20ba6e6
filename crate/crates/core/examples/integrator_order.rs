//! Empirical convergence order of the Euler and Heun integrators on a linear
//! field with a closed-form flow.
//!
//! ```text
//! cargo run --example integrator_order
//! ```

use flowguide::sampler::{integrate, Method, SamplerConfig};
use flowguide::{Result, Tensor};

/// Returns the fitted log-log slopes for Euler and Heun.
pub fn run_example() -> Result<(f64, f64)> {
    // dx/dt = −x + t; integrating back from t = 1 to 0.
    let field = |x: &Tensor, t: f64| Ok(x.map(|v| -v + t));
    let exact = |x1: f64| x1 * 1f64.exp() - 1.0;
    let x1 = Tensor::matrix(1, 1, vec![0.7])?;
    let want = exact(0.7);

    let mut slopes = Vec::new();
    for method in [Method::Euler, Method::Heun] {
        let mut pts = Vec::new();
        println!("{}:", method.name());
        for steps in [10, 20, 40, 80, 160] {
            let cfg = SamplerConfig {
                steps,
                guidance: 0.0,
                method,
            };
            let err = (integrate(&field, &x1, &cfg)?.samples.get(0, 0) - want).abs();
            println!("  N = {steps:>3}  error {err:.3e}");
            pts.push(((steps as f64).ln(), err.ln()));
        }
        let n = pts.len() as f64;
        let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        println!("  order ≈ {:.3}", -slope);
        slopes.push(-slope);
    }
    Ok((slopes[0], slopes[1]))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
