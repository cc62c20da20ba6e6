//! Tabulates the data/noise coefficients of the three probability paths and
//! checks each target velocity against a central difference of the path.
//!
//! ```text
//! cargo run --example probability_paths
//! ```

use flowguide::nn::randn;
use flowguide::paths::{interpolate, target_velocity, PathKind};
use flowguide::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Returns the worst velocity error per path, in the order printed.
pub fn run_example() -> Result<Vec<(String, f64)>> {
    let paths = [
        PathKind::ConstantVelocity,
        PathKind::from_name("vp", PathKind::DEFAULT_VP_BETA, PathKind::DEFAULT_VE_ALPHA_MAX)?,
        PathKind::from_name("ve", PathKind::DEFAULT_VP_BETA, PathKind::DEFAULT_VE_ALPHA_MAX)?,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = randn(&mut rng, 32, 2);
    let x1 = randn(&mut rng, 32, 2);

    println!("{:>4} {:>6} {:>10} {:>10}", "path", "t", "data", "noise");
    for path in &paths {
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let (a, s) = path.coefficients(t);
            println!("{:>4} {:>6.2} {:>10.5} {:>10.5}", path.name(), t, a, s);
        }
    }

    let h = 1e-5;
    let mut out = Vec::new();
    for path in &paths {
        let mut worst = 0.0f64;
        for i in 1..20 {
            let t = i as f64 / 20.0;
            let fd = interpolate(*path, &x0, &x1, t + h)?
                .zip_with(&interpolate(*path, &x0, &x1, t - h)?, |a, b| (a - b) / (2.0 * h))?;
            let v = target_velocity(*path, &x0, &x1, t)?;
            let scale = v.data().iter().fold(1.0f64, |m, a| m.max(a.abs()));
            worst = worst.max(v.max_abs_diff(&fd) / scale);
        }
        println!("{}: prior scale {:.3}, max relative velocity error {:.2e}", path.name(), path.prior_scale(), worst);
        out.push((path.name().to_string(), worst));
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
