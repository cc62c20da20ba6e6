//! NMI and ARI on a few labelings of the same points, and the Gaussian
//! Fréchet distance between shifted and rescaled sample sets.
//!
//! ```text
//! cargo run --example metrics_tour
//! ```

use flowguide::metrics::{ari, frechet_distance, nmi};
use flowguide::nn::randn;
use flowguide::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> Result<()> {
    let truth: Vec<usize> = (0..120).map(|i| i / 30).collect();
    let relabeled: Vec<usize> = truth.iter().map(|&l| (l + 1) % 4).collect();
    let merged: Vec<usize> = truth.iter().map(|&l| l / 2).collect();
    let split: Vec<usize> = (0..120).map(|i| i / 15).collect();
    let striped: Vec<usize> = (0..120).map(|i| i % 4).collect();

    println!("{:<22} {:>7} {:>7}", "labeling", "nmi", "ari");
    for (name, l) in [
        ("permuted ids", &relabeled),
        ("pairs merged", &merged),
        ("each split in two", &split),
        ("independent stripes", &striped),
    ] {
        println!("{:<22} {:>7.4} {:>7.4}", name, nmi(l, &truth)?, ari(l, &truth)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = randn(&mut rng, 20_000, 2);
    let b = randn(&mut rng, 20_000, 2);
    println!("squared fréchet distance to N(0, I) samples:");
    println!("  another draw       {:.5}  (exact 0)", frechet_distance(&a, &b)?);
    println!("  shifted by (1, 0)  {:.5}  (exact 1)", frechet_distance(&a, &b.map_rows(|r| [r[0] + 1.0, r[1]]))?);
    println!("  scaled by 2        {:.5}  (exact 2)", frechet_distance(&a, &b.scale(2.0))?);
    Ok(())
}

trait MapRows {
    fn map_rows(&self, f: impl Fn(&[f64]) -> [f64; 2]) -> Self;
}

impl MapRows for flowguide::Tensor {
    fn map_rows(&self, f: impl Fn(&[f64]) -> [f64; 2]) -> Self {
        let rows: Vec<[f64; 2]> = (0..self.rows()).map(|i| f(self.row(i))).collect();
        flowguide::Tensor::from_rows(&rows).expect("rows")
    }
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
