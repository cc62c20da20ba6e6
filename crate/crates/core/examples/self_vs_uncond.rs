//! Trains a self-guided and an unconditional model on the 8-mode ring with
//! the same seed and budget, then compares sample fidelity, how well the
//! learned prototypes recover the modes, and how evenly data is spread over
//! them.
//!
//! ```text
//! cargo run --release --example self_vs_uncond -- [iters]
//! ```

use std::thread;
use std::time::Instant;

use flowguide::metrics::{assignment_histogram, nmi};
use flowguide::trainer::{eval_rng, evaluate, run_training, Mode, TrainConfig};

/// Returns the final Fréchet distances `(self, uncond)`.
pub fn run_example(iters: u64) -> flowguide::Result<(f64, f64)> {
    let base = TrainConfig {
        iters,
        eval_interval: (iters / 10).max(1),
        ..TrainConfig::default()
    };
    let uncond = TrainConfig {
        mode: Mode::Unconditional,
        ..base.clone()
    };

    let start = Instant::now();
    let (guided_run, uncond_run) = thread::scope(|s| {
        let a = s.spawn(|| run_training(&base, None));
        let b = s.spawn(|| run_training(&uncond, None));
        (a.join().unwrap(), b.join().unwrap())
    });
    let (guided_run, uncond_run) = (guided_run?, uncond_run?);
    println!("trained both in {:.0}s", start.elapsed().as_secs_f64());

    println!("iter   loss_d(self)  loss_d(uncond)  nmi    frechet(self)  frechet(uncond)");
    for (g, u) in guided_run.log.iter().zip(&uncond_run.log) {
        println!(
            "{:>6} {:>12.5} {:>14.5} {:>6.3} {:>14.5} {:>16.5}",
            g.iter, g.loss_d, u.loss_d, g.nmi, g.frechet, u.frechet
        );
    }

    let samples = 8192;
    let eg = evaluate(&guided_run.state, &base, &guided_run.dataset, samples, &mut eval_rng(base.seed, u64::MAX - 1))?;
    let eu = evaluate(&uncond_run.state, &uncond, &uncond_run.dataset, samples, &mut eval_rng(base.seed, u64::MAX - 1))?;
    println!("final frechet ({samples} samples): self {:.5}  uncond {:.5}", eg.frechet, eu.frechet);
    println!("nmi(hard codes, modes) = {:.4}", eg.nmi);
    println!("nmi(nearest prototype, modes) = {:.4}", nmi(&eg.assigned, &guided_run.dataset.labels)?);
    let n = eg.codes.len() as f64;
    let fmt = |h: Vec<usize>| h.iter().map(|&c| format!("{:.3}", c as f64 / n)).collect::<Vec<_>>().join(" ");
    println!("hard-code shares:        {}", fmt(assignment_histogram(&eg.codes, base.clusters)?));
    println!("nearest-prototype shares: {}", fmt(assignment_histogram(&eg.assigned, base.clusters)?));
    Ok((eg.frechet, eu.frechet))
}

#[allow(dead_code)]
fn main() -> flowguide::Result<()> {
    let iters = std::env::args().nth(1).map_or(20_000, |s| s.parse().expect("iters"));
    run_example(iters).map(|_| ())
}
