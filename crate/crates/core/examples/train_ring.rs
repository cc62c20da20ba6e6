//! Self-guided training on the 8-mode ring with a reduced network, writing
//! `metrics.csv` and `final.ckpt`, then reloading the checkpoint and checking
//! it evaluates identically.
//!
//! ```text
//! cargo run --release --example train_ring -- [iters] [out_dir]
//! ```

use std::path::Path;

use flowguide::io::checkpoint;
use flowguide::trainer::{eval_rng, evaluate, run_training, TrainConfig};
use flowguide::Result;

pub fn small_config(iters: u64) -> TrainConfig {
    TrainConfig {
        n: 2048,
        hidden_layers: 3,
        width: 64,
        batch: 128,
        iters,
        eval_interval: (iters / 5).max(1),
        eval_samples: 512,
        ..TrainConfig::default()
    }
}

/// Returns the last logged Fréchet distance.
pub fn run_example(iters: u64, out: &Path) -> Result<f64> {
    let cfg = small_config(iters);
    let run = run_training(&cfg, Some(out))?;
    println!("{:>6} {:>9} {:>9} {:>6} {:>6} {:>6} {:>8}", "iter", "loss_d", "loss_sk", "w_sk", "nmi", "ari", "frechet");
    for r in &run.log {
        println!(
            "{:>6} {:>9.4} {:>9.4} {:>6.3} {:>6.3} {:>6.3} {:>8.4}",
            r.iter, r.loss_d, r.loss_sk, r.sk_weight, r.nmi, r.ari, r.frechet
        );
    }

    let (loaded_cfg, loaded) = checkpoint::load(&out.join("final.ckpt"))?;
    let a = evaluate(&run.state, &cfg, &run.dataset, 256, &mut eval_rng(cfg.seed, 0))?;
    let b = evaluate(&loaded, &loaded_cfg, &run.dataset, 256, &mut eval_rng(cfg.seed, 0))?;
    println!(
        "reloaded checkpoint at iter {}: fréchet {:.6} vs {:.6} in memory",
        loaded.iter, b.frechet, a.frechet
    );
    Ok(run.log.last().map_or(f64::NAN, |r| r.frechet))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let iters = args.next().map_or(3000, |s| s.parse().expect("iters"));
    let out = args.next().unwrap_or_else(|| "out/train_ring".into());
    run_example(iters, Path::new(&out)).map(|_| ())
}
