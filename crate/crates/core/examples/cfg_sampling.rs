//! Classifier-free guidance with learned prototypes: after a short self-guided
//! run on the ring, samples are drawn per prototype at several guidance
//! strengths and scored by how concentrated they are on a single ring mode.
//!
//! ```text
//! cargo run --release --example cfg_sampling -- [iters] [out_dir]
//! ```

use std::f64::consts::PI;
use std::path::Path;

use flowguide::io::svg;
use flowguide::nn::{randn, Condition};
use flowguide::sampler::{integrate, GuidedVelocity, SamplerConfig};
use flowguide::trainer::{run_training, TrainConfig};
use flowguide::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Ring mode whose centre is angularly closest to `(x, y)`.
fn ring_mode(x: f64, y: f64) -> usize {
    ((y.atan2(x) / (2.0 * PI / 8.0)).round() as i64).rem_euclid(8) as usize
}

/// Returns `(guidance, mean purity)` pairs; purity is the share of a
/// prototype's samples falling in its most common mode.
pub fn run_example(iters: u64, out: &Path) -> Result<Vec<(f64, f64)>> {
    let cfg = TrainConfig {
        n: 2048,
        hidden_layers: 3,
        width: 64,
        batch: 128,
        iters,
        eval_interval: iters,
        eval_samples: 256,
        ..TrainConfig::default()
    };
    let run = run_training(&cfg, None)?;
    let state = &run.state;
    println!("trained {iters} iterations, nmi {:.3}", run.log.last().map_or(f64::NAN, |r| r.nmi));
    std::fs::create_dir_all(out).map_err(|e| flowguide::Error::io(out, e))?;

    let per = 128;
    let mut results = Vec::new();
    for g in [0.0, 0.4, 1.0, 3.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut purity = 0.0;
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for k in 0..cfg.clusters {
            let model = GuidedVelocity {
                field: &state.field,
                table: cfg.table(state),
                conds: vec![Condition::Prototype(k)],
                guidance: g,
            };
            let x1 = randn(&mut rng, per, 2).scale(cfg.path.prior_scale());
            let sampler = SamplerConfig { guidance: g, ..cfg.sampler };
            let xs = state.standardizer.invert(&integrate(&model, &x1, &sampler)?.samples);
            let mut hist = [0usize; 8];
            for i in 0..per {
                hist[ring_mode(xs.get(i, 0), xs.get(i, 1))] += 1;
                points.push([xs.get(i, 0), xs.get(i, 1)]);
                labels.push(Some(k));
            }
            purity += *hist.iter().max().unwrap_or(&0) as f64 / per as f64;
        }
        purity /= cfg.clusters as f64;
        svg::write(&out.join(format!("cfg_g{g}.svg")), &svg::scatter_svg(&points, &labels)?)?;
        println!("guidance {g:>4.1}: mean per-prototype purity {purity:.3}");
        results.push((g, purity));
    }
    Ok(results)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let iters = args.next().map_or(4000, |s| s.parse().expect("iters"));
    let out = args.next().unwrap_or_else(|| "out/cfg_sampling".into());
    run_example(iters, Path::new(&out)).map(|_| ())
}
