//! Offline self-guidance: pretrain an unconditional model, cluster its
//! features with k-means, then fine-tune on the fixed one-hot cluster codes
//! with a learnable null condition and sample per code.
//!
//! ```text
//! cargo run --release --example offline_guidance -- [iters]
//! ```

use flowguide::datasets::by_name;
use flowguide::metrics::nmi;
use flowguide::nn::{randn, Condition};
use flowguide::sampler::{integrate, GuidedVelocity};
use flowguide::trainer::{cluster_features, run_training, train_offline, Mode, TrainConfig};
use flowguide::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Returns the NMI of the k-means clusters against the ring modes and the
/// mean distance of each code's samples from that code's centroid in data space.
pub fn run_example(iters: u64) -> Result<(f64, f64)> {
    let cfg = TrainConfig {
        n: 2048,
        hidden_layers: 3,
        width: 64,
        batch: 128,
        iters,
        eval_interval: iters,
        eval_samples: 256,
        mode: Mode::Unconditional,
        ..TrainConfig::default()
    };
    let pre = run_training(&cfg, None)?;
    let dataset = by_name(&cfg.dataset, cfg.n, cfg.data_noise, cfg.seed)?;
    let data = pre.state.standardizer.apply(&dataset.samples);
    let km = cluster_features(&pre.state, &cfg, &data, 8, 0)?;
    let cluster_nmi = nmi(&km.labels, &dataset.labels)?;
    println!("k-means on pretrained features: nmi vs modes {cluster_nmi:.3}");

    let tuned = train_offline(&pre.state.field, &data, &km.labels, 8, 0.2, &TrainConfig { iters: iters / 2, ..cfg.clone() })?;
    let first = tuned.losses.iter().take(50).sum::<f64>() / 50f64.min(tuned.losses.len() as f64);
    let last = tuned.losses.iter().rev().take(50).sum::<f64>() / 50f64.min(tuned.losses.len() as f64);
    println!("fine-tuning loss {first:.4} -> {last:.4}");

    let dim = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut spread = 0.0;
    for k in 0..8 {
        let members: Vec<usize> = (0..km.labels.len()).filter(|&i| km.labels[i] == k).collect();
        let centre = [0, 1].map(|j| members.iter().map(|&i| dataset.samples.get(i, j)).sum::<f64>() / members.len() as f64);
        let model = GuidedVelocity {
            field: &tuned.field,
            table: tuned.table(),
            conds: vec![Condition::one_hot(k, dim)?],
            guidance: cfg.sampler.guidance,
        };
        let x1 = randn(&mut rng, 64, 2).scale(cfg.path.prior_scale());
        let xs = pre.state.standardizer.invert(&integrate(&model, &x1, &cfg.sampler)?.samples);
        let d = (0..64).map(|i| ((xs.get(i, 0) - centre[0]).powi(2) + (xs.get(i, 1) - centre[1]).powi(2)).sqrt()).sum::<f64>() / 64.0;
        println!("code {k}: {} members, centre ({:+.2}, {:+.2}), mean sample distance {d:.3}", members.len(), centre[0], centre[1]);
        spread += d / 8.0;
    }
    Ok((cluster_nmi, spread))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let iters = std::env::args().nth(1).map_or(3000, |s| s.parse().expect("iters"));
    run_example(iters).map(|_| ())
}
