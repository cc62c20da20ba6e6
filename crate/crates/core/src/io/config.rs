//! Flat `key = value` configuration text with `#` comments.
//!
//! Every [`TrainConfig`] field has a key; omitted keys keep their defaults and
//! unknown or repeated keys are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::paths::PathKind;

const DEFAULT_VP_BETA: f64 = PathKind::DEFAULT_VP_BETA;
const DEFAULT_VE_ALPHA_MAX: f64 = PathKind::DEFAULT_VE_ALPHA_MAX;
use crate::sampler::Method;
use crate::trainer::{Mode, TrainConfig};

pub const KEYS: &[&str] = &[
    "dataset",
    "n",
    "data_noise",
    "path",
    "vp_beta",
    "ve_alpha_max",
    "hidden_layers",
    "width",
    "time_freqs",
    "feature_dim",
    "clusters",
    "sk_lambda",
    "sk_iters",
    "feature_t",
    "feature_layer",
    "sk_mask_lo",
    "sk_mask_hi",
    "iters",
    "batch",
    "warmup",
    "p_drop",
    "lr",
    "ema_decay",
    "mode",
    "eval_interval",
    "eval_samples",
    "sample_steps",
    "guidance",
    "method",
    "seed",
];

fn value<T: std::str::FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("line {line}: `{raw}` is not a valid value for `{key}`")))
}

/// Parses config text. Does not validate ranges; see [`TrainConfig::validate`].
pub fn parse(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen = BTreeSet::new();
    let (mut path_name, mut vp_beta, mut ve_alpha_max) = (cfg.path.name().to_string(), DEFAULT_VP_BETA, DEFAULT_VE_ALPHA_MAX);
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, raw) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`, got `{line}`")))?;
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("line {line_no}: unknown key `{key}`")));
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {line_no}: key `{key}` given twice")));
        }
        match key {
            "dataset" => cfg.dataset = raw.to_string(),
            "n" => cfg.n = value(key, raw, line_no)?,
            "data_noise" => cfg.data_noise = value(key, raw, line_no)?,
            "path" => path_name = raw.to_string(),
            "vp_beta" => vp_beta = value(key, raw, line_no)?,
            "ve_alpha_max" => ve_alpha_max = value(key, raw, line_no)?,
            "hidden_layers" => cfg.hidden_layers = value(key, raw, line_no)?,
            "width" => cfg.width = value(key, raw, line_no)?,
            "time_freqs" => cfg.time_freqs = value(key, raw, line_no)?,
            "feature_dim" => cfg.feature_dim = value(key, raw, line_no)?,
            "clusters" => cfg.clusters = value(key, raw, line_no)?,
            "sk_lambda" => cfg.sk.lambda = value(key, raw, line_no)?,
            "sk_iters" => cfg.sk.iters = value(key, raw, line_no)?,
            "feature_t" => cfg.feature_t = value(key, raw, line_no)?,
            "feature_layer" => cfg.feature_layer = value(key, raw, line_no)?,
            "sk_mask_lo" => cfg.sk_mask_lo = value(key, raw, line_no)?,
            "sk_mask_hi" => cfg.sk_mask_hi = value(key, raw, line_no)?,
            "iters" => cfg.iters = value(key, raw, line_no)?,
            "batch" => cfg.batch = value(key, raw, line_no)?,
            "warmup" => cfg.warmup = value(key, raw, line_no)?,
            "p_drop" => cfg.p_drop = value(key, raw, line_no)?,
            "lr" => cfg.lr = value(key, raw, line_no)?,
            "ema_decay" => cfg.ema_decay = value(key, raw, line_no)?,
            "mode" => cfg.mode = Mode::from_name(raw)?,
            "eval_interval" => cfg.eval_interval = value(key, raw, line_no)?,
            "eval_samples" => cfg.eval_samples = value(key, raw, line_no)?,
            "sample_steps" => cfg.sampler.steps = value(key, raw, line_no)?,
            "guidance" => cfg.sampler.guidance = value(key, raw, line_no)?,
            "method" => cfg.sampler.method = Method::from_name(raw)?,
            "seed" => cfg.seed = value(key, raw, line_no)?,
            _ => unreachable!("key list and match arms agree"),
        }
    }
    cfg.path = PathKind::from_name(&path_name, vp_beta, ve_alpha_max)?;
    Ok(cfg)
}

/// Renders every key; `parse(&render(c)) == c`.
pub fn render(cfg: &TrainConfig) -> String {
    let (vp_beta, ve_alpha_max) = match cfg.path {
        PathKind::Vp { beta } => (beta, DEFAULT_VE_ALPHA_MAX),
        PathKind::Ve { alpha_max } => (DEFAULT_VP_BETA, alpha_max),
        PathKind::ConstantVelocity => (DEFAULT_VP_BETA, DEFAULT_VE_ALPHA_MAX),
    };
    let values: Vec<String> = vec![
        cfg.dataset.clone(),
        cfg.n.to_string(),
        cfg.data_noise.to_string(),
        cfg.path.name().to_string(),
        vp_beta.to_string(),
        ve_alpha_max.to_string(),
        cfg.hidden_layers.to_string(),
        cfg.width.to_string(),
        cfg.time_freqs.to_string(),
        cfg.feature_dim.to_string(),
        cfg.clusters.to_string(),
        cfg.sk.lambda.to_string(),
        cfg.sk.iters.to_string(),
        cfg.feature_t.to_string(),
        cfg.feature_layer.to_string(),
        cfg.sk_mask_lo.to_string(),
        cfg.sk_mask_hi.to_string(),
        cfg.iters.to_string(),
        cfg.batch.to_string(),
        cfg.warmup.to_string(),
        cfg.p_drop.to_string(),
        cfg.lr.to_string(),
        cfg.ema_decay.to_string(),
        cfg.mode.name().to_string(),
        cfg.eval_interval.to_string(),
        cfg.eval_samples.to_string(),
        cfg.sampler.steps.to_string(),
        cfg.sampler.guidance.to_string(),
        cfg.sampler.method.name().to_string(),
        cfg.seed.to_string(),
    ];
    KEYS.iter()
        .zip(values)
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

pub fn load(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text).map_err(|e| Error::parse(path, e.to_string()))
}
