//! Binary checkpoints.
//!
//! Layout: magic `FGCP`, format version (`u32` LE), metadata length (`u64`
//! LE), UTF-8 JSON metadata, then every array in directory order as `f32` LE.
//! The metadata carries the rendered config, the iteration, the data
//! standardizer, the RNG position, the optimizer step counts and the array
//! directory. Values are rounded to 32 bits on save and widened on load, so
//! saving a loaded checkpoint reproduces the file byte for byte.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Standardizer;
use crate::error::{Error, Result};
use crate::io::config;
use crate::nn::{Ema, VelocityField};
use crate::ot::{FeatureHead, Prototypes};
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"FGCP";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    /// `u128` does not survive every JSON reader; kept as decimal text.
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: String,
    iteration: u64,
    standardizer_mean: Vec<f64>,
    standardizer_std: Vec<f64>,
    rng: RngState,
    adam_steps: Vec<u64>,
    arrays: Vec<ArrayEntry>,
}

fn named_arrays(state: &TrainState) -> Vec<(String, &Tensor)> {
    let names = state.param_names();
    let mut out: Vec<(String, &Tensor)> = names.iter().cloned().zip(state.params()).collect();
    for (name, t) in state.field.param_names().into_iter().zip(state.ema.shadow().params()) {
        out.push((format!("ema.{name}"), t));
    }
    let (m, v) = state.adam.moments();
    for (name, t) in names.iter().zip(m) {
        out.push((format!("adam.m.{name}"), t));
    }
    for (name, t) in names.iter().zip(v) {
        out.push((format!("adam.v.{name}"), t));
    }
    out
}

/// Serializes `state` together with its config.
pub fn to_bytes(cfg: &TrainConfig, state: &TrainState) -> Result<Vec<u8>> {
    let arrays = named_arrays(state);
    let meta = Metadata {
        config: config::render(cfg),
        iteration: state.iter,
        standardizer_mean: state.standardizer.mean.clone(),
        standardizer_std: state.standardizer.std.clone(),
        rng: RngState {
            seed: state.rng.get_seed().to_vec(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        adam_steps: state.adam.steps().to_vec(),
        arrays: arrays
            .iter()
            .map(|(name, t)| ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::arg(format!("metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &arrays {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

/// Inverse of [`to_bytes`]. Errors are plain messages; [`load`] attaches the path.
pub fn from_bytes(bytes: &[u8]) -> std::result::Result<(TrainConfig, TrainState), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version} (expected {VERSION})"));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| "metadata too large".to_string())?;
    let meta: Metadata = serde_json::from_slice(r.take(len)?).map_err(|e| format!("metadata: {e}"))?;
    let cfg = config::parse(&meta.config).map_err(|e| format!("embedded config: {e}"))?;

    let mut arrays = std::collections::BTreeMap::new();
    for entry in &meta.arrays {
        let numel: usize = entry.shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| format!("array {}: {e}", entry.name))?;
        arrays.insert(entry.name.clone(), t);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let mut get = |name: &str| arrays.remove(name).ok_or_else(|| format!("missing array `{name}`"));

    let field_cfg = cfg.field_config();
    let names = field_param_names(&cfg);
    let field_params = names.iter().map(|n| get(n)).collect::<std::result::Result<Vec<_>, _>>()?;
    let ema_params = names
        .iter()
        .map(|n| get(&format!("ema.{n}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let field = VelocityField::from_params(field_cfg, field_params).map_err(|e| e.to_string())?;
    let shadow = VelocityField::from_params(field_cfg, ema_params).map_err(|e| e.to_string())?;
    let head = FeatureHead {
        weight: get("head.weight")?,
        bias: get("head.bias")?,
    };
    let prototypes = Prototypes::from_raw(get("prototypes")?);
    let null = get("null")?;

    let seed: [u8; 32] = meta
        .rng
        .seed
        .as_slice()
        .try_into()
        .map_err(|_| "rng seed must be 32 bytes".to_string())?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(meta.rng.word_pos.parse().map_err(|_| "bad rng word position".to_string())?);

    let mut state = TrainState {
        ema: Ema::from_shadow(shadow, cfg.ema_decay),
        field,
        head,
        prototypes,
        null,
        adam: crate::nn::Adam::new(cfg.lr, Vec::new(), &[]),
        iter: meta.iteration,
        rng,
        standardizer: Standardizer {
            mean: meta.standardizer_mean,
            std: meta.standardizer_std,
        },
    };
    let all_names = state.param_names();
    let shapes: Vec<Vec<usize>> = state.params().iter().map(|p| p.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = crate::nn::Adam::new(cfg.lr, all_names.clone(), &shape_refs);
    let m = all_names
        .iter()
        .map(|n| get(&format!("adam.m.{n}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let v = all_names
        .iter()
        .map(|n| get(&format!("adam.v.{n}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    adam.set_state(m, v, meta.adam_steps).map_err(|e| e.to_string())?;
    state.adam = adam;
    if let Some(extra) = arrays.keys().next() {
        return Err(format!("unexpected array `{extra}`"));
    }
    Ok((cfg, state))
}

fn field_param_names(cfg: &TrainConfig) -> Vec<String> {
    (0..=cfg.hidden_layers)
        .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
        .collect()
}

pub fn save(path: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    std::fs::write(path, to_bytes(cfg, state)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(TrainConfig, TrainState)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|msg| Error::parse(path, msg))
}
