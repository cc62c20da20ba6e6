//! The self-guided training loop: an unconditional warmup, then per-example
//! prototype conditions with classifier-free dropout, while the feature head
//! and prototypes are fitted online with a ramped Sinkhorn-Knopp loss.
//! Also hosts the offline (k-means labels) fine-tuning mode.

use std::fs;
use std::path::Path;

use rand::distr::OpenClosed01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::datasets::{self, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::metrics::{ari, frechet_distance, nmi};
use crate::nn::{condition_var, randn, Adam, Condition, ConditionTable, Ema, FieldConfig, VelocityField};
use crate::ot::{
    assign_all, assign_prototype, extract_feature, hidden_features, kmeans, sinkhorn, sk_loss_var, FeatureHead,
    KMeans, Prototypes, SinkhornConfig, TransportPlan,
};
use crate::paths::{interpolate_batch, PathKind};
use crate::sampler::{integrate, GuidedVelocity, Method, QueryContext, SamplerConfig};
use crate::tensor::Tensor;

/// Whether post-warmup steps condition on prototypes or stay unconditional.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    SelfGuided,
    /// Baseline: the zero condition throughout, no dropout.
    Unconditional,
}

impl Mode {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "self" => Ok(Mode::SelfGuided),
            "uncond" => Ok(Mode::Unconditional),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected self or uncond)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::SelfGuided => "self",
            Mode::Unconditional => "uncond",
        }
    }
}

/// Every knob of a training run, including the dataset and the sampler used
/// for periodic evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: String,
    pub n: usize,
    pub data_noise: f64,
    pub path: PathKind,
    pub hidden_layers: usize,
    pub width: usize,
    pub time_freqs: usize,
    /// Dimension of features, prototypes and conditions.
    pub feature_dim: usize,
    pub clusters: usize,
    pub sk: SinkhornConfig,
    /// Timestep at which features are extracted for condition assignment.
    pub feature_t: f64,
    /// Hidden layer (1-based) the features are read from.
    pub feature_layer: usize,
    pub sk_mask_lo: f64,
    pub sk_mask_hi: f64,
    pub iters: u64,
    pub batch: usize,
    /// Fraction of `iters` spent in the unconditional warmup.
    pub warmup: f64,
    pub p_drop: f64,
    pub lr: f64,
    pub ema_decay: f64,
    pub mode: Mode,
    pub eval_interval: u64,
    pub eval_samples: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: "ring8".into(),
            n: 8192,
            data_noise: 0.05,
            path: PathKind::ConstantVelocity,
            hidden_layers: 4,
            width: 256,
            time_freqs: 16,
            feature_dim: 16,
            clusters: 8,
            sk: SinkhornConfig::default(),
            feature_t: 0.2,
            feature_layer: 2,
            sk_mask_lo: 0.15,
            sk_mask_hi: 0.25,
            iters: 20_000,
            batch: 256,
            warmup: 0.5,
            p_drop: 0.15,
            lr: 1e-3,
            ema_decay: 0.999,
            mode: Mode::SelfGuided,
            eval_interval: 1000,
            eval_samples: 2048,
            sampler: SamplerConfig {
                steps: 50,
                guidance: 0.4,
                method: Method::Euler,
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            data_dim: 2,
            hidden_layers: self.hidden_layers,
            width: self.width,
            time_freqs: self.time_freqs,
            cond_dim: self.feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.field_config().validate()?;
        self.path.validate()?;
        self.sk.validate()?;
        self.sampler.validate()?;
        if !(self.warmup > 0.0 && self.warmup < 1.0) {
            return bad(format!("warmup must lie in (0, 1), got {}", self.warmup));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return bad(format!("p_drop must lie in [0, 1), got {}", self.p_drop));
        }
        if !(0.0 <= self.sk_mask_lo && self.sk_mask_lo < self.sk_mask_hi && self.sk_mask_hi <= 1.0) {
            return bad(format!(
                "need 0 ≤ sk_mask_lo < sk_mask_hi ≤ 1, got {} and {}",
                self.sk_mask_lo, self.sk_mask_hi
            ));
        }
        if !(self.feature_t > 0.0 && self.feature_t <= 1.0) {
            return bad(format!("feature_t must lie in (0, 1], got {}", self.feature_t));
        }
        if self.feature_layer == 0 || self.feature_layer >= self.hidden_layers {
            return bad(format!(
                "feature_layer must lie in [1, {}], got {}",
                self.hidden_layers - 1,
                self.feature_layer
            ));
        }
        if self.clusters == 0 || self.feature_dim == 0 || self.batch == 0 || self.eval_interval == 0 {
            return bad("clusters, feature_dim, batch and eval_interval must be positive".into());
        }
        if self.eval_samples < 3 {
            return bad(format!("eval_samples must be at least 3, got {}", self.eval_samples));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if !(self.data_noise >= 0.0 && self.data_noise.is_finite()) {
            return bad(format!("data_noise must be ≥ 0, got {}", self.data_noise));
        }
        Ok(())
    }

    /// Weight of the Sinkhorn loss at `iter`: a linear ramp over the warmup.
    pub fn sk_weight(&self, iter: u64) -> f64 {
        sk_weight(iter, self.warmup, self.iters)
    }

    /// Whether `iter` (1-based) belongs to the unconditional warmup.
    pub fn in_warmup(&self, iter: u64) -> bool {
        (iter as f64) / (self.iters as f64) < self.warmup
    }

    pub fn table<'a>(&self, state: &'a TrainState) -> ConditionTable<'a> {
        ConditionTable::new(state.prototypes.matrix(), &state.null)
    }
}

/// `min(iter / (σ·N), 1)`.
pub fn sk_weight(iter: u64, warmup: f64, total: u64) -> f64 {
    (iter as f64 / (warmup * total as f64)).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Zero condition; EMA still tracking.
    Warmup,
    /// Prototype or null conditions; EMA frozen.
    Guided,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub iter: u64,
    pub loss_d: f64,
    pub loss_sk: f64,
    pub sk_weight: f64,
    pub branch: Branch,
    /// Examples whose condition was replaced by the null embedding.
    pub dropped: usize,
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub field: VelocityField,
    pub ema: Ema,
    pub head: FeatureHead,
    pub prototypes: Prototypes,
    /// Null embedding `[1×d]`.
    pub null: Tensor,
    pub adam: Adam,
    /// Completed iterations.
    pub iter: u64,
    pub rng: ChaCha8Rng,
    pub standardizer: Standardizer,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, standardizer: Standardizer) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let field = VelocityField::init(cfg.field_config(), &mut rng)?;
        let head = FeatureHead::init(cfg.width, cfg.feature_dim, &mut rng);
        let prototypes = Prototypes::random(cfg.clusters, cfg.feature_dim, &mut rng)?;
        let null = randn(&mut rng, 1, cfg.feature_dim).scale(1.0 / (cfg.feature_dim as f64).sqrt());
        let mut state = Self {
            ema: Ema::new(&field, cfg.ema_decay),
            field,
            head,
            prototypes,
            null,
            adam: Adam::new(cfg.lr, Vec::new(), &[]),
            iter: 0,
            rng,
            standardizer,
        };
        let shapes: Vec<Vec<usize>> = state.params().iter().map(|p| p.shape().to_vec()).collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        state.adam = Adam::new(cfg.lr, state.param_names(), &shape_refs);
        Ok(state)
    }

    /// Names of the optimized tensors, in optimizer order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.field.param_names();
        names.extend(["head.weight", "head.bias", "prototypes", "null"].map(String::from));
        names
    }

    /// Optimized tensors: θ, then φ, `M` and `∅`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.field.params().iter().collect();
        p.extend([&self.head.weight, &self.head.bias, self.prototypes.matrix(), &self.null]);
        p
    }

    pub fn query_context<'a>(&'a self, cfg: &TrainConfig) -> QueryContext<'a> {
        QueryContext {
            ema: self.ema.shadow(),
            head: &self.head,
            prototypes: &self.prototypes,
            path: cfg.path,
            feature_t: cfg.feature_t,
            feature_layer: cfg.feature_layer,
        }
    }
}

/// The random draws and stop-gradient targets of one step, fixed before any
/// gradient is taken. With these held constant the loss is a smooth function
/// of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    pub iter: u64,
    pub branch: Branch,
    pub sk_weight: f64,
    pub x_data: Tensor,
    pub x_noise: Tensor,
    pub t: Vec<f64>,
    /// One per example, or a single broadcast entry.
    pub conds: Vec<Condition>,
    /// EMA hidden activations of the masked-timestep batch.
    pub sk_hidden: Tensor,
    pub plan: TransportPlan,
}

/// Graph handles for the optimized tensors.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub field: Vec<Var>,
    pub head_weight: Var,
    pub head_bias: Var,
    pub prototypes: Var,
    pub null: Var,
}

impl LossVars {
    /// Registers `params` (in [`TrainState::params`] order) as graph parameters.
    pub fn register(g: &mut Graph, params: &[Tensor]) -> Self {
        let vars: Vec<Var> = params.iter().map(|p| g.parameter(p.clone())).collect();
        Self::from_vars(&vars)
    }

    pub fn from_vars(vars: &[Var]) -> Self {
        let n = vars.len() - 4;
        Self {
            field: vars[..n].to_vec(),
            head_weight: vars[n],
            head_bias: vars[n + 1],
            prototypes: vars[n + 2],
            null: vars[n + 3],
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut v = self.field.clone();
        v.extend([self.head_weight, self.head_bias, self.prototypes, self.null]);
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub loss_d: Var,
    pub loss_sk: Var,
}

/// Mean per-example squared error between the network velocity and the path
/// velocity.
fn regression_loss(
    g: &mut Graph,
    field: &VelocityField,
    field_vars: Vec<Var>,
    path: PathKind,
    x_data: &Tensor,
    x_noise: &Tensor,
    t: &[f64],
    cond: Var,
) -> Result<Var> {
    let bound = field.bind_vars(g, field_vars)?;
    let (xt, target) = interpolate_batch(path, x_data, x_noise, t)?;
    let x = g.constant(xt);
    let target = g.constant(target);
    let (v, _) = bound.forward(g, x, t, cond, None)?;
    let mse = g.mse(v, target)?;
    g.scale(mse, field.config().data_dim as f64)
}

/// `L_d + w·L_SK` for fixed step inputs. `field` supplies the architecture;
/// the weights come from `vars`.
pub fn build_loss(
    g: &mut Graph,
    field: &VelocityField,
    vars: &LossVars,
    inputs: &StepInputs,
    path: PathKind,
) -> Result<LossNodes> {
    let b = inputs.x_data.rows();
    let cond = condition_var(
        g,
        &inputs.conds,
        b,
        field.config().cond_dim,
        Some(vars.prototypes),
        Some(vars.null),
    )?;
    let loss_d = regression_loss(
        g,
        field,
        vars.field.clone(),
        path,
        &inputs.x_data,
        &inputs.x_noise,
        &inputs.t,
        cond,
    )?;
    let h = g.constant(inputs.sk_hidden.clone());
    let z = FeatureHead::forward(g, vars.head_weight, vars.head_bias, h)?;
    let loss_sk = sk_loss_var(g, &inputs.plan, vars.prototypes, z)?;
    let weighted = g.scale(loss_sk, inputs.sk_weight)?;
    let total = g.add(loss_d, weighted)?;
    Ok(LossNodes { total, loss_d, loss_sk })
}

/// Draws the step's noise, timesteps, mask timestep and dropout, and fixes
/// the conditions and transport plan. Advances `state.rng` only.
pub fn prepare_step(state: &mut TrainState, batch: &Tensor, cfg: &TrainConfig) -> Result<StepInputs> {
    let (b, d) = (batch.rows(), batch.cols());
    if batch.rank() != 2 || d != 2 {
        return Err(Error::Shape {
            op: "train_step",
            lhs: batch.shape().to_vec(),
            rhs: vec![b, 2],
        });
    }
    let iter = state.iter + 1;
    let rng = &mut state.rng;
    let x_noise = randn(rng, b, d);
    let t: Vec<f64> = (0..b).map(|_| rng.sample(OpenClosed01)).collect();
    let t_mask = rng.random_range(cfg.sk_mask_lo..=cfg.sk_mask_hi);
    let sk_noise = randn(rng, b, d);

    let branch = if cfg.in_warmup(iter) { Branch::Warmup } else { Branch::Guided };
    let conds = match (branch, cfg.mode) {
        (Branch::Warmup, _) | (_, Mode::Unconditional) => vec![Condition::Zero],
        (Branch::Guided, Mode::SelfGuided) => {
            let dropped: Vec<bool> = (0..b).map(|_| rng.random::<f64>() < cfg.p_drop).collect();
            let z = if dropped.iter().all(|&x| x) {
                None
            } else {
                Some(extract_feature(
                    state.ema.shadow(),
                    &state.head,
                    cfg.path,
                    batch,
                    &x_noise,
                    cfg.feature_t,
                    cfg.feature_layer,
                )?)
            };
            let mut conds = Vec::with_capacity(b);
            for (r, &drop) in dropped.iter().enumerate() {
                conds.push(match (&z, drop) {
                    (Some(z), false) => Condition::Prototype(assign_prototype(&state.prototypes, z.row(r))?.0),
                    _ => Condition::Null,
                });
            }
            conds
        }
    };

    let sk_hidden = hidden_features(state.ema.shadow(), cfg.path, batch, &sk_noise, t_mask, cfg.feature_layer)?;
    let z = state.head.apply(&sk_hidden)?;
    let plan = sinkhorn(&state.prototypes.scores(&z)?, &cfg.sk)?;
    Ok(StepInputs {
        iter,
        branch,
        sk_weight: cfg.sk_weight(iter),
        x_data: batch.clone(),
        x_noise,
        t,
        conds,
        sk_hidden,
        plan,
    })
}

/// One Adam step on the loss defined by `inputs`, then prototype
/// re-normalization and (during warmup) the EMA update.
pub fn apply_step(state: &mut TrainState, inputs: &StepInputs, cfg: &TrainConfig) -> Result<Diagnostics> {
    let mut g = Graph::new();
    let params: Vec<Tensor> = state.params().into_iter().cloned().collect();
    let vars = LossVars::register(&mut g, &params);
    let nodes = build_loss(&mut g, &state.field, &vars, inputs, cfg.path)?;
    let total = g.value(nodes.total).data()[0];
    if !total.is_finite() {
        return Err(Error::Diverged {
            iter: inputs.iter,
            what: "loss",
        });
    }
    let grads = g.backward(nodes.total)?;
    let grad_refs: Vec<Option<&Tensor>> = vars.all().into_iter().map(|v| grads.get(v)).collect();

    let TrainState {
        field,
        head,
        prototypes,
        null,
        adam,
        ..
    } = state;
    let mut targets: Vec<&mut Tensor> = field.params_mut().iter_mut().collect();
    targets.push(&mut head.weight);
    targets.push(&mut head.bias);
    targets.push(prototypes.matrix_mut());
    targets.push(null);
    adam.step(&mut targets, &grad_refs).map_err(|e| match e {
        Error::NonFinite(_) => Error::Diverged {
            iter: inputs.iter,
            what: "gradient",
        },
        other => other,
    })?;
    state.prototypes.normalize()?;
    if inputs.branch == Branch::Warmup {
        state.ema.update(&state.field);
    }
    state.iter = inputs.iter;

    let dropped = inputs.conds.iter().filter(|c| matches!(c, Condition::Null)).count();
    Ok(Diagnostics {
        iter: inputs.iter,
        loss_d: g.value(nodes.loss_d).data()[0],
        loss_sk: g.value(nodes.loss_sk).data()[0],
        sk_weight: inputs.sk_weight,
        branch: inputs.branch,
        dropped,
    })
}

/// One iteration on a `[B×2]` batch of (standardized) data.
pub fn train_step(state: &mut TrainState, batch: &Tensor, cfg: &TrainConfig) -> Result<Diagnostics> {
    let inputs = prepare_step(state, batch, cfg)?;
    apply_step(state, &inputs, cfg)
}

/// Draws a batch of rows from `data` with `state.rng`.
pub fn sample_batch(state: &mut TrainState, data: &Tensor, batch: usize) -> Result<Tensor> {
    let n = data.rows();
    let idx: Vec<usize> = (0..batch).map(|_| state.rng.random_range(0..n)).collect();
    data.gather_rows(&idx)
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub loss_d: f64,
    pub loss_sk: f64,
    pub sk_weight: f64,
    pub nmi: f64,
    pub ari: f64,
    pub frechet: f64,
}

pub const METRICS_HEADER: &str = "iter,loss_d,loss_sk,sk_weight,nmi,ari,frechet";

/// The metrics log as CSV text. Floats use the shortest representation that
/// parses back to the same value.
pub fn metrics_csv(log: &[LogRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iter, r.loss_d, r.loss_sk, r.sk_weight, r.nmi, r.ari, r.frechet
        ));
    }
    out
}

/// Clustering and sample-quality snapshot of a state.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Rounded Sinkhorn plan over the whole dataset.
    pub codes: Vec<usize>,
    /// Nearest-prototype assignment of each data point.
    pub assigned: Vec<usize>,
    pub nmi: f64,
    pub ari: f64,
    /// Generated samples in data coordinates.
    pub samples: Tensor,
    /// Prototype each sample was conditioned on, if any.
    pub sample_prototypes: Vec<Option<usize>>,
    pub frechet: f64,
}

/// Seeded per evaluation point so runs that share a seed share the noise.
pub fn eval_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter + 1);
    rng
}

/// Whether sampling from `state` should use prototype conditions.
pub fn samples_guided(state: &TrainState, cfg: &TrainConfig) -> bool {
    cfg.mode == Mode::SelfGuided && state.iter > 0 && !cfg.in_warmup(state.iter)
}

/// Scores the state's clustering of `dataset` against its mode labels and the
/// Gaussian Fréchet distance of `samples` fresh samples.
pub fn evaluate(
    state: &TrainState,
    cfg: &TrainConfig,
    dataset: &Dataset,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Evaluation> {
    let data = state.standardizer.apply(&dataset.samples);
    let n = data.rows();
    let feature_noise = randn(rng, n, 2);
    let z = extract_feature(
        state.ema.shadow(),
        &state.head,
        cfg.path,
        &data,
        &feature_noise,
        cfg.feature_t,
        cfg.feature_layer,
    )?;
    let codes = sinkhorn(&state.prototypes.scores(&z)?, &cfg.sk)?.hard_codes();
    let assigned = assign_all(&state.prototypes, &z)?;

    let x_start = randn(rng, samples, 2).scale(cfg.path.prior_scale());
    let sample_prototypes: Vec<Option<usize>> = if samples_guided(state, cfg) {
        (0..samples).map(|_| Some(assigned[rng.random_range(0..n)])).collect()
    } else {
        vec![None; samples]
    };
    let conds = if samples_guided(state, cfg) {
        sample_prototypes.iter().map(|p| Condition::Prototype(p.unwrap())).collect()
    } else {
        vec![Condition::Zero]
    };
    let model = GuidedVelocity {
        field: &state.field,
        table: cfg.table(state),
        conds,
        guidance: cfg.sampler.guidance,
    };
    let generated = state.standardizer.invert(&integrate(&model, &x_start, &cfg.sampler)?.samples);
    Ok(Evaluation {
        nmi: nmi(&codes, &dataset.labels)?,
        ari: ari(&codes, &dataset.labels)?,
        frechet: frechet_distance(&generated, &dataset.samples)?,
        codes,
        assigned,
        samples: generated,
        sample_prototypes,
    })
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub dataset: Dataset,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Builds the configured dataset, trains for `cfg.iters` iterations and logs
/// every `eval_interval` iterations and at the end. With `out_dir`, writes
/// `metrics.csv` and `final.ckpt` there.
pub fn run_training(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainRun> {
    cfg.validate()?;
    let dataset = datasets::by_name(&cfg.dataset, cfg.n, cfg.data_noise, cfg.seed)?;
    let standardizer = Standardizer::fit(&dataset.samples);
    let data = standardizer.apply(&dataset.samples);
    let mut state = TrainState::init(cfg, standardizer)?;
    let mut log = Vec::new();
    for iter in 1..=cfg.iters {
        let batch = sample_batch(&mut state, &data, cfg.batch)?;
        let diag = train_step(&mut state, &batch, cfg)?;
        if iter % cfg.eval_interval == 0 || iter == cfg.iters {
            let ev = evaluate(&state, cfg, &dataset, cfg.eval_samples, &mut eval_rng(cfg.seed, iter))?;
            log.push(LogRow {
                iter,
                loss_d: diag.loss_d,
                loss_sk: diag.loss_sk,
                sk_weight: diag.sk_weight,
                nmi: ev.nmi,
                ari: ev.ari,
                frechet: ev.frechet,
            });
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("metrics.csv"), metrics_csv(&log).as_bytes())?;
        crate::io::checkpoint::save(&dir.join("final.ckpt"), cfg, &state)?;
    }
    Ok(TrainRun { state, log, dataset })
}

/// Labels for offline guidance: k-means over the state's guidance features of
/// the (standardized) dataset.
pub fn cluster_features(state: &TrainState, cfg: &TrainConfig, data: &Tensor, k: usize, seed: u64) -> Result<KMeans> {
    let noise = randn(&mut ChaCha8Rng::seed_from_u64(seed), data.rows(), data.cols());
    let z = extract_feature(
        state.ema.shadow(),
        &state.head,
        cfg.path,
        data,
        &noise,
        cfg.feature_t,
        cfg.feature_layer,
    )?;
    kmeans(&z, k, 100, seed)
}

/// A field fine-tuned on fixed one-hot codes, with its learned null embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineModel {
    pub field: VelocityField,
    pub null: Tensor,
    /// Regression loss at every iteration.
    pub losses: Vec<f64>,
}

impl OfflineModel {
    pub fn table(&self) -> ConditionTable<'_> {
        ConditionTable {
            prototypes: None,
            null: Some(&self.null),
        }
    }
}

/// Fine-tunes `pretrained` with one-hot codes of `labels` (one per row of
/// `data`) as conditions, replaced by a learnable null embedding with
/// probability `p_drop`. Uses `cfg.iters`, `batch`, `lr`, `path` and `seed`;
/// no Sinkhorn loss. Codes are `cond_dim`-wide one-hots, so `k` may not
/// exceed it.
pub fn train_offline(
    pretrained: &VelocityField,
    data: &Tensor,
    labels: &[usize],
    k: usize,
    p_drop: f64,
    cfg: &TrainConfig,
) -> Result<OfflineModel> {
    let dim = pretrained.config().cond_dim;
    if labels.len() != data.rows() {
        return Err(Error::arg(format!("{} labels for {} rows", labels.len(), data.rows())));
    }
    if k == 0 || k > dim {
        return Err(Error::arg(format!("need 1 ≤ K ≤ {dim} clusters, got {k}")));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::arg(format!("label {bad} out of range for {k} clusters")));
    }
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::arg(format!("p_drop must lie in [0, 1], got {p_drop}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut field = pretrained.clone();
    let mut null = randn(&mut rng, 1, dim).scale(1.0 / (dim as f64).sqrt());
    let mut names = field.param_names();
    names.push("null".into());
    let shapes: Vec<Vec<usize>> = field
        .params()
        .iter()
        .chain([&null])
        .map(|p| p.shape().to_vec())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = Adam::new(cfg.lr, names, &shape_refs);
    let codes: Vec<Condition> = (0..k).map(|i| Condition::one_hot(i, dim)).collect::<Result<_>>()?;

    let mut losses = Vec::with_capacity(cfg.iters as usize);
    for iter in 1..=cfg.iters {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..data.rows())).collect();
        let x_data = data.gather_rows(&idx)?;
        let x_noise = randn(&mut rng, cfg.batch, data.cols());
        let t: Vec<f64> = (0..cfg.batch).map(|_| rng.sample(OpenClosed01)).collect();
        let conds: Vec<Condition> = idx
            .iter()
            .map(|&i| {
                if rng.random::<f64>() < p_drop {
                    Condition::Null
                } else {
                    codes[labels[i]].clone()
                }
            })
            .collect();

        let mut g = Graph::new();
        let field_vars: Vec<Var> = field.params().iter().map(|p| g.parameter(p.clone())).collect();
        let null_var = g.parameter(null.clone());
        let cond = condition_var(&mut g, &conds, cfg.batch, dim, None, Some(null_var))?;
        let loss = regression_loss(&mut g, &field, field_vars.clone(), cfg.path, &x_data, &x_noise, &t, cond)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged { iter, what: "loss" });
        }
        let grads = g.backward(loss)?;
        let grad_refs: Vec<Option<&Tensor>> = field_vars.iter().chain([&null_var]).map(|&v| grads.get(v)).collect();
        let mut targets: Vec<&mut Tensor> = field.params_mut().iter_mut().collect();
        targets.push(&mut null);
        adam.step(&mut targets, &grad_refs)?;
        losses.push(value);
    }
    Ok(OfflineModel { field, null, losses })
}
