//! The velocity field `v(x, t, c)`: an MLP over `[x, time embedding, condition]`.

mod adam;
mod ema;

pub use adam::Adam;
pub use ema::Ema;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;

use crate::autodiff::{silu, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Operand, Tensor};

/// Shape of a [`VelocityField`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldConfig {
    pub data_dim: usize,
    /// Number of hidden layers; at least 3 so an interior layer exists.
    pub hidden_layers: usize,
    pub width: usize,
    /// Fourier frequencies of the time embedding (embedding width is twice this).
    pub time_freqs: usize,
    pub cond_dim: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden_layers: 4,
            width: 256,
            time_freqs: 16,
            cond_dim: 16,
        }
    }
}

impl FieldConfig {
    pub fn input_dim(&self) -> usize {
        self.data_dim + 2 * self.time_freqs + self.cond_dim
    }

    /// `(fan_in, fan_out)` of every affine map, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.input_dim(), self.width)];
        for _ in 1..self.hidden_layers {
            dims.push((self.width, self.width));
        }
        dims.push((self.width, self.data_dim));
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers < 3 {
            return Err(Error::arg("velocity field needs at least 3 hidden layers"));
        }
        if self.data_dim == 0 || self.width == 0 || self.time_freqs == 0 || self.cond_dim == 0 {
            return Err(Error::arg("velocity field dimensions must be positive"));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of `t ∈ [0, 1]` with log-spaced frequencies from
/// `MIN_FREQ` to `MAX_FREQ` cycles per unit time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbedding {
    freqs: Vec<f64>,
}

impl TimeEmbedding {
    pub const MIN_FREQ: f64 = 0.25;
    pub const MAX_FREQ: f64 = 32.0;

    pub fn new(count: usize) -> Self {
        let freqs = if count == 1 {
            vec![Self::MIN_FREQ]
        } else {
            let (lo, hi) = (Self::MIN_FREQ.ln(), Self::MAX_FREQ.ln());
            (0..count)
                .map(|k| (lo + (hi - lo) * k as f64 / (count - 1) as f64).exp())
                .collect()
        };
        Self { freqs }
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn dim(&self) -> usize {
        2 * self.freqs.len()
    }

    /// One row `[sin(2πf₀t), cos(2πf₀t), sin(2πf₁t), …]` per time value.
    pub fn embed(&self, t: &[f64]) -> Tensor {
        let mut data = Vec::with_capacity(t.len() * self.dim());
        for &tv in t {
            for &f in &self.freqs {
                let (s, c) = (2.0 * PI * f * tv).sin_cos();
                data.push(s);
                data.push(c);
            }
        }
        Tensor::from_parts(vec![t.len(), self.dim()], data)
    }
}

/// What the network is conditioned on, per example.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    /// The all-zeros vector. Carries no parameters; used for feature extraction
    /// and unconditional warmup.
    Zero,
    /// The learnable null embedding substituted when guidance is dropped.
    Null,
    /// A row of the prototype matrix.
    Prototype(usize),
    /// A fixed externally supplied code, e.g. a one-hot cluster id.
    External(Vec<f64>),
}

impl Condition {
    pub fn one_hot(index: usize, dim: usize) -> Result<Self> {
        if index >= dim {
            return Err(Error::arg(format!("one-hot index {index} out of range for dim {dim}")));
        }
        let mut v = vec![0.0; dim];
        v[index] = 1.0;
        Ok(Condition::External(v))
    }
}

/// Resolves per-example [`Condition`]s into rows of a condition matrix.
///
/// `conds` has either one entry (broadcast over the batch) or one per row.
#[derive(Debug, Clone, Copy)]
pub struct ConditionTable<'a> {
    pub prototypes: Option<&'a Tensor>,
    pub null: Option<&'a Tensor>,
}

impl<'a> ConditionTable<'a> {
    pub fn new(prototypes: &'a Tensor, null: &'a Tensor) -> Self {
        Self {
            prototypes: Some(prototypes),
            null: Some(null),
        }
    }

    /// Only [`Condition::Zero`] and [`Condition::External`] resolve.
    pub fn empty() -> Self {
        Self {
            prototypes: None,
            null: None,
        }
    }

    pub fn resolve(&self, conds: &[Condition], batch: usize, dim: usize) -> Result<Tensor> {
        check_cond_len(conds, batch)?;
        let mut out = Tensor::zeros(&[batch, dim]);
        for r in 0..batch {
            let c = if conds.len() == 1 { &conds[0] } else { &conds[r] };
            match c {
                Condition::Zero => {}
                Condition::Null => {
                    let null = self.null.ok_or_else(|| Error::arg("no null embedding available"))?;
                    check_dim(null.numel(), dim)?;
                    out.row_mut(r).copy_from_slice(null.data());
                }
                Condition::Prototype(k) => {
                    let m = self.prototypes.ok_or_else(|| Error::arg("no prototypes available"))?;
                    if *k >= m.rows() {
                        return Err(Error::arg(format!("prototype {k} out of range ({} prototypes)", m.rows())));
                    }
                    check_dim(m.cols(), dim)?;
                    out.row_mut(r).copy_from_slice(m.row(*k));
                }
                Condition::External(v) => {
                    check_dim(v.len(), dim)?;
                    out.row_mut(r).copy_from_slice(v);
                }
            }
        }
        if !out.all_finite() {
            return Err(Error::NonFinite("condition embedding".into()));
        }
        Ok(out)
    }
}

fn check_cond_len(conds: &[Condition], batch: usize) -> Result<()> {
    if conds.len() != 1 && conds.len() != batch {
        return Err(Error::arg(format!(
            "{} conditions for a batch of {batch}",
            conds.len()
        )));
    }
    Ok(())
}

fn check_dim(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::arg(format!("condition has dim {got}, network expects {want}")));
    }
    Ok(())
}

/// Builds the condition matrix inside a graph so that gradients reach the
/// prototype matrix `[K×d]` and the null embedding `[1×d]`.
pub fn condition_var(
    g: &mut Graph,
    conds: &[Condition],
    batch: usize,
    dim: usize,
    prototypes: Option<Var>,
    null: Option<Var>,
) -> Result<Var> {
    check_cond_len(conds, batch)?;
    let cond_at = |r: usize| if conds.len() == 1 { &conds[0] } else { &conds[r] };
    let mut fixed = Tensor::zeros(&[batch, dim]);
    let mut proto_pick: Option<Tensor> = None;
    let mut null_pick: Option<Tensor> = None;
    for r in 0..batch {
        match cond_at(r) {
            Condition::Zero => {}
            Condition::External(v) => {
                check_dim(v.len(), dim)?;
                fixed.row_mut(r).copy_from_slice(v);
            }
            Condition::Prototype(k) => {
                let m = prototypes.ok_or_else(|| Error::arg("no prototypes available"))?;
                let kk = g.value(m).rows();
                if *k >= kk {
                    return Err(Error::arg(format!("prototype {k} out of range ({kk} prototypes)")));
                }
                let pick = proto_pick.get_or_insert_with(|| Tensor::zeros(&[batch, kk]));
                pick.row_mut(r)[*k] = 1.0;
            }
            Condition::Null => {
                null.ok_or_else(|| Error::arg("no null embedding available"))?;
                let pick = null_pick.get_or_insert_with(|| Tensor::zeros(&[batch, 1]));
                pick.row_mut(r)[0] = 1.0;
            }
        }
    }
    let mut out = g.constant(fixed);
    if let (Some(pick), Some(m)) = (proto_pick, prototypes) {
        let a = g.constant(pick);
        let rows = g.matmul(a, m)?;
        out = g.add(out, rows)?;
    }
    if let (Some(pick), Some(n)) = (null_pick, null) {
        let d = g.constant(pick);
        let rows = g.matmul(d, n)?;
        out = g.add(out, rows)?;
    }
    Ok(out)
}

/// MLP weights. `params` alternates `weight[fan_in×fan_out]`, `bias[fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    cfg: FieldConfig,
    time: TimeEmbedding,
    params: Vec<Tensor>,
}

impl VelocityField {
    /// Uniform `±1/√fan_in` initialization of every weight and bias.
    pub fn init<R: Rng>(cfg: FieldConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = Vec::new();
        for (fan_in, fan_out) in cfg.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let b: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(Tensor::from_parts(vec![fan_in, fan_out], w));
            params.push(Tensor::from_parts(vec![fan_out], b));
        }
        Ok(Self {
            cfg,
            time: TimeEmbedding::new(cfg.time_freqs),
            params,
        })
    }

    /// Rebuilds a field from stored parameters, checking every shape.
    pub fn from_params(cfg: FieldConfig, params: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.layer_dims();
        if params.len() != 2 * dims.len() {
            return Err(Error::arg(format!(
                "expected {} parameter tensors, got {}",
                2 * dims.len(),
                params.len()
            )));
        }
        for (i, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            if params[2 * i].shape() != [fan_in, fan_out] || params[2 * i + 1].shape() != [fan_out] {
                return Err(Error::arg(format!("layer {i} has the wrong shape")));
            }
        }
        Ok(Self {
            cfg,
            time: TimeEmbedding::new(cfg.time_freqs),
            params,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.cfg
    }

    pub fn time_embedding(&self) -> &TimeEmbedding {
        &self.time
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.params.len() / 2)
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }

    fn check_capture(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer >= self.cfg.hidden_layers {
            return Err(Error::arg(format!(
                "capture layer {layer} outside [1, {}]",
                self.cfg.hidden_layers - 1
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, x: &Tensor, t: &[f64], cond: &Tensor) -> Result<()> {
        let b = x.rows();
        if x.rank() != 2 || x.cols() != self.cfg.data_dim {
            return Err(Error::Shape {
                op: "velocity_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![b, self.cfg.data_dim],
            });
        }
        if t.len() != b {
            return Err(Error::arg(format!("{} time values for a batch of {b}", t.len())));
        }
        if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("time {bad} outside [0, 1]")));
        }
        if cond.shape() != [b, self.cfg.cond_dim] {
            return Err(Error::Shape {
                op: "velocity_forward",
                lhs: cond.shape().to_vec(),
                rhs: vec![b, self.cfg.cond_dim],
            });
        }
        Ok(())
    }

    fn input_matrix(&self, x: &Tensor, t: &[f64], cond: &Tensor) -> Tensor {
        let temb = self.time.embed(t);
        let width = self.cfg.input_dim();
        let mut data = Vec::with_capacity(x.rows() * width);
        for r in 0..x.rows() {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(temb.row(r));
            data.extend_from_slice(cond.row(r));
        }
        Tensor::from_parts(vec![x.rows(), width], data)
    }

    fn affine(&self, layer: usize, h: &Tensor) -> Tensor {
        let w = &self.params[2 * layer];
        let b = &self.params[2 * layer + 1];
        let (m, k, n) = (h.rows(), w.shape()[0], w.shape()[1]);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(b.data());
        }
        gemm(m, k, n, Operand::new(h.data(), k, false), Operand::new(w.data(), n, false), &mut out, 1.0);
        Tensor::from_parts(vec![m, n], out)
    }

    /// Inference forward pass without a graph.
    ///
    /// `cond` is the resolved `[B×cond_dim]` condition matrix. Returns the
    /// velocity and, if requested, the post-activation of hidden layer
    /// `capture` (1-based).
    pub fn forward(&self, x: &Tensor, t: &[f64], cond: &Tensor, capture: Option<usize>) -> Result<(Tensor, Option<Tensor>)> {
        if let Some(l) = capture {
            self.check_capture(l)?;
        }
        self.check_inputs(x, t, cond)?;
        let mut h = self.input_matrix(x, t, cond);
        let mut feature = None;
        for layer in 0..self.cfg.hidden_layers {
            let mut a = self.affine(layer, &h);
            a.data_mut().iter_mut().for_each(|v| *v = silu(*v));
            h = a;
            if capture == Some(layer + 1) {
                feature = Some(h.clone());
            }
        }
        let v = self.affine(self.cfg.hidden_layers, &h);
        if !v.all_finite() {
            return Err(Error::NonFinite("velocity output".into()));
        }
        Ok((v, feature))
    }

    /// Hidden activations at `layer`, computing only the layers up to it.
    pub fn hidden(&self, x: &Tensor, t: &[f64], cond: &Tensor, layer: usize) -> Result<Tensor> {
        self.check_capture(layer)?;
        self.check_inputs(x, t, cond)?;
        let mut h = self.input_matrix(x, t, cond);
        for l in 0..layer {
            let mut a = self.affine(l, &h);
            a.data_mut().iter_mut().for_each(|v| *v = silu(*v));
            h = a;
        }
        Ok(h)
    }

    /// Registers the weights in `g` as parameters (or constants) for a
    /// differentiable forward pass.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundField<'_> {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { g.parameter(p.clone()) } else { g.constant(p.clone()) })
            .collect();
        BoundField { field: self, vars }
    }

    /// Uses existing graph variables as the weights, e.g. perturbed copies
    /// during a gradient check. Only the architecture of `self` is used.
    pub fn bind_vars(&self, g: &Graph, vars: Vec<Var>) -> Result<BoundField<'_>> {
        let ok = vars.len() == self.params.len()
            && vars.iter().zip(&self.params).all(|(v, p)| g.value(*v).shape() == p.shape());
        if !ok {
            return Err(Error::arg("variables do not match the network's parameter shapes"));
        }
        Ok(BoundField { field: self, vars })
    }
}

/// A [`VelocityField`] whose weights live in a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundField<'a> {
    field: &'a VelocityField,
    vars: Vec<Var>,
}

impl BoundField<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Differentiable forward pass. `x` is `[B×data_dim]`, `cond` is `[B×cond_dim]`.
    pub fn forward(&self, g: &mut Graph, x: Var, t: &[f64], cond: Var, capture: Option<usize>) -> Result<(Var, Option<Var>)> {
        let f = self.field;
        if let Some(l) = capture {
            f.check_capture(l)?;
        }
        f.check_inputs(g.value(x), t, g.value(cond))?;
        let temb = g.constant(f.time.embed(t));
        let mut h = g.concat(&[x, temb, cond])?;
        let mut feature = None;
        for layer in 0..f.cfg.hidden_layers {
            let a = g.matmul(h, self.vars[2 * layer])?;
            let a = g.add(a, self.vars[2 * layer + 1])?;
            h = g.silu(a)?;
            if capture == Some(layer + 1) {
                feature = Some(h);
            }
        }
        let last = f.cfg.hidden_layers;
        let v = g.matmul(h, self.vars[2 * last])?;
        let v = g.add(v, self.vars[2 * last + 1])?;
        Ok((v, feature))
    }
}

/// Draws `rows × cols` standard normal values.
pub fn randn<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Convenience wrapper: resolve `conds` and run [`VelocityField::forward`].
pub fn velocity_forward(
    field: &VelocityField,
    table: &ConditionTable<'_>,
    x: &Tensor,
    t: &[f64],
    conds: &[Condition],
    capture: Option<usize>,
) -> Result<(Tensor, Option<Tensor>)> {
    let cond = table.resolve(conds, x.rows(), field.cfg.cond_dim)?;
    field.forward(x, t, &cond, capture)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> FieldConfig {
        FieldConfig {
            data_dim: 2,
            hidden_layers: 3,
            width: 8,
            time_freqs: 3,
            cond_dim: 4,
        }
    }

    fn setup(seed: u64) -> (VelocityField, Tensor, Vec<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = VelocityField::init(small_cfg(), &mut rng).unwrap();
        let x = randn(&mut rng, 5, 2);
        let t: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
        (f, x, t, rng)
    }

    #[test]
    fn zero_final_layer_gives_zero_velocity() {
        let (mut f, x, t, _) = setup(0);
        let last = f.params.len();
        for p in &mut f.params[last - 2..] {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (v, _) = velocity_forward(&f, &ConditionTable::empty(), &x, &t, &[Condition::Zero], None).unwrap();
        assert!(v.data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn zero_and_null_conditions_differ() {
        let (f, x, t, mut rng) = setup(1);
        let protos = randn(&mut rng, 3, 4);
        let null = randn(&mut rng, 1, 4);
        let table = ConditionTable::new(&protos, &null);
        let (a, _) = velocity_forward(&f, &table, &x, &t, &[Condition::Zero], None).unwrap();
        let (b, _) = velocity_forward(&f, &table, &x, &t, &[Condition::Null], None).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn zero_matches_zero_valued_external_code() {
        let (f, x, t, _) = setup(2);
        let table = ConditionTable::empty();
        let (a, _) = velocity_forward(&f, &table, &x, &t, &[Condition::Zero], None).unwrap();
        let (b, _) = velocity_forward(&f, &table, &x, &t, &[Condition::External(vec![0.0; 4])], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn captured_feature_matches_truncated_network() {
        let (f, x, t, _) = setup(3);
        let cond = Tensor::zeros(&[5, 4]);
        let (_, feat) = f.forward(&x, &t, &cond, Some(2)).unwrap();
        let truncated = f.hidden(&x, &t, &cond, 2).unwrap();
        assert_eq!(feat.unwrap(), truncated);
        assert!(f.forward(&x, &t, &cond, Some(0)).is_err());
        assert!(f.forward(&x, &t, &cond, Some(3)).is_err());
    }

    #[test]
    fn graph_forward_matches_inference_forward() {
        let (f, x, t, mut rng) = setup(4);
        let protos = randn(&mut rng, 3, 4);
        let null = randn(&mut rng, 1, 4);
        let conds = vec![
            Condition::Prototype(2),
            Condition::Null,
            Condition::Zero,
            Condition::one_hot(1, 4).unwrap(),
            Condition::Prototype(0),
        ];
        let (v_plain, h_plain) =
            velocity_forward(&f, &ConditionTable::new(&protos, &null), &x, &t, &conds, Some(1)).unwrap();

        let mut g = Graph::new();
        let bound = f.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let m = g.parameter(protos.clone());
        let n = g.parameter(null.clone());
        let c = condition_var(&mut g, &conds, 5, 4, Some(m), Some(n)).unwrap();
        let (v, h) = bound.forward(&mut g, xv, &t, c, Some(1)).unwrap();
        assert_eq!(g.value(v), &v_plain);
        assert_eq!(g.value(h.unwrap()), &h_plain.unwrap());
    }

    #[test]
    fn rejects_time_outside_unit_interval() {
        let (f, x, mut t, _) = setup(5);
        t[0] = 1.5;
        let cond = Tensor::zeros(&[5, 4]);
        assert!(f.forward(&x, &t, &cond, None).is_err());
    }

    #[test]
    fn time_embedding_is_lipschitz() {
        let emb = TimeEmbedding::new(16);
        let bound = 2.0 * PI * TimeEmbedding::MAX_FREQ;
        let ts: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        let e = emb.embed(&ts);
        for i in 1..ts.len() {
            let dt = ts[i] - ts[i - 1];
            for (a, b) in e.row(i).iter().zip(e.row(i - 1)) {
                assert!((a - b).abs() <= bound * dt + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn batch_equivariant(seed in 0u64..200, shift in 1usize..5) {
            let (f, x, t, mut rng) = setup(seed);
            let protos = randn(&mut rng, 3, 4);
            let null = randn(&mut rng, 1, 4);
            let table = ConditionTable::new(&protos, &null);
            let conds: Vec<Condition> = (0..5).map(|i| Condition::Prototype(i % 3)).collect();
            let (v, _) = velocity_forward(&f, &table, &x, &t, &conds, None).unwrap();
            let perm: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
            let xp = x.gather_rows(&perm).unwrap();
            let tp: Vec<f64> = perm.iter().map(|&i| t[i]).collect();
            let cp: Vec<Condition> = perm.iter().map(|&i| conds[i].clone()).collect();
            let (vp, _) = velocity_forward(&f, &table, &xp, &tp, &cp, None).unwrap();
            prop_assert_eq!(vp, v.gather_rows(&perm).unwrap());
        }
    }
}
