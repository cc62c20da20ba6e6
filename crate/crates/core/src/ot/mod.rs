//! Online prototype clustering: the feature head, the prototype matrix,
//! Sinkhorn-Knopp assignment, the transport loss and offline k-means.

mod kmeans;
mod sinkhorn;

pub use kmeans::{kmeans, KMeans};
pub use sinkhorn::{hard_codes, sinkhorn, SinkhornConfig, TransportPlan};

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{randn, VelocityField};
use crate::paths::{interpolate, PathKind};
use crate::tensor::{gemm, Operand, Tensor};

/// `K` unit-norm prototype rows of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    m: Tensor,
}

impl Prototypes {
    /// Rows drawn uniformly on the unit sphere.
    pub fn random<R: Rng>(k: usize, d: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::arg("prototype matrix needs K, d ≥ 1"));
        }
        let mut p = Self { m: randn(rng, k, d) };
        p.normalize()?;
        Ok(p)
    }

    pub fn from_matrix(m: Tensor) -> Result<Self> {
        if m.rank() != 2 {
            return Err(Error::arg("prototypes must be a K×d matrix"));
        }
        let mut p = Self { m };
        p.normalize()?;
        Ok(p)
    }

    /// Wraps `m` as is, e.g. when restoring exact stored values.
    pub(crate) fn from_raw(m: Tensor) -> Self {
        Self { m }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.m
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Tensor {
        &mut self.m
    }

    pub fn len(&self) -> usize {
        self.m.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.m.cols()
    }

    /// Rescales every row to unit L2 norm.
    pub fn normalize(&mut self) -> Result<()> {
        normalize_rows_in_place(&mut self.m)
    }

    /// Similarity matrix `M·Zᵀ` (`K×B`).
    pub fn scores(&self, z: &Tensor) -> Result<Tensor> {
        if z.rank() != 2 || z.cols() != self.dim() {
            return Err(Error::Shape {
                op: "scores",
                lhs: self.m.shape().to_vec(),
                rhs: z.shape().to_vec(),
            });
        }
        let (k, d, b) = (self.len(), self.dim(), z.rows());
        let mut out = vec![0.0; k * b];
        gemm(k, d, b, Operand::new(self.m.data(), d, false), Operand::new(z.data(), d, true), &mut out, 0.0);
        Ok(Tensor::from_parts(vec![k, b], out))
    }
}

pub(crate) fn normalize_rows_in_place(m: &mut Tensor) -> Result<()> {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::NonFinite(format!("row {r} cannot be normalized (norm {n})")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}

/// Affine projection of hidden activations to `d` dimensions followed by
/// row-wise L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureHead {
    /// `[hidden × d]`
    pub weight: Tensor,
    /// `[d]`
    pub bias: Tensor,
}

impl FeatureHead {
    pub fn init<R: Rng>(hidden: usize, d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w = (0..hidden * d).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..d).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::from_parts(vec![hidden, d], w),
            bias: Tensor::from_parts(vec![d], b),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.numel()
    }

    /// Unit-norm embeddings of hidden activations `[B×hidden]`.
    pub fn apply(&self, hidden: &Tensor) -> Result<Tensor> {
        let mut z = hidden.matmul(&self.weight)?;
        let d = self.dim();
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        debug_assert_eq!(z.cols(), d);
        normalize_rows_in_place(&mut z)?;
        Ok(z)
    }

    /// The same map inside a graph; `hidden` is treated as a constant input.
    pub fn forward(g: &mut Graph, weight: Var, bias: Var, hidden: Var) -> Result<Var> {
        let z = g.matmul(hidden, weight)?;
        let z = g.add(z, bias)?;
        g.normalize_rows(z)
    }
}

/// Hidden activations of `field` at `layer` for `x_data` noised to `t_s`,
/// with the zero condition.
pub fn hidden_features(
    field: &VelocityField,
    path: PathKind,
    x_data: &Tensor,
    x_noise: &Tensor,
    t_s: f64,
    layer: usize,
) -> Result<Tensor> {
    let xt = interpolate(path, x_data, x_noise, t_s)?;
    let cond = Tensor::zeros(&[xt.rows(), field.config().cond_dim]);
    let t = vec![t_s; xt.rows()];
    field.hidden(&xt, &t, &cond, layer)
}

/// Unit-norm guidance features `Z[B×d]`.
///
/// The result is a plain tensor: whatever consumes it cannot send gradients
/// back into `field`. Pass the EMA weights as `field`.
pub fn extract_feature(
    field: &VelocityField,
    head: &FeatureHead,
    path: PathKind,
    x_data: &Tensor,
    x_noise: &Tensor,
    t_s: f64,
    layer: usize,
) -> Result<Tensor> {
    head.apply(&hidden_features(field, path, x_data, x_noise, t_s, layer)?)
}

/// Index and row of the prototype with the largest inner product with `z`
/// (lowest index on ties).
pub fn assign_prototype(m: &Prototypes, z: &[f64]) -> Result<(usize, Vec<f64>)> {
    if z.len() != m.dim() {
        return Err(Error::arg(format!("feature dim {} vs prototype dim {}", z.len(), m.dim())));
    }
    let dot = |k: usize| m.matrix().row(k).iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
    let mut best = 0;
    let mut best_val = dot(0);
    for k in 1..m.len() {
        let v = dot(k);
        if v > best_val {
            best = k;
            best_val = v;
        }
    }
    Ok((best, m.matrix().row(best).to_vec()))
}

/// [`assign_prototype`] for every row of `z`.
pub fn assign_all(m: &Prototypes, z: &Tensor) -> Result<Vec<usize>> {
    (0..z.rows()).map(|r| assign_prototype(m, z.row(r)).map(|(i, _)| i)).collect()
}

fn check_loss_shapes(plan: &TransportPlan, m: &Tensor, z: &Tensor) -> Result<()> {
    if plan.clusters() != m.rows() || plan.batch() != z.rows() || m.cols() != z.cols() {
        return Err(Error::Shape {
            op: "sk_loss",
            lhs: plan.matrix().shape().to_vec(),
            rhs: vec![m.rows(), z.rows()],
        });
    }
    Ok(())
}

/// `⟨P, −M·Zᵀ⟩_F`.
pub fn sk_loss(plan: &TransportPlan, m: &Prototypes, z: &Tensor) -> Result<f64> {
    check_loss_shapes(plan, m.matrix(), z)?;
    let scores = m.scores(z)?;
    Ok(-plan
        .matrix()
        .data()
        .iter()
        .zip(scores.data())
        .map(|(p, s)| p * s)
        .sum::<f64>())
}

/// Differentiable `⟨P, −M·Zᵀ⟩_F` with the plan held constant, written as
/// `−Σ Z ⊙ (Pᵀ·M)` so gradients reach both `M` and `Z`.
pub fn sk_loss_var(g: &mut Graph, plan: &TransportPlan, m: Var, z: Var) -> Result<Var> {
    check_loss_shapes(plan, g.value(m), g.value(z))?;
    let pt = g.constant(plan.matrix().transpose()?);
    let target = g.matmul(pt, m)?;
    let prod = g.mul(z, target)?;
    let s = g.sum(prod)?;
    g.scale(s, -1.0)
}
