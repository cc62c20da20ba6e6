//! Classifier-free guidance and fixed-step ODE integration from noise
//! (`t = 1`) to data (`t = 0`).

use crate::error::{Error, Result};
use crate::nn::{velocity_forward, Condition, ConditionTable, VelocityField};
use crate::ot::{assign_prototype, extract_feature, FeatureHead, Prototypes};
use crate::paths::PathKind;
use crate::tensor::Tensor;

/// Anything that can be integrated: a time-dependent velocity over a batch.
pub trait VelocityModel {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F> VelocityModel for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Euler,
    Heun,
}

impl Method {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "euler" => Ok(Method::Euler),
            "heun" => Ok(Method::Heun),
            other => Err(Error::Config(format!("unknown method `{other}` (expected euler or heun)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Heun => "heun",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Guidance strength `g ≥ 0`.
    pub guidance: f64,
    pub method: Method,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 0.4,
            method: Method::Euler,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::Config(format!("guidance must be ≥ 0, got {}", self.guidance)));
        }
        Ok(())
    }
}

fn is_unguided(conds: &[Condition]) -> bool {
    conds.iter().all(|c| matches!(c, Condition::Null | Condition::Zero))
}

/// Guided velocity `v(x,t,c) + g·(v(x,t,c) − v(x,t,∅))`.
///
/// When every condition is [`Condition::Null`] (or [`Condition::Zero`]) the
/// plain velocity is returned and `g` is ignored.
pub fn cfg_velocity(
    field: &VelocityField,
    table: &ConditionTable<'_>,
    x: &Tensor,
    t: f64,
    conds: &[Condition],
    g: f64,
) -> Result<Tensor> {
    let ts = vec![t; x.rows()];
    let (v_c, _) = velocity_forward(field, table, x, &ts, conds, None)?;
    if is_unguided(conds) || g == 0.0 {
        return Ok(v_c);
    }
    let (v_null, _) = velocity_forward(field, table, x, &ts, &[Condition::Null], None)?;
    v_c.zip_with(&v_null, |c, n| c + g * (c - n))
}

/// A trained field with fixed per-row conditions and guidance strength.
#[derive(Debug, Clone)]
pub struct GuidedVelocity<'a> {
    pub field: &'a VelocityField,
    pub table: ConditionTable<'a>,
    pub conds: Vec<Condition>,
    pub guidance: f64,
}

impl VelocityModel for GuidedVelocity<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        cfg_velocity(self.field, &self.table, x, t, &self.conds, self.guidance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// State at `t = 0`.
    pub samples: Tensor,
    /// Data estimate `x − t·v` at each step's start time, followed by the
    /// final state (the estimate at `t = 0`).
    pub estimates: Vec<Tensor>,
}

impl Trajectory {
    pub fn nfe(steps: usize, method: Method) -> usize {
        match method {
            Method::Euler => steps,
            Method::Heun => 2 * steps,
        }
    }
}

/// Integrates `dx/dt = v(x, t)` from `t = 1` down to `t = 0` in equal steps.
pub fn integrate(model: &dyn VelocityModel, x_start: &Tensor, cfg: &SamplerConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let n = cfg.steps;
    let dt = -1.0 / n as f64;
    let mut x = x_start.clone();
    let mut estimates = Vec::with_capacity(n + 1);
    for i in 0..n {
        let t = 1.0 - i as f64 / n as f64;
        let t_next = 1.0 - (i + 1) as f64 / n as f64;
        let v = model.velocity(&x, t)?;
        estimates.push(x.zip_with(&v, |xv, vv| xv - t * vv)?);
        x = match cfg.method {
            Method::Euler => x.zip_with(&v, |xv, vv| xv + dt * vv)?,
            Method::Heun => {
                let pred = x.zip_with(&v, |xv, vv| xv + dt * vv)?;
                let v2 = model.velocity(&pred, t_next)?;
                let avg = v.zip_with(&v2, |a, b| 0.5 * (a + b))?;
                x.zip_with(&avg, |xv, vv| xv + dt * vv)?
            }
        };
        if !x.all_finite() {
            return Err(Error::IntegrationDiverged { step: i });
        }
    }
    estimates.push(x.clone());
    Ok(Trajectory { samples: x, estimates })
}

/// What is needed to turn a data point into a prototype index.
#[derive(Debug, Clone, Copy)]
pub struct QueryContext<'a> {
    /// EMA weights used for feature extraction.
    pub ema: &'a VelocityField,
    pub head: &'a FeatureHead,
    pub prototypes: &'a Prototypes,
    pub path: PathKind,
    pub feature_t: f64,
    pub feature_layer: usize,
}

impl QueryContext<'_> {
    /// Nearest prototype for each row of `queries`, noised with `noise` to
    /// the feature time.
    pub fn assign(&self, queries: &Tensor, noise: &Tensor) -> Result<Vec<usize>> {
        let z = extract_feature(self.ema, self.head, self.path, queries, noise, self.feature_t, self.feature_layer)?;
        (0..z.rows())
            .map(|r| assign_prototype(self.prototypes, z.row(r)).map(|(i, _)| i))
            .collect()
    }
}

/// Finds the prototype closest to `query` and samples conditioned on it.
/// Returns the prototype index and the trajectory.
pub fn sample_by_query(
    field: &VelocityField,
    null: &Tensor,
    ctx: &QueryContext<'_>,
    query: &[f64],
    query_noise: &[f64],
    x_start: &Tensor,
    cfg: &SamplerConfig,
) -> Result<(usize, Trajectory)> {
    let q = Tensor::matrix(1, query.len(), query.to_vec())?;
    let qn = Tensor::matrix(1, query_noise.len(), query_noise.to_vec())?;
    let k = ctx.assign(&q, &qn)?[0];
    let model = GuidedVelocity {
        field,
        table: ConditionTable::new(ctx.prototypes.matrix(), null),
        conds: vec![Condition::Prototype(k)],
        guidance: cfg.guidance,
    };
    Ok((k, integrate(&model, x_start, cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn, FieldConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(steps: usize, method: Method) -> SamplerConfig {
        SamplerConfig {
            steps,
            guidance: 0.0,
            method,
        }
    }

    #[test]
    fn euler_is_exact_for_constant_fields() {
        let vbar = Tensor::matrix(1, 2, vec![0.75, -1.5]).unwrap();
        let field = |_: &Tensor, _: f64| Ok(vbar.clone());
        let x0 = Tensor::matrix(1, 2, vec![0.2, 0.4]).unwrap();
        let want = x0.zip_with(&vbar, |a, b| a - b).unwrap();
        for steps in [1, 2, 8, 64] {
            let tr = integrate(&field, &x0, &cfg(steps, Method::Euler)).unwrap();
            assert_eq!(tr.samples, want, "steps {steps}");
        }
        for steps in [3, 7, 50] {
            let tr = integrate(&field, &x0, &cfg(steps, Method::Euler)).unwrap();
            assert!(tr.samples.max_abs_diff(&want) < 1e-14);
        }
    }

    #[test]
    fn single_euler_step() {
        let field = |x: &Tensor, t: f64| Ok(x.map(|v| v * v + t));
        let x0 = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        let tr = integrate(&field, &x0, &cfg(1, Method::Euler)).unwrap();
        assert_eq!(tr.samples.data()[0], 0.5 - (0.25 + 1.0));
        assert_eq!(tr.estimates.len(), 2);
    }

    fn final_error(steps: usize, method: Method) -> f64 {
        let field = |x: &Tensor, _: f64| Ok(x.scale(-1.0));
        let x0 = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let tr = integrate(&field, &x0, &cfg(steps, method)).unwrap();
        (tr.samples.data()[0] - std::f64::consts::E).abs()
    }

    #[test]
    fn linear_decay_error_orders() {
        assert!(final_error(1000, Method::Euler) / std::f64::consts::E < 2e-3);
        let e1 = final_error(100, Method::Euler) / final_error(200, Method::Euler);
        let h1 = final_error(100, Method::Heun) / final_error(200, Method::Heun);
        assert!((e1 - 2.0).abs() < 0.1, "{e1}");
        assert!((h1 - 4.0).abs() < 0.2, "{h1}");
    }

    #[test]
    fn last_estimate_is_the_sample() {
        let field = |x: &Tensor, t: f64| Ok(x.map(|v| (v * t).sin()));
        let x0 = Tensor::matrix(2, 1, vec![0.3, -1.0]).unwrap();
        for m in [Method::Euler, Method::Heun] {
            let tr = integrate(&field, &x0, &cfg(9, m)).unwrap();
            assert_eq!(tr.estimates.last().unwrap(), &tr.samples);
            assert_eq!(tr.estimates.len(), 10);
        }
    }

    #[test]
    fn divergence_reports_step() {
        let field = |x: &Tensor, _: f64| Ok(x.map(|v| v * 1e200));
        let x0 = Tensor::matrix(1, 1, vec![1e200]).unwrap();
        match integrate(&field, &x0, &cfg(5, Method::Euler)) {
            Err(Error::IntegrationDiverged { step }) => assert_eq!(step, 0),
            other => panic!("{other:?}"),
        }
    }

    fn net() -> (VelocityField, Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = VelocityField::init(
            FieldConfig {
                data_dim: 2,
                hidden_layers: 3,
                width: 8,
                time_freqs: 2,
                cond_dim: 3,
            },
            &mut rng,
        )
        .unwrap();
        (field, randn(&mut rng, 4, 3), randn(&mut rng, 1, 3), randn(&mut rng, 6, 2))
    }

    #[test]
    fn cfg_identities() {
        let (field, protos, null, x) = net();
        let table = ConditionTable::new(&protos, &null);
        let c = [Condition::Prototype(2)];
        let (plain, _) = velocity_forward(&field, &table, &x, &[0.3; 6], &c, None).unwrap();
        assert_eq!(cfg_velocity(&field, &table, &x, 0.3, &c, 0.0).unwrap(), plain);

        let (vn, _) = velocity_forward(&field, &table, &x, &[0.3; 6], &[Condition::Null], None).unwrap();
        assert_eq!(cfg_velocity(&field, &table, &x, 0.3, &[Condition::Null], 5.0).unwrap(), vn);

        // a prototype equal to the null embedding leaves no guidance gap
        let same = Tensor::from_rows(&[null.row(0)]).unwrap();
        let t2 = ConditionTable::new(&same, &null);
        let g = cfg_velocity(&field, &t2, &x, 0.3, &[Condition::Prototype(0)], 3.0).unwrap();
        assert_eq!(g, vn);
    }

    #[test]
    fn cfg_scalar_arithmetic() {
        // v_c = 2, v_null = 1, g = 0.4
        assert!(((2.0f64) + 0.4 * (2.0 - 1.0) - 2.4).abs() < 1e-15);
    }

    #[test]
    fn cfg_is_affine_in_guidance() {
        let (field, protos, null, x) = net();
        let table = ConditionTable::new(&protos, &null);
        let c = [Condition::Prototype(1)];
        let ts = [0.7; 6];
        let (vc, _) = velocity_forward(&field, &table, &x, &ts, &c, None).unwrap();
        let (vn, _) = velocity_forward(&field, &table, &x, &ts, &[Condition::Null], None).unwrap();
        let gap = vc.zip_with(&vn, |a, b| a - b).unwrap();
        let at = |g| cfg_velocity(&field, &table, &x, 0.7, &c, g).unwrap();
        let slope = at(1.0).zip_with(&at(0.0), |a, b| a - b).unwrap();
        assert!(slope.max_abs_diff(&gap) < 1e-14);
    }

    #[test]
    fn query_sampling_is_deterministic_and_matches_direct_conditioning() {
        let (field, protos, null, x) = net();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = FeatureHead::init(8, 3, &mut rng);
        let protos = Prototypes::from_matrix(protos).unwrap();
        let ctx = QueryContext {
            ema: &field,
            head: &head,
            prototypes: &protos,
            path: PathKind::ConstantVelocity,
            feature_t: 0.2,
            feature_layer: 1,
        };
        let sc = SamplerConfig {
            steps: 5,
            guidance: 0.0,
            method: Method::Euler,
        };
        let a = sample_by_query(&field, &null, &ctx, &[0.1, 0.2], &[0.5, -0.5], &x, &sc).unwrap();
        let b = sample_by_query(&field, &null, &ctx, &[0.1, 0.2], &[0.5, -0.5], &x, &sc).unwrap();
        assert_eq!(a, b);
        let direct = GuidedVelocity {
            field: &field,
            table: ConditionTable::new(protos.matrix(), &null),
            conds: vec![Condition::Prototype(a.0)],
            guidance: 0.0,
        };
        assert_eq!(integrate(&direct, &x, &sc).unwrap(), a.1);
    }
}
