//! Probability paths between data (`t = 0`) and Gaussian noise (`t = 1`),
//! and the conditional velocities that flow matching regresses onto.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PathKind {
    /// Variance preserving: `x_t = α_t·x_data + √(1 − α_t²)·x_noise`, `α_t = exp(−βt/2)`.
    Vp { beta: f64 },
    /// Variance exploding: `x_t = x_data + α_t·x_noise`, `α_t = α_max^t − 1`.
    Ve { alpha_max: f64 },
    /// Straight line: `x_t = (1 − t)·x_data + t·x_noise`.
    #[default]
    ConstantVelocity,
}

impl PathKind {
    pub const DEFAULT_VP_BETA: f64 = 10.0;
    pub const DEFAULT_VE_ALPHA_MAX: f64 = 100.0;

    /// Parses the config spelling `vp | ve | cv`.
    pub fn from_name(name: &str, vp_beta: f64, ve_alpha_max: f64) -> Result<Self> {
        let path = match name {
            "vp" => PathKind::Vp { beta: vp_beta },
            "ve" => PathKind::Ve { alpha_max: ve_alpha_max },
            "cv" => PathKind::ConstantVelocity,
            other => return Err(Error::Config(format!("unknown path `{other}` (expected vp, ve or cv)"))),
        };
        path.validate()?;
        Ok(path)
    }

    pub fn name(&self) -> &'static str {
        match self {
            PathKind::Vp { .. } => "vp",
            PathKind::Ve { .. } => "ve",
            PathKind::ConstantVelocity => "cv",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PathKind::Vp { beta } if !(beta > 0.0 && beta.is_finite()) => {
                Err(Error::Config(format!("vp beta must be positive, got {beta}")))
            }
            PathKind::Ve { alpha_max } if !(alpha_max > 1.0 && alpha_max.is_finite()) => {
                Err(Error::Config(format!("ve alpha_max must exceed 1, got {alpha_max}")))
            }
            _ => Ok(()),
        }
    }

    /// `(data coefficient, noise coefficient)` of the interpolant at `t`.
    pub fn coefficients(&self, t: f64) -> (f64, f64) {
        match *self {
            PathKind::Vp { beta } => {
                let a = (-0.5 * beta * t).exp();
                (a, (1.0 - a * a).max(0.0).sqrt())
            }
            PathKind::Ve { alpha_max } => (1.0, alpha_max.powf(t) - 1.0),
            PathKind::ConstantVelocity => (1.0 - t, t),
        }
    }

    /// Time derivatives of [`coefficients`](Self::coefficients). The VP noise
    /// derivative is `None` where it is singular (`α_t = 1`, i.e. `t = 0`).
    pub fn coefficient_rates(&self, t: f64) -> (f64, Option<f64>) {
        match *self {
            PathKind::Vp { beta } => {
                let a = (-0.5 * beta * t).exp();
                let da = -0.5 * beta * a;
                let s2 = 1.0 - a * a;
                let ds = if s2 > 0.0 { Some(0.5 * beta * a * a / s2.sqrt()) } else { None };
                (da, ds)
            }
            PathKind::Ve { alpha_max } => (0.0, Some(alpha_max.ln() * alpha_max.powf(t))),
            PathKind::ConstantVelocity => (-1.0, Some(1.0)),
        }
    }

    /// Standard deviation of `x_1` around the data when `x_noise ~ N(0, I)`;
    /// samplers scale their starting noise by this.
    pub fn prior_scale(&self) -> f64 {
        self.coefficients(1.0).1
    }
}

fn check(x_data: &Tensor, x_noise: &Tensor, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::arg(format!("time {t} outside [0, 1]")));
    }
    if x_data.shape() != x_noise.shape() {
        return Err(Error::Shape {
            op: "interpolate",
            lhs: x_data.shape().to_vec(),
            rhs: x_noise.shape().to_vec(),
        });
    }
    Ok(())
}

/// Point on the path at time `t`.
pub fn interpolate(path: PathKind, x_data: &Tensor, x_noise: &Tensor, t: f64) -> Result<Tensor> {
    check(x_data, x_noise, t)?;
    let (a, s) = path.coefficients(t);
    x_data.zip_with(x_noise, |d, n| a * d + s * n)
}

/// Conditional velocity `d x_t / dt` at time `t`.
pub fn target_velocity(path: PathKind, x_data: &Tensor, x_noise: &Tensor, t: f64) -> Result<Tensor> {
    check(x_data, x_noise, t)?;
    if path == PathKind::ConstantVelocity {
        return x_data.zip_with(x_noise, |d, n| n - d);
    }
    let (da, ds) = path.coefficient_rates(t);
    let ds = match ds {
        Some(ds) => ds,
        // 0·∞ with a zero noise term: the noise contribution vanishes.
        None if x_noise.data().iter().all(|&v| v == 0.0) => 0.0,
        None => {
            return Err(Error::Singularity(format!(
                "{} path noise coefficient has infinite slope at t = {t}",
                path.name()
            )))
        }
    };
    x_data.zip_with(x_noise, |d, n| da * d + ds * n)
}

/// Row-wise [`interpolate`] and [`target_velocity`] with one time value per
/// row of `x_data`. Returns `(x_t, target)`.
pub fn interpolate_batch(path: PathKind, x_data: &Tensor, x_noise: &Tensor, t: &[f64]) -> Result<(Tensor, Tensor)> {
    if t.len() != x_data.rows() {
        return Err(Error::arg(format!("{} times for {} rows", t.len(), x_data.rows())));
    }
    let mut xt = Vec::with_capacity(x_data.numel());
    let mut v = Vec::with_capacity(x_data.numel());
    for (r, &tr) in t.iter().enumerate() {
        let d = Tensor::vector(x_data.row(r).to_vec())?;
        let n = Tensor::vector(x_noise.row(r).to_vec())?;
        xt.extend(interpolate(path, &d, &n, tr)?.into_data());
        v.extend(target_velocity(path, &d, &n, tr)?.into_data());
    }
    Ok((
        Tensor::new(x_data.shape().to_vec(), xt)?,
        Tensor::new(x_data.shape().to_vec(), v)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(d: &[f64]) -> Tensor {
        Tensor::vector(d.to_vec()).unwrap()
    }

    const PATHS: [PathKind; 3] = [
        PathKind::Vp { beta: 10.0 },
        PathKind::Ve { alpha_max: 100.0 },
        PathKind::ConstantVelocity,
    ];

    #[test]
    fn endpoints() {
        let d = v(&[0.3, -1.2]);
        let n = v(&[1.5, 0.7]);
        let cv = PathKind::ConstantVelocity;
        assert_eq!(interpolate(cv, &d, &n, 0.0).unwrap(), d);
        assert_eq!(interpolate(cv, &d, &n, 1.0).unwrap(), n);
        assert_eq!(interpolate(PathKind::Vp { beta: 10.0 }, &d, &n, 0.0).unwrap(), d);
        assert_eq!(interpolate(PathKind::Ve { alpha_max: 100.0 }, &d, &n, 0.0).unwrap(), d);
    }

    #[test]
    fn rejects_out_of_range_time() {
        let d = v(&[0.0]);
        for p in PATHS {
            assert!(interpolate(p, &d, &d, 1.0001).is_err());
            assert!(target_velocity(p, &d, &d, -0.1).is_err());
        }
    }

    #[test]
    fn ve_initial_speed() {
        let d = v(&[0.4, 0.1]);
        let n = v(&[3.0, 4.0]);
        let vel = target_velocity(PathKind::Ve { alpha_max: 100.0 }, &d, &n, 0.0).unwrap();
        let norm = vel.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 100f64.ln() * 5.0).abs() < 1e-12);
    }

    #[test]
    fn vp_singularity_at_zero() {
        let d = v(&[0.4]);
        let p = PathKind::Vp { beta: 10.0 };
        assert!(matches!(target_velocity(p, &d, &v(&[1.0]), 0.0), Err(Error::Singularity(_))));
        let vel = target_velocity(p, &d, &v(&[0.0]), 0.0).unwrap();
        assert!((vel.data()[0] - (-5.0 * 0.4)).abs() < 1e-15);
    }

    #[test]
    fn matches_central_differences_at_midpoint() {
        let d = v(&[0.8, -0.3]);
        let n = v(&[-1.1, 0.6]);
        let h = 1e-5;
        for p in PATHS {
            let up = interpolate(p, &d, &n, 0.5 + h).unwrap();
            let dn = interpolate(p, &d, &n, 0.5 - h).unwrap();
            let fd = up.zip_with(&dn, |a, b| (a - b) / (2.0 * h)).unwrap();
            let an = target_velocity(p, &d, &n, 0.5).unwrap();
            assert!(fd.max_abs_diff(&an) < 1e-6, "{p:?}");
        }
    }

    proptest! {
        #[test]
        fn constant_velocity_target_is_time_invariant(t in 0.0f64..=1.0, a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let d = v(&[a, b]);
            let n = v(&[b, -a]);
            let p = PathKind::ConstantVelocity;
            prop_assert_eq!(target_velocity(p, &d, &n, t).unwrap(), target_velocity(p, &d, &n, 0.0).unwrap());
        }

        #[test]
        fn interpolate_is_affine(t in 0.0f64..=1.0, s in -2.0f64..2.0, which in 0usize..3) {
            let p = PATHS[which];
            let (d1, n1) = (v(&[0.5, -1.0]), v(&[2.0, 0.25]));
            let (d2, n2) = (v(&[-0.75, 0.1]), v(&[0.3, -0.6]));
            let mix = |a: &Tensor, b: &Tensor| a.zip_with(b, |x, y| s * x + (1.0 - s) * y).unwrap();
            let lhs = interpolate(p, &mix(&d1, &d2), &mix(&n1, &n2), t).unwrap();
            let rhs = mix(&interpolate(p, &d1, &n1, t).unwrap(), &interpolate(p, &d2, &n2, t).unwrap());
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
        }

        #[test]
        fn velocity_is_time_derivative(t in 0.01f64..0.99, which in 0usize..3) {
            let p = PATHS[which];
            let d = v(&[0.7, -0.2]);
            let n = v(&[-0.4, 1.3]);
            let h = 1e-5;
            let up = interpolate(p, &d, &n, t + h).unwrap();
            let dn = interpolate(p, &d, &n, t - h).unwrap();
            let fd = up.zip_with(&dn, |a, b| (a - b) / (2.0 * h)).unwrap();
            let an = target_velocity(p, &d, &n, t).unwrap();
            // relative to the slope magnitude, which reaches ~460 for VE near t = 1
            let scale = an.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
            prop_assert!(fd.max_abs_diff(&an) / scale < 1e-6);
        }
    }
}
