use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction and no weight decay.
///
/// Each tensor keeps its own step counter, so a tensor that receives no
/// gradient on a step (`None`) is left untouched and its moments do not decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(lr: f64, names: Vec<String>, shapes: &[&[usize]]) -> Self {
        assert_eq!(names.len(), shapes.len());
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            names,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            steps: vec![0; shapes.len()],
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores moments and step counters, e.g. from a checkpoint.
    pub fn set_state(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, steps: Vec<u64>) -> Result<()> {
        let ok = m.len() == self.m.len()
            && v.len() == self.v.len()
            && steps.len() == self.steps.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.shape() == b.shape())
            && v.iter().zip(&self.v).all(|(a, b)| a.shape() == b.shape());
        if !ok {
            return Err(Error::arg("optimizer state does not match parameter shapes"));
        }
        self.m = m;
        self.v = v;
        self.steps = steps;
        Ok(())
    }

    /// Applies one update. All gradients are validated before any parameter moves.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::arg(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params[i].shape() {
                    return Err(Error::Shape {
                        op: "adam_step",
                        lhs: params[i].shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", self.names[i])));
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor {
        Tensor::vector(vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::vector(vec![0.3, -2.0]).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(1e-3, vec!["p".into()], &[&[2]]);
        let g = Tensor::zeros(&[2]);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = one(1.0);
        let mut adam = Adam::new(0.01, vec!["p".into()], &[&[1]]);
        adam.step(&mut [&mut p], &[Some(&one(-3.7))]).unwrap();
        assert!((p.data()[0] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn matches_reference_for_two_steps() {
        // Straight-line reference, written out independently.
        let (lr, b1, b2, eps) = (0.05f64, 0.9f64, 0.999f64, 1e-8f64);
        let mut x = 0.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }

        let mut p = one(0.5);
        let mut adam = Adam::new(lr, vec!["p".into()], &[&[1]]);
        for _ in 0..2 {
            adam.step(&mut [&mut p], &[Some(&one(1.0))]).unwrap();
        }
        assert!((p.data()[0] - x).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_leaves_tensor_and_counter_alone() {
        let mut a = one(1.0);
        let mut b = one(2.0);
        let mut adam = Adam::new(0.1, vec!["a".into(), "b".into()], &[&[1], &[1]]);
        adam.step(&mut [&mut a, &mut b], &[Some(&one(1.0)), None]).unwrap();
        assert_eq!(b.data()[0], 2.0);
        assert_eq!(adam.steps(), &[1, 0]);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = one(1.0);
        let mut adam = Adam::new(0.1, vec!["layer3.bias".into()], &[&[1]]);
        let bad = Tensor::from_parts(vec![1], vec![f64::NAN]);
        let err = adam.step(&mut [&mut p], &[Some(&bad)]).unwrap_err();
        assert!(err.to_string().contains("layer3.bias"));
        assert_eq!(p.data()[0], 1.0);
    }
}
