use super::VelocityField;

/// Exponential moving average of the velocity-field weights:
/// `shadow ← decay·shadow + (1 − decay)·params`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub decay: f64,
    shadow: VelocityField,
}

impl Ema {
    /// Starts the shadow at a copy of `field`.
    pub fn new(field: &VelocityField, decay: f64) -> Self {
        assert!((0.0..=1.0).contains(&decay), "EMA decay must lie in [0, 1]");
        Self {
            decay,
            shadow: field.clone(),
        }
    }

    pub fn from_shadow(shadow: VelocityField, decay: f64) -> Self {
        Self { decay, shadow }
    }

    pub fn shadow(&self) -> &VelocityField {
        &self.shadow
    }

    pub fn update(&mut self, params: &VelocityField) {
        assert_eq!(self.shadow.config(), params.config(), "EMA shape mismatch");
        let mu = self.decay;
        for (s, p) in self.shadow.params_mut().iter_mut().zip(params.params()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = mu * *a + (1.0 - mu) * b;
            }
        }
    }
}
