use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Partition};
use crate::error::NeuroError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub momentum: f64,
    /// Global L2 norm ceiling over the stepped gradients; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            clip_norm: Some(5.0),
        }
    }
}

/// SGD with heavy-ball momentum: v ← μv + g, p ← p − lr·v.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<f64>>) {
        self.velocity = velocity;
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// Updates every tensor whose partition is listed, then zeroes all gradients.
    ///
    /// Tensors outside `partitions` keep their value and velocity untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        lr: f64,
        partitions: &[Partition],
    ) -> Result<(), NeuroError> {
        if self.velocity.len() != store.len() {
            self.velocity = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        }
        let mut norm_sq = 0.0;
        for (_, p) in store.iter() {
            if !p.grad.is_finite() {
                return Err(NeuroError::NonFiniteGradient(p.name.clone()));
            }
            if partitions.contains(&p.partition) {
                norm_sq += p.grad.data().iter().map(|g| g * g).sum::<f64>();
            }
        }
        let scale = match self.config.clip_norm {
            Some(max) if norm_sq.sqrt() > max => max / norm_sq.sqrt(),
            _ => 1.0,
        };
        let mu = self.config.momentum;
        for (p, vel) in store.iter_mut().zip(&mut self.velocity) {
            if partitions.contains(&p.partition) {
                let grad = p.grad.data().to_vec();
                for ((w, v), g) in p.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = mu * *v + scale * g;
                    *w -= lr * *v;
                }
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuro::Tensor;

    fn scalar_store(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Partition::Encoder, Tensor::vector(vec![p]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn plain_step_arithmetic() {
        let mut s = scalar_store(1.0);
        let id = s.id("p").unwrap();
        s.get_mut(id).grad.data_mut()[0] = 2.0;
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.0,
            clip_norm: Some(5.0),
        });
        opt.step(&mut s, 0.1, &Partition::ALL).unwrap();
        assert!((s.value(id).data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(s.grad(id).data()[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(1.25);
        let mut opt = Sgd::new(SgdConfig::default());
        opt.step(&mut s, 0.5, &Partition::ALL).unwrap();
        assert_eq!(s.value(s.id("p").unwrap()).data()[0], 1.25);
    }

    #[test]
    fn quadratic_converges() {
        // loss (p-3)^2, gradient 2(p-3)
        let mut s = scalar_store(0.0);
        let id = s.id("p").unwrap();
        let mut opt = Sgd::new(SgdConfig::default());
        for _ in 0..200 {
            let p = s.value(id).data()[0];
            s.get_mut(id).grad.data_mut()[0] = 2.0 * (p - 3.0);
            opt.step(&mut s, 0.05, &Partition::ALL).unwrap();
        }
        assert!((s.value(id).data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut s = scalar_store(0.0);
        let id = s.id("p").unwrap();
        s.get_mut(id).grad.data_mut()[0] = f64::NAN;
        let err = Sgd::new(SgdConfig::default())
            .step(&mut s, 0.1, &Partition::ALL)
            .unwrap_err();
        assert!(err.to_string().contains("`p`"));
    }

    #[test]
    fn clipping_bounds_update() {
        let mut s = scalar_store(0.0);
        let id = s.id("p").unwrap();
        s.get_mut(id).grad.data_mut()[0] = 100.0;
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.0,
            clip_norm: Some(5.0),
        });
        opt.step(&mut s, 1.0, &Partition::ALL).unwrap();
        assert!((s.value(id).data()[0] + 5.0).abs() < 1e-12);
    }

    #[test]
    fn unlisted_partition_is_frozen() {
        let mut s = scalar_store(1.0);
        s.insert("d", Partition::Decoder, Tensor::vector(vec![2.0]).unwrap())
            .unwrap();
        let d = s.id("d").unwrap();
        s.get_mut(d).grad.data_mut()[0] = 1.0;
        Sgd::new(SgdConfig::default())
            .step(&mut s, 0.1, &[Partition::Encoder])
            .unwrap();
        assert_eq!(s.value(d).data()[0], 2.0);
        assert_eq!(s.grad(d).data()[0], 0.0);
    }
}
