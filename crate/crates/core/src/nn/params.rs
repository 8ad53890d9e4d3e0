use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{bail, Result};
use crate::tensor::{Real, Tensor};

/// Batch-norm numerical stabilizer.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running estimate when folding in a new batch.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    /// `None` for buffers such as running statistics.
    pub moments: Option<Moments<T>>,
}

impl<T: Real> Param<T> {
    pub fn trainable(&self) -> bool {
        self.moments.is_some()
    }
}

/// Named parameters plus optimizer state. Iteration order is the sorted
/// name order, which also fixes checkpoint layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    params: BTreeMap<String, Param<T>>,
    step: u64,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
            step: 0,
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_trainable(&mut self, name: &str, value: Tensor<T>) {
        let moments = Moments {
            m: Tensor::zeros(value.shape()),
            v: Tensor::zeros(value.shape()),
        };
        self.params.insert(
            name.to_string(),
            Param {
                value,
                moments: Some(moments),
            },
        );
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor<T>) {
        self.params.insert(
            name.to_string(),
            Param {
                value,
                moments: None,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        match self.params.get(name) {
            Some(p) => Ok(&p.value),
            None => bail!(State, "unknown parameter '{name}'"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.params.get_mut(name) {
            Some(p) => Ok(&mut p.value),
            None => bail!(State, "unknown parameter '{name}'"),
        }
    }

    pub fn entry(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn moments_mut(&mut self, name: &str) -> Option<&mut Moments<T>> {
        self.params.get_mut(name).and_then(|p| p.moments.as_mut())
    }

    /// Total number of scalar trainable values.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Folds observed batch statistics into the running estimates:
    /// `running = momentum·running + (1 − momentum)·batch`, with the batch
    /// variance bias-corrected by `count / (count − 1)`.
    pub fn update_running_stats(
        &mut self,
        mean_name: &str,
        var_name: &str,
        mean: &[T],
        var: &[T],
        count: usize,
    ) -> Result<()> {
        let mom = T::lit(BN_MOMENTUM);
        let rest = T::one() - mom;
        let correction = if count > 1 {
            T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
        } else {
            T::one()
        };
        let rm = self.get_mut(mean_name)?;
        if rm.len() != mean.len() {
            bail!(Dimension, "running mean '{mean_name}' has wrong width");
        }
        rm.data_mut()
            .iter_mut()
            .zip(mean)
            .for_each(|(r, &b)| *r = mom * *r + rest * b);
        let rv = self.get_mut(var_name)?;
        if rv.len() != var.len() {
            bail!(Dimension, "running variance '{var_name}' has wrong width");
        }
        rv.data_mut()
            .iter_mut()
            .zip(var)
            .for_each(|(r, &b)| *r = mom * *r + rest * b * correction);
        Ok(())
    }

    /// One Adam update with bias correction. Every trainable parameter must
    /// have a gradient of identical shape; buffers are left untouched.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor<T>>, cfg: &AdamConfig) -> Result<()> {
        for (name, p) in &self.params {
            if !p.trainable() {
                if grads.contains_key(name) {
                    bail!(State, "gradient supplied for non-trainable '{name}'");
                }
                continue;
            }
            match grads.get(name) {
                Some(g) if g.shape() == p.value.shape() => {}
                Some(g) => bail!(
                    Dimension,
                    "gradient for '{name}' has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.value.shape()
                ),
                None => bail!(State, "missing gradient for '{name}'"),
            }
        }
        if let Some(extra) = grads.keys().find(|k| !self.params.contains_key(*k)) {
            bail!(State, "gradient for unknown parameter '{extra}'");
        }

        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let Some(mom) = p.moments.as_mut() else { continue };
            let g = &grads[name];
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(mom.m.data_mut().iter_mut())
                .zip(mom.v.data_mut().iter_mut())
                .zip(g.data());
            for (((w, m), v), &gi) in it {
                *m = b1 * *m + (T::one() - b1) * gi;
                *v = b2 * *v + (T::one() - b2) * gi * gi;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Elementwise cast, optimizer state included.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            moments: p.moments.as_ref().map(|m| Moments {
                                m: m.m.cast(),
                                v: m.v.cast(),
                            }),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }
}

/// He-uniform initialization: `U(−√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-limit..limit)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert_trainable("w", Tensor::scalar(value));
        p
    }

    fn grads(name: &str, g: Tensor<f64>) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([(name.to_string(), g)])
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let mut p = ParamSet::<f64>::new();
        p.insert_trainable("w", Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let g = Tensor::new(&[4], vec![0.3, -7.0, 1e-3, 42.0]).unwrap();
        let cfg = AdamConfig::default();
        p.adam_step(&grads("w", g.clone()), &cfg).unwrap();
        let before = [1.0, -2.0, 0.5, 3.0];
        for ((&after, &b), &gi) in p.get("w").unwrap().data().iter().zip(&before).zip(g.data()) {
            let delta = after - b;
            assert!((delta.abs() - cfg.lr).abs() < 1e-8 * cfg.lr.max(1.0) + 1e-9);
            assert_eq!(delta.signum(), -gi.signum());
        }
        assert_eq!(p.step(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = one_param(0.7);
        for _ in 0..10 {
            p.adam_step(&grads("w", Tensor::scalar(0.0)), &AdamConfig::default())
                .unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn five_steps_match_hand_stepped_reference() {
        // Constant gradient 1: m_t = 1 − 0.9^t, v_t = 1 − 0.999^t, so
        // mhat = vhat = 1 and each step subtracts lr/(1 + eps).
        let lr = 2e-4;
        let mut p = one_param(0.0);
        let cfg = AdamConfig { lr, ..Default::default() };
        let mut w = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=5 {
            p.adam_step(&grads("w", Tensor::scalar(1.0)), &cfg).unwrap();
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            w -= lr * mhat / (vhat.sqrt() + 1e-8);
            assert!((p.get("w").unwrap().data()[0] - w).abs() < 1e-15);
        }
        assert!((w + 5.0 * lr / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_and_missing_gradient_rejected() {
        let mut p = one_param(0.0);
        let bad = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            p.adam_step(&grads("w", bad), &AdamConfig::default()),
            Err(crate::Error::Dimension(_))
        ));
        assert!(p.adam_step(&BTreeMap::new(), &AdamConfig::default()).is_err());
        assert_eq!(p.step(), 0);
    }

    #[test]
    fn running_stats_use_momentum_and_unbiased_variance() {
        let mut p = ParamSet::<f64>::new();
        p.insert_buffer("rm", Tensor::zeros(&[1]));
        p.insert_buffer("rv", Tensor::full(&[1], 1.0));
        p.update_running_stats("rm", "rv", &[2.0], &[3.0], 4).unwrap();
        assert!((p.get("rm").unwrap().data()[0] - 0.2).abs() < 1e-12);
        assert!((p.get("rv").unwrap().data()[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-12);
    }
}
