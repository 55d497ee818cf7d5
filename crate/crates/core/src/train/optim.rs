use std::collections::BTreeMap;

use crate::autograd::{Gradients, Real};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Exponential interpolation from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("total_steps", "must be positive"));
    }
    if !(lr_min > 0.0) || !lr_max.is_finite() || lr_min > lr_max {
        return Err(Error::config("lr_min", "need 0 < lr_min <= lr_max"));
    }
    if step > total_steps {
        return Err(Error::config(
            "step",
            format!("{step} is past the last step {total_steps}"),
        ));
    }
    if step == total_steps {
        // The general form can be off by an ulp here.
        return Ok(lr_min);
    }
    Ok(lr_max * (lr_min / lr_max).powf(step as f64 / total_steps as f64))
}

/// Euclidean norm over every gradient entry.
pub fn global_norm<F: Real>(grads: &Gradients<F>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|x| x.to_f64().unwrap().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = F::lit(max_norm / norm);
        for t in grads.values_mut() {
            for x in t.data_mut() {
                *x = *x * scale;
            }
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Adam<F: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<F>>,
    v: BTreeMap<String, Vec<F>>,
}

impl<F: Real> Default for Adam<F> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<F: Real> Adam<F> {
    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One bias-corrected update of every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = F::lit(lr * c2.sqrt() / c1);
        let eps = F::lit(self.eps * c2.sqrt());
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            for (((x, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (F::one() - b1) * *gi;
                *vi = b2 * *vi + (F::one() - b2) * *gi * *gi;
                *x = *x - step * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(lr_schedule(0, 10, 1e-3, 1e-4).unwrap(), 1e-3);
        assert_eq!(lr_schedule(10, 10, 1e-3, 1e-4).unwrap(), 1e-4);
        assert_eq!(lr_schedule(8000, 8000, 3e-5, 1e-5).unwrap(), 1e-5);
        let mid = lr_schedule(5, 10, 1e-3, 1e-4).unwrap();
        assert!((mid - (1e-3f64 * 1e-4).sqrt()).abs() < 1e-15);
        assert!(lr_schedule(0, 0, 1e-3, 1e-4).is_err());
        assert!(lr_schedule(0, 10, 1e-4, 1e-3).is_err());
        assert!(lr_schedule(11, 10, 1e-3, 1e-4).is_err());
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g: Gradients<f64> = BTreeMap::new();
        g.insert("a".into(), Tensor::vector(vec![3.0, 0.0]));
        g.insert("b".into(), Tensor::vector(vec![4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 10.0), global_norm(&g));
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        // With bias correction the first step is lr * g / (|g| + eps).
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut g: Gradients<f64> = BTreeMap::new();
        g.insert("w".into(), Tensor::vector(vec![0.3, -4.0, 0.0]));
        let mut adam = Adam::default();
        adam.step(&mut store, &g, 0.1).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] - -1.9).abs() < 1e-7);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::vector(vec![5.0, -3.0]));
        let mut adam = Adam::default();
        for _ in 0..2000 {
            let w = store.get("w").unwrap().clone();
            let mut g: Gradients<f64> = BTreeMap::new();
            g.insert(
                "w".into(),
                Tensor::vector(w.data().iter().map(|x| 2.0 * (x - 1.0)).collect()),
            );
            adam.step(&mut store, &g, 0.05).unwrap();
        }
        for x in store.get("w").unwrap().data() {
            assert!((x - 1.0).abs() < 1e-3, "{x}");
        }
    }
}
