use std::collections::HashMap;

use crate::error::{invalid, NumError, Result};
use crate::params::{Gradients, ParamId, ParamStore};

/// Adam with bias correction. Parameters absent from a step's gradients are
/// left untouched, moments included.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<ParamId, Moments>,
}

#[derive(Clone, Debug)]
struct Moments {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: HashMap::new(),
        }
    }

    /// Number of updates applied to `id` so far.
    pub fn steps(&self, id: ParamId) -> u64 {
        self.state.get(&id).map_or(0, |s| s.step)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return invalid("adam", format!("learning rate {lr} must be positive"));
        }
        for (id, buf) in grads.iter() {
            if !buf.is_finite() {
                return Err(NumError::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
        for (id, buf) in grads.iter() {
            let len = store.get(id).len();
            let g = buf.to_dense(len);
            let st = self.state.entry(id).or_insert_with(|| Moments {
                step: 0,
                m: vec![0.0; len],
                v: vec![0.0; len],
            });
            st.step += 1;
            let bc1 = 1.0 - self.beta1.powi(st.step as i32);
            let bc2 = 1.0 - self.beta2.powi(st.step as i32);
            let p = store.get_mut(id).data_mut();
            for k in 0..len {
                st.m[k] = self.beta1 * st.m[k] + (1.0 - self.beta1) * g[k];
                st.v[k] = self.beta2 * st.v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = st.m[k] / bc1;
                let vhat = st.v[k] / bc2;
                p[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning-rate schedule for a minimised metric.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: f64,
    since_best: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        assert!(lr > 0.0 && factor > 0.0 && factor < 1.0);
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records one epoch's metric; the rate is multiplied by `factor` once
    /// `patience` consecutive epochs fail to improve on the best value.
    /// Returns true when the rate was reduced.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.since_best = 0;
            return false;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            self.lr *= self.factor;
            self.since_best = 0;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GradBuf;
    use crate::tensor::Tensor;

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![v])).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut s, id) = one_param(0.25);
        let mut g = Gradients::new();
        g.insert(id, GradBuf::Dense(vec![0.0]));
        Adam::default().step(&mut s, &g, 1e-3).unwrap();
        assert_eq!(s.get(id).data(), &[0.25]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = one_param(0.0);
        let mut g = Gradients::new();
        g.insert(id, GradBuf::Dense(vec![1.0]));
        Adam::default().step(&mut s, &g, 1e-3).unwrap();
        // m̂ = 1, v̂ = 1, so Δ = -lr / (1 + ε).
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((s.get(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn absent_parameters_are_not_touched() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0])).unwrap();
        let b = s.add("b", Tensor::vector(vec![2.0])).unwrap();
        let mut adam = Adam::default();
        let mut g = Gradients::new();
        g.insert(a, GradBuf::Dense(vec![0.5]));
        g.insert(b, GradBuf::Dense(vec![0.5]));
        adam.step(&mut s, &g, 1e-2).unwrap();
        let b_before = s.get(b).item();
        let mut only_a = Gradients::new();
        only_a.insert(a, GradBuf::Dense(vec![0.5]));
        adam.step(&mut s, &only_a, 1e-2).unwrap();
        assert_eq!(s.get(b).item(), b_before);
        assert_eq!(adam.steps(a), 2);
        assert_eq!(adam.steps(b), 1);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let (mut s, id) = one_param(0.3);
            let mut adam = Adam::default();
            for k in 0..50 {
                let mut g = Gradients::new();
                g.insert(id, GradBuf::Dense(vec![(k as f64 * 0.37).sin()]));
                adam.step(&mut s, &g, 1e-3).unwrap();
            }
            s.get(id).item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut s, id) = one_param(0.0);
        let mut g = Gradients::new();
        g.insert(id, GradBuf::Dense(vec![f64::NAN]));
        let err = Adam::default().step(&mut s, &g, 1e-3).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(s.get(id).item(), 0.0);
    }

    #[test]
    fn sparse_rows_update_like_dense() {
        let mut s = ParamStore::new();
        let id = s.add("emb", Tensor::zeros(&[3, 2])).unwrap();
        let mut dense = s.clone();
        let mut rows = std::collections::BTreeMap::new();
        rows.insert(1, vec![1.0, -2.0]);
        let mut g = Gradients::new();
        g.insert(id, GradBuf::Rows { width: 2, rows });
        let mut gd = Gradients::new();
        gd.insert(id, GradBuf::Dense(vec![0.0, 0.0, 1.0, -2.0, 0.0, 0.0]));
        Adam::default().step(&mut s, &g, 1e-3).unwrap();
        Adam::default().step(&mut dense, &gd, 1e-3).unwrap();
        assert_eq!(s.get(id), dense.get(id));
    }

    #[test]
    fn plateau_halves_after_patience_epochs() {
        let mut sch = PlateauScheduler::new(1e-3, 0.5, 5);
        assert!(!sch.observe(1.0));
        for _ in 0..4 {
            assert!(!sch.observe(1.0));
        }
        assert!(sch.observe(1.5));
        assert_eq!(sch.lr(), 5e-4);
        assert!(!sch.observe(0.5));
        assert_eq!(sch.best(), 0.5);
        assert_eq!(sch.lr(), 5e-4);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let (_, id) = one_param(0.0);
        let mut g = Gradients::new();
        g.insert(id, GradBuf::Dense(vec![30.0, 40.0]));
        assert_eq!(g.clip_global_norm(5.0), 50.0);
        assert!((g.global_norm() - 5.0).abs() < 1e-12);
    }
}
