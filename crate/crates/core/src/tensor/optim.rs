use std::collections::HashMap;

use super::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with decoupled weight decay.
///
/// Only parameters present in the supplied [`Gradients`] are touched, so a
/// head that did not take part in a loss keeps its value (and its moments).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    /// Apply one update. A non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::non_finite(format!(
                    "gradient of `{}`",
                    store.get(id).name
                )));
            }
        }
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t as i32);
            let bc2 = 1.0 - self.beta2.powi(st.t as i32);
            let decay = 1.0 - self.lr * self.weight_decay;
            for (((w, &gi), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *w *= decay;
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn quad_step(opt: &mut AdamW, store: &mut ParamStore, id: ParamId) -> f64 {
        let tape = Tape::new();
        let x = tape.param(store, id);
        let loss = x.square().sum();
        let l = loss.value().item();
        let g = tape.backward(loss).unwrap();
        opt.step(store, &g).unwrap();
        l
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::from_vec(vec![1.5])).unwrap();
        let tape = Tape::new();
        let x = tape.param(&s, id);
        let g = tape.backward(x.scale(0.0).sum()).unwrap();
        AdamW::new(0.1, 0.0).step(&mut s, &g).unwrap();
        assert_eq!(s.value(id).item(), 1.5);
    }

    #[test]
    fn descends_on_quadratic() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::from_vec(vec![1.0])).unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        quad_step(&mut opt, &mut s, id);
        assert!(s.value(id).item().abs() < 1.0);
    }

    #[test]
    fn matches_hand_stepped_recurrence() {
        // loss = (x - 0)^2 from x0 = 2, lr = 0.05, wd = 0.01
        let (lr, wd, b1, b2, eps) = (0.05, 0.01, 0.9, 0.999, 1e-8);
        let mut x: f64 = 2.0;
        let (mut m, mut v) = (0.0, 0.0);
        let mut trace = vec![];
        for t in 1..=3 {
            let g = 2.0 * x;
            x *= 1.0 - lr * wd;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            trace.push(x);
        }
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::from_vec(vec![2.0])).unwrap();
        let mut opt = AdamW::new(lr, wd);
        for expected in trace {
            quad_step(&mut opt, &mut s, id);
            assert!((s.value(id).item() - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::from_vec(vec![0.0])).unwrap();
        let tape = Tape::new();
        let x = tape.param(&s, id);
        // d/dx ln(x) at 0 is inf
        let g = tape.backward(x.ln().sum()).unwrap();
        let err = AdamW::new(0.1, 0.0).step(&mut s, &g).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(s.value(id).item(), 0.0);
    }

    #[test]
    fn monotone_after_warmup_on_convex_quadratic() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::from_vec(vec![3.0, -2.0])).unwrap();
        let mut opt = AdamW::new(0.01, 0.0);
        let losses: Vec<f64> = (0..150).map(|_| quad_step(&mut opt, &mut s, id)).collect();
        for w in losses[5..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }
}
