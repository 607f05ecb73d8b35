//! AdamW with decoupled weight decay. Moment state lives in f64 and is
//! keyed by parameter index, so updates are deterministic for a fixed
//! gradient order.

use std::collections::HashMap;

use crate::params::ParamStore;
use crate::tensor::array::Array;
use crate::tensor::element::Element;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: HashMap<usize, Vec<f64>>,
    v: HashMap<usize, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over `(param index, gradient)` pairs. Decay is decoupled:
    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>, grads: &[(usize, Array<T>)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (ix, grad) in grads {
            let n = grad.numel();
            let m = self.m.entry(*ix).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(*ix).or_insert_with(|| vec![0.0; n]);
            let p = store.value_mut(*ix);
            debug_assert_eq!(p.numel(), n);
            let pd = p.data_mut();
            for i in 0..n {
                let gi = grad.data()[i].to_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let pv = pd[i].to_f64();
                let upd = m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * pv;
                pd[i] = T::from_f64(pv - self.lr * upd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;

    #[test]
    fn first_step_matches_closed_form() -> Result<()> {
        let mut store: ParamStore<f64> = ParamStore::new();
        let ix = store.add("p", Array::new(vec![1], vec![2.0])?)?;
        let mut opt = AdamW::new(0.1, 0.01);
        let g = 0.5f64;
        opt.step(&mut store, &[(ix, Array::new(vec![1], vec![g])?)]);
        let m_hat = g;
        let v_hat = g * g;
        let expect = 2.0 - 0.1 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.01 * 2.0);
        assert!((store.value(ix).data()[0] - expect).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn converges_on_quadratic() -> Result<()> {
        let mut store: ParamStore<f64> = ParamStore::new();
        let ix = store.add("p", Array::new(vec![1], vec![5.0])?)?;
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..2000 {
            let p = store.value(ix).data()[0];
            let grad = 2.0 * (p - 1.5);
            opt.step(&mut store, &[(ix, Array::new(vec![1], vec![grad])?)]);
        }
        assert!((store.value(ix).data()[0] - 1.5).abs() < 1e-3);
        Ok(())
    }

    #[test]
    fn decay_is_decoupled_from_gradient() -> Result<()> {
        let mut store: ParamStore<f64> = ParamStore::new();
        let ix = store.add("p", Array::new(vec![1], vec![1.0])?)?;
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut store, &[(ix, Array::new(vec![1], vec![0.0])?)]);
        assert!((store.value(ix).data()[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-12);
        Ok(())
    }
}
