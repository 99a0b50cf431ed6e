//! Adam with bias correction, canonical constants β₁=0.9, β₂=0.999, ε=1e-8.

use crate::model::ParamStore;
use crate::tensor::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
    pub lr: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let m = (0..params.len()).map(|i| vec![T::zero(); params.tensor_at(i).len()]).collect();
        let v = (0..params.len()).map(|i| vec![T::zero(); params.tensor_at(i).len()]).collect();
        Self { m, v, t: 0, lr }
    }

    /// One update over the whole store; `grads` is aligned with store order.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) {
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1 = T::from_f64(BETA1);
        let b2 = T::from_f64(BETA2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - BETA1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - BETA2.powi(self.t as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(ADAM_EPS);

        for i in 0..grads.len() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = params.tensor_at_mut(i).data_mut();
            for ((p, &g), (mi, vi)) in data.iter_mut().zip(&grads[i]).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // with |g| ≫ ε the bias-corrected first step is lr·sign(g)
        let mut params = scalar_store(0.0);
        let mut opt = Adam::new(&params, 0.1);
        opt.step(&mut params, &[vec![42.0]]);
        let x = params.get("x").unwrap().item();
        assert!((x + 0.1).abs() < 1e-9, "got {x}");
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = scalar_store(1.5);
        let mut opt = Adam::new(&params, 0.1);
        opt.step(&mut params, &[vec![0.0]]);
        assert_eq!(params.get("x").unwrap().item(), 1.5);
    }

    #[test]
    fn quadratic_converges() {
        // 200 steps on f(x) = (x−3)² from 0 at lr 0.1 → within 0.05 of 3
        let mut params = scalar_store(0.0);
        let mut opt = Adam::new(&params, 0.1);
        for _ in 0..200 {
            let x = params.get("x").unwrap().item();
            let g = 2.0 * (x - 3.0);
            opt.step(&mut params, &[vec![g]]);
        }
        let x = params.get("x").unwrap().item();
        assert!((x - 3.0).abs() < 0.05, "got {x}");
    }
}
