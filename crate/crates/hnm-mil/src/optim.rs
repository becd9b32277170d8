//! Adam optimizer over a flat list of parameter tensors.

use crate::numerics::Tensor;

/// Adam with the usual default moment constants. Updates are applied
/// in-place and sequentially; one instance owns the moment state for one
/// parameter list whose shapes never change.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// One update. `grads` aligns with `params` element-for-element.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            debug_assert_eq!(p.len(), g.len());
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (pj, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *pj -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        // minimize (x - 2)^2
        let mut params = vec![Tensor::scalar(10.0)];
        let mut adam = Adam::new(0.1, &params);
        for _ in 0..500 {
            let x = params[0].as_scalar();
            let grad = vec![Tensor::scalar(2.0 * (x - 2.0))];
            adam.step(&mut params, &grad);
        }
        assert!((params[0].as_scalar() - 2.0).abs() < 1e-2);
    }
}
