use crate::diffcore::params::ParamStore;

/// Plain SGD over a parameter store; grads are in store order.
pub fn sgd_step(store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
    for ((_, tensor), grad) in store.iter_mut().zip(grads) {
        for (w, g) in tensor.data_mut().iter_mut().zip(grad) {
            *w -= lr * g;
        }
    }
}

/// Adam with bias correction; one state per parameter coordinate.
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
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (gi, ((_, tensor), grad)) in store.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                tensor.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tensor::Tensor;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![2], vec![1.0, -1.0]));
        sgd_step(&mut store, &[vec![0.5, -0.5]], 0.1);
        assert_eq!(store.get("w").data(), &[0.95, -0.95]);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize 0.5 * ||w - t||^2; gradient is (w - t)
        let target = [3.0, -2.0];
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![2], vec![0.0, 0.0]));
        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = store
                .get("w")
                .data()
                .iter()
                .zip(&target)
                .map(|(w, t)| w - t)
                .collect();
            adam.step(&mut store, &[g]);
        }
        for (w, t) in store.get("w").data().iter().zip(&target) {
            assert!((w - t).abs() < 1e-3, "w={w} target={t}");
        }
    }
}
