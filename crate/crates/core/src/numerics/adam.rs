use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Adam hyperparameters. Defaults: lr 1e-3, betas 0.9/0.999, eps 1e-8.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Default for AdamHyper<T> {
    fn default() -> Self {
        Self {
            lr: T::cast(1e-3),
            beta1: T::cast(0.9),
            beta2: T::cast(0.999),
            eps: T::cast(1e-8),
        }
    }
}

/// Adam with bias correction. Holds first/second moment estimates shaped
/// like the parameters of the store it was built for.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
    pub hyper: AdamHyper<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, hyper: AdamHyper<T>) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { m, v, t: 0, hyper }
    }

    /// Steps taken so far; increments by exactly one per [`AdamState::step`].
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently accumulated in the store.
    /// Does not zero the gradients; that is the caller's job between steps.
    /// `trainable`, when given, freezes parameters whose entry is `false`.
    pub fn step(&mut self, store: &mut ParamStore<T>, trainable: Option<&[bool]>) {
        self.t += 1;
        let h = self.hyper;
        let one = T::one();
        let bc1 = one - h.beta1.powi(self.t as i32);
        let bc2 = one - h.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if let Some(mask) = trainable {
                if !mask[i] {
                    continue;
                }
            }
            let grad = store.grad(id).clone();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let value = store.value_mut(id);
            for j in 0..grad.numel() {
                let g = grad.data()[j];
                let mj = h.beta1 * m.data()[j] + (one - h.beta1) * g;
                let vj = h.beta2 * v.data()[j] + (one - h.beta2) * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                value.data_mut()[j] = value.data()[j] - h.lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
    }
}
