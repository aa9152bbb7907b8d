use super::params::ParamStore;
use super::scalar::Scalar;

/// Central finite-difference step used throughout the test suites.
pub const FD_STEP: f64 = 1e-5;

/// Compare the analytic gradients already accumulated in `store` against
/// central finite differences of `loss_fn`, perturbing every component of
/// every parameter in turn.
///
/// Returns the max over components of `|fd - analytic| / max(1, |analytic|)`.
/// `loss_fn` must be forward-only (it is re-evaluated twice per component);
/// the caller runs the tape backward once beforehand to populate the grads.
pub fn grad_check<T: Scalar>(
    store: &mut ParamStore<T>,
    mut loss_fn: impl FnMut(&ParamStore<T>) -> T,
    step: T,
) -> T {
    let two = T::cast(2.0);
    let mut worst = T::zero();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for j in 0..store.value(id).numel() {
            let original = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = original + step;
            let plus = loss_fn(store);
            store.value_mut(id).data_mut()[j] = original - step;
            let minus = loss_fn(store);
            store.value_mut(id).data_mut()[j] = original;

            let fd = (plus - minus) / (two * step);
            let analytic = store.grad(id).data()[j];
            let err = (fd - analytic).abs() / T::one().max(analytic.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    #[test]
    fn linear_function_is_exact() {
        // loss = sum(3 * p): analytic gradient 3, FD exact for linear maps.
        let mut store = ParamStore::<f64>::new();
        let id = store
            .register("p", Tensor::from_vec(vec![3], vec![0.4, -1.0, 2.0]).unwrap())
            .unwrap();

        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let scaled = tape.scale(p, 3.0);
        let loss = tape.mean_all(scaled);
        let grads = tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&grads, &mut store);

        let err = grad_check(
            &mut store,
            |s| {
                let mut t = Tape::new();
                let p = t.param(s, id);
                let scaled = t.scale(p, 3.0);
                let loss = t.mean_all(scaled);
                t.value(loss).item()
            },
            FD_STEP,
        );
        assert!(err < 1e-10, "linear grad check error {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        // Negative control: scale one analytic component and the harness
        // must report a large error.
        let mut store = ParamStore::<f64>::new();
        let id = store
            .register("p", Tensor::from_vec(vec![2], vec![0.7, -0.3]).unwrap())
            .unwrap();

        let forward = |s: &ParamStore<f64>| {
            let mut t = Tape::new();
            let p = t.param(s, id);
            let q = t.mul(p, p).unwrap();
            let loss = t.mean_all(q);
            t.value(loss).item()
        };

        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let q = tape.mul(p, p).unwrap();
        let loss = tape.mean_all(q);
        let grads = tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&grads, &mut store);

        let clean = grad_check(&mut store, forward, FD_STEP);
        assert!(clean < 1e-8, "clean check should pass, got {clean}");

        // Inject the bug: corrupt one component, keep the other.
        let good = store.grad(id).clone();
        store.zero_grads();
        let mut bad = good.clone();
        bad.data_mut()[0] = good.data()[0] * 1.5;
        store.accumulate_grad(id, &bad);
        let corrupted = grad_check(&mut store, forward, FD_STEP);
        assert!(corrupted > 1e-2, "corrupted check should fail, got {corrupted}");
    }
}
