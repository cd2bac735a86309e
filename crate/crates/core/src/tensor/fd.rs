use super::{ParamId, ParamStore, Tensor};
use crate::error::Result;

/// Central-difference gradient of `f` with respect to the listed parameters.
///
/// The step for coordinate `p` is `h * max(1, |p|)`. `f` must be
/// deterministic (replay any noise it uses). Parameters are restored
/// exactly before returning.
pub fn finite_difference_gradient<F>(
    mut f: F,
    store: &mut ParamStore,
    params: &[ParamId],
    h: f64,
) -> Result<Vec<Tensor>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut out = Vec::with_capacity(params.len());
    for &id in params {
        let n = store.get(id).len();
        let mut grad = Tensor::zeros(store.get(id).shape());
        for i in 0..n {
            let orig = store.get(id).data()[i];
            let step = h * orig.abs().max(1.0);
            store.get_mut(id).data_mut()[i] = orig + step;
            let up = f(store);
            store.get_mut(id).data_mut()[i] = orig - step;
            let down = f(store);
            store.get_mut(id).data_mut()[i] = orig;
            grad.data_mut()[i] = (up? - down?) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}
