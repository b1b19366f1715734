//! Central finite-difference verification of analytic gradients.

use crate::autodiff::params::{ParamId, ParamStore};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Maximum relative error between analytic gradients and central finite
/// differences, over every scalar coordinate of the listed parameters.
///
/// `eval` must deterministically map the current store contents to a scalar
/// loss. `analytic` pairs each parameter with its gradient at the unperturbed
/// point. A non-finite evaluation is an error, never a number.
pub fn finite_difference_check(
    mut eval: impl FnMut(&ParamStore) -> Result<f64>,
    analytic: &[(ParamId, Tensor)],
    store: &mut ParamStore,
    h: f64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut max_rel = 0.0f64;
    for (id, grad) in analytic {
        if grad.shape() != store.tensor(*id).shape() {
            return Err(Error::shape(
                "finite_difference_check",
                format!("gradient {:?} for parameter {:?}", grad.shape(), store.tensor(*id).shape()),
            ));
        }
        for k in 0..grad.numel() {
            let orig = store.tensor(*id).data()[k];
            store.tensor_mut(*id).data_mut()[k] = orig + h;
            let plus = eval(store)?;
            store.tensor_mut(*id).data_mut()[k] = orig - h;
            let minus = eval(store)?;
            store.tensor_mut(*id).data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!(
                        "finite-difference evaluation at parameter `{}`[{}]",
                        store.name(*id),
                        k
                    ),
                });
            }
            let cd = (plus - minus) / (2.0 * h);
            let an = grad.data()[k];
            let rel = (an - cd).abs() / an.abs().max(cd.abs()).max(1e-12);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
