use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
}

fn scalar_value(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Compares the reverse-mode gradient of a scalar function of `x` against
/// central finite differences and returns the max relative error.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad());
    let out = f(&mut g, xv)?;
    scalar_value(&g, out)?;
    let grads = g.backward(out)?;
    let zeros = alloc::vec![0.0; x.numel()];
    let analytic = grads.wrt(xv).unwrap_or(&zeros);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let out = f(&mut g, v)?;
        scalar_value(&g, out)
    };
    check_against_differences(eval, analytic, x, eps)
}

/// Central-difference comparison of a supplied `analytic` gradient for the
/// scalar function `value` at `x`. Returns the max relative error.
pub fn check_against_differences<F>(value: F, analytic: &[f64], x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.values_mut()[i] += eps;
        let mut minus = x.clone();
        minus.values_mut()[i] -= eps;
        let numeric = (value(&plus)? - value(&minus)?) / (2.0 * eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFiniteGradient(i));
        }
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check over parameters of `store`.
///
/// At most `max_coords` coordinates (evenly strided) are probed per parameter.
pub fn gradient_check_params<F>(
    store: &mut ParamStore,
    max_coords: usize,
    eps: f64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    store.set_requires_grad(true);
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_value(&g, out)?;
    g.backward(out)?.accumulate_into(store);

    let ids: alloc::vec::Vec<ParamId> = store.ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.get(id).numel();
        let analytic: alloc::vec::Vec<f64> = store
            .get(id)
            .grad()
            .map(|s| s.to_vec())
            .unwrap_or_else(|| alloc::vec![0.0; n]);
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).values()[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                store.get_mut(id).values_mut()[i] = v;
                let mut g = Graph::new();
                let out = f(&mut g, store)?;
                scalar_value(&g, out)
            };
            let fp = eval_at(orig + eps)?;
            let fm = eval_at(orig - eps)?;
            store.get_mut(id).values_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            if !numeric.is_finite() || !analytic[i].is_finite() {
                return Err(Error::NonFiniteGradient(i));
            }
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    store.zero_grad();
    Ok(worst)
}
