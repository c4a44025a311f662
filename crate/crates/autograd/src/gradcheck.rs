//! Central finite-difference oracle. It only ever evaluates the forward
//! function, so it is independent of the backward pass it is used to audit.

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Numerical gradient of `f` with respect to one parameter tensor.
pub fn numerical_param_grad<F>(store: &ParamStore, id: ParamId, step: f64, mut f: F) -> Tensor
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut work = store.clone();
    let base = store.get(id).clone();
    let mut out = Tensor::zeros(base.raw_dim());
    for (i, g) in out.iter_mut().enumerate() {
        let orig = base.as_slice().expect("contiguous")[i];
        work.get_mut(id).as_slice_mut().expect("contiguous")[i] = orig + step;
        let plus = f(&work);
        work.get_mut(id).as_slice_mut().expect("contiguous")[i] = orig - step;
        let minus = f(&work);
        work.get_mut(id).as_slice_mut().expect("contiguous")[i] = orig;
        *g = (plus - minus) / (2.0 * step);
    }
    out
}

/// Numerical gradient of `f` with respect to a free tensor input.
pub fn numerical_input_grad<F>(input: &Tensor, step: f64, mut f: F) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut work = input.as_standard_layout().into_owned();
    let mut out = Tensor::zeros(input.raw_dim());
    for (i, g) in out.iter_mut().enumerate() {
        let orig = work.as_slice().expect("contiguous")[i];
        work.as_slice_mut().expect("contiguous")[i] = orig + step;
        let plus = f(&work);
        work.as_slice_mut().expect("contiguous")[i] = orig - step;
        let minus = f(&work);
        work.as_slice_mut().expect("contiguous")[i] = orig;
        *g = (plus - minus) / (2.0 * step);
    }
    out
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
/// Norms below this count as zero in [`relative_error`].
pub const ZERO_FLOOR: f64 = 1e-10;

/// `|a - b| / max(|a|, |b|)` over whole tensors. When both norms are below
/// [`ZERO_FLOOR`] the gradient vanishes analytically (attention key biases,
/// for one) and the absolute difference is returned instead.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < ZERO_FLOOR {
        diff
    } else {
        diff / denom
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub relative_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.params.iter().map(|p| p.relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Compare analytic gradients against central differences for each listed
/// parameter. A parameter missing from `analytic` is treated as zero.
pub fn check_params<F>(
    store: &ParamStore,
    analytic: &ParamGrads,
    ids: impl IntoIterator<Item = ParamId>,
    step: f64,
    mut f: F,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let params = ids
        .into_iter()
        .map(|id| {
            let numeric = numerical_param_grad(store, id, step, &mut f);
            let zero = Tensor::zeros(numeric.raw_dim());
            let a = analytic.get(id).unwrap_or(&zero);
            ParamCheck {
                name: store.name(id).to_string(),
                relative_error: relative_error(a, &numeric),
                analytic_norm: a.iter().map(|x| x * x).sum::<f64>().sqrt(),
            }
        })
        .collect();
    GradCheckReport { params }
}
