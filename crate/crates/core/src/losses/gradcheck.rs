//! Central finite-difference gradient checks for scalar functions of one tensor.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub rel_error: f64,
}

/// Compares the autograd gradient of `f` at `x` with central differences of step `eps`.
/// `x` must be f64; only the coordinates listed in `coords` are perturbed (all when `None`).
pub fn check_gradient<F>(f: F, x: &Tensor, eps: f64, coords: Option<&[usize]>) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if x.dtype() != DType::F64 {
        return Err(Error::Numeric("gradient checks run in f64".into()));
    }
    let var = Var::from_tensor(x)?;
    let y = f(var.as_tensor())?;
    if y.elem_count() != 1 {
        return Err(Error::Shape(format!("gradient check needs a scalar, got {:?}", y.dims())));
    }
    let grads = y.sum_all()?.backward()?;
    let g = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; x.elem_count()],
    };

    let base = x.flatten_all()?.to_vec1::<f64>()?;
    let all: Vec<usize> = (0..base.len()).collect();
    let idx = coords.unwrap_or(&all);
    let eval = |v: &[f64]| -> Result<f64> {
        let t = Tensor::from_slice(v, x.dims(), x.device())?;
        Ok(f(&t)?.sum_all()?.to_scalar::<f64>()?)
    };
    let mut analytic = Vec::with_capacity(idx.len());
    let mut numeric = Vec::with_capacity(idx.len());
    let mut v = base.clone();
    for &i in idx {
        v[i] = base[i] + eps;
        let hi = eval(&v)?;
        v[i] = base[i] - eps;
        let lo = eval(&v)?;
        v[i] = base[i];
        analytic.push(g[i]);
        numeric.push((hi - lo) / (2.0 * eps));
    }
    let norm = |a: &[f64]| a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    let rel_error = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
    Ok(GradCheck {
        analytic,
        numeric,
        rel_error,
    })
}
