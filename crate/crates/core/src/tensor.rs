//! Small tensor helpers shared across modules and tests.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

/// Reads a single-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Reads a `[rows, cols]` tensor into row-major nested vectors of f64.
pub fn to_f64_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Overwrites one flat element of a variable.
pub fn set_element(var: &Var, index: usize, value: f64) -> Result<()> {
    let shape = var.shape().clone();
    let dtype = var.dtype();
    let mut flat = to_f64_vec(var.as_tensor())?;
    flat[index] = value;
    let t = Tensor::from_vec(flat, shape, var.device())?.to_dtype(dtype)?;
    var.set(&t)?;
    Ok(())
}

/// Largest relative error between autograd gradients of `f` and central
/// finite differences, over every element of `vars`.
///
/// Relative error is `|g − fd| / max(|g|, |fd|, 1e-6)`. Each variable is
/// restored to its original value afterwards.
pub fn finite_difference_error<F>(f: &F, vars: &[&Var], step: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    let grads = f()?.backward()?;
    let mut worst = 0.0f64;
    for var in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_f64_vec(g)?,
            None => vec![0.0; var.elem_count()],
        };
        let original = var.as_tensor().copy()?;
        let base = to_f64_vec(&original)?;
        for (i, g) in analytic.iter().enumerate() {
            set_element(var, i, base[i] + step)?;
            let up = scalar(&f()?)?;
            set_element(var, i, base[i] - step)?;
            let down = scalar(&f()?)?;
            var.set(&original)?;
            let fd = (up - down) / (2.0 * step);
            let denom = g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((g - fd).abs() / denom);
        }
    }
    Ok(worst)
}

/// Fails with a numerical error if the finite-difference check exceeds `rel_tol`.
pub fn finite_difference_check<F>(f: &F, vars: &[&Var], step: f64, rel_tol: f64) -> Result<()>
where
    F: Fn() -> Result<Tensor>,
{
    let worst = finite_difference_error(f, vars, step)?;
    if worst > rel_tol {
        return Err(Error::Numerical(format!(
            "finite-difference mismatch: relative error {worst:.3e} > {rel_tol:.1e}"
        )));
    }
    Ok(())
}
