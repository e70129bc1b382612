//! Gradient and Hessian-vector helpers over tape builders.

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Value and gradient of a scalar function recorded by `f` at real `w`.
pub fn value_and_grad<F>(f: &F, w: &Tensor) -> Result<(f64, Tensor)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let wv = tape.leaf(w.clone())?;
    let root = f(&mut tape, wv)?;
    let value = tape
        .scalar(root)
        .ok_or_else(|| AutodiffError::NonScalarRoot(tape.shape(root).to_vec()))?;
    let mut g = tape.backward(root)?;
    let grad = g.take(wv).expect("leaf gradient present");
    Ok((value, grad))
}

pub fn grad<F>(f: &F, w: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    value_and_grad(f, w).map(|(_, g)| g)
}

/// Hessian-vector product `H(w)·v` by central differences of gradients with
/// step `h = 1e-4·(1+‖w‖∞)/‖v‖∞`. Zero `v` gives a zero result.
pub fn hvp<F>(f: &F, w: &Tensor, v: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if w.shape() != v.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "hvp",
            lhs: w.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let (wd, vd) = match (w.as_real(), v.as_real()) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(AutodiffError::Dtype {
                op: "hvp",
                expected: "real",
            })
        }
    };
    let vinf = vd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if vinf == 0.0 {
        return Ok(Tensor::zeros(w.shape()));
    }
    let winf = wd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let h = 1e-4 * (1.0 + winf) / vinf;
    let shifted = |s: f64| {
        Tensor::real(
            w.shape(),
            wd.iter().zip(vd).map(|(a, b)| a + s * b).collect(),
        )
    };
    let gp = grad(f, &shifted(h)?)?;
    let gm = grad(f, &shifted(-h)?)?;
    let out = gp
        .data()
        .iter()
        .zip(gm.data())
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect();
    Tensor::real(w.shape(), out)
}
