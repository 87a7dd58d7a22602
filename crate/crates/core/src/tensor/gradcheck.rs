use crate::error::{invalid, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Largest relative disagreement between the tape gradient of `f` at `x` and a
/// central finite difference with step `h`, over all coordinates of `x`.
///
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(1e-8, |numeric|)` with
/// `numeric = (f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let analytic = match tape.backward(y) {
        Ok(()) => tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]),
        // A function that ignores its input has an identically zero gradient.
        Err(_) if !tape.requires_grad(y) => vec![0.0; x.len()],
        Err(e) => return Err(e),
    };

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let v = t.constant(probe);
        let out = f(&mut t, v)?;
        Ok(t.value(out).data()[0])
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
