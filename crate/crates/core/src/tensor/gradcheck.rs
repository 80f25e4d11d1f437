use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against the fourth-order
/// five-point central difference and returns the largest relative error over
/// coordinates,
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step {step}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let out = f(&mut tape, xv)?;
    check_finite(tape.value(out))?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe);
        let out = f(&mut tape, v)?;
        check_finite(tape.value(out))?;
        tape.value(out).item()
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let at = |offset: f64| {
            let mut probe = x.clone();
            probe.data_mut()[i] += offset;
            eval(probe)
        };
        let numeric = five_point(at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?, step);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// `f'(x)` from `f(x+2h), f(x+h), f(x-h), f(x-2h)`, error `O(h^4)`.
pub fn five_point(f2: f64, f1: f64, fm1: f64, fm2: f64, h: f64) -> f64 {
    (-f2 + 8.0 * f1 - 8.0 * fm1 + fm2) / (12.0 * h)
}

fn check_finite(t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("grad_check objective".into()))
    }
}
