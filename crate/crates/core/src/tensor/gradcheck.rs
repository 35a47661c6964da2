//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Points closer than this to a kink of a non-smooth op are rejected.
pub const KINK_MARGIN: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub coords: usize,
}

/// Checks the gradient of the scalar function `f` at `point`.
///
/// `f` builds its computation on the tape it is handed, starting from the
/// leaf that holds the point. Fails with [`Error::NearKink`] when any
/// non-smooth op saw an input within [`KINK_MARGIN`] of its kink and with
/// [`Error::NonFinite`] when a value or derivative is not finite.
pub fn gradcheck<F>(f: F, point: &Tensor, eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::with_kink_tracking();
        let x = tape.leaf(point.clone(), true);
        let y = f(&mut tape, x)?;
        if tape.value(y).numel() != 1 {
            return Err(Error::shape("gradcheck", &[tape.shape(y)]));
        }
        if let Some(margin) = tape.kink_margin() {
            if margin < KINK_MARGIN {
                return Err(Error::NearKink { margin });
            }
        }
        let grads = tape.backward(y)?;
        grads
            .get(x)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; point.numel()])
    };
    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p, false);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };
    gradcheck_fn(|p| eval(p.clone()), &analytic, point, eps)
}

/// Compares a supplied analytic gradient against central differences of `f`.
pub fn gradcheck_fn<F>(f: F, analytic: &[f64], point: &Tensor, eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if analytic.len() != point.numel() {
        return Err(Error::shape("gradcheck", &[&[analytic.len()], point.shape()]));
    }
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite { coord: i });
    }
    let mut max_err: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + eps;
        let fp = f(&probe)?;
        probe.data_mut()[i] = x0 - eps;
        let fm = f(&probe)?;
        probe.data_mut()[i] = x0;
        let numeric = (fp - fm) / (2.0 * eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite { coord: i });
        }
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(GradcheckReport {
        max_rel_error: max_err,
        coords: point.numel(),
    })
}
