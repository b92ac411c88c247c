use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖)` in the Euclidean norm.
    pub max_rel_error: f64,
    /// Largest elementwise `|analytic - numeric|`.
    pub max_abs_error: f64,
}

pub const FD_STEP: f32 = 1e-3;

/// Checks the reverse-mode gradient of a scalar function at `point`.
pub fn grad_check<F>(f: F, point: &Tensor) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.var(point.clone());
    let y = f(&mut tape, x)?;
    if tape.get(y).len() != 1 {
        return Err(Error::invalid("grad_check needs a scalar function"));
    }
    if !tape.get(y).is_finite() {
        return Err(Error::NonFinite("grad_check"));
    }
    let grads = tape.backward(y);
    let analytic: Vec<f64> = match grads.get(x) {
        Some(g) => g.data().iter().map(|v| *v as f64).collect(),
        None => vec![0.0; point.len()],
    };

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let xv = t.constant_value(p);
        let yv = f(&mut t, xv)?;
        let v = t.get(yv).data()[0];
        if v.is_finite() {
            Ok(v as f64)
        } else {
            Err(Error::NonFinite("grad_check"))
        }
    };

    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = point.clone();
        minus.data_mut()[i] -= FD_STEP;
        // The realised step after f32 rounding.
        let h = plus.data()[i] as f64 - minus.data()[i] as f64;
        numeric.push((eval(plus)? - eval(minus)?) / h);
    }

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    let max_rel_error = if scale > 0.0 { norm(&diff) / scale } else { 0.0 };
    let max_abs_error = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error,
        max_abs_error,
    })
}
