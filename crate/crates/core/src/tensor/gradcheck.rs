//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward closures it verifies.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Per input: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-12)`.
    pub rel_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of the scalar produced by `f` against central
/// differences with step `h`, for every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut num = vec![0.0; a.numel()];
        for (j, n) in num.iter_mut().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            *n = (up - down) / (2.0 * h);
        }
        let diff: f64 = a.data().iter().zip(&num).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let na = a.norm();
        let nn = num.iter().map(|x| x * x).sum::<f64>().sqrt();
        rel_errors.push(diff / na.max(nn).max(1e-12));
    }
    Ok(GradReport { rel_errors })
}
