//! Central finite-difference oracle for tape gradients (64-bit).

use crate::{Result, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Norm-wise relative error `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)`
    /// for each input.
    pub relative_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare backward gradients of `build` against central differences with
/// step `h`. `build` receives one gradient-tracking leaf per input and must
/// return a scalar.
pub fn check_gradients<B>(inputs: &[Tensor<f64>], h: f64, build: B) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[idx])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let orig = input.data()[j];
            work[idx].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[idx].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[idx].data_mut()[j] = orig;
            *num = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        relative_errors.push(if denom < 1e-12 { diff } else { diff / denom });
    }
    Ok(GradCheckReport { relative_errors })
}
