//! Finite-difference verification of tape gradients in double precision.

use ndarray::Array2;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradInput {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
}

impl GradInput {
    pub fn param(name: impl Into<String>, value: Array2<f64>) -> Self {
        Self { name: name.into(), value, trainable: true }
    }

    pub fn frozen(name: impl Into<String>, value: Array2<f64>) -> Self {
        Self { name: name.into(), value, trainable: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// `(input name, max elementwise relative error)` for trainable inputs.
    pub max_rel_err: Vec<(String, f64)>,
    /// Frozen inputs, which have no gradient slot.
    pub skipped: Vec<String>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<G>(f: &G, inputs: &[GradInput], values: &[Array2<f64>]) -> Result<f64>
where
    G: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().zip(values).map(|(i, v)| tape.leaf(v.clone(), i.trainable)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out) != (1, 1) {
        return Err(Error::dim("grad_check", format!("closure must return 1x1, got {:?}", tape.shape(out))));
    }
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar closure `f` against
/// central differences for every entry of every trainable input.
pub fn grad_check<G>(f: G, inputs: &[GradInput], tolerance: f64) -> Result<GradReport>
where
    G: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|i| tape.leaf(i.value.clone(), i.trainable)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut values: Vec<Array2<f64>> = inputs.iter().map(|i| i.value.clone()).collect();
    let mut report = GradReport { max_rel_err: Vec::new(), skipped: Vec::new(), tolerance };
    for (k, input) in inputs.iter().enumerate() {
        if !input.trainable {
            debug_assert!(grads.get(vars[k]).is_none());
            report.skipped.push(input.name.clone());
            continue;
        }
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Array2::zeros(input.value.dim()));
        if analytic.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", input.name)));
        }
        let mut worst = 0.0f64;
        for idx in 0..input.value.len() {
            let pos = (idx / input.value.ncols(), idx % input.value.ncols());
            let orig = values[k][pos];
            values[k][pos] = orig + FD_STEP;
            let up = evaluate(&f, inputs, &values)?;
            values[k][pos] = orig - FD_STEP;
            let down = evaluate(&f, inputs, &values)?;
            values[k][pos] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[pos], numeric));
        }
        report.max_rel_err.push((input.name.clone(), worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::ops;
    use ndarray::array;

    #[test]
    fn linear_sum_gradient() {
        let inputs = [
            GradInput::frozen("x", array![[0.3, -1.2], [0.7, 0.1], [2.0, -0.4]]),
            GradInput::param("w", array![[0.5, -0.2], [0.1, 0.9]]),
            GradInput::param("b", array![[0.05, -0.3]]),
        ];
        let report = grad_check(
            |t, v| {
                let y = ops::affine(t, v[0], v[1], v[2])?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.skipped, vec!["x".to_string()]);
        assert_eq!(report.max_rel_err.len(), 2);
    }

    #[test]
    fn softmax_dot_gradient() {
        let inputs = [
            GradInput::param("e", array![[0.4, -1.0, 2.2, 0.3]]),
            GradInput::frozen("v", array![[1.0], [-2.0], [0.5], [3.0]]),
        ];
        let mask = [true, false, true, true];
        let report = grad_check(
            |t, v| {
                let a = ops::masked_softmax(t, v[0], &mask)?;
                t.matmul(a, v[1])
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn rejects_non_scalar_objective() {
        let inputs = [GradInput::param("x", array![[1.0, 2.0]])];
        assert!(grad_check(|_, v| Ok(v[0]), &inputs, 1e-4).is_err());
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at exactly 0 has a kink; finite differences disagree with the subgradient 0
        let inputs = [GradInput::param("x", array![[0.0]])];
        let report = grad_check(
            |t, v| {
                let y = t.relu(v[0]);
                Ok(t.sum(y))
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
    }
}
