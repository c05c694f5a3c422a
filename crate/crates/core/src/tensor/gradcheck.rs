use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst disagreement found by [`grad_check_inputs`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input and flat coordinate of the worst disagreement.
    pub input: usize,
    pub index: usize,
    pub checked: usize,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Central-difference check of a scalar function of one tensor.
///
/// Returns the maximum of `|a − b| / max(1, |a|, |b|)` over all coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_inputs(|tape, v| f(tape, v[0]), std::slice::from_ref(x), h, None)?;
    Ok(report.max_rel_error)
}

/// Central-difference check over several inputs.
///
/// With `max_coords = Some(n)`, at most `n` evenly spaced coordinates of each
/// input are perturbed; `None` checks every coordinate.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor], h: f64, max_coords: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let count = max_coords.map_or(n, |m| m.min(n));
        for s in 0..count {
            let j = if count == n { s } else { s * n / count };
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&f, &work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&f, &work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads.get(*var).map_or(0.0, |g| g.data()[j]);
            let err = rel_error(analytic, numeric);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.input = i;
                report.index = j;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        assert_eq!(tape.backward(s).unwrap().get(v).unwrap().data(), &[2.0, 4.0]);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = tape.softmax(v, 0).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(v).unwrap().data().iter().all(|d| d.abs() < 1e-12));
        let err = grad_check(
            |t, v| {
                let y = t.softmax(v, 0)?;
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = grad_check(|t, v| Ok(t.relu(v)), &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
