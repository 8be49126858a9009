use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Outcome of comparing the tape gradient against central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over elements of |analytic − numeric| / max(|analytic|, |numeric|, 1e-12)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates left out because every tried step straddled a ReLU or
    /// max-pool switch (see [`Tape::kink_signature`]).
    pub skipped: usize,
}

/// Each coordinate is first differenced with the requested step, then with
/// steps 10x and 100x smaller if the probes change the kink signature.
const STEP_REFINEMENTS: [f64; 3] = [1.0, 0.1, 0.01];

fn eval_scalar<F>(f: &F, point: &Tensor4<f64>) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = f(&mut tape, x)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v}")));
    }
    Ok((v, tape.kink_signature()))
}

/// Numeric gradient of the scalar built by `f`, by central differences.
pub fn central_difference<F>(f: &F, point: &Tensor4<f64>, step: f64) -> Result<Tensor4<f64>>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be > 0".into()));
    }
    let mut probe = point.clone();
    let mut grad = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let (plus, _) = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let (minus, _) = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor4::from_vec(point.shape(), grad)
}

/// Compares the reverse-mode gradient of `f` at `point` with central
/// differences. `f` receives a fresh tape and the leaf holding the point
/// and must return a scalar variable.
pub fn grad_check<F>(f: F, point: &Tensor4<f64>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..point.numel()).collect();
    grad_check_at(f, point, step, &all)
}

/// [`grad_check`] restricted to the listed flat coordinates.
///
/// Coordinates whose probes keep switching ReLU or max-pool branches even at
/// the smallest refined step are counted in `skipped` instead of compared.
pub fn grad_check_at<F>(f: F, point: &Tensor4<f64>, step: f64, indices: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be > 0".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= point.numel()) {
        return Err(Error::InvalidArgument(format!("coordinate {bad} out of range")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = f(&mut tape, x)?;
    let grads = tape.backward(out)?;
    let analytic = match grads.get(x) {
        Some(g) => g.clone(),
        None => Tensor4::zeros(point.shape())?,
    };
    if let Some(bad) = analytic.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("analytic gradient {bad}")));
    }

    let base = tape.kink_signature();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: indices.first().copied().unwrap_or(0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = point.clone();
    for &i in indices {
        let orig = probe.data()[i];
        let mut numeric = None;
        for factor in STEP_REFINEMENTS {
            let h = step * factor;
            probe.data_mut()[i] = orig + h;
            let (plus, sp) = eval_scalar(&f, &probe)?;
            probe.data_mut()[i] = orig - h;
            let (minus, sm) = eval_scalar(&f, &probe)?;
            probe.data_mut()[i] = orig;
            if sp == base && sm == base {
                numeric = Some((plus - minus) / (2.0 * h));
                break;
            }
        }
        let Some(n) = numeric else {
            report.skipped += 1;
            continue;
        };
        let a = analytic.data()[i];
        let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = n;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point() -> Tensor4<f64> {
        Tensor4::from_fn([1, 2, 3, 3], |_, c, h, w| (c as f64 - 0.5) * (h as f64 + 0.3) - 0.2 * w as f64)
            .unwrap()
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let r = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &point(),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let r = grad_check(
            |t, x| {
                let z = t.scale(x, 0.0)?;
                t.sum(z)
            },
            &point(),
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!((r.analytic, r.numeric), (0.0, 0.0));
    }

    #[test]
    fn rejects_non_positive_step_and_non_finite_values() {
        let f = |t: &mut Tape<f64>, x: Var| t.sum(x);
        assert!(grad_check(f, &point(), 0.0).is_err());
        let inf = Tensor4::full([1, 1, 1, 1], f64::INFINITY).unwrap();
        assert!(matches!(grad_check(f, &inf, 1e-5), Err(Error::NonFinite(_))));
    }
}
