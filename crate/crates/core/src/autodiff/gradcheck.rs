use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Check every coordinate of `point`. `forward` must record a deterministic
/// scalar-valued computation of its input var on the given tape.
pub fn finite_diff_check<F>(forward: F, point: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    finite_diff_check_coords(forward, point, eps, &coords)
}

/// As [`finite_diff_check`] but only over the listed coordinates.
pub fn finite_diff_check_coords<F>(
    forward: F,
    point: &Tensor<f64>,
    eps: f64,
    coords: &[usize],
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!(
            "finite-difference step must be > 0, got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = forward(&mut tape, x)?;
    let value = tape.value(y);
    if value.numel() != 1 {
        return Err(Error::contract(
            "finite_diff_check needs a scalar-valued forward",
        ));
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("finite_diff_check forward".into()));
    }
    let seed = Tensor::ones(value.shape());
    let mut grads = tape.backward(y, seed)?;
    let full = grads
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let y = forward(&mut tape, x)?;
        let v = tape.value(y).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite_diff_check forward".into()));
        }
        Ok(v)
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_coord: coords.first().copied().unwrap_or(0),
        coords: coords.to_vec(),
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let analytic = full.data()[i];
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coord = i;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{add, mul, sum, weighted_sum};
    use crate::nn::relu;
    use crate::rng::{random_normal, Rng};

    #[test]
    fn linear_map_is_exact() {
        let w = random_normal::<f64>(&mut Rng::new(1, 0), &[12], 0.0, 1.0).unwrap();
        let x = random_normal::<f64>(&mut Rng::new(1, 1), &[12], 0.0, 1.0).unwrap();
        let r = finite_diff_check(|t, x| weighted_sum(t, x, w.clone()), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-10, "{}", r.max_rel_error);
    }

    #[test]
    fn relu_away_from_kink() {
        let mut rng = Rng::new(2, 0);
        // |x| >= 0.1 so a 1e-5 step never crosses zero
        let data: Vec<f64> = (0..20)
            .map(|_| {
                let v = rng.uniform_in(0.1, 2.0);
                if rng.bernoulli(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::from_vec(&[1, 2, 2, 5], data).unwrap();
        let w = random_normal::<f64>(&mut rng, &[1, 2, 2, 5], 0.0, 1.0).unwrap();
        let r = finite_diff_check(
            |t, x| {
                let y = relu(t, x)?;
                weighted_sum(t, y, w.clone())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn three_op_composite_matches_central_differences() {
        let mut rng = Rng::new(3, 0);
        let x = random_normal::<f64>(&mut rng, &[8], 0.0, 1.0).unwrap();
        let c = random_normal::<f64>(&mut rng, &[8], 0.0, 1.0).unwrap();
        let r = finite_diff_check(
            |t, x| {
                let k = t.constant(c.clone());
                let p = mul(t, x, x)?;
                let q = add(t, p, k)?;
                let r = mul(t, q, x)?;
                sum(t, r)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_forward() {
        let x = Tensor::<f64>::ones(&[2]);
        assert!(finite_diff_check(sum, &x, 0.0).is_err());
        let nan = Tensor::<f64>::full(&[2], f64::NAN);
        let res = std::panic::catch_unwind(|| finite_diff_check(sum, &nan, 1e-5));
        // debug builds panic in the tape's finiteness guard, release builds return an error
        assert!(res.map(|r| r.is_err()).unwrap_or(true));
    }
}
