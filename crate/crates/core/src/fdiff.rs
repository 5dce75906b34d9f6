//! Central finite differences, the independent gradient oracle used by the
//! test suites. Deliberately knows nothing about the reverse pass.

use crate::error::{Error, Result};
use crate::tensor::Elem;

/// (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
pub fn finite_diff_grad<F>(mut f: F, point: &[Elem], h: Elem) -> Result<Vec<Elem>>
where
    F: FnMut(&[Elem]) -> Result<Elem>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step {h} must be positive")));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x)?;
        x[i] = orig - h;
        let minus = f(&x)?;
        x[i] = orig;
        let d = (plus - minus) / (2.0 * h);
        if !d.is_finite() {
            return Err(Error::non_finite(format!("finite difference at coordinate {i}")));
        }
        grad.push(d);
    }
    Ok(grad)
}

/// Max over components of |a - b| / max(|a|, |b|), restricted to components
/// where either magnitude exceeds `floor`.
pub fn max_rel_err(a: &[Elem], b: &[Elem], floor: Elem) -> Elem {
    a.iter()
        .zip(b)
        .filter(|(x, y)| x.abs().max(y.abs()) > floor)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()))
        .fold(0.0, Elem::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_of_square() {
        let g = finite_diff_grad(|x| Ok(x[0] * x[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(|_| Ok(42.0), &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_sines_matches_cosine() {
        let mut rng = crate::rng::SplitMix64::new(5);
        let x: Vec<Elem> = (0..8).map(|_| rng.uniform(-2.0, 2.0) as Elem).collect();
        let g = finite_diff_grad(|p| Ok(p.iter().map(|v| v.sin()).sum()), &x, 1e-6).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - xi.cos()).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_diff_grad(|x| Ok(x[0]), &[0.0], 0.0).is_err());
    }
}
