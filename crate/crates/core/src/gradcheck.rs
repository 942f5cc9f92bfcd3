//! Central finite differences, the independent check on [`crate::autodiff`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{relative_error, ParamStore, Tensor};

/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every element of every
/// parameter, evaluated in `f64`.
pub fn finite_difference_gradient<F>(
    mut f: F,
    params: &ParamStore<f64>,
    eps: f64,
) -> Result<ParamStore<f64>>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut work = params.clone();
    let mut out = ParamStore::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.require(&name)?.len();
        let mut grad = Vec::with_capacity(n);
        for i in 0..n {
            let orig = params.require(&name)?.data()[i];
            set(&mut work, &name, i, orig + eps);
            let plus = eval(&mut f, &work)?;
            set(&mut work, &name, i, orig - eps);
            let minus = eval(&mut f, &work)?;
            set(&mut work, &name, i, orig);
            grad.push((plus - minus) / (2.0 * eps));
        }
        let shape = params.require(&name)?.shape().to_vec();
        out.insert(name, Tensor::new(shape, grad)?);
    }
    Ok(out)
}

fn set(store: &mut ParamStore<f64>, name: &str, i: usize, v: f64) {
    store.get_mut(name).expect("name from store").data_mut()[i] = v;
}

fn eval<F: FnMut(&ParamStore<f64>) -> Result<f64>>(f: &mut F, p: &ParamStore<f64>) -> Result<f64> {
    let v = f(p)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("finite-difference evaluation".into()))
    }
}

/// Per-parameter agreement between two gradient stores.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_error: BTreeMap<String, f64>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.values().copied().fold(0.0, f64::max)
    }
}

/// Compares analytic and numeric gradients elementwise with
/// [`relative_error`]; passes when every maximum is below `tolerance`.
pub fn compare_gradients(
    analytic: &ParamStore<f64>,
    numeric: &ParamStore<f64>,
    tolerance: f64,
) -> Result<GradReport> {
    let mut max_rel_error = BTreeMap::new();
    for (name, a) in analytic.iter() {
        let n = numeric.require(name)?;
        if a.shape() != n.shape() {
            return Err(Error::shape("compare_gradients", a.shape(), n.shape()));
        }
        let worst = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(&x, &y)| relative_error(x, y))
            .fold(0.0, f64::max);
        max_rel_error.insert(name.clone(), worst);
    }
    if analytic.len() != numeric.len() {
        return Err(Error::InvalidArgument("gradient stores have different keys".into()));
    }
    let pass = max_rel_error.values().all(|&e| e < tolerance);
    Ok(GradReport {
        max_rel_error,
        tolerance,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{forward_backward, lookup};

    fn single(name: &str, shape: Vec<usize>, data: Vec<f64>) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::new(shape, data).unwrap());
        p
    }

    #[test]
    fn cubic() {
        let p = single("w", vec![1], vec![2.0]);
        let g = finite_difference_gradient(|p| Ok(p.require("w")?.data()[0].powi(3)), &p, 1e-5).unwrap();
        assert!((g.require("w").unwrap().data()[0] - 12.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = single("w", vec![3], vec![1.0, -2.0, 5.0]);
        let g = finite_difference_gradient(|_| Ok(7.5), &p, 1e-5).unwrap();
        assert_eq!(g.require("w").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let p = single("w", vec![1], vec![1.0]);
        assert!(finite_difference_gradient(|_| Ok(0.0), &p, 0.0).is_err());
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let p = single("w", vec![1], vec![0.0]);
        let r = finite_difference_gradient(|p| Ok(1.0 / (p.require("w")?.data()[0] - 1e-5)), &p, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_cross_entropy_matches_finite_differences() {
        let p = single("logits", vec![1, 2], vec![1.0, 0.0]);
        let f = |g: &mut crate::autodiff::Graph<f64>, v: &crate::autodiff::VarMap| {
            g.cross_entropy(lookup(v, "logits")?, &[0])
        };
        let (_, analytic) = forward_backward(&p, f).unwrap();
        let numeric = finite_difference_gradient(
            |q| Ok(forward_backward(q, f)?.0),
            &p,
            1e-5,
        )
        .unwrap();
        let a = analytic.require("logits").unwrap().data();
        let n = numeric.require("logits").unwrap().data();
        for (x, y) in a.iter().zip(n) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        // d/dz0 = softmax0 - 1 = -1/(1+e)
        let expect = -1.0 / (1.0 + 1f64.exp());
        assert!((a[0] - expect).abs() < 1e-12);
        let report = compare_gradients(&analytic, &numeric, 1e-6).unwrap();
        assert!(report.pass, "{report:?}");
    }
}
