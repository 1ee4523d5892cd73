use crate::error::{Error, Result};

use super::ParamStore;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest `|analytic - numeric|` over all coordinates.
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Relative error used by [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks every coordinate of every parameter in `store` against
/// `(f(p + eps) - f(p - eps)) / (2 eps)`. The analytic gradient is read from
/// the store's gradient buffers, which the caller fills beforehand.
pub fn grad_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    grad_check_params(store, eps, None, f)
}

/// Like [`grad_check`], restricted to the named parameters when `only` is given.
pub fn grad_check_params<F>(
    store: &ParamStore,
    eps: f64,
    only: Option<&[&str]>,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let mut probe = store.clone();
    let names: Vec<String> = store
        .names()
        .filter(|n| only.map_or(true, |o| o.contains(n)))
        .map(str::to_string)
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for name in &names {
        let analytic = store.grad(name)?.data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + eps;
            let plus = f(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - eps;
            let minus = f(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("objective at {}[{}]", name, i)));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = relative_error(a, numeric);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                if rel >= report.max_rel_error {
                    report.worst = Some((name.clone(), i));
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cross_entropy_loss, SeededRng, Tensor};

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(vec![0.3, -1.2, 2.5]));
        let p = s.get("p").unwrap().clone();
        for (g, x) in s.grad_mut("p").unwrap().data_mut().iter_mut().zip(p.data()) {
            *g = 2.0 * x;
        }
        let r = grad_check(&s, 1e-5, |st| {
            let d = st.get("p")?.data();
            Ok(d.iter().map(|x| x * x).sum())
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn constant_objective() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(vec![1.0, 2.0]));
        let r = grad_check(&s, 1e-5, |_| Ok(4.2)).unwrap();
        assert!(r.max_rel_error <= 1e-10);
        assert!(r.numeric.abs() <= 1e-10);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(vec![1.0]));
        assert!(grad_check(&s, 1e-5, |_| Ok(f64::NAN)).is_err());
    }

    /// Two-layer tanh network with softmax cross-entropy on one sample.
    fn two_layer(st: &ParamStore, x: &[f64], target: usize, grads: bool) -> (f64, Option<ParamStore>) {
        let w1 = st.get("w1").unwrap();
        let w2 = st.get("w2").unwrap();
        let (h, d) = (w1.rows(), w1.cols());
        let k = w2.rows();
        let pre: Vec<f64> = (0..h)
            .map(|i| (0..d).map(|j| w1.get(i, j) * x[j]).sum())
            .collect();
        let act: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let logits: Vec<f64> = (0..k)
            .map(|i| (0..h).map(|j| w2.get(i, j) * act[j]).sum())
            .collect();
        let ce = cross_entropy_loss(&logits, target).unwrap();
        if !grads {
            return (ce.loss, None);
        }
        let mut out = st.clone();
        let g2 = out.grad_mut("w2").unwrap();
        for i in 0..k {
            for j in 0..h {
                g2.set(i, j, ce.grad[i] * act[j]);
            }
        }
        let dact: Vec<f64> = (0..h)
            .map(|j| (0..k).map(|i| w2.get(i, j) * ce.grad[i]).sum())
            .collect();
        let g1 = out.grad_mut("w1").unwrap();
        for i in 0..h {
            let dpre = dact[i] * (1.0 - act[i] * act[i]);
            for j in 0..d {
                g1.set(i, j, dpre * x[j]);
            }
        }
        (ce.loss, Some(out))
    }

    #[test]
    fn two_layer_network_cross_entropy() {
        let mut rng = SeededRng::new(9);
        let mut s = ParamStore::new();
        s.insert("w1", Tensor::from_fn(&[5, 4], |_| rng.gaussian(0.0, 0.7)));
        s.insert("w2", Tensor::from_fn(&[3, 5], |_| rng.gaussian(0.0, 0.7)));
        let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let (_, with_grads) = two_layer(&s, &x, 1, true);
        let with_grads = with_grads.unwrap();
        let r = grad_check(&with_grads, 1e-5, |st| Ok(two_layer(st, &x, 1, false).0)).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }
}
