use super::ParamStore;

/// Floor on the denominator of [`relative_error`]; below it the comparison is
/// effectively absolute.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Largest relative error within each tensor, in store order.
    pub per_tensor: Vec<(String, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradients already accumulated in `store` against central
/// differences of `loss` with step `eps`, over every scalar parameter.
pub fn finite_difference_check<F>(store: &mut ParamStore<f64>, eps: f64, loss: F) -> GradCheckReport
where
    F: Fn(&ParamStore<f64>) -> f64,
{
    let mut report = GradCheckReport {
        checked: 0,
        max_relative_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        per_tensor: store
            .params()
            .iter()
            .map(|p| (p.name.clone(), 0.0))
            .collect(),
    };
    for k in 0..store.num_params() {
        let (id, i) = store.locate(k).expect("index within store");
        let original = store.value(id)[i];
        store.value_mut(id)[i] = original + eps;
        let plus = loss(store);
        store.value_mut(id)[i] = original - eps;
        let minus = loss(store);
        store.value_mut(id)[i] = original;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = store.grad(id)[i];
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        let slot = &mut report.per_tensor[id.0].1;
        *slot = slot.max(err);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some((store.get(id).name.clone(), i));
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", &[2], vec![3.0, -1.0]);
        // f = x0^2 + 3 x0 x1
        store
            .grad_mut(id)
            .copy_from_slice(&[2.0 * 3.0 + 3.0 * -1.0, 3.0 * 3.0]);
        let report = finite_difference_check(&mut store, 1e-5, |s| {
            let v = s.value(id);
            v[0] * v[0] + 3.0 * v[0] * v[1]
        });
        assert_eq!(report.checked, 2);
        assert!(report.max_relative_error < 1e-8);
        assert_eq!(store.value(id), &[3.0, -1.0]);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", &[1], vec![2.0]);
        store.grad_mut(id)[0] = 1.0;
        let report = finite_difference_check(&mut store, 1e-5, |s| s.value(id)[0].powi(2));
        assert!(report.max_relative_error > 0.5);
        assert_eq!(report.worst, Some(("x".to_string(), 0)));
    }
}
