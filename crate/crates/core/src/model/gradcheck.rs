//! Central finite-difference gradient verification.
//!
//! The numeric side never touches the analytic backward path: it only calls
//! a black-box loss closure on perturbed parameter copies. Checks run in
//! `f64`.

use super::{Params, TensorMut};

/// Outcome of one finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol,
            "gradient check failed: rel err {:.3e} at `{}` over {} elements (tol {tol:.1e})",
            self.max_rel_err,
            self.worst_param,
            self.n_checked
        );
    }
}

fn perturb(params: &mut Params<f64>, target: &str, index: usize, delta: f64) {
    params.for_each_param_mut(&mut |name, mut t| {
        if name != target {
            return;
        }
        match &mut t {
            TensorMut::M(m) => {
                let v = m.iter_mut().nth(index).expect("index in range");
                *v += delta;
            }
            TensorMut::V(v) => {
                let x = v.iter_mut().nth(index).expect("index in range");
                *x += delta;
            }
        }
    });
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        return 0.0; // both effectively zero
    }
    (a - b).abs() / scale.max(1e-6)
}

/// Sweep every parameter element: central differences of `loss` against the
/// `analytic` gradient structure. `skip` filters parameter names (groups the
/// loss provably does not touch).
pub fn finite_diff_check(
    params: &Params<f64>,
    analytic: &Params<f64>,
    loss: impl Fn(&Params<f64>) -> f64,
    eps: f64,
    skip: impl Fn(&str) -> bool,
) -> GradCheckReport {
    let mut entries: Vec<(String, usize, f64)> = Vec::new();
    analytic.for_each_param(&mut |name, t| {
        if skip(name) {
            return;
        }
        for (i, &g) in t.iter().enumerate() {
            entries.push((name.to_string(), i, g));
        }
    });

    let mut report = GradCheckReport {
        n_checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
    };
    let mut work = params.clone();
    let fd_at = |work: &mut Params<f64>, name: &str, index: usize, eps: f64| {
        perturb(work, name, index, eps);
        let plus = loss(work);
        perturb(work, name, index, -2.0 * eps);
        let minus = loss(work);
        perturb(work, name, index, eps);
        (plus - minus) / (2.0 * eps)
    };
    for (name, index, analytic_grad) in entries {
        let fd = fd_at(&mut work, &name, index, eps);
        let mut rel = relative_error(analytic_grad, fd);
        if rel > 1e-4 {
            // A piecewise-linear kink (ReLU, L1) inside the interval makes the
            // difference quotient meaningless; a hundredfold smaller interval
            // no longer crosses it. A genuine backward bug stays wrong at any
            // interval.
            let fd_small = fd_at(&mut work, &name, index, eps / 100.0);
            rel = rel.min(relative_error(analytic_grad, fd_small));
        }
        report.n_checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = format!("{name}[{index}] (analytic {analytic_grad:.6e}, fd {fd:.6e})");
        }
    }
    report
}
