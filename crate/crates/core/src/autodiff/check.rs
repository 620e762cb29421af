use super::{backward, Node, ParamId, Tape};
use crate::exec::{self, Execution};

/// How `sg[...]` arguments behave in the perturbed evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StopHandling {
    /// Replay the base-point values, i.e. differentiate the function the
    /// backward pass actually differentiates.
    #[default]
    Frozen,
    /// Recompute through the stop-gradient. Expected to disagree with
    /// `backward` wherever a stopped value depends on the parameters.
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub step: f64,
    pub tol: f64,
    pub stops: StopHandling,
    pub exec: Execution,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-5,
            stops: StopHandling::Frozen,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckFailure {
    /// The function was non-finite (or its graph malformed) at `coordinate`;
    /// `None` means the unperturbed point.
    Evaluation {
        coordinate: Option<usize>,
        message: String,
    },
    Tolerance {
        coordinate: usize,
        rel_error: f64,
    },
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `|a - n| / max(1, |a|, |n|)` per coordinate.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub failure: Option<CheckFailure>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

pub(crate) fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn register<'t>(tape: &'t Tape, params: &[f64]) -> Vec<Node<'t>> {
    params
        .iter()
        .enumerate()
        .map(|(i, &v)| tape.param(ParamId(i), v))
        .collect()
}

/// Compare `backward` against central differences of `f` at `params`.
///
/// `f` must build the same graph shape for every parameter vector so that
/// frozen stop-gradient values line up with their call sites.
pub fn finite_diff_check<F>(f: F, params: &[f64], opts: &CheckOptions) -> CheckReport
where
    F: for<'t> Fn(&'t Tape, &[Node<'t>]) -> Node<'t> + Sync + Send,
{
    assert!(opts.step > 0.0, "finite-difference step must be positive");
    let base = Tape::new();
    let vars = register(&base, params);
    let out = f(&base, &vars);
    let analytic = match backward(out) {
        Ok(g) => g.to_dense(params.len()),
        Err(e) => {
            return CheckReport {
                analytic: vec![],
                numeric: vec![],
                rel_errors: vec![],
                max_rel_error: f64::INFINITY,
                worst_coordinate: None,
                failure: Some(CheckFailure::Evaluation {
                    coordinate: None,
                    message: e.to_string(),
                }),
            };
        }
    };
    let stops = base.stopped_values();

    let eval = |p: &[f64]| -> Result<f64, String> {
        let tape = match opts.stops {
            StopHandling::Frozen => Tape::with_frozen_stops(stops.clone()),
            StopHandling::Live => Tape::new(),
        };
        let vars = register(&tape, p);
        let v = f(&tape, &vars).value();
        if tape.stopped_values().len() != stops.len() {
            return Err("graph shape changed under perturbation".into());
        }
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite value {v}"))
        }
    };

    let numeric: Vec<Result<f64, String>> = exec::map_range(opts.exec, params.len(), |i| {
        let mut p = params.to_vec();
        p[i] = params[i] + opts.step;
        let plus = eval(&p)?;
        p[i] = params[i] - opts.step;
        let minus = eval(&p)?;
        Ok((plus - minus) / (2.0 * opts.step))
    });

    let mut report = CheckReport {
        analytic,
        numeric: Vec::with_capacity(params.len()),
        rel_errors: Vec::with_capacity(params.len()),
        max_rel_error: 0.0,
        worst_coordinate: None,
        failure: None,
    };
    for (i, n) in numeric.into_iter().enumerate() {
        match n {
            Ok(n) => {
                let e = relative_error(report.analytic[i], n);
                if e > report.max_rel_error || report.worst_coordinate.is_none() {
                    report.max_rel_error = e;
                    report.worst_coordinate = Some(i);
                }
                report.numeric.push(n);
                report.rel_errors.push(e);
            }
            Err(message) => {
                report.numeric.push(f64::NAN);
                report.rel_errors.push(f64::INFINITY);
                if report.failure.is_none() {
                    report.failure = Some(CheckFailure::Evaluation {
                        coordinate: Some(i),
                        message,
                    });
                }
            }
        }
    }
    if report.failure.is_none() && report.max_rel_error >= opts.tol {
        report.failure = Some(CheckFailure::Tolerance {
            coordinate: report.worst_coordinate.unwrap_or(0),
            rel_error: report.max_rel_error,
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let opts = CheckOptions {
            step: 1e-5,
            tol: 1e-8,
            ..Default::default()
        };
        let r = finite_diff_check(|_, p| p[0].square(), &[3.0], &opts);
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.analytic[0], 6.0);
        assert!(relative_error(6.0, r.numeric[0]) < 1e-8);
    }

    #[test]
    fn stop_gradient_live_mismatch_is_reported() {
        fn f<'t>(t: &'t Tape, p: &[Node<'t>]) -> Node<'t> {
            t.stop_gradient(p[0]) * p[0]
        }
        let frozen = finite_diff_check(f, &[1.0], &CheckOptions::default());
        assert!(frozen.passed());
        assert_eq!(frozen.analytic[0], 1.0);

        let live = finite_diff_check(
            f,
            &[1.0],
            &CheckOptions {
                stops: StopHandling::Live,
                ..Default::default()
            },
        );
        assert!((live.numeric[0] - 2.0).abs() < 1e-8);
        assert!(matches!(
            live.failure,
            Some(CheckFailure::Tolerance { coordinate: 0, .. })
        ));
    }

    #[test]
    fn non_finite_evaluation_names_coordinate() {
        // ln(x1) is fine at the base point but x1 - step < 0.
        let r = finite_diff_check(|_, p| p[0] + p[1].ln(), &[1.0, 5e-5], &CheckOptions::default());
        assert_eq!(
            r.failure.map(|f| matches!(
                f,
                CheckFailure::Evaluation {
                    coordinate: Some(1),
                    ..
                }
            )),
            Some(true)
        );
    }
}
