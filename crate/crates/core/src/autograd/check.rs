//! Central finite-difference oracle for analytic gradients.

use crate::tensor::Tensor;

/// One objective evaluation: the scalar value and the kink signature of the
/// forward pass that produced it (see [`super::Graph::kink_signature`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub signature: u64,
}

impl From<f64> for Evaluation {
    fn from(value: f64) -> Self {
        Evaluation {
            value,
            signature: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// Max over checked elements of `|a − n| / max(|a|, |n|, 1e-8)`; NaN if
    /// any evaluation was NaN.
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub checked: usize,
    /// Elements whose ±step perturbation changed a ReLU or max-pool branch.
    pub skipped: usize,
}

impl FdReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares `analytic` against central differences
/// `(f(p + δ) − f(p − δ)) / 2δ` on the selected elements of `p` (all when
/// `elements` is `None`). Elements where the perturbation crosses a kink
/// are skipped.
pub fn finite_diff_check<E, F>(
    analytic: &Tensor<f64>,
    p: &Tensor<f64>,
    step: f64,
    elements: Option<&[usize]>,
    mut f: F,
) -> FdReport
where
    E: Into<Evaluation>,
    F: FnMut(&Tensor<f64>) -> E,
{
    assert_eq!(analytic.shape(), p.shape(), "analytic gradient shape");
    let base = f(p).into();
    let all: Vec<usize>;
    let idx = match elements {
        Some(e) => e,
        None => {
            all = (0..p.len()).collect();
            &all
        }
    };
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_element: 0,
        checked: 0,
        skipped: 0,
    };
    if base.value.is_nan() {
        report.max_rel_error = f64::NAN;
        return report;
    }
    let mut probe = p.clone();
    for &i in idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe).into();
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe).into();
        probe.data_mut()[i] = orig;

        if plus.value.is_nan() || minus.value.is_nan() {
            report.max_rel_error = f64::NAN;
            report.worst_element = i;
            return report;
        }
        if plus.signature != base.signature || minus.signature != base.signature {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_element = i;
        }
    }
    report
}

/// [`finite_diff_check`] over every element of a smooth objective.
pub fn max_rel_error(
    analytic: &Tensor<f64>,
    p: &Tensor<f64>,
    step: f64,
    f: impl FnMut(&Tensor<f64>) -> f64,
) -> f64 {
    finite_diff_check(analytic, p, step, None, f).max_rel_error
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn quadratic() {
        let mut rng = rand::rng();
        let p = Tensor::<f64>::randn(Shape::new(2, 3, 1, 2, 2), 1.0, &mut rng);
        let analytic = p.scale(2.0);
        let err = max_rel_error(&analytic, &p, 1e-4, |q| q.sum_sq());
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let p = Tensor::<f64>::full(Shape::vector(1, 3), 1.5);
        let wrong = p.scale(1.9);
        assert!(max_rel_error(&wrong, &p, 1e-4, |q| q.sum_sq()) > 0.01);
    }

    #[test]
    fn nan_propagates() {
        let p = Tensor::<f64>::ones(Shape::vector(1, 2));
        let err = max_rel_error(&p, &p, 1e-4, |_| f64::NAN);
        assert!(err.is_nan());
        assert!(!FdReport { max_rel_error: err, worst_element: 0, checked: 0, skipped: 0 }.passed(1.0));
    }

    #[test]
    fn signature_change_skips_element() {
        // |x| at x = 0 has no derivative: the branch flips inside ±step
        let p = Tensor::<f64>::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let analytic = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let report = finite_diff_check(&analytic, &p, 1e-4, None, |q| Evaluation {
            value: q.data().iter().map(|v| v.abs()).sum(),
            signature: q.data().iter().map(|&v| u64::from(v > 0.0)).sum(),
        });
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-10);
    }
}
