use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor on the denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss on the given tape from one leaf per parameter.
/// The relative error of a coordinate is `|g_fd − g| / max(|g|, 1e-8)`.
pub fn finite_difference_check<F>(params: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut tape = Tape::new().with_finite_check(true);
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new().with_finite_check(true);
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(params[pi].shape());
        let analytic = grads.get(*var).unwrap_or(&zero);
        for ci in 0..params[pi].len() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * step);
            let g = analytic.data()[ci];
            let rel = (numeric - g).abs() / g.abs().max(REL_ERR_FLOOR);
            report.coordinates += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((pi, ci));
                report.analytic = g;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::init::{randn, seeded};

    #[test]
    fn quadratic_form_gradient_is_exact() {
        let mut rng = seeded(3);
        let w = randn(&[6], 1.0, &mut rng);
        let report = finite_difference_check(&[w], 1e-5, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-8, "{report:?}");
        assert_eq!(report.coordinates, 6);
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_difference_check(&[Tensor::zeros(&[1])], 0.0, |t, v| t.sum(v[0])).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // `custom` with a deliberately wrong backward
        struct Doubling;
        impl crate::numcore::CustomOp for Doubling {
            fn name(&self) -> &'static str {
                "bad"
            }
            fn backward(
                &self,
                _: &[&Tensor],
                _: &Tensor,
                grad: &Tensor,
                _: &[bool],
            ) -> Result<Vec<Option<Tensor>>> {
                Ok(vec![Some(grad.map(|g| 3.0 * g))])
            }
        }
        let report = finite_difference_check(&[Tensor::full(&[2], 1.0)], 1e-5, |t, v| {
            let out = t.value(v[0]).map(|x| 2.0 * x);
            let y = t.custom(&[v[0]], out, Box::new(Doubling))?;
            t.sum(y)
        })
        .unwrap();
        assert!(report.max_rel_err > 0.3);
    }
}
