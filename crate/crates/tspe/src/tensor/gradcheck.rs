//! Central-difference verification of tape gradients.
//!
//! The checker rebuilds the loss twice per sampled coordinate with the
//! coordinate nudged by ±epsilon and compares the finite-difference slope
//! against the tape's analytic gradient. Coordinates are sampled with a
//! seeded generator so failures reproduce.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use super::matrix::Matrix;
use super::optim::ParamSet;
use super::tape::Tape;
use super::VarId;
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across all sampled coordinates.
    pub max_rel_err: f64,
    /// Name and flat index of the coordinate with the largest error.
    pub worst_coord: Option<(String, usize)>,
    /// Number of coordinates compared.
    pub checked: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compare analytic and numeric gradients of a scalar loss.
///
/// `build` must construct the loss node for the given parameter values;
/// it is called once for the analytic pass and twice per sampled
/// coordinate for the numeric pass, so it has to be deterministic.
/// Up to `samples_per_param` coordinates are drawn from each parameter.
pub fn gradient_check<F>(
    params: &ParamSet,
    mut build: F,
    epsilon: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet, &mut Tape) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let loss = build(params, &mut tape)?;
    tape.backward(loss)?;

    // Sum gradients over all leaves that share a parameter name.
    let mut analytic: BTreeMap<String, Matrix> = BTreeMap::new();
    for (name, id) in tape.param_leaves() {
        let g = match tape.grad(*id) {
            Some(g) => g.clone(),
            None => continue,
        };
        match analytic.get_mut(name) {
            Some(acc) => acc.add_assign(&g)?,
            None => {
                analytic.insert(name.clone(), g);
            }
        }
    }
    if analytic.is_empty() {
        return Err(Error::Config(
            "gradient check: loss does not depend on any parameter".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: None,
        checked: 0,
    };

    for (name, grad) in &analytic {
        if !grad.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite analytic gradient for {name}"
            )));
        }
        let len = grad.data().len();
        let take = samples_per_param.min(len);
        let picks = rand::seq::index::sample(&mut rng, len, take);
        for idx in picks.iter() {
            let mut perturbed = params.clone();
            let base = perturbed.value(name)?.data()[idx];

            perturbed.get_mut(name).unwrap().value.data_mut()[idx] = base + epsilon;
            let mut t_plus = Tape::new();
            let l_plus = build(&perturbed, &mut t_plus)?;
            let f_plus = t_plus.value(l_plus).scalar();

            perturbed.get_mut(name).unwrap().value.data_mut()[idx] = base - epsilon;
            let mut t_minus = Tape::new();
            let l_minus = build(&perturbed, &mut t_minus)?;
            let f_minus = t_minus.value(l_minus).scalar();

            let numeric = (f_plus - f_minus) / (2.0 * epsilon);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite numeric gradient for {name}[{idx}]"
                )));
            }
            let err = rel_err(grad.data()[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_coord = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_on_matmul_softmax_ce_chain() {
        let mut params = ParamSet::new();
        params.insert(
            "w",
            Matrix::from_rows(&[
                vec![0.2, -0.4, 0.6],
                vec![-0.1, 0.3, 0.5],
            ])
            .unwrap(),
        );
        let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.25]]).unwrap();
        let report = gradient_check(
            &params,
            |p, tape| {
                let w = p.leaf(tape, "w")?;
                let xv = tape.leaf(x.clone());
                let logits = tape.matmul(xv, w)?;
                tape.cross_entropy(logits, &[0, 2], &[true, true])
            },
            1e-5,
            6,
            11,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "err {}", report.max_rel_err);
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn catches_a_wrong_gradient_scale() {
        // Build a loss whose analytic grad is deliberately mismatched by
        // scaling the loss in the numeric passes only.
        let mut params = ParamSet::new();
        params.insert("w", Matrix::row_vec(vec![0.7]));
        let mut first = true;
        let report = gradient_check(
            &params,
            move |p, tape| {
                let w = p.leaf(tape, "w")?;
                let sq = tape.hadamard(w, w)?;
                let out = if first {
                    first = false;
                    sq
                } else {
                    tape.scale(sq, 2.0)
                };
                Ok(out)
            },
            1e-5,
            1,
            3,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.3, "err {}", report.max_rel_err);
    }

    #[test]
    fn loss_without_parameters_is_an_error() {
        let params = ParamSet::new();
        let err = gradient_check(
            &params,
            |_p, tape| {
                let x = tape.leaf(Matrix::row_vec(vec![1.0]));
                Ok(x)
            },
            1e-5,
            1,
            0,
        );
        assert!(err.is_err());
    }
}
