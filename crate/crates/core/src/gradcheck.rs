//! Central finite-difference validation of backward passes.
//!
//! `check` rebuilds a scalar-valued graph under elementwise perturbations and
//! compares the analytic gradients against `(f(x+h) - f(x-h)) / 2h`. Useful
//! when adding ops or wiring new architectures.

use crate::graph::{Graph, NodeId};
use crate::tensor::{Tensor, TensorError};

/// Worst observed deviation between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences with step `h`, for every element of every input.
///
/// Relative error uses a small floor so that near-zero gradient pairs do not
/// blow up the ratio: `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn check<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        if g.value(loss).numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "gradcheck",
                shape: g.value(loss).shape().to_vec(),
                reason: "build must produce a scalar".into(),
            });
        }
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let zero;
        let analytic = match grads.wrt(ids[k]) {
            Some(t) => t,
            None => {
                zero = Tensor::zeros(input.shape().to_vec());
                &zero
            }
        };
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[k].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (k, e);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        let x = Tensor::from_vec(vec![2, 2], vec![0.5, -1.5, 2.0, 0.25]).unwrap();
        let report = check(&[x], 1e-5, |g, ids| {
            let sq = g.mul(ids[0], ids[0])?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{:?}", report);
    }

    #[test]
    fn rejects_non_scalar_objective() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(check(&[x], 1e-5, |g, ids| g.mul(ids[0], ids[0])).is_err());
    }
}
