//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::FrameMatrix;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_coords_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)
    pub max_rel_error: f64,
    /// (tensor index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences `(f(θ+h) - f(θ-h)) / 2h`.
///
/// `f` receives one graph leaf per tensor in `theta` and must return a
/// `[1x1]` node.
pub fn grad_check<F>(f: F, theta: &[FrameMatrix], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(opts.step > 0.0) {
        return Err(Error::Argument(format!("step must be positive, got {}", opts.step)));
    }

    let mut g = Graph::new();
    let leaves: Vec<NodeId> = theta.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &leaves)?;
    let f0 = g.value(out).item();
    if !f0.is_finite() {
        return Err(Error::Evaluation(format!("f(θ) = {f0}")));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<FrameMatrix> = leaves
        .iter()
        .zip(theta)
        .map(|(id, t)| {
            grads
                .get(*id)
                .cloned()
                .unwrap_or_else(|| FrameMatrix::zeros(t.rows(), t.cols()))
        })
        .collect();
    drop(g);

    let eval = |params: &[FrameMatrix]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = params.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation(format!("non-finite value {v} under perturbation")))
        }
    };

    let mut work: Vec<FrameMatrix> = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for ti in 0..theta.len() {
        let n = theta[ti].len();
        let stride = match opts.max_coords_per_tensor {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for ci in (0..n).step_by(stride) {
            let orig = theta[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + opts.step;
            let plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - opts.step;
            let minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;

            let fd = (plus - minus) / (2.0 * opts.step);
            let ad = analytic[ti].data()[ci];
            let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ti, ci));
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let theta = [FrameMatrix::from_fn(2, 3, |r, c| (r + c) as f64)];
        let report = grad_check(
            |g, _| Ok(g.input(FrameMatrix::scalar(4.0))),
            &theta,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.coords_checked, 6);
    }

    #[test]
    fn rejects_non_positive_step() {
        let theta = [FrameMatrix::scalar(1.0)];
        let opts = GradCheckOptions {
            step: 0.0,
            ..Default::default()
        };
        assert!(grad_check(|g, p| Ok(g.sum(p[0])), &theta, opts).is_err());
    }

    #[test]
    fn non_finite_function_is_an_evaluation_error() {
        let theta = [FrameMatrix::scalar(1.0)];
        let err = grad_check(
            |g, p| {
                let s = g.scale(p[0], f64::INFINITY);
                Ok(g.sum(s))
            },
            &theta,
            GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }

    #[test]
    fn coordinate_cap_limits_work() {
        let theta = [FrameMatrix::zeros(10, 10)];
        let opts = GradCheckOptions {
            max_coords_per_tensor: Some(7),
            ..Default::default()
        };
        let r = grad_check(|g, p| Ok(g.sum(p[0])), &theta, opts).unwrap();
        assert!(r.coords_checked <= 7 && r.coords_checked > 0);
    }
}
