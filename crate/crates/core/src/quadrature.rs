//! Trapezoidal quadrature over age intervals.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_STEP: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadratureError {
    #[error("mesh step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("empty interval [{lo}, {hi}]")]
    EmptyInterval { lo: f64, hi: f64 },
}

/// Uniform mesh: each interval's nodes are its two endpoints plus every
/// multiple of `step` strictly inside it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureMesh {
    step: f64,
}

impl Default for QuadratureMesh {
    fn default() -> Self {
        Self { step: DEFAULT_STEP }
    }
}

impl QuadratureMesh {
    pub fn new(step: f64) -> Result<Self, QuadratureError> {
        if step.is_finite() && step > 0.0 {
            Ok(Self { step })
        } else {
            Err(QuadratureError::InvalidStep(step))
        }
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn nodes(&self, lo: f64, hi: f64) -> Result<Vec<f64>, QuadratureError> {
        if !(hi > lo) {
            return Err(QuadratureError::EmptyInterval { lo, hi });
        }
        // Snap tolerance keeps a multiple of step that sits on an endpoint
        // from producing a sliver interval.
        let tol = 1e-9 * self.step;
        let mut nodes = vec![lo];
        let mut k = (lo / self.step).floor() as i64 + 1;
        loop {
            let a = k as f64 * self.step;
            if a >= hi - tol {
                break;
            }
            if a > lo + tol {
                nodes.push(a);
            }
            k += 1;
        }
        nodes.push(hi);
        Ok(nodes)
    }

    /// Nodes and trapezoid weights for `[lo, hi]`.
    pub fn rule(&self, lo: f64, hi: f64) -> Result<(Vec<f64>, Vec<f64>), QuadratureError> {
        let nodes = self.nodes(lo, hi)?;
        let weights = trapezoid_weights(&nodes);
        Ok((nodes, weights))
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, lo: f64, hi: f64, g: F) -> Result<f64, QuadratureError> {
        let (nodes, weights) = self.rule(lo, hi)?;
        Ok(nodes.iter().zip(&weights).map(|(&a, &w)| w * g(a)).sum())
    }
}

/// Trapezoid weights for ascending nodes.
pub fn trapezoid_weights(nodes: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; nodes.len()];
    for (i, pair) in nodes.windows(2).enumerate() {
        let h = 0.5 * (pair[1] - pair[0]);
        w[i] += h;
        w[i + 1] += h;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_include_endpoints_and_multiples() {
        let mesh = QuadratureMesh::default();
        assert_eq!(mesh.nodes(9.0, 10.0).unwrap(), vec![9.0, 9.25, 9.5, 9.75, 10.0]);
        let mesh = QuadratureMesh::new(0.3).unwrap();
        let n = mesh.nodes(0.1, 1.0).unwrap();
        assert_eq!(n.first(), Some(&0.1));
        assert_eq!(n.last(), Some(&1.0));
        assert!(n.windows(2).all(|p| p[1] > p[0]));
        assert_eq!(n.len(), 5);
        let n = QuadratureMesh::new(5.0).unwrap().nodes(1.0, 2.0).unwrap();
        assert_eq!(n, vec![1.0, 2.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(QuadratureMesh::new(0.0).is_err());
        assert!(QuadratureMesh::new(f64::NAN).is_err());
        assert!(QuadratureMesh::default().nodes(3.0, 3.0).is_err());
    }

    #[test]
    fn exact_for_linear() {
        let v = QuadratureMesh::default().integrate(2.0, 7.5, |a| 3.0 * a - 1.0).unwrap();
        let exact = 1.5 * (7.5f64.powi(2) - 4.0) - 5.5;
        assert!((v - exact).abs() < 1e-12);
    }
}
