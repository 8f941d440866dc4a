//! Clenshaw-Curtis quadrature on `[0, T]`.

use std::f64::consts::PI;

use crate::error::{NfmError, Result};

/// Clenshaw-Curtis rule of even order `n` on `[-1, 1]`: `n + 1` nodes
/// `cos(kπ/n)` (strictly decreasing) with positive symmetric weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

/// Result of integrating over `[0, T]`. `points` and `scaled_weights` are the
/// affine image of the rule, so `value = Σ scaled_weights[k] * f(points[k])`
/// and parameter gradients follow the same weighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub points: Vec<f64>,
    pub scaled_weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn new(order: usize) -> Result<Self> {
        if order < 2 || order % 2 != 0 {
            return Err(NfmError::InvalidOrder(order));
        }
        let n = order;
        let nf = n as f64;
        let nodes = (0..=n).map(|k| (k as f64 * PI / nf).cos()).collect();
        let weights = (0..=n)
            .map(|k| {
                let c = if k == 0 || k == n { 1.0 } else { 2.0 };
                let mut acc = 1.0;
                for j in 1..=n / 2 {
                    let b = if 2 * j == n { 1.0 } else { 2.0 };
                    let jf = j as f64;
                    acc -= b / (4.0 * jf * jf - 1.0) * (2.0 * jf * k as f64 * PI / nf).cos();
                }
                c / nf * acc
            })
            .collect();
        Ok(QuadratureRule { order, nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Writes the rule mapped onto `[lower, upper]` into the two buffers.
    pub fn map_into(&self, lower: f64, upper: f64, points: &mut Vec<f64>, scaled_weights: &mut Vec<f64>) {
        points.clear();
        scaled_weights.clear();
        let half = 0.5 * (upper - lower);
        let mid = 0.5 * (upper + lower);
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            points.push(mid + half * x);
            scaled_weights.push(half * w);
        }
    }

    /// `∫_0^T f`. `T = 0` returns zero with empty node arrays and never calls `f`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F, upper: f64) -> Result<Integral> {
        if !(upper >= 0.0) || !upper.is_finite() {
            return Err(NfmError::Domain(format!("integration upper limit must be finite and >= 0, got {upper}")));
        }
        if upper == 0.0 {
            return Ok(Integral { value: 0.0, points: Vec::new(), scaled_weights: Vec::new() });
        }
        let mut points = Vec::with_capacity(self.len());
        let mut scaled_weights = Vec::with_capacity(self.len());
        self.map_into(0.0, upper, &mut points, &mut scaled_weights);
        let mut value = 0.0;
        for (&s, &w) in points.iter().zip(&scaled_weights) {
            let fs = f(s);
            if !fs.is_finite() {
                return Err(NfmError::NonFinite(format!("integrand is {fs} at s = {s}")));
            }
            value += w * fs;
        }
        Ok(Integral { value, points, scaled_weights })
    }
}
