//! Bounded perturbations and target-correction planning.

use std::sync::Arc;

/// `h(t, x, u)` with a sup-norm bound.
#[derive(Clone)]
pub struct Perturbation {
    pub name: String,
    pub h: Arc<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>,
    pub bound: f64,
    pub lipschitz_hint: Option<f64>,
}

impl Perturbation {
    pub fn new(
        name: &str,
        h: Arc<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>,
        bound: f64,
        lipschitz_hint: Option<f64>,
    ) -> Self {
        Self {
            name: name.to_string(),
            h,
            bound,
            lipschitz_hint,
        }
    }
}
