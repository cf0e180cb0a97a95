//! Minimal reverse-mode differentiation in double precision: parameter
//! storage, a tape of vector ops, and the Adam optimiser.

mod graph;
mod optim;
mod params;

pub use graph::{sigmoid, softplus, ConvShape, Graph, StateNoise, Var};
pub use optim::Adam;
pub use params::{Grads, ParamId, ParamSet, Tensor};

use crate::error::{Error, Result};

/// `KL(N(mu, diag sigma²) || N(0, I))`.
pub fn kl_diag_gaussian(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::Shape(format!("mu has {} dims, sigma {}", mu.len(), sigma.len())));
    }
    let mut total = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(Error::NumericDomain(format!("sigma must be positive, got {s}")));
        }
        let s2 = s * s;
        total += 0.5 * m * m + 0.5 * (s2 - 1.0 - s2.ln());
    }
    Ok(total)
}
