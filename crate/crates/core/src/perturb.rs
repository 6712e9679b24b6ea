//! Weight-space perturbation mechanics: projection onto the rho-sphere,
//! application/restoration on model weights, and random directions.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::param::{gaussian_vector, Layout, ParamVector};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbConfig {
    /// L2 radius of the perturbation ball.
    pub rho: f64,
    /// Below this gradient norm the step degenerates to plain optimization;
    /// the perturbation is skipped and the step report flags it.
    pub zero_grad_threshold: f64,
}

impl PerturbConfig {
    pub fn new(rho: f64) -> Result<Self> {
        let cfg = PerturbConfig {
            rho,
            zero_grad_threshold: 1e-12,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_threshold(rho: f64, zero_grad_threshold: f64) -> Result<Self> {
        let cfg = PerturbConfig {
            rho,
            zero_grad_threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "rho must be positive and finite, got {}",
                self.rho
            )));
        }
        if !(self.zero_grad_threshold > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "zero_grad_threshold must be positive, got {}",
                self.zero_grad_threshold
            )));
        }
        Ok(())
    }
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            rho: 0.05,
            zero_grad_threshold: 1e-12,
        }
    }
}

/// rho * direction / ||direction||: the one-step solution of the inner
/// maximization. Positively parallel to the input; errors when the
/// direction is numerically zero (the caller decides whether to skip).
pub fn normalize_to_ball(
    direction: &ParamVector,
    cfg: &PerturbConfig,
) -> Result<ParamVector> {
    let norm = direction.norm_l2();
    if !(norm > cfg.zero_grad_threshold) {
        return Err(Error::ZeroGradient {
            norm,
            threshold: cfg.zero_grad_threshold,
        });
    }
    Ok(direction.scale(cfg.rho / norm))
}

/// Weights with a perturbation applied. Keeps the unperturbed vector so the
/// restore is bit-exact: arithmetic un-perturbation (w + e) - e can round
/// away from w, holding the original cannot.
#[derive(Debug, Clone)]
pub struct AppliedPerturbation {
    perturbed: ParamVector,
    original: ParamVector,
    eps_norm: f64,
}

impl AppliedPerturbation {
    pub fn perturbed(&self) -> &ParamVector {
        &self.perturbed
    }

    pub fn eps_norm(&self) -> f64 {
        self.eps_norm
    }

    /// The exact weights the perturbation was applied to.
    pub fn revert(self) -> ParamVector {
        self.original
    }
}

/// w + eps, retaining w for the exact restore.
pub fn apply(w: &ParamVector, eps: &ParamVector) -> Result<AppliedPerturbation> {
    Ok(AppliedPerturbation {
        perturbed: w.add(eps)?,
        original: w.clone(),
        eps_norm: eps.norm_l2(),
    })
}

/// Gaussian direction with sigma = 1 rescaled to L2-norm rho; uniform on the
/// sphere by isotropy.
pub fn random_direction(rng: &mut Rng, layout: &Arc<Layout>, rho: f64) -> Result<ParamVector> {
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rho must be positive, got {rho}"
        )));
    }
    let g = gaussian_vector(rng, layout, 1.0)?;
    let norm = g.norm_l2();
    if norm == 0.0 {
        // Probability zero; resample rather than divide by zero.
        return random_direction(rng, layout, rho);
    }
    Ok(g.scale(rho / norm))
}
