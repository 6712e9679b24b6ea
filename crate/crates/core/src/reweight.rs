//! Dynamic instance weighting for delta-SAM.
//!
//! One shared random direction probes each instance's loss at w, w+r, w-r
//! with three grad-free forwards. The second difference estimates curvature
//! along r, the first difference estimates the gradient component along r,
//! and their clamped ratio is the instance weight. Only relative weights
//! matter: the perturbation is renormalized to the rho-sphere afterwards,
//! so any common factor cancels.

use crate::error::{Error, Result};
use crate::model::{Batch, Model, PassCounters};
use crate::param::ParamVector;
use crate::perturb::{normalize_to_ball, PerturbConfig};
use crate::rng::Rng;

/// The g_i, one nonnegative scalar per batch instance, plus the clamp that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceWeights {
    pub g: Vec<f64>,
    pub eta: f64,
}

impl InstanceWeights {
    pub fn uniform(n: usize, eta: f64) -> Self {
        InstanceWeights {
            g: vec![1.0 / n as f64; n],
            eta,
        }
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn all_zero(&self) -> bool {
        self.g.iter().all(|&v| v == 0.0)
    }

    /// (min, mean, max) for step reports.
    pub fn summary(&self) -> (f64, f64, f64) {
        let min = self.g.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = self.g.iter().sum::<f64>() / self.g.len() as f64;
        (min, mean, max)
    }
}

/// Per-instance losses at w, w+r, w-r.
#[derive(Debug, Clone)]
pub struct ProbeLosses {
    pub l0: Vec<f64>,
    pub l_plus: Vec<f64>,
    pub l_minus: Vec<f64>,
    pub r_norm: f64,
}

impl ProbeLosses {
    pub fn len(&self) -> usize {
        self.l0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l0.is_empty()
    }

    /// l_i(w+r) + l_i(w-r) - 2 l_i(w): exact r^T H_i r on quadratics.
    pub fn second_difference(&self, i: usize) -> f64 {
        self.l_plus[i] + self.l_minus[i] - 2.0 * self.l0[i]
    }

    /// l_i(w+r) - l_i(w-r): exact 2 grad l_i . r on quadratics.
    pub fn first_difference(&self, i: usize) -> f64 {
        self.l_plus[i] - self.l_minus[i]
    }
}

/// Monte-Carlo estimates of a_i and ||grad l_i(w)||^2 from repeated probes.
#[derive(Debug, Clone)]
pub struct CurvatureEstimate {
    pub a_hat: Vec<f64>,
    pub grad_norm_sq_hat: Vec<f64>,
    pub num_samples: usize,
    /// Instances whose estimated gradient norm vanished; a_hat is 0 there.
    pub degenerate: Vec<bool>,
}

/// Three grad-free forwards at w, w+r, w-r. The weights w are never
/// mutated — both probe points are fresh vectors — so w is available
/// bit-exact afterwards by construction.
pub fn probe(
    model: &Model,
    w: &ParamVector,
    batch: &Batch,
    r: &ParamVector,
    counters: &mut PassCounters,
) -> Result<ProbeLosses> {
    let w_plus = w.add(r)?;
    let w_minus = w.sub(r)?;
    let l0 = model.per_instance_losses(w, batch, false, counters)?;
    let l_plus = model.per_instance_losses(&w_plus, batch, false, counters)?;
    let l_minus = model.per_instance_losses(&w_minus, batch, false, counters)?;
    Ok(ProbeLosses {
        l0: l0.0,
        l_plus: l_plus.0,
        l_minus: l_minus.0,
        r_norm: r.norm_l2(),
    })
}

/// g_i = |l_i(w+r) + l_i(w-r) - 2 l_i(w)| / max(|l_i(w+r) - l_i(w-r)|, eta).
pub fn instance_weights(p: &ProbeLosses, eta: f64) -> Result<InstanceWeights> {
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "eta must be positive, got {eta}"
        )));
    }
    let g = (0..p.len())
        .map(|i| p.second_difference(i).abs() / p.first_difference(i).abs().max(eta))
        .collect();
    Ok(InstanceWeights { g, eta })
}

/// Threshold below which an estimated squared gradient norm counts as zero.
const DEGENERATE_GRAD_SQ: f64 = 1e-12;

/// Averages of the probe identities over `num_samples` fresh Gaussian
/// directions r ~ N(0, sigma^2 I):
///
///   E[(l+ - l-)^2]      = 4 sigma^2 ||grad l_i||^2
///   E[l+ + l- - 2 l0]   = a_i sigma^2 ||grad l_i||^2   (rank-1 Hessian)
///
/// so grad_norm_sq_hat averages (l+ - l-)^2 / (4 sigma^2) and a_hat divides
/// the mean second difference by sigma^2 grad_norm_sq_hat. Verification
/// only; the production path uses a single shared r through `probe`.
pub fn estimate_curvature(
    model: &Model,
    w: &ParamVector,
    batch: &Batch,
    sigma: f64,
    num_samples: usize,
    rng: &mut Rng,
    counters: &mut PassCounters,
) -> Result<CurvatureEstimate> {
    if num_samples == 0 {
        return Err(Error::InvalidParameter(
            "estimate_curvature needs num_samples >= 1".into(),
        ));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let n = batch.len();
    let layout = model.layout();
    let l0 = model.per_instance_losses(w, batch, false, counters)?;
    let mut first_sq = vec![0.0; n];
    let mut second = vec![0.0; n];
    for _ in 0..num_samples {
        let r = crate::param::gaussian_vector(rng, &layout, sigma)?;
        let w_plus = w.add(&r)?;
        let w_minus = w.sub(&r)?;
        let lp = model.per_instance_losses(&w_plus, batch, false, counters)?;
        let lm = model.per_instance_losses(&w_minus, batch, false, counters)?;
        for i in 0..n {
            let fd = lp.0[i] - lm.0[i];
            first_sq[i] += fd * fd;
            second[i] += lp.0[i] + lm.0[i] - 2.0 * l0.0[i];
        }
    }
    let m = num_samples as f64;
    let grad_norm_sq_hat: Vec<f64> = first_sq
        .iter()
        .map(|s| s / (4.0 * sigma * sigma * m))
        .collect();
    let mut a_hat = vec![0.0; n];
    let mut degenerate = vec![false; n];
    for i in 0..n {
        if grad_norm_sq_hat[i] < DEGENERATE_GRAD_SQ {
            degenerate[i] = true;
        } else {
            a_hat[i] = (second[i] / m) / (sigma * sigma * grad_norm_sq_hat[i]);
        }
    }
    Ok(CurvatureEstimate {
        a_hat,
        grad_norm_sq_hat,
        num_samples,
        degenerate,
    })
}

/// The reweighted one-step perturbation: normalize the gradient of
/// sum_i g_i l_i(w) to the rho-sphere. Any positive rescaling of g gives
/// the same direction.
pub fn delta_sam_direction(
    model: &Model,
    w: &ParamVector,
    batch: &Batch,
    g: &InstanceWeights,
    cfg: &PerturbConfig,
    counters: &mut PassCounters,
) -> Result<ParamVector> {
    let grad = model.weighted_loss_gradient(w, batch, &g.g, counters)?;
    normalize_to_ball(&grad, cfg)
}
