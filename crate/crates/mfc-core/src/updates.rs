//! Scaling updates for each marginal cost type.
//!
//! At each time index the projection of the mass tensor factors as
//! `scaling * w`, where `w` collects the rest of the tensor and stays fixed
//! during the update. The generalized Sinkhorn step replaces the scaling by
//! the solution of `0 in -u * w + d(F*)(-eps * log u)` for the marginal cost
//! `F`, which for every cost family used here reduces to a per-cell rule:
//! pick the new marginal value `mu` with `-eps * ln(mu / w) in dF(mu)` and
//! set `scaling = mu / w`. The rules depend only on `w`, so re-running an
//! update is exactly a no-op.
//!
//! Cells with `w == 0` carry no mass whatever the scaling; they get scaling
//! one (or the plain linear-cost factor) to keep values bounded. A `Fixed`
//! target that is positive on such a cell is infeasible and reported with
//! the cell index.
//!
//! Every rule comes in a scaled and a log variant; the log variants return
//! log-scalings and accept log-`w` with `-inf` marking structural zeros.
//! Running costs are weighted by the problem's `dt` weight, which scales
//! linear costs and the congestion derivative.

use thiserror::Error;

use crate::scenario::MarginalCost;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UpdateError {
    #[error("fixed target is positive at cell {cell} but the projection there is zero")]
    Infeasible { cell: usize },
    #[error("congestion root solve failed to reach tolerance at cell {cell}")]
    RootSolve { cell: usize },
}

/// Parameters of the scalar congestion solve at one cell.
const CONGESTION_MAX_ITERS: usize = 200;

/// Solve `eps * (y - ln_w) + weight / (1 - e^y)^2 = 0` for `y = ln(mu)`,
/// `mu` in `(0, 1)`. The left side is strictly increasing in `y`, tends to
/// `-inf` as `y -> -inf` and to `+inf` as `y -> 0-`, so the root is unique.
/// Safeguarded Newton on a bracket, in log space so that arbitrarily small
/// `w` (hence arbitrarily small roots) stay representable.
///
/// Converged when `|h(y)| <= 1e-12 * max(1, |eps * ln_w|)`.
pub fn congestion_log_root(ln_w: f64, epsilon: f64, weight: f64) -> Result<f64, UpdateError> {
    debug_assert!(ln_w.is_finite());
    let tol = 1e-12 * (epsilon * ln_w).abs().max(1.0);
    // h and h' at y; `1 - e^y` via expm1 to keep precision near y = 0.
    let h = |y: f64| -> (f64, f64) {
        let one_minus_mu = -f64::exp_m1(y);
        let barrier = weight / (one_minus_mu * one_minus_mu);
        let value = epsilon * (y - ln_w) + barrier;
        let slope = epsilon + 2.0 * weight * y.exp() / one_minus_mu.powi(3);
        (value, slope)
    };

    let mut hi = f64::ln_1p(-1e-15);
    // Below ln(1/2) the barrier is at most 4 * weight, so pushing y down by
    // 4 * weight / eps past ln_w forces h <= 0.
    let mut lo = (ln_w - 4.0 * weight / epsilon).min(f64::ln(0.5));
    debug_assert!(h(lo).0 <= 0.0);

    // First-order guess ignoring the barrier's mu dependence.
    let mut y = (ln_w - weight / epsilon).clamp(lo, hi);
    for _ in 0..CONGESTION_MAX_ITERS {
        let (value, slope) = h(y);
        if value.abs() <= tol {
            return Ok(y);
        }
        if value > 0.0 {
            hi = y;
        } else {
            lo = y;
        }
        let step = value / slope;
        let mut next = y - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if next == y {
            // Bracket exhausted to machine precision.
            return Ok(y);
        }
        y = next;
    }
    let (value, _) = h(y);
    if value.abs() <= tol {
        Ok(y)
    } else {
        Err(UpdateError::RootSolve { cell: 0 })
    }
}

/// `scaling = target / w`; exact equality update.
pub fn fixed(w: &[f64], target: &[f64]) -> Result<Vec<f64>, UpdateError> {
    w.iter()
        .zip(target)
        .enumerate()
        .map(|(cell, (&w, &t))| {
            if w > 0.0 {
                Ok(t / w)
            } else if t == 0.0 {
                Ok(1.0)
            } else {
                Err(UpdateError::Infeasible { cell })
            }
        })
        .collect()
}

pub fn fixed_log(log_w: &[f64], target: &[f64]) -> Result<Vec<f64>, UpdateError> {
    log_w
        .iter()
        .zip(target)
        .enumerate()
        .map(|(cell, (&lw, &t))| {
            if lw > f64::NEG_INFINITY {
                Ok(t.ln() - lw)
            } else if t == 0.0 {
                Ok(0.0)
            } else {
                Err(UpdateError::Infeasible { cell })
            }
        })
        .collect()
}

/// Equality on masked cells, free elsewhere.
pub fn fixed_on_subset(
    w: &[f64],
    target: &[f64],
    mask: &[bool],
) -> Result<Vec<f64>, UpdateError> {
    w.iter()
        .zip(target)
        .zip(mask)
        .enumerate()
        .map(|(cell, ((&w, &t), &m))| {
            if !m {
                Ok(1.0)
            } else if w > 0.0 {
                Ok(t / w)
            } else if t == 0.0 {
                Ok(1.0)
            } else {
                Err(UpdateError::Infeasible { cell })
            }
        })
        .collect()
}

pub fn fixed_on_subset_log(
    log_w: &[f64],
    target: &[f64],
    mask: &[bool],
) -> Result<Vec<f64>, UpdateError> {
    log_w
        .iter()
        .zip(target)
        .zip(mask)
        .enumerate()
        .map(|(cell, ((&lw, &t), &m))| {
            if !m {
                Ok(0.0)
            } else if lw > f64::NEG_INFINITY {
                Ok(t.ln() - lw)
            } else if t == 0.0 {
                Ok(0.0)
            } else {
                Err(UpdateError::Infeasible { cell })
            }
        })
        .collect()
}

/// Linear cost with a capacity bound: the unconstrained solution
/// `w * exp(-weight * c / eps)` clipped at the capacity.
pub fn linear_capacity(
    w: &[f64],
    cost: &[f64],
    capacity: &[f64],
    epsilon: f64,
    weight: f64,
) -> Vec<f64> {
    w.iter()
        .zip(cost)
        .zip(capacity)
        .map(|((&w, &c), &kappa)| {
            let factor = (-weight * c / epsilon).exp();
            if w == 0.0 || w * factor <= kappa {
                factor
            } else {
                kappa / w
            }
        })
        .collect()
}

pub fn linear_capacity_log(
    log_w: &[f64],
    cost: &[f64],
    capacity: &[f64],
    epsilon: f64,
    weight: f64,
) -> Vec<f64> {
    log_w
        .iter()
        .zip(cost)
        .zip(capacity)
        .map(|((&lw, &c), &kappa)| {
            let log_factor = -weight * c / epsilon;
            if lw > f64::NEG_INFINITY {
                log_factor.min(kappa.ln() - lw)
            } else {
                log_factor
            }
        })
        .collect()
}

/// Congestion barrier on masked cells; off-mask cells and structurally
/// empty cells keep scaling one.
pub fn congestion(
    w: &[f64],
    mask: &[bool],
    epsilon: f64,
    weight: f64,
) -> Result<Vec<f64>, UpdateError> {
    w.iter()
        .zip(mask)
        .enumerate()
        .map(|(cell, (&w, &m))| {
            if !m || w == 0.0 {
                Ok(1.0)
            } else {
                let ln_w = w.ln();
                let y = congestion_log_root(ln_w, epsilon, weight)
                    .map_err(|_| UpdateError::RootSolve { cell })?;
                Ok((y - ln_w).exp())
            }
        })
        .collect()
}

pub fn congestion_log(
    log_w: &[f64],
    mask: &[bool],
    epsilon: f64,
    weight: f64,
) -> Result<Vec<f64>, UpdateError> {
    log_w
        .iter()
        .zip(mask)
        .enumerate()
        .map(|(cell, (&lw, &m))| {
            if !m || lw == f64::NEG_INFINITY {
                Ok(0.0)
            } else {
                let y = congestion_log_root(lw, epsilon, weight)
                    .map_err(|_| UpdateError::RootSolve { cell })?;
                Ok(y - lw)
            }
        })
        .collect()
}

/// Dispatch one marginal cost to its update rule (scaled domain). `weight`
/// is the running-cost weight at this time index.
pub fn apply(
    cost: &MarginalCost,
    w: &[f64],
    epsilon: f64,
    weight: f64,
) -> Result<Vec<f64>, UpdateError> {
    match cost {
        MarginalCost::Free => Ok(vec![1.0; w.len()]),
        MarginalCost::Fixed { target } => fixed(w, target),
        MarginalCost::FixedOnSubset { target, mask } => fixed_on_subset(w, target, mask),
        MarginalCost::LinearWithCapacity { cost, capacity } => {
            Ok(linear_capacity(w, cost, capacity, epsilon, weight))
        }
        MarginalCost::Congestion { mask } => congestion(w, mask, epsilon, weight),
    }
}

/// Dispatch in the log domain: takes log-`w`, returns log-scalings.
pub fn apply_log(
    cost: &MarginalCost,
    log_w: &[f64],
    epsilon: f64,
    weight: f64,
) -> Result<Vec<f64>, UpdateError> {
    match cost {
        MarginalCost::Free => Ok(vec![0.0; log_w.len()]),
        MarginalCost::Fixed { target } => fixed_log(log_w, target),
        MarginalCost::FixedOnSubset { target, mask } => fixed_on_subset_log(log_w, target, mask),
        MarginalCost::LinearWithCapacity { cost, capacity } => {
            Ok(linear_capacity_log(log_w, cost, capacity, epsilon, weight))
        }
        MarginalCost::Congestion { mask } => congestion_log(log_w, mask, epsilon, weight),
    }
}
