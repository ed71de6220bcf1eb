//! Worst-case (deterministic) certification: the largest ball radius on which
//! the margin lower bound stays positive for every attack target.

use ndarray::Array1;

use crate::model::{InputSpec, Network, Norm};
use crate::relaxation::{MarginBounder, RelaxMode};
use crate::{Error, Result};

const MAX_BISECT_ITERS: usize = 200;

/// Closed-form minimum of `a . x + d` over `||x - x0||_p <= eps`:
/// `a . x0 + d - eps * ||a||_q` with `q` the Hoelder dual of `p`.
pub fn minimize_affine_over_ball(
    a: &Array1<f64>,
    d: f64,
    x0: &Array1<f64>,
    eps: f64,
    p: Norm,
) -> f64 {
    a.dot(x0) + d - eps * p.dual_norm(a)
}

/// Closed-form maximum of `a . x + d` over the same ball.
pub fn maximize_affine_over_ball(
    a: &Array1<f64>,
    d: f64,
    x0: &Array1<f64>,
    eps: f64,
    p: Norm,
) -> f64 {
    a.dot(x0) + d + eps * p.dual_norm(a)
}

/// True when the margin lower bound is strictly positive for every target in
/// `spec` at radius `epsilon` (the ball radius stored in `spec` is ignored).
pub fn is_certified(net: &Network, spec: &InputSpec, epsilon: f64, mode: RelaxMode) -> Result<bool> {
    let at = spec.with_epsilon(epsilon);
    let bounder = MarginBounder::new(net, &at, mode)?;
    for &t in &spec.targets {
        let mlb = bounder.margin_bounds(t)?;
        let worst = minimize_affine_over_ball(&mlb.a_lower, mlb.d_lower, &at.x0, epsilon, at.norm);
        if worst <= 0.0 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Result of the worst-case radius search.
#[derive(Debug, Clone)]
pub struct WorstCaseCertificate {
    /// Largest certified radius over all targets jointly (minimum of the
    /// per-target radii).
    pub epsilon_certified: f64,
    /// Certified radius per individual target, in `spec.targets` order.
    pub per_target_epsilon: Vec<(usize, f64)>,
    pub norm: Norm,
    pub mode: RelaxMode,
    pub tolerance: f64,
    /// True when the search saturated at `eps_max` (every probed radius held).
    pub capped_at_max: bool,
}

/// Monotone bisection for the largest argument at which `certified_at` holds.
/// Returns a value at which the predicate was actually evaluated true (or 0
/// when it fails arbitrarily close to zero), terminating once the bracket's
/// relative width drops below `tol`.
pub(crate) fn bisect_radius<F>(mut certified_at: F, eps_max: f64, tol: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<bool>,
{
    if certified_at(eps_max)? {
        return Ok(eps_max);
    }
    let (mut lo, mut hi) = (0.0f64, eps_max);
    for _ in 0..MAX_BISECT_ITERS {
        if lo > 0.0 && hi - lo <= tol * lo {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break; // float resolution exhausted
        }
        if certified_at(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

pub(crate) fn check_search_params(eps_max: f64, tol: f64) -> Result<()> {
    if !eps_max.is_finite() || eps_max <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "eps_max must be finite and positive, got {eps_max}"
        )));
    }
    if !tol.is_finite() || tol <= 0.0 || tol >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "tol must lie in (0, 1), got {tol}"
        )));
    }
    Ok(())
}

/// Bisection search for the worst-case certified radius of every target.
///
/// `spec.epsilon` is ignored; the search runs on `[0, eps_max]` and stops when
/// each per-target bracket's relative width is below `tol`. A tied argmax is
/// already rejected by [`InputSpec::new`], so the margin at radius 0 is
/// strictly positive and the search is well posed.
pub fn certify_worst_case(
    net: &Network,
    spec: &InputSpec,
    mode: RelaxMode,
    eps_max: f64,
    tol: f64,
) -> Result<WorstCaseCertificate> {
    check_search_params(eps_max, tol)?;
    if spec.targets.is_empty() {
        return Err(Error::EmptyTargets);
    }
    let mut per_target = Vec::with_capacity(spec.targets.len());
    let mut capped = true;
    for &t in &spec.targets {
        let radius = bisect_radius(
            |eps| {
                let at = spec.with_epsilon(eps);
                let mlb = MarginBounder::new(net, &at, mode)?.margin_bounds(t)?;
                Ok(minimize_affine_over_ball(&mlb.a_lower, mlb.d_lower, &at.x0, eps, at.norm) > 0.0)
            },
            eps_max,
            tol,
        )?;
        capped &= radius == eps_max;
        per_target.push((t, radius));
    }
    let epsilon_certified = per_target
        .iter()
        .map(|&(_, e)| e)
        .fold(f64::INFINITY, f64::min);
    Ok(WorstCaseCertificate {
        epsilon_certified,
        per_target_epsilon: per_target,
        norm: spec.norm,
        mode,
        tolerance: tol,
        capped_at_max: capped,
    })
}
