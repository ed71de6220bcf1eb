//! Probabilistic certificates: two-sided bounds on `P[g_t(X) > a]` for noise
//! supported in the certification ball.
//!
//! Given the affine sandwich `A_L . x + d_L <= g_t(x) <= A_U . x + d_U` on the
//! ball, monotonicity of probability gives
//!
//! ```text
//! 1 - F_{A_L.X + d_L}(a)  <=  P[g_t(X) > a]  <=  1 - F_{A_U.X + d_U}(a),
//! ```
//!
//! and each side only needs the distribution of an affine function of the
//! noise. Three interchangeable evaluators are provided:
//!
//! * [`hoeffding_bounds`] — independent symmetric noise bounded per coordinate;
//!   a concentration bound, no density assumption.
//! * [`gaussian_bounds`] — Gaussian noise with known covariance; exact normal
//!   tails for the affine surrogates. The covariance must obey the 3-sigma rule
//!   `sqrt(Sigma_ii) <= eps/3` so effectively all mass stays in the ball.
//! * [`convolution_bounds`] — numerically exact CDF of the weighted sum of
//!   independent uniform coordinates, with one-sided grid rounding.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::Deserialize;
use statrs::function::erf::erf;
use std::path::Path;

use crate::model::Norm;
use crate::relaxation::MarginLinearBounds;
use crate::{Error, Result};

/// Eigenvalues may dip this far below zero before the covariance is rejected
/// rather than clamped.
const PSD_FLOOR: f64 = -1e-10;

/// Which evaluator produced a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertMethod {
    Hoeffding,
    Gaussian,
    Convolution,
}

impl CertMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hoeffding" => Ok(CertMethod::Hoeffding),
            "gaussian" => Ok(CertMethod::Gaussian),
            "convolution" => Ok(CertMethod::Convolution),
            _ => Err(Error::InvalidParameter(format!(
                "unknown method {s:?} (expected hoeffding|gaussian|convolution)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CertMethod::Hoeffding => "hoeffding",
            CertMethod::Gaussian => "gaussian",
            CertMethod::Convolution => "convolution",
        }
    }
}

/// Two-sided probabilistic certificate `gamma_L <= P[g_t(X) > a] <= gamma_U`.
#[derive(Debug, Clone)]
pub struct ProbCertificate {
    pub gamma_lower: f64,
    pub gamma_upper: f64,
    /// Margin threshold `a`.
    pub threshold: f64,
    /// Means of the affine surrogates at the noise center.
    pub mu_lower: f64,
    pub mu_upper: f64,
    /// Standard deviations of the surrogates (Gaussian method only).
    pub sigma_lower: Option<f64>,
    pub sigma_upper: Option<f64>,
    pub method: CertMethod,
}

/// Positive-semidefinite covariance, stored already validated and clamped.
#[derive(Debug, Clone)]
pub struct Covariance {
    repr: CovRepr,
}

#[derive(Debug, Clone)]
enum CovRepr {
    Diagonal(Array1<f64>),
    Full {
        sigma: Array2<f64>,
        /// `factor * factor^T = sigma`; used for sampling.
        factor: Array2<f64>,
    },
}

impl Covariance {
    /// `variance * I`.
    pub fn isotropic(variance: f64, dim: usize) -> Result<Self> {
        Covariance::diagonal(Array1::from_elem(dim, variance))
    }

    pub fn diagonal(diag: Array1<f64>) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::InvalidParameter("covariance has dimension 0".into()));
        }
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if !min.is_finite() || min < PSD_FLOOR {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
            });
        }
        Ok(Covariance {
            repr: CovRepr::Diagonal(diag.mapv(|v| v.max(0.0))),
        })
    }

    /// Validates symmetry, floors eigenvalues at `-1e-10`, clamps them to zero,
    /// and keeps the clamped reconstruction (so sampling and quadratic forms
    /// agree exactly).
    pub fn full(sigma: Array2<f64>) -> Result<Self> {
        let n = sigma.nrows();
        if n == 0 || sigma.ncols() != n {
            return Err(Error::InvalidParameter(format!(
                "covariance must be square and nonempty, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if !sigma.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter(
                "covariance contains a non-finite entry".into(),
            ));
        }
        let scale = sigma.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (sigma[[i, j]] - sigma[[j, i]]).abs() > 1e-9 * scale {
                    return Err(Error::InvalidParameter(format!(
                        "covariance is not symmetric at ({i}, {j}): {} vs {}",
                        sigma[[i, j]],
                        sigma[[j, i]]
                    )));
                }
            }
        }
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (sigma[[i, j]] + sigma[[j, i]]));
        let eig = m.symmetric_eigen();
        let min_eigenvalue = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_eigenvalue < PSD_FLOOR {
            return Err(Error::NotPsd { min_eigenvalue });
        }
        let sqrt_vals: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
        // factor column k = v_k * sqrt(lambda_k); clamped = factor * factor^T
        let mut factor = Array2::zeros((n, n));
        for i in 0..n {
            for k in 0..n {
                factor[[i, k]] = eig.eigenvectors[(i, k)] * sqrt_vals[k];
            }
        }
        let mut clamped = factor.dot(&factor.t());
        // exact symmetry of the reconstruction
        for i in 0..n {
            for j in 0..i {
                let avg = 0.5 * (clamped[[i, j]] + clamped[[j, i]]);
                clamped[[i, j]] = avg;
                clamped[[j, i]] = avg;
            }
        }
        Ok(Covariance {
            repr: CovRepr::Full {
                sigma: clamped,
                factor,
            },
        })
    }

    pub fn dim(&self) -> usize {
        match &self.repr {
            CovRepr::Diagonal(d) => d.len(),
            CovRepr::Full { sigma, .. } => sigma.nrows(),
        }
    }

    /// `a^T Sigma a`, clamped at zero against rounding.
    pub fn quad_form(&self, a: &Array1<f64>) -> f64 {
        let v = match &self.repr {
            CovRepr::Diagonal(d) => a.iter().zip(d.iter()).map(|(x, s)| x * x * s).sum(),
            CovRepr::Full { sigma, .. } => a.dot(&sigma.dot(a)),
        };
        v.max(0.0)
    }

    pub fn diag_entries(&self) -> Array1<f64> {
        match &self.repr {
            CovRepr::Diagonal(d) => d.clone(),
            CovRepr::Full { sigma, .. } => sigma.diag().to_owned(),
        }
    }

    /// Largest per-coordinate standard deviation and its coordinate.
    pub fn max_std(&self) -> (usize, f64) {
        let d = self.diag_entries();
        let mut best = (0, 0.0f64);
        for (i, &v) in d.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        (best.0, best.1.sqrt())
    }

    /// 3-sigma rule: every coordinate's standard deviation must be at most
    /// `eps / 3`, so at least ~99.7% of each coordinate's mass stays inside
    /// the ball where the margin bounds hold.
    pub fn check_three_sigma(&self, eps: f64) -> Result<()> {
        let (coordinate, sigma) = self.max_std();
        let limit = eps / 3.0;
        if sigma > limit * (1.0 + 1e-9) {
            return Err(Error::ThreeSigmaViolation {
                coordinate,
                sigma,
                limit,
            });
        }
        Ok(())
    }

    /// Multiplies the covariance by `factor_sq >= 0`.
    pub fn scaled(&self, factor_sq: f64) -> Covariance {
        let repr = match &self.repr {
            CovRepr::Diagonal(d) => CovRepr::Diagonal(d.mapv(|v| v * factor_sq)),
            CovRepr::Full { sigma, factor } => CovRepr::Full {
                sigma: sigma.mapv(|v| v * factor_sq),
                factor: factor.mapv(|v| v * factor_sq.sqrt()),
            },
        };
        Covariance { repr }
    }

    /// Rescales so the largest per-coordinate standard deviation equals
    /// `eps / 3` (saturating the 3-sigma rule). A zero covariance is returned
    /// unchanged.
    pub fn scaled_to_ball(&self, eps: f64) -> Covariance {
        let (_, max_std) = self.max_std();
        if max_std == 0.0 {
            return self.clone();
        }
        let target = eps / 3.0;
        self.scaled((target / max_std) * (target / max_std))
    }

    /// One draw of the zero-mean perturbation.
    pub fn perturb<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<f64> {
        match &self.repr {
            CovRepr::Diagonal(d) => Array1::from_iter(d.iter().map(|&v| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                z * v.sqrt()
            })),
            CovRepr::Full { factor, .. } => {
                let z = Array1::from_iter((0..factor.ncols()).map(|_| {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    z
                }));
                factor.dot(&z)
            }
        }
    }
}

/// Noise model for the random perturbation `X` around the nominal input.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    /// Independent per-coordinate noise, symmetric about the center and
    /// supported on `[x0_i - half_width, x0_i + half_width]`. Hoeffding needs
    /// nothing more; the convolution path and the Monte-Carlo validator
    /// additionally assume the uniform density.
    BoundedIndependent { half_width: f64 },
    /// `X ~ N(x0, Sigma)`.
    Gaussian { covariance: Covariance },
}

impl NoiseModel {
    pub fn bounded(half_width: f64) -> Result<Self> {
        if !half_width.is_finite() || half_width < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "half_width must be finite and nonnegative, got {half_width}"
            )));
        }
        Ok(NoiseModel::BoundedIndependent { half_width })
    }

    pub fn gaussian(covariance: Covariance) -> Self {
        NoiseModel::Gaussian { covariance }
    }

    pub fn kind_str(&self) -> &'static str {
        match self {
            NoiseModel::BoundedIndependent { .. } => "bounded",
            NoiseModel::Gaussian { .. } => "gaussian",
        }
    }

    /// One draw of `X`.
    pub fn sample<R: Rng + ?Sized>(&self, x0: &Array1<f64>, rng: &mut R) -> Array1<f64> {
        match self {
            NoiseModel::BoundedIndependent { half_width } => {
                if *half_width == 0.0 {
                    x0.clone()
                } else {
                    x0.mapv(|c| c + rng.random_range(-half_width..*half_width))
                }
            }
            NoiseModel::Gaussian { covariance } => x0 + covariance.perturb(rng),
        }
    }
}

fn surrogate_means(mlb: &MarginLinearBounds, x0: &Array1<f64>) -> (f64, f64) {
    (mlb.lower_at(x0), mlb.upper_at(x0))
}

/// Hoeffding certificate for independent symmetric noise bounded in
/// `[x0_i - epsilon, x0_i + epsilon]`:
///
/// ```text
/// gamma_L = 1 - exp(-(mu_L - a)^2 / (2 eps^2 ||A_L||_2^2))   if mu_L >= a, else 0
/// gamma_U =     exp(-(a - mu_U)^2 / (2 eps^2 ||A_U||_2^2))   if mu_U <= a, else 1
/// ```
///
/// With `eps = 0` (or a zero coefficient row) the noise is degenerate and the
/// certificate collapses to the deterministic margin check.
pub fn hoeffding_bounds(
    mlb: &MarginLinearBounds,
    x0: &Array1<f64>,
    epsilon: f64,
    a: f64,
) -> ProbCertificate {
    let (mu_lower, mu_upper) = surrogate_means(mlb, x0);
    let denom_l = 2.0 * epsilon * epsilon * {
        let n = Norm::L2.norm(&mlb.a_lower);
        n * n
    };
    let denom_u = 2.0 * epsilon * epsilon * {
        let n = Norm::L2.norm(&mlb.a_upper);
        n * n
    };
    let gamma_lower = if denom_l == 0.0 {
        if mu_lower > a {
            1.0
        } else {
            0.0
        }
    } else if mu_lower >= a {
        1.0 - (-(mu_lower - a) * (mu_lower - a) / denom_l).exp()
    } else {
        0.0
    };
    let gamma_upper = if denom_u == 0.0 {
        if mu_upper > a {
            1.0
        } else {
            0.0
        }
    } else if mu_upper <= a {
        (-(a - mu_upper) * (a - mu_upper) / denom_u).exp()
    } else {
        1.0
    };
    ProbCertificate {
        gamma_lower: gamma_lower.clamp(0.0, 1.0),
        gamma_upper: gamma_upper.clamp(0.0, 1.0),
        threshold: a,
        mu_lower,
        mu_upper,
        sigma_lower: None,
        sigma_upper: None,
        method: CertMethod::Hoeffding,
    }
}

/// Gaussian certificate for `X ~ N(x0, Sigma)`: the surrogates are normal with
/// means `mu` and variances `A Sigma A^T`, so each side is an exact normal
/// tail, `gamma = 1/2 - 1/2 erf((a - mu) / (sigma sqrt(2)))`. A degenerate
/// `sigma = 0` becomes a step function.
///
/// `ball_epsilon` is the radius of the ball on which `mlb` is valid; the
/// covariance is rejected unless it satisfies the 3-sigma rule for that
/// radius.
pub fn gaussian_bounds(
    mlb: &MarginLinearBounds,
    x0: &Array1<f64>,
    covariance: &Covariance,
    ball_epsilon: f64,
    a: f64,
) -> Result<ProbCertificate> {
    if covariance.dim() != x0.len() {
        return Err(Error::InvalidParameter(format!(
            "covariance dimension {} does not match input dimension {}",
            covariance.dim(),
            x0.len()
        )));
    }
    covariance.check_three_sigma(ball_epsilon)?;
    let (mu_lower, mu_upper) = surrogate_means(mlb, x0);
    let sigma_lower = covariance.quad_form(&mlb.a_lower).sqrt();
    let sigma_upper = covariance.quad_form(&mlb.a_upper).sqrt();
    let tail = |mu: f64, sigma: f64| -> f64 {
        if sigma == 0.0 {
            if mu > a {
                1.0
            } else {
                0.0
            }
        } else {
            0.5 - 0.5 * erf((a - mu) / (sigma * std::f64::consts::SQRT_2))
        }
    };
    Ok(ProbCertificate {
        gamma_lower: tail(mu_lower, sigma_lower).clamp(0.0, 1.0),
        gamma_upper: tail(mu_upper, sigma_upper).clamp(0.0, 1.0),
        threshold: a,
        mu_lower,
        mu_upper,
        sigma_lower: Some(sigma_lower),
        sigma_upper: Some(sigma_upper),
        method: CertMethod::Gaussian,
    })
}

/// CDF of a scalar distribution sampled on a uniform grid, nondecreasing from
/// exactly 0 to exactly 1 across a compact support.
#[derive(Debug, Clone)]
pub struct DistributionCDF {
    start: f64,
    step: f64,
    values: Vec<f64>,
}

impl DistributionCDF {
    pub fn support(&self) -> (f64, f64) {
        (
            self.start,
            self.start + self.step * (self.values.len() - 1) as f64,
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grid_point(&self, i: usize) -> f64 {
        self.start + self.step * i as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// CDF at the largest grid point `<= x` (0 below the support). Rounding
    /// down under-reports the CDF, which is the conservative side for upper
    /// tail bounds.
    pub fn value_floor(&self, x: f64) -> f64 {
        if x < self.start {
            return 0.0;
        }
        let idx = ((x - self.start) / self.step).floor() as usize;
        self.values[idx.min(self.values.len() - 1)]
    }

    /// CDF at the smallest grid point `>= x` (1 above the support).
    pub fn value_ceil(&self, x: f64) -> f64 {
        let (_, hi) = self.support();
        if x > hi {
            return 1.0;
        }
        if x <= self.start {
            return self.values[0];
        }
        let idx = ((x - self.start) / self.step).ceil() as usize;
        self.values[idx.min(self.values.len() - 1)]
    }

    /// Largest CDF increment between adjacent grid points around `x`; the
    /// resolution cost of one-sided rounding at that query.
    pub fn cell_gap(&self, x: f64) -> f64 {
        self.value_ceil(x) - self.value_floor(x)
    }
}

/// Distribution of `sum_i w_i U_i` with independent `U_i ~ Uniform[-eps, eps]`,
/// built by pairwise-tree convolution of per-coordinate cell masses on a
/// shared lattice of about `grid_points` cells.
///
/// Errors if any nonzero weight's support spans fewer than two lattice cells;
/// at that resolution the discretized distribution is meaningless.
pub fn weighted_uniform_sum_cdf(
    weights: &Array1<f64>,
    eps: f64,
    grid_points: usize,
) -> Result<DistributionCDF> {
    if grid_points < 16 {
        return Err(Error::InvalidParameter(format!(
            "grid_points must be at least 16, got {grid_points}"
        )));
    }
    let half_widths: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w != 0.0)
        .map(|(i, w)| (i, w.abs() * eps))
        .collect();
    assert!(
        eps > 0.0 && !half_widths.is_empty(),
        "degenerate sum must be handled by the caller"
    );
    let radius: f64 = half_widths.iter().map(|&(_, w)| w).sum();
    let h = 2.0 * radius / (grid_points - 1) as f64;
    for &(i, w) in &half_widths {
        let cells = 2.0 * w / h;
        if cells < 2.0 {
            return Err(Error::ResolutionTooCoarse {
                coordinate: i,
                cells,
            });
        }
    }

    // leaf masses: exact overlap of each lattice cell [kh - h/2, kh + h/2]
    // with [-w, w], normalized by the box width
    let mut queue: Vec<(i64, Vec<f64>)> = half_widths
        .iter()
        .map(|&(_, w)| {
            let k_max = (w / h + 0.5).floor() as i64;
            let masses: Vec<f64> = (-k_max..=k_max)
                .map(|k| {
                    let cell_lo = k as f64 * h - 0.5 * h;
                    let cell_hi = k as f64 * h + 0.5 * h;
                    let overlap = (cell_hi.min(w) - cell_lo.max(-w)).max(0.0);
                    overlap / (2.0 * w)
                })
                .collect();
            (-k_max, masses)
        })
        .collect();

    // pairwise tree: convolve adjacent pairs per round to keep factors short
    while queue.len() > 1 {
        let mut next = Vec::with_capacity(queue.len().div_ceil(2));
        let mut it = queue.into_iter();
        while let Some((off_a, a)) = it.next() {
            match it.next() {
                Some((off_b, b)) => {
                    let mut out = vec![0.0f64; a.len() + b.len() - 1];
                    for (i, &ma) in a.iter().enumerate() {
                        if ma == 0.0 {
                            continue;
                        }
                        for (j, &mb) in b.iter().enumerate() {
                            out[i + j] += ma * mb;
                        }
                    }
                    next.push((off_a + off_b, out));
                }
                None => next.push((off_a, a)),
            }
        }
        queue = next;
    }
    let (offset, mut masses) = queue.pop().expect("at least one factor");
    let total: f64 = masses.iter().sum();
    for m in &mut masses {
        *m /= total;
    }

    // midpoint-convention CDF with guard points pinning 0 and 1 just outside
    // the mass lattice
    let mut values = Vec::with_capacity(masses.len() + 2);
    values.push(0.0);
    let mut cum = 0.0;
    for &m in &masses {
        values.push((cum + 0.5 * m).min(1.0));
        cum += m;
    }
    values.push(1.0);
    Ok(DistributionCDF {
        start: (offset - 1) as f64 * h,
        step: h,
        values,
    })
}

/// Certificate from the numerically-convolved CDF, assuming independent
/// **uniform** noise on `[x0_i - epsilon, x0_i + epsilon]`. Queries snap one
/// grid cell in the conservative direction per side, so the reported sandwich
/// never overstates confidence at the resolution of the grid.
pub fn convolution_bounds(
    mlb: &MarginLinearBounds,
    x0: &Array1<f64>,
    epsilon: f64,
    a: f64,
    grid_points: usize,
) -> Result<ProbCertificate> {
    let (mu_lower, mu_upper) = surrogate_means(mlb, x0);
    let side = |coeffs: &Array1<f64>, mu: f64, lower_side: bool| -> Result<f64> {
        let degenerate = epsilon == 0.0 || coeffs.iter().all(|&w| w == 0.0);
        if degenerate {
            return Ok(if mu > a { 1.0 } else { 0.0 });
        }
        let cdf = weighted_uniform_sum_cdf(coeffs, epsilon, grid_points)?;
        let f = if lower_side {
            cdf.value_ceil(a - mu)
        } else {
            cdf.value_floor(a - mu)
        };
        Ok(1.0 - f)
    };
    Ok(ProbCertificate {
        gamma_lower: side(&mlb.a_lower, mu_lower, true)?.clamp(0.0, 1.0),
        gamma_upper: side(&mlb.a_upper, mu_upper, false)?.clamp(0.0, 1.0),
        threshold: a,
        mu_lower,
        mu_upper,
        sigma_lower: None,
        sigma_upper: None,
        method: CertMethod::Convolution,
    })
}

/// Combines the lower side of one certificate with the upper side of another
/// (the sides are interchangeable across methods because each bounds the same
/// probability). Thresholds must match, and the combined pair must still be a
/// sandwich.
pub fn theorem_sandwich(
    lower: &ProbCertificate,
    upper: &ProbCertificate,
) -> Result<ProbCertificate> {
    if lower.threshold != upper.threshold {
        return Err(Error::ThresholdMismatch {
            a_lower: lower.threshold,
            a_upper: upper.threshold,
        });
    }
    if lower.gamma_lower > upper.gamma_upper + 1e-12 {
        return Err(Error::SandwichViolation {
            gamma_lower: lower.gamma_lower,
            gamma_upper: upper.gamma_upper,
        });
    }
    Ok(ProbCertificate {
        gamma_lower: lower.gamma_lower,
        gamma_upper: upper.gamma_upper,
        threshold: lower.threshold,
        mu_lower: lower.mu_lower,
        mu_upper: upper.mu_upper,
        sigma_lower: lower.sigma_lower,
        sigma_upper: upper.sigma_upper,
        // the lower side drives certification decisions, keep its tag
        method: lower.method,
    })
}

/// Transfers an l-inf certificate of radius `epsilon_inf` to an l1 or l2
/// statement. Because `||x||_inf <= ||x||_2` and `||x||_inf <= ||x||_1`, the
/// lp ball of the *same* radius is contained in the certified box, so the
/// radius carries over unchanged; the containment is dimension-free (`n0` is
/// validated but does not enter the value).
pub fn convert_norm_certificate(epsilon_inf: f64, target: Norm, n0: usize) -> Result<f64> {
    if n0 == 0 {
        return Err(Error::InvalidParameter("n0 must be positive".into()));
    }
    if !epsilon_inf.is_finite() || epsilon_inf < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "epsilon_inf must be finite and nonnegative, got {epsilon_inf}"
        )));
    }
    match target {
        Norm::L1 | Norm::L2 => Ok(epsilon_inf),
        Norm::LInf => Err(Error::UnsupportedNorm {
            requested: "inf".into(),
        }),
    }
}

// --- covariance file format ---------------------------------------------------

#[derive(Deserialize)]
struct CovFile {
    #[serde(default)]
    diag: Option<Vec<f64>>,
    #[serde(default)]
    full: Option<Vec<Vec<f64>>>,
}

/// Parses `{"diag": [...]}` or `{"full": [[...], ...]}`.
pub fn covariance_from_json(text: &str) -> Result<Covariance> {
    let file: CovFile = serde_json::from_str(text)
        .map_err(|e| Error::InvalidParameter(format!("covariance parse error: {e}")))?;
    match (file.diag, file.full) {
        (Some(d), None) => Covariance::diagonal(Array1::from_vec(d)),
        (None, Some(rows)) => {
            let n = rows.len();
            for (i, r) in rows.iter().enumerate() {
                if r.len() != n {
                    return Err(Error::InvalidParameter(format!(
                        "covariance row {i} has {} entries, expected {n}",
                        r.len()
                    )));
                }
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            Covariance::full(Array2::from_shape_vec((n, n), flat).expect("shape checked"))
        }
        _ => Err(Error::InvalidParameter(
            "covariance file must contain exactly one of \"diag\" or \"full\"".into(),
        )),
    }
}

pub fn load_covariance(path: &Path) -> Result<Covariance> {
    let text = std::fs::read_to_string(path)?;
    covariance_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine_mlb(a: Array1<f64>, d: f64) -> MarginLinearBounds {
        MarginLinearBounds {
            target: 1,
            a_lower: a.clone(),
            d_lower: d,
            a_upper: a,
            d_upper: d,
        }
    }

    #[test]
    fn hoeffding_reference_values() {
        // mu_L - a = 2, eps = 1, ||A_L||_2 = 1  =>  gamma_L = 1 - e^{-2}
        let mlb = affine_mlb(array![1.0], 0.0);
        let cert = hoeffding_bounds(&mlb, &array![2.0], 1.0, 0.0);
        assert!(
            (cert.gamma_lower - (1.0 - (-2.0f64).exp())).abs() < 1e-9,
            "gamma_L = {}",
            cert.gamma_lower
        );
        assert!((cert.gamma_lower - 0.8646647167633873).abs() < 1e-9);
        // exact zero at mu_L = a
        let cert = hoeffding_bounds(&mlb, &array![0.5], 1.0, 0.5);
        assert_eq!(cert.gamma_lower, 0.0);
        // continuity across the branch
        let cert = hoeffding_bounds(&mlb, &array![0.5 + 1e-9], 1.0, 0.5);
        assert!(cert.gamma_lower < 1e-12);
        // upper mirror: a - mu_U = 2 gives gamma_U = e^{-2}
        let cert = hoeffding_bounds(&mlb, &array![-2.0], 1.0, 0.0);
        assert!((cert.gamma_upper - (-2.0f64).exp()).abs() < 1e-9);
        assert_eq!(cert.gamma_lower, 0.0);
    }

    #[test]
    fn hoeffding_degenerate_noise_is_a_margin_check() {
        let mlb = affine_mlb(array![1.0, -2.0], 0.3);
        let x0 = array![1.0, 0.2];
        let cert = hoeffding_bounds(&mlb, &x0, 0.0, 0.0);
        // mu = 1 - 0.4 + 0.3 = 0.9 > 0
        assert_eq!(cert.gamma_lower, 1.0);
        assert_eq!(cert.gamma_upper, 1.0);
        let cert = hoeffding_bounds(&mlb, &x0, 0.0, 2.0);
        assert_eq!(cert.gamma_lower, 0.0);
        assert_eq!(cert.gamma_upper, 0.0);
    }

    #[test]
    fn gaussian_reference_values() {
        let mlb = affine_mlb(array![1.0], 0.0);
        let cov = Covariance::isotropic(0.01, 1).unwrap(); // sigma = 0.1
        // a = mu: exactly one half
        let cert = gaussian_bounds(&mlb, &array![0.7], &cov, 0.3, 0.7).unwrap();
        assert!((cert.gamma_lower - 0.5).abs() < 1e-15);
        // mu - a = sigma: the standard normal CDF at 1
        let cert = gaussian_bounds(&mlb, &array![0.7], &cov, 0.3, 0.6).unwrap();
        assert!(
            (cert.gamma_lower - 0.8413447460685429).abs() < 1e-9,
            "gamma_L = {}",
            cert.gamma_lower
        );
        assert_eq!(cert.sigma_lower, Some(0.1));
    }

    #[test]
    fn gaussian_isotropic_matches_one_dimensional_formula() {
        let a_row = array![0.6, -0.8, 0.2];
        let mlb = affine_mlb(a_row.clone(), 0.1);
        let x0 = array![0.5, 0.4, -0.3];
        let s = 0.05;
        let cov = Covariance::isotropic(s * s, 3).unwrap();
        let cert = gaussian_bounds(&mlb, &x0, &cov, 3.0 * s, 0.0).unwrap();
        let sigma = s * Norm::L2.norm(&a_row);
        let mu = mlb.lower_at(&x0);
        let direct = 0.5 - 0.5 * erf((0.0 - mu) / (sigma * std::f64::consts::SQRT_2));
        assert!((cert.gamma_lower - direct).abs() < 1e-12);
        assert!((cert.sigma_lower.unwrap() - sigma).abs() < 1e-12);
    }

    #[test]
    fn gaussian_degenerate_covariance_is_a_step() {
        let mlb = affine_mlb(array![1.0, 1.0], 0.0);
        let cov = Covariance::isotropic(0.0, 2).unwrap();
        let cert = gaussian_bounds(&mlb, &array![0.4, 0.2], &cov, 0.1, 0.0).unwrap();
        assert_eq!((cert.gamma_lower, cert.gamma_upper), (1.0, 1.0));
        let cert = gaussian_bounds(&mlb, &array![0.4, 0.2], &cov, 0.1, 0.7).unwrap();
        assert_eq!((cert.gamma_lower, cert.gamma_upper), (0.0, 0.0));
    }

    #[test]
    fn three_sigma_rule_is_enforced() {
        let mlb = affine_mlb(array![1.0], 0.0);
        let cov = Covariance::isotropic(0.04, 1).unwrap(); // sigma = 0.2
        // eps/3 = 0.1 < 0.2: reject
        let err = gaussian_bounds(&mlb, &array![1.0], &cov, 0.3, 0.0).unwrap_err();
        match err {
            Error::ThreeSigmaViolation { sigma, limit, .. } => {
                assert!((sigma - 0.2).abs() < 1e-12);
                assert!((limit - 0.1).abs() < 1e-12);
            }
            other => panic!("expected ThreeSigmaViolation, got {other:?}"),
        }
        // exactly at the limit: accepted
        assert!(gaussian_bounds(&mlb, &array![1.0], &cov, 0.6, 0.0).is_ok());
    }

    #[test]
    fn covariance_psd_validation_and_clamping() {
        // slightly negative diagonal entries are clamped
        let cov = Covariance::diagonal(array![1e-3, -1e-11]).unwrap();
        assert_eq!(cov.diag_entries()[1], 0.0);
        // clearly negative entries are rejected
        assert!(matches!(
            Covariance::diagonal(array![1e-3, -1e-3]),
            Err(Error::NotPsd { .. })
        ));
        // full matrix with eigenvalues {3, -1} is rejected
        assert!(matches!(
            Covariance::full(array![[1.0, 2.0], [2.0, 1.0]]),
            Err(Error::NotPsd { .. })
        ));
        // asymmetric input is rejected
        assert!(Covariance::full(array![[1.0, 0.5], [0.2, 1.0]]).is_err());
        // a valid full covariance keeps its quadratic form
        let cov = Covariance::full(array![[2.0, 0.5], [0.5, 1.0]]).unwrap();
        let a = array![1.0, -1.0];
        assert!((cov.quad_form(&a) - (2.0 - 1.0 + 1.0)).abs() < 1e-10);
    }

    #[test]
    fn full_covariance_factor_reproduces_sigma() {
        let sigma = array![[1.0, 0.3, 0.0], [0.3, 0.5, -0.1], [0.0, -0.1, 0.2]];
        let cov = Covariance::full(sigma.clone()).unwrap();
        match &cov.repr {
            CovRepr::Full { factor, .. } => {
                let prod = factor.dot(&factor.t());
                for i in 0..3 {
                    for j in 0..3 {
                        assert!(
                            (prod[[i, j]] - sigma[[i, j]]).abs() < 1e-10,
                            "factor mismatch at ({i},{j})"
                        );
                    }
                }
            }
            _ => panic!("expected full representation"),
        }
    }

    #[test]
    fn scaled_to_ball_saturates_three_sigma() {
        let cov = Covariance::diagonal(array![0.5, 2.0]).unwrap();
        let scaled = cov.scaled_to_ball(0.3);
        let (_, max_std) = scaled.max_std();
        assert!((max_std - 0.1).abs() < 1e-12);
        assert!(scaled.check_three_sigma(0.3).is_ok());
        // ratios are preserved
        let d = scaled.diag_entries();
        assert!((d[0] / d[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn symmetric_two_weight_sum_has_half_mass_at_zero() {
        // A_L . X is a symmetric triangle; gamma_L at a = mu is one half
        let mlb = affine_mlb(array![1.0, 1.0], 0.0);
        let cert = convolution_bounds(&mlb, &array![0.0, 0.0], 1.0, 0.0, 1 << 12).unwrap();
        assert!(
            (cert.gamma_lower - 0.5).abs() < 2e-3,
            "gamma_L = {}",
            cert.gamma_lower
        );
        assert!(cert.gamma_lower <= 0.5 + 1e-12, "lower side must not exceed the true value");
        assert!((cert.gamma_upper - 0.5).abs() < 2e-3);
        assert!(cert.gamma_upper >= 0.5 - 1e-12);
    }

    #[test]
    fn convolution_cdf_matches_irwin_hall() {
        // sum of three Uniform[-1, 1] rescales Irwin-Hall with n = 3
        let cdf = weighted_uniform_sum_cdf(&array![1.0, 1.0, 1.0], 1.0, 1 << 14).unwrap();
        let mut worst = 0.0f64;
        for i in 0..cdf.len() {
            let x = cdf.grid_point(i);
            let exact = crate::oracle::irwin_hall_cdf(3, (x + 3.0) / 2.0);
            worst = worst.max((cdf.values()[i] - exact).abs());
        }
        assert!(worst <= 1e-4, "sup-norm gap vs Irwin-Hall: {worst}");
    }

    #[test]
    fn convolution_dominates_hoeffding_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let n = rng.random_range(2..8);
            let a_row = Array1::from_iter((0..n).map(|_| {
                let w: f64 = rng.random_range(-1.0..1.0);
                if w.abs() < 0.05 {
                    0.1
                } else {
                    w
                }
            }));
            let x0 = Array1::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0)));
            let d = rng.random_range(-0.5..0.5);
            let eps = rng.random_range(0.05..0.4);
            let mlb = affine_mlb(a_row, d);
            let a = mlb.lower_at(&x0) - rng.random_range(-0.5..1.0) * eps;
            let hoeff = hoeffding_bounds(&mlb, &x0, eps, a);
            let conv = convolution_bounds(&mlb, &x0, eps, a, 1 << 13).unwrap();
            let slack = weighted_uniform_sum_cdf(&mlb.a_lower, eps, 1 << 13)
                .unwrap()
                .cell_gap(a - conv.mu_lower);
            assert!(
                conv.gamma_lower >= hoeff.gamma_lower - slack - 1e-12,
                "trial {trial}: convolution {} below hoeffding {}",
                conv.gamma_lower,
                hoeff.gamma_lower
            );
        }
    }

    #[test]
    fn convolution_degenerate_cases() {
        let mlb = affine_mlb(array![1.0, -1.0], 0.25);
        // zero radius: deterministic margin check
        let cert = convolution_bounds(&mlb, &array![0.5, 0.0], 0.0, 0.0, 1 << 10).unwrap();
        assert_eq!((cert.gamma_lower, cert.gamma_upper), (1.0, 1.0));
        // zero coefficient row
        let flat = affine_mlb(array![0.0, 0.0], -0.1);
        let cert = convolution_bounds(&flat, &array![0.5, 0.0], 0.3, 0.0, 1 << 10).unwrap();
        assert_eq!((cert.gamma_lower, cert.gamma_upper), (0.0, 0.0));
    }

    #[test]
    fn resolution_error_names_the_coordinate() {
        let mlb = affine_mlb(array![1.0, 1e-9], 0.0);
        let err = convolution_bounds(&mlb, &array![0.0, 0.0], 1.0, 0.0, 1 << 10).unwrap_err();
        match err {
            Error::ResolutionTooCoarse { coordinate, cells } => {
                assert_eq!(coordinate, 1);
                assert!(cells < 2.0);
            }
            other => panic!("expected ResolutionTooCoarse, got {other:?}"),
        }
    }

    #[test]
    fn cdf_queries_round_conservatively() {
        let cdf = weighted_uniform_sum_cdf(&array![1.0], 1.0, 64).unwrap();
        let (lo, hi) = cdf.support();
        assert!(cdf.value_floor(lo - 1.0) == 0.0 && cdf.value_ceil(hi + 1.0) == 1.0);
        assert!(cdf.values()[0] <= 1e-9);
        assert!(cdf.values()[cdf.len() - 1] >= 1.0 - 1e-9);
        // floor <= ceil everywhere, and both within the adjacent true values
        for &q in &[-0.77, -0.3, 0.0, 0.123, 0.9] {
            assert!(cdf.value_floor(q) <= cdf.value_ceil(q));
            // true uniform CDF on [-1, 1]
            let exact = ((q + 1.0) / 2.0).clamp(0.0, 1.0);
            assert!(cdf.value_floor(q) <= exact + 1e-9);
            assert!(cdf.value_ceil(q) >= exact - 1e-9);
        }
        // monotone
        for w in cdf.values().windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn sandwich_combination_and_errors() {
        let mlb = affine_mlb(array![1.0, 1.0], 0.0);
        let x0 = array![0.3, 0.3];
        let conv = convolution_bounds(&mlb, &x0, 0.2, 0.0, 1 << 12).unwrap();
        let hoeff = hoeffding_bounds(&mlb, &x0, 0.2, 0.0);
        let mixed = theorem_sandwich(&conv, &hoeff).unwrap();
        assert_eq!(mixed.gamma_lower, conv.gamma_lower);
        assert_eq!(mixed.gamma_upper, hoeff.gamma_upper);
        assert_eq!(mixed.method, CertMethod::Convolution);
        assert!(mixed.gamma_lower <= mixed.gamma_upper + 1e-12);

        let other = hoeffding_bounds(&mlb, &x0, 0.2, 0.5);
        assert!(matches!(
            theorem_sandwich(&conv, &other),
            Err(Error::ThresholdMismatch { .. })
        ));

        let mut bogus = conv.clone();
        bogus.gamma_upper = 0.0;
        assert!(matches!(
            theorem_sandwich(&conv, &bogus),
            Err(Error::SandwichViolation { .. })
        ));
    }

    #[test]
    fn norm_conversion_is_containment() {
        assert_eq!(convert_norm_certificate(0.03, Norm::L2, 784).unwrap(), 0.03);
        assert_eq!(convert_norm_certificate(0.03, Norm::L1, 784).unwrap(), 0.03);
        assert!(matches!(
            convert_norm_certificate(0.03, Norm::LInf, 784),
            Err(Error::UnsupportedNorm { .. })
        ));
        // containment sanity: points in the l2/l1 ball of radius eps stay in the box
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v = Array1::from_iter((0..5).map(|_| rng.random_range(-1.0..1.0f64)));
            for p in [Norm::L1, Norm::L2] {
                let scaled = &v * (0.03 * rng.random_range(0.0..1.0) / p.norm(&v).max(1e-12));
                assert!(Norm::LInf.norm(&scaled) <= 0.03 + 1e-12);
            }
        }
    }

    #[test]
    fn bounded_sampling_stays_in_the_box() {
        let noise = NoiseModel::bounded(0.2).unwrap();
        let x0 = array![0.5, -0.5, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x = noise.sample(&x0, &mut rng);
            for i in 0..3 {
                assert!((x[i] - x0[i]).abs() <= 0.2);
            }
        }
    }

    #[test]
    fn gaussian_sampling_matches_marginal_std() {
        let cov = Covariance::full(array![[0.04, 0.01], [0.01, 0.09]]).unwrap();
        let noise = NoiseModel::gaussian(cov);
        let x0 = array![0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 40_000;
        let mut sums = [0.0f64; 2];
        let mut sqs = [0.0f64; 2];
        for _ in 0..n {
            let x = noise.sample(&x0, &mut rng);
            for i in 0..2 {
                sums[i] += x[i];
                sqs[i] += x[i] * x[i];
            }
        }
        for (i, want) in [(0usize, 0.2f64), (1usize, 0.3f64)] {
            let mean = sums[i] / n as f64;
            let std = (sqs[i] / n as f64 - mean * mean).sqrt();
            assert!(
                (std - want).abs() < 0.01,
                "coordinate {i}: std {std} vs {want}"
            );
        }
    }

    #[test]
    fn covariance_file_formats() {
        let cov = covariance_from_json(r#"{"diag": [0.01, 0.02]}"#).unwrap();
        assert_eq!(cov.dim(), 2);
        let cov = covariance_from_json(r#"{"full": [[0.01, 0.0], [0.0, 0.02]]}"#).unwrap();
        assert_eq!(cov.dim(), 2);
        assert!(covariance_from_json(r#"{}"#).is_err());
        assert!(covariance_from_json(r#"{"full": [[0.01], [0.0, 0.02]]}"#).is_err());
    }
}
