//! Per-neuron linear relaxations and backward propagation of affine bounds.
//!
//! Every nonlinearity `sigma` is sandwiched on its pre-activation interval
//! `[l, u]` by two lines,
//!
//! ```text
//! alpha_L * s + beta_L  <=  sigma(s)  <=  alpha_U * s + beta_U      for s in [l, u],
//! ```
//!
//! and affine bounds on any linear functional of the output are obtained by
//! substituting the appropriate line per neuron while walking the layers
//! backward to the input. Closing the resulting affine function over the input
//! ball (Hoelder closed form, see [`crate::worst_case`]) yields interval bounds;
//! doing this layer by layer yields the pre-activation intervals themselves.

use ndarray::{Array1, Array2};

use crate::model::{ActivationKind, InputSpec, Network};
use crate::worst_case::{maximize_affine_over_ball, minimize_affine_over_ball};
use crate::{Error, Result};

/// Intervals narrower than this are treated as a constant neuron instead of
/// risking division by a vanishing width.
const DEGENERATE_WIDTH: f64 = 1e-12;

/// Absolute tolerance for the tangent-point bisection on s-shaped activations.
const TANGENT_TOL: f64 = 1e-9;
const TANGENT_MAX_ITERS: usize = 100;

/// Relaxation mode for crossing ReLU neurons. `FastLin` keeps the lower line
/// parallel to the upper secant; `Adaptive` picks the zero or identity line,
/// whichever leaves less area. S-shaped activations relax identically in both
/// modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelaxMode {
    FastLin,
    Adaptive,
}

impl RelaxMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fastlin" => Ok(RelaxMode::FastLin),
            "adaptive" => Ok(RelaxMode::Adaptive),
            _ => Err(Error::InvalidParameter(format!(
                "unknown mode {s:?} (expected fastlin|adaptive)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RelaxMode::FastLin => "fastlin",
            RelaxMode::Adaptive => "adaptive",
        }
    }
}

/// The two bounding lines for one neuron on its pre-activation interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronRelaxation {
    pub alpha_lower: f64,
    pub beta_lower: f64,
    pub alpha_upper: f64,
    pub beta_upper: f64,
}

impl NeuronRelaxation {
    fn exact_line(alpha: f64, beta: f64) -> Self {
        NeuronRelaxation {
            alpha_lower: alpha,
            beta_lower: beta,
            alpha_upper: alpha,
            beta_upper: beta,
        }
    }
}

/// Relaxes `kind` on `[l, u]`.
///
/// * ReLU — exact on stable intervals; crossing intervals use the chord
///   `u/(u-l)` as the upper line, and as the lower line either the same slope
///   (`FastLin`) or the identity/zero line with less area (`Adaptive`).
/// * tanh / sigmoid / arctan — on single-curvature intervals one side is the
///   secant and the other a tangent at an endpoint; on intervals straddling the
///   inflection at 0 each side is a line through one endpoint whose slope comes
///   from a bisection on the tangency condition
///   `sigma'(d) * (d - l) = sigma(d) - sigma(l)` (mirrored for the lower side).
/// * identity — exact.
pub fn relax_activation(
    kind: ActivationKind,
    l: f64,
    u: f64,
    mode: RelaxMode,
) -> Result<NeuronRelaxation> {
    if l.is_nan() || u.is_nan() || !l.is_finite() || !u.is_finite() || l > u {
        return Err(Error::InvalidInterval { lower: l, upper: u });
    }
    if u - l < DEGENERATE_WIDTH {
        // constant neuron; sigma is nondecreasing so the endpoint values bound it
        return Ok(NeuronRelaxation {
            alpha_lower: 0.0,
            beta_lower: kind.eval(l),
            alpha_upper: 0.0,
            beta_upper: kind.eval(u),
        });
    }
    match kind {
        ActivationKind::Identity => Ok(NeuronRelaxation::exact_line(1.0, 0.0)),
        ActivationKind::Relu => Ok(relax_relu(l, u, mode)),
        _ => Ok(relax_s_shaped(kind, l, u)),
    }
}

fn relax_relu(l: f64, u: f64, mode: RelaxMode) -> NeuronRelaxation {
    if l >= 0.0 {
        return NeuronRelaxation::exact_line(1.0, 0.0);
    }
    if u <= 0.0 {
        return NeuronRelaxation::exact_line(0.0, 0.0);
    }
    let slope = u / (u - l);
    let alpha_lower = match mode {
        RelaxMode::FastLin => slope,
        RelaxMode::Adaptive => {
            if u >= -l {
                1.0
            } else {
                0.0
            }
        }
    };
    NeuronRelaxation {
        alpha_lower,
        beta_lower: 0.0,
        alpha_upper: slope,
        beta_upper: -u * l / (u - l),
    }
}

fn relax_s_shaped(kind: ActivationKind, l: f64, u: f64) -> NeuronRelaxation {
    let (fl, fu) = (kind.eval(l), kind.eval(u));
    let secant = (fu - fl) / (u - l);
    if l >= 0.0 {
        // concave region: secant below, endpoint tangent above
        let (alpha_upper, beta_upper) = tighter_endpoint_tangent(kind, l, u, true);
        NeuronRelaxation {
            alpha_lower: secant,
            beta_lower: fl - secant * l,
            alpha_upper,
            beta_upper,
        }
    } else if u <= 0.0 {
        // convex region: secant above, endpoint tangent below
        let (alpha_lower, beta_lower) = tighter_endpoint_tangent(kind, l, u, false);
        NeuronRelaxation {
            alpha_lower,
            beta_lower,
            alpha_upper: secant,
            beta_upper: fl - secant * l,
        }
    } else {
        // straddles the inflection: upper line anchored at (l, f(l)), lower at (u, f(u))
        let up_slope = crossing_upper_slope(kind, l, u, secant);
        let lo_slope = crossing_lower_slope(kind, l, u, secant);
        NeuronRelaxation {
            alpha_lower: lo_slope,
            beta_lower: fu - lo_slope * u,
            alpha_upper: up_slope,
            beta_upper: fl - up_slope * l,
        }
    }
}

/// Tangent line at whichever endpoint leaves the smaller gap at the opposite
/// endpoint. Valid on a single-curvature interval because a tangent bounds a
/// concave (resp. convex) function from above (resp. below).
fn tighter_endpoint_tangent(kind: ActivationKind, l: f64, u: f64, upper: bool) -> (f64, f64) {
    let line = |d: f64| {
        let s = kind.deriv(d);
        (s, kind.eval(d) - s * d)
    };
    let (at_l, at_u) = (line(l), line(u));
    let gap_l = at_l.0 * u + at_l.1 - kind.eval(u); // tangent-at-l error at u
    let gap_u = at_u.0 * l + at_u.1 - kind.eval(l); // tangent-at-u error at l
    let (gl, gu) = if upper { (gap_l, gap_u) } else { (-gap_l, -gap_u) };
    if gl <= gu {
        at_l
    } else {
        at_u
    }
}

/// Slope of the upper line through `(l, f(l))` for a crossing interval: the
/// steepest chord from the left endpoint. If the chord to `u` is steepest the
/// secant is returned, otherwise the slope at the interior tangency point.
fn crossing_upper_slope(kind: ActivationKind, l: f64, u: f64, secant: f64) -> f64 {
    let fl = kind.eval(l);
    let h = |d: f64| kind.deriv(d) * (d - l) - (kind.eval(d) - fl);
    if h(u) > 0.0 {
        return secant;
    }
    // h(0) >= 0 >= h(u); keep lo on the nonnegative side, whose tangent slope
    // still dominates every chord from l
    let (mut lo, mut hi) = (0.0, u);
    for _ in 0..TANGENT_MAX_ITERS {
        if hi - lo <= TANGENT_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if h(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    kind.deriv(lo)
}

/// Mirror image: slope of the lower line through `(u, f(u))`.
fn crossing_lower_slope(kind: ActivationKind, l: f64, u: f64, secant: f64) -> f64 {
    let fu = kind.eval(u);
    let h = |d: f64| kind.deriv(d) * (u - d) - (fu - kind.eval(d));
    if h(l) > 0.0 {
        return secant;
    }
    let (mut lo, mut hi) = (l, 0.0);
    for _ in 0..TANGENT_MAX_ITERS {
        if hi - lo <= TANGENT_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if h(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    kind.deriv(hi)
}

/// Interval bounds on every pre-activation, indexed `[layer][neuron]`.
#[derive(Debug, Clone)]
pub struct PreactivationBounds {
    pub lower: Vec<Array1<f64>>,
    pub upper: Vec<Array1<f64>>,
}

/// Affine sandwich of one margin `g_t` over the input ball:
/// `a_lower . x + d_lower <= g_t(x) <= a_upper . x + d_upper` on the ball.
#[derive(Debug, Clone)]
pub struct MarginLinearBounds {
    pub target: usize,
    pub a_lower: Array1<f64>,
    pub d_lower: f64,
    pub a_upper: Array1<f64>,
    pub d_upper: f64,
}

impl MarginLinearBounds {
    pub fn lower_at(&self, x: &Array1<f64>) -> f64 {
        self.a_lower.dot(x) + self.d_lower
    }

    pub fn upper_at(&self, x: &Array1<f64>) -> f64 {
        self.a_upper.dot(x) + self.d_upper
    }
}

// Coefficient matrices and offsets of affine lower/upper bounds, one row per
// bounded quantity, currently expressed over some intermediate layer.
struct AffinePair {
    lo_coef: Array2<f64>,
    lo_off: Array1<f64>,
    up_coef: Array2<f64>,
    up_off: Array1<f64>,
}

fn substitute_relaxation(
    coef: &Array2<f64>,
    off: &Array1<f64>,
    relax: &[NeuronRelaxation],
    lower_pass: bool,
) -> (Array2<f64>, Array1<f64>) {
    let mut out_coef = Array2::zeros(coef.dim());
    let mut out_off = off.clone();
    for (r, row) in coef.rows().into_iter().enumerate() {
        let mut acc = 0.0;
        for (i, &c) in row.iter().enumerate() {
            let nr = &relax[i];
            // a nonnegative coefficient keeps the bound's own side; a negative
            // one flips to the opposite line
            let (alpha, beta) = if (c >= 0.0) == lower_pass {
                (nr.alpha_lower, nr.beta_lower)
            } else {
                (nr.alpha_upper, nr.beta_upper)
            };
            out_coef[[r, i]] = c * alpha;
            acc += c * beta;
        }
        out_off[r] += acc;
    }
    (out_coef, out_off)
}

/// Walks coefficients expressed over the activations of `top_layer` down to the
/// input, alternating relaxation substitution and affine layer substitution.
fn backward_from_activation(
    net: &Network,
    top_layer: usize,
    mut aff: AffinePair,
    relax: &[Vec<NeuronRelaxation>],
) -> AffinePair {
    for j in (0..=top_layer).rev() {
        let layer = &net.layers()[j];
        let (lo_coef, lo_off) = substitute_relaxation(&aff.lo_coef, &aff.lo_off, &relax[j], true);
        let (up_coef, up_off) = substitute_relaxation(&aff.up_coef, &aff.up_off, &relax[j], false);
        aff = AffinePair {
            lo_off: lo_off + lo_coef.dot(&layer.bias),
            lo_coef: lo_coef.dot(&layer.weights),
            up_off: up_off + up_coef.dot(&layer.bias),
            up_coef: up_coef.dot(&layer.weights),
        };
    }
    aff
}

/// Bound engine for one instance: pre-activation intervals and per-neuron
/// relaxations are computed once at construction, after which margin bounds
/// for any target are a single backward pass.
pub struct MarginBounder<'a> {
    net: &'a Network,
    spec: &'a InputSpec,
    mode: RelaxMode,
    bounds: PreactivationBounds,
    relax: Vec<Vec<NeuronRelaxation>>,
}

impl<'a> MarginBounder<'a> {
    pub fn new(net: &'a Network, spec: &'a InputSpec, mode: RelaxMode) -> Result<Self> {
        let depth = net.depth();
        let mut lower = Vec::with_capacity(depth);
        let mut upper = Vec::with_capacity(depth);
        let mut relax: Vec<Vec<NeuronRelaxation>> = Vec::with_capacity(depth);
        for k in 0..depth {
            let layer = &net.layers()[k];
            let init = AffinePair {
                lo_coef: layer.weights.clone(),
                lo_off: layer.bias.clone(),
                up_coef: layer.weights.clone(),
                up_off: layer.bias.clone(),
            };
            let aff = if k == 0 {
                init
            } else {
                backward_from_activation(net, k - 1, init, &relax)
            };
            let mut l = Array1::zeros(layer.out_dim());
            let mut u = Array1::zeros(layer.out_dim());
            for j in 0..layer.out_dim() {
                l[j] = minimize_affine_over_ball(
                    &aff.lo_coef.row(j).to_owned(),
                    aff.lo_off[j],
                    &spec.x0,
                    spec.epsilon,
                    spec.norm,
                );
                u[j] = maximize_affine_over_ball(
                    &aff.up_coef.row(j).to_owned(),
                    aff.up_off[j],
                    &spec.x0,
                    spec.epsilon,
                    spec.norm,
                );
                if !l[j].is_finite() || !u[j].is_finite() {
                    return Err(Error::NonFiniteBound {
                        layer: k,
                        neuron: j,
                    });
                }
            }
            let layer_relax = (0..layer.out_dim())
                .map(|j| relax_activation(layer.activation, l[j], u[j], mode))
                .collect::<Result<Vec<_>>>()?;
            relax.push(layer_relax);
            lower.push(l);
            upper.push(u);
        }
        Ok(MarginBounder {
            net,
            spec,
            mode,
            bounds: PreactivationBounds { lower, upper },
            relax,
        })
    }

    pub fn preactivation(&self) -> &PreactivationBounds {
        &self.bounds
    }

    pub fn into_preactivation(self) -> PreactivationBounds {
        self.bounds
    }

    pub fn mode(&self) -> RelaxMode {
        self.mode
    }

    /// Affine sandwich of the margin `f_c - f_t` over the ball.
    pub fn margin_bounds(&self, t: usize) -> Result<MarginLinearBounds> {
        let classes = self.net.num_classes();
        if t >= classes || t == self.spec.c {
            return Err(Error::InvalidParameter(format!(
                "margin target {t} invalid for predicted class {} of {classes}",
                self.spec.c
            )));
        }
        let top = self.net.depth() - 1;
        let mut row = Array2::zeros((1, classes));
        row[[0, self.spec.c]] = 1.0;
        row[[0, t]] = -1.0;
        let aff = backward_from_activation(
            self.net,
            top,
            AffinePair {
                lo_coef: row.clone(),
                lo_off: Array1::zeros(1),
                up_coef: row,
                up_off: Array1::zeros(1),
            },
            &self.relax,
        );
        let out = MarginLinearBounds {
            target: t,
            a_lower: aff.lo_coef.row(0).to_owned(),
            d_lower: aff.lo_off[0],
            a_upper: aff.up_coef.row(0).to_owned(),
            d_upper: aff.up_off[0],
        };
        let finite = out.a_lower.iter().chain(out.a_upper.iter()).all(|v| v.is_finite())
            && out.d_lower.is_finite()
            && out.d_upper.is_finite();
        if !finite {
            return Err(Error::NonFiniteBound {
                layer: top,
                neuron: t,
            });
        }
        Ok(out)
    }
}

/// Pre-activation intervals for every layer of `net` on the ball described by
/// `spec`.
pub fn compute_preactivation_bounds(
    net: &Network,
    spec: &InputSpec,
    mode: RelaxMode,
) -> Result<PreactivationBounds> {
    Ok(MarginBounder::new(net, spec, mode)?.into_preactivation())
}

/// One-shot margin bounds; prefer [`MarginBounder`] when several targets share
/// an instance.
pub fn compute_margin_bounds(
    net: &Network,
    spec: &InputSpec,
    t: usize,
    mode: RelaxMode,
) -> Result<MarginLinearBounds> {
    MarginBounder::new(net, spec, mode)?.margin_bounds(t)
}
