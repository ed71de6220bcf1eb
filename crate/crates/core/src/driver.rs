//! End-to-end certification pipeline: resolves a request into per-input
//! certified radii (worst-case and probabilistic at each requested
//! confidence), aggregates batches, and renders deterministic JSON/CSV
//! reports.
//!
//! Determinism contract: for an identical request, model, inputs, and seed the
//! rendered reports are byte-identical. Inputs are processed in parallel but
//! assembled in index order, all randomness is counter-seeded, and reports
//! carry no timestamps.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::model::{InputSpec, Network, Norm};
use crate::oracle::{mc_probability, mc_retention_probability, mix_seed};
use crate::probabilistic::{
    convolution_bounds, gaussian_bounds, hoeffding_bounds, CertMethod, Covariance, NoiseModel,
};
use crate::relaxation::{compute_preactivation_bounds, MarginBounder, RelaxMode};
use crate::worst_case::{bisect_radius, certify_worst_case, check_search_params};
use crate::{Error, Result};

/// Default lattice size for the convolution method.
pub const DEFAULT_GRID_POINTS: usize = 1 << 14;

/// Salt so target sampling never reuses the Monte-Carlo substreams.
const TARGET_SEED_SALT: u64 = 0x7461_7267_6574_73; // "targets"

/// How per-target confidences combine into one certified confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Minimum over targets: certifies each pairwise margin separately.
    MinGamma,
    /// `max(0, 1 - sum(1 - gamma_t))`: certifies the joint event that no
    /// target ever overtakes the predicted class.
    UnionBound,
}

impl Aggregation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(Aggregation::MinGamma),
            "union" => Ok(Aggregation::UnionBound),
            _ => Err(Error::InvalidParameter(format!(
                "unknown aggregation {s:?} (expected min|union)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::MinGamma => "min",
            Aggregation::UnionBound => "union",
        }
    }
}

/// Which attack targets each input is certified against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetPolicy {
    /// Every class except the predicted one.
    All,
    /// One class drawn uniformly from the non-predicted classes, seeded per
    /// input index.
    Random,
    /// A fixed class list; inputs whose predicted class appears in the list
    /// fail individually.
    Explicit(Vec<usize>),
}

impl TargetPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TargetPolicy::All),
            "random" => Ok(TargetPolicy::Random),
            list => {
                let mut out = Vec::new();
                for part in list.split(',') {
                    let t: usize = part.trim().parse().map_err(|_| {
                        Error::InvalidParameter(format!(
                            "invalid targets {list:?} (expected all|random|comma-separated class ids)"
                        ))
                    })?;
                    out.push(t);
                }
                if out.is_empty() {
                    return Err(Error::EmptyTargets);
                }
                Ok(TargetPolicy::Explicit(out))
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            TargetPolicy::All => "all".into(),
            TargetPolicy::Random => "random".into(),
            TargetPolicy::Explicit(v) => v
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(","),
        }
    }
}

/// Noise family; concrete scale is tied to the probed radius.
#[derive(Debug, Clone)]
pub enum NoiseSpec {
    /// Independent per-coordinate noise with half-width equal to the radius.
    Bounded,
    /// Gaussian noise. `base_cov = None` means isotropic with the 3-sigma rule
    /// saturated; a provided covariance is rescaled so its largest coordinate
    /// standard deviation is radius/3 (shape preserved).
    Gaussian { base_cov: Option<Covariance> },
}

impl NoiseSpec {
    pub fn kind_str(&self) -> &'static str {
        match self {
            NoiseSpec::Bounded => "bounded",
            NoiseSpec::Gaussian { .. } => "gaussian",
        }
    }
}

/// A full certification request, independent of any particular input.
#[derive(Debug, Clone)]
pub struct CertificationRequest {
    pub norm: Norm,
    pub mode: RelaxMode,
    pub noise: NoiseSpec,
    pub method: CertMethod,
    pub aggregation: Aggregation,
    pub target_policy: TargetPolicy,
    /// Confidence levels, normalized to strictly decreasing by `validate`.
    pub confidences: Vec<f64>,
    pub eps_max: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub grid_points: usize,
    /// When set, the top-confidence radius of each input is cross-checked by
    /// Monte-Carlo with this many samples.
    pub validate_mc: Option<usize>,
}

impl CertificationRequest {
    /// Checks parameter ranges and method/noise compatibility, and normalizes
    /// the confidence list (descending, deduplicated).
    pub fn validate(&mut self) -> Result<()> {
        check_search_params(self.eps_max, self.tolerance)?;
        if self.grid_points < 16 {
            return Err(Error::InvalidParameter(format!(
                "grid_points must be at least 16, got {}",
                self.grid_points
            )));
        }
        let compatible = matches!(
            (&self.noise, self.method),
            (NoiseSpec::Bounded, CertMethod::Hoeffding)
                | (NoiseSpec::Bounded, CertMethod::Convolution)
                | (NoiseSpec::Gaussian { .. }, CertMethod::Gaussian)
        );
        if !compatible {
            return Err(Error::NoiseMismatch {
                method: self.method.as_str().into(),
                noise: self.noise.kind_str().into(),
            });
        }
        if self.confidences.is_empty() {
            return Err(Error::InvalidParameter(
                "at least one confidence level is required".into(),
            ));
        }
        for &g in &self.confidences {
            if !g.is_finite() || g <= 0.0 || g > 1.0 {
                return Err(Error::InvalidParameter(format!(
                    "confidence levels must lie in (0, 1], got {g}"
                )));
            }
        }
        self.confidences
            .sort_by(|a, b| b.partial_cmp(a).expect("finite by check above"));
        self.confidences.dedup();
        if let Some(n) = self.validate_mc {
            if n < 1000 {
                return Err(Error::InvalidParameter(format!(
                    "validate_mc needs at least 1000 samples, got {n}"
                )));
            }
        }
        Ok(())
    }

    /// Concrete covariance at a probed radius (Gaussian noise only).
    fn covariance_at(&self, epsilon: f64, dim: usize) -> Result<Option<Covariance>> {
        match &self.noise {
            NoiseSpec::Bounded => Ok(None),
            NoiseSpec::Gaussian { base_cov } => {
                let cov = match base_cov {
                    None => Covariance::isotropic(epsilon * epsilon / 9.0, dim)?,
                    Some(c) => {
                        if c.dim() != dim {
                            return Err(Error::InvalidParameter(format!(
                                "covariance dimension {} does not match input dimension {dim}",
                                c.dim()
                            )));
                        }
                        c.scaled_to_ball(epsilon)
                    }
                };
                Ok(Some(cov))
            }
        }
    }

    /// Sampling model at a probed radius.
    pub fn noise_model_at(&self, epsilon: f64, dim: usize) -> Result<NoiseModel> {
        match self.covariance_at(epsilon, dim)? {
            None => NoiseModel::bounded(epsilon),
            Some(cov) => Ok(NoiseModel::gaussian(cov)),
        }
    }
}

/// Parses `0.9999,0.75,0.5` into a confidence list (validated later).
pub fn parse_confidences(s: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let g: f64 = part.trim().parse().map_err(|_| {
            Error::InvalidParameter(format!("invalid confidence {:?}", part.trim()))
        })?;
        out.push(g);
    }
    Ok(out)
}

/// Combines per-target confidence floors into one certified confidence.
pub fn aggregate_targets(gammas: &[f64], agg: Aggregation) -> Result<f64> {
    if gammas.is_empty() {
        return Err(Error::EmptyTargets);
    }
    Ok(match agg {
        Aggregation::MinGamma => gammas.iter().cloned().fold(f64::INFINITY, f64::min),
        Aggregation::UnionBound => {
            let slack: f64 = gammas.iter().map(|g| 1.0 - g).sum();
            (1.0 - slack).max(0.0)
        }
    })
}

/// Relative improvement of the probabilistic radius over the worst-case one,
/// in percent; `None` when the worst-case radius is zero.
pub fn improvement_percent(worst_case: f64, probabilistic: f64) -> Option<f64> {
    (worst_case > 0.0 && worst_case.is_finite() && probabilistic.is_finite())
        .then(|| (probabilistic - worst_case) / worst_case * 100.0)
}

/// Aggregated confidence floor at one probed radius: margin bounds on the
/// l-inf ball (the support geometry of the per-coordinate noise), one
/// certificate per target, combined per the request.
fn gamma_floor_at(
    net: &Network,
    spec: &InputSpec,
    req: &CertificationRequest,
    epsilon: f64,
) -> Result<f64> {
    if epsilon == 0.0 {
        // degenerate noise: the strict argmax at x0 retains with certainty
        return Ok(1.0);
    }
    let mut ball = spec.with_epsilon(epsilon);
    ball.norm = Norm::LInf;
    let bounder = MarginBounder::new(net, &ball, req.mode)?;
    let cov = req.covariance_at(epsilon, spec.x0.len())?;
    let mut gammas = Vec::with_capacity(spec.targets.len());
    for &t in &spec.targets {
        let mlb = bounder.margin_bounds(t)?;
        let gamma = match req.method {
            CertMethod::Hoeffding => hoeffding_bounds(&mlb, &spec.x0, epsilon, 0.0).gamma_lower,
            CertMethod::Gaussian => {
                let cov = cov.as_ref().expect("validated: gaussian method has covariance");
                gaussian_bounds(&mlb, &spec.x0, cov, epsilon, 0.0)?.gamma_lower
            }
            CertMethod::Convolution => {
                convolution_bounds(&mlb, &spec.x0, epsilon, 0.0, req.grid_points)?.gamma_lower
            }
        };
        gammas.push(gamma);
    }
    aggregate_targets(&gammas, req.aggregation)
}

/// A certified probabilistic radius at one confidence level.
#[derive(Debug, Clone)]
pub struct ProvenRadius {
    pub radius: f64,
    /// True when the search saturated at `eps_max`.
    pub capped: bool,
    pub warnings: Vec<String>,
}

/// Largest radius at which the aggregated confidence floor stays at or above
/// `gamma`, by bisection plus a verification sweep.
///
/// The floor is monotone in the radius up to grid rounding; the sweep probes
/// eight interior points of the returned radius and re-bisects below any
/// failure, so the returned radius was verified at the radius itself and at
/// the sweep points.
pub fn certify_proven_radius(
    net: &Network,
    spec: &InputSpec,
    req: &CertificationRequest,
    gamma: f64,
) -> Result<ProvenRadius> {
    if !(0.0..=1.0).contains(&gamma) || gamma == 0.0 {
        return Err(Error::InvalidParameter(format!(
            "confidence must lie in (0, 1], got {gamma}"
        )));
    }
    let mut warnings = Vec::new();
    if gamma >= 1.0 && req.method != CertMethod::Convolution {
        warnings.push(format!(
            "{} bounds approach confidence 1 only in the degenerate limit; returning radius 0 \
             (use the convolution method for exact-support statements)",
            req.method.as_str()
        ));
        return Ok(ProvenRadius {
            radius: 0.0,
            capped: false,
            warnings,
        });
    }
    let mut pred = |eps: f64| -> Result<bool> { Ok(gamma_floor_at(net, spec, req, eps)? >= gamma) };
    let mut radius = bisect_radius(&mut pred, req.eps_max, req.tolerance)?;
    let mut capped = radius == req.eps_max;
    'verify: for _ in 0..3 {
        if radius == 0.0 {
            break;
        }
        for k in 1..=8u32 {
            let probe = radius * k as f64 / 9.0;
            if probe <= 0.0 || probe >= radius {
                continue;
            }
            if !pred(probe)? {
                // grid rounding produced a dip below the certified radius;
                // fall back to the largest radius below the dip
                warnings.push(format!(
                    "confidence floor dipped at radius {probe}; re-searching below it"
                ));
                radius = bisect_radius(&mut pred, probe, req.tolerance)?;
                capped = false;
                continue 'verify;
            }
        }
        break;
    }
    Ok(ProvenRadius {
        radius,
        capped,
        warnings,
    })
}

/// One input to certify: the nominal point, an optional dataset label (echoed,
/// never trusted), and an optional source name for reports.
#[derive(Debug, Clone)]
pub struct InputRecord {
    pub x0: Array1<f64>,
    pub label: Option<usize>,
    pub source: Option<String>,
}

/// Probabilistic radius at one confidence level.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConfidenceRadius {
    pub confidence: f64,
    pub radius: f64,
    pub capped: bool,
}

/// Monte-Carlo cross-check of the top-confidence certificate.
#[derive(Debug, Clone, Serialize)]
pub struct McValidation {
    pub confidence: f64,
    pub radius: f64,
    pub n_samples: usize,
    /// What was estimated: the weakest per-target retention (`min`
    /// aggregation) or the joint retention (`union`).
    pub estimated_event: String,
    pub estimate: f64,
    pub std_error: f64,
    /// True when the estimate does not contradict the certificate beyond
    /// sampling noise.
    pub consistent: bool,
}

/// Certification result for one input.
#[derive(Debug, Clone, Serialize)]
pub struct InputReport {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub predicted_class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub targets: Vec<usize>,
    pub worst_case_radius: f64,
    pub worst_case_capped: bool,
    pub probabilistic_radii: Vec<ConfidenceRadius>,
    /// Top-confidence probabilistic radius vs the worst-case radius.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub improvement_percent: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_validation: Option<McValidation>,
}

/// An input that could not be certified (the rest of the batch proceeds).
#[derive(Debug, Clone, Serialize)]
pub struct InputFailure {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceSummary {
    pub confidence: f64,
    pub mean: f64,
    pub std: f64,
}

/// Batch statistics over successfully certified inputs (population std).
#[derive(Debug, Clone, Serialize)]
pub struct BatchSummary {
    pub count: usize,
    pub worst_case_mean: f64,
    pub worst_case_std: f64,
    pub probabilistic: Vec<ConfidenceSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub improvement_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub improvement_std: Option<f64>,
}

/// Echo of the request that produced a report.
#[derive(Debug, Clone, Serialize)]
pub struct RequestEcho {
    pub norm: String,
    pub mode: String,
    pub noise: String,
    pub method: String,
    pub aggregation: String,
    pub targets: String,
    pub confidences: Vec<f64>,
    pub eps_max: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub grid_points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validate_mc: Option<usize>,
}

/// What the certificates mean and which assumptions are in force.
#[derive(Debug, Clone, Serialize)]
pub struct ReportProvenance {
    pub certificate_statement: String,
    /// The convolution method and the Monte-Carlo validator assume the
    /// uniform density on the noise box; Hoeffding needs only independent
    /// symmetric bounded noise.
    pub uniform_pdf_assumed: bool,
    pub noise_geometry: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_note: Option<String>,
}

/// Full batch report; serializes deterministically.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub request: RequestEcho,
    pub inputs: Vec<InputReport>,
    pub failures: Vec<InputFailure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<BatchSummary>,
    pub provenance: ReportProvenance,
}

fn resolve_targets(
    net: &Network,
    x0: &Array1<f64>,
    req: &CertificationRequest,
    index: usize,
) -> Result<Option<Vec<usize>>> {
    match &req.target_policy {
        TargetPolicy::All => Ok(None),
        TargetPolicy::Explicit(v) => Ok(Some(v.clone())),
        TargetPolicy::Random => {
            let c = net.predicted_class(x0)?;
            let others: Vec<usize> = (0..net.num_classes()).filter(|&t| t != c).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(req.seed ^ TARGET_SEED_SALT, index as u64));
            Ok(Some(vec![others[rng.random_range(0..others.len())]]))
        }
    }
}

fn validate_by_mc(
    net: &Network,
    spec: &InputSpec,
    req: &CertificationRequest,
    top: ConfidenceRadius,
    n_samples: usize,
    seed: u64,
) -> Result<McValidation> {
    let noise = req.noise_model_at(top.radius, spec.x0.len())?;
    let (event, est) = match req.aggregation {
        Aggregation::MinGamma => {
            let mut worst: Option<crate::oracle::McEstimate> = None;
            for &t in &spec.targets {
                let e = mc_probability(
                    net,
                    &spec.x0,
                    &noise,
                    spec.c,
                    t,
                    0.0,
                    n_samples,
                    mix_seed(seed, t as u64),
                );
                if worst.as_ref().is_none_or(|w| e.p_hat < w.p_hat) {
                    worst = Some(e);
                }
            }
            ("weakest per-target retention".to_string(), worst.expect("targets nonempty"))
        }
        Aggregation::UnionBound => (
            "joint retention".to_string(),
            mc_retention_probability(net, &spec.x0, &noise, spec.c, n_samples, seed),
        ),
    };
    let slack = (3.0 * est.std_error).max(3.0 / n_samples as f64);
    Ok(McValidation {
        confidence: top.confidence,
        radius: top.radius,
        n_samples,
        estimated_event: event,
        estimate: est.p_hat,
        std_error: est.std_error,
        consistent: est.p_hat >= top.confidence - slack,
    })
}

/// Certifies a single input against a validated request.
pub fn certify_input(
    net: &Network,
    record: &InputRecord,
    index: usize,
    req: &CertificationRequest,
) -> Result<InputReport> {
    let targets = resolve_targets(net, &record.x0, req, index)?;
    let spec = InputSpec::new(
        net,
        record.x0.clone(),
        0.0,
        req.norm,
        targets.as_deref(),
    )?;
    let wc = certify_worst_case(net, &spec, req.mode, req.eps_max, req.tolerance)?;
    let mut warnings = Vec::new();
    if req.norm != Norm::LInf {
        warnings.push(
            "probabilistic radii use the per-coordinate noise geometry (see provenance); \
             only the worst-case radius is specific to the requested norm"
                .to_string(),
        );
    }
    let mut radii = Vec::with_capacity(req.confidences.len());
    for &gamma in &req.confidences {
        let pr = certify_proven_radius(net, &spec, req, gamma)?;
        for w in pr.warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        radii.push(ConfidenceRadius {
            confidence: gamma,
            radius: pr.radius,
            capped: pr.capped,
        });
    }
    let improvement = improvement_percent(wc.epsilon_certified, radii[0].radius);
    let mc_validation = match req.validate_mc {
        Some(n) => Some(validate_by_mc(
            net,
            &spec,
            req,
            radii[0],
            n,
            mix_seed(req.seed, index as u64),
        )?),
        None => None,
    };
    Ok(InputReport {
        index,
        source: record.source.clone(),
        predicted_class: spec.c,
        label: record.label,
        targets: spec.targets.clone(),
        worst_case_radius: wc.epsilon_certified,
        worst_case_capped: wc.capped_at_max,
        probabilistic_radii: radii,
        improvement_percent: improvement,
        warnings,
        mc_validation,
    })
}

fn population_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn summarize(inputs: &[InputReport], confidences: &[f64]) -> Option<BatchSummary> {
    if inputs.is_empty() {
        return None;
    }
    let wc: Vec<f64> = inputs.iter().map(|r| r.worst_case_radius).collect();
    let (worst_case_mean, worst_case_std) = population_stats(&wc);
    let probabilistic = confidences
        .iter()
        .enumerate()
        .map(|(j, &confidence)| {
            let radii: Vec<f64> = inputs
                .iter()
                .map(|r| r.probabilistic_radii[j].radius)
                .collect();
            let (mean, std) = population_stats(&radii);
            ConfidenceSummary {
                confidence,
                mean,
                std,
            }
        })
        .collect();
    let improvements: Vec<f64> = inputs
        .iter()
        .filter_map(|r| r.improvement_percent)
        .collect();
    let (improvement_mean, improvement_std) = if improvements.is_empty() {
        (None, None)
    } else {
        let (m, s) = population_stats(&improvements);
        (Some(m), Some(s))
    };
    Some(BatchSummary {
        count: inputs.len(),
        worst_case_mean,
        worst_case_std,
        probabilistic,
        improvement_mean,
        improvement_std,
    })
}

fn provenance_for(req: &CertificationRequest) -> ReportProvenance {
    let uniform_pdf_assumed = matches!(req.noise, NoiseSpec::Bounded)
        && (req.method == CertMethod::Convolution || req.validate_mc.is_some());
    let noise_geometry = match &req.noise {
        NoiseSpec::Bounded => {
            "independent per-coordinate noise, symmetric about the input, half-width = radius"
                .to_string()
        }
        NoiseSpec::Gaussian { base_cov } => match base_cov {
            None => "gaussian, isotropic, per-coordinate std = radius/3 (3-sigma rule saturated)"
                .to_string(),
            Some(_) => {
                "gaussian with the provided covariance shape, rescaled so the largest \
                 per-coordinate std = radius/3"
                    .to_string()
            }
        },
    };
    ReportProvenance {
        certificate_statement: format!(
            "for each reported radius and confidence gamma, the {} of the per-target retention \
             probabilities P[f_c(X) > f_t(X)] is at least gamma under the stated noise model",
            match req.aggregation {
                Aggregation::MinGamma => "minimum",
                Aggregation::UnionBound => "union-bound combination",
            }
        ),
        uniform_pdf_assumed,
        noise_geometry,
        norm_note: (req.norm != Norm::LInf).then(|| {
            format!(
                "worst-case radii are l-{} Hoelder bounds; probabilistic radii are computed \
                 under the per-coordinate noise geometry, whose l-{} ball of equal radius is \
                 contained in the noise support box",
                req.norm.as_str(),
                req.norm.as_str()
            )
        }),
    }
}

/// Certifies a batch. Per-input errors become `failures` rows; request-level
/// errors (invalid parameters, incompatible method/noise) fail the whole call.
pub fn run_batch(
    net: &Network,
    records: &[InputRecord],
    req: &CertificationRequest,
) -> Result<Report> {
    let mut req = req.clone();
    req.validate()?;
    let results: Vec<(usize, std::result::Result<InputReport, String>)> = records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| (i, certify_input(net, rec, i, &req).map_err(|e| e.to_string())))
        .collect();
    let mut inputs = Vec::new();
    let mut failures = Vec::new();
    for (index, outcome) in results {
        match outcome {
            Ok(r) => inputs.push(r),
            Err(error) => failures.push(InputFailure {
                index,
                source: records[index].source.clone(),
                error,
            }),
        }
    }
    let summary = summarize(&inputs, &req.confidences);
    Ok(Report {
        request: RequestEcho {
            norm: req.norm.as_str().into(),
            mode: req.mode.as_str().into(),
            noise: req.noise.kind_str().into(),
            method: req.method.as_str().into(),
            aggregation: req.aggregation.as_str().into(),
            targets: req.target_policy.describe(),
            confidences: req.confidences.clone(),
            eps_max: req.eps_max,
            tolerance: req.tolerance,
            seed: req.seed,
            grid_points: req.grid_points,
            validate_mc: req.validate_mc,
        },
        inputs,
        failures,
        summary,
        provenance: provenance_for(&req),
    })
}

/// Pretty JSON with a trailing newline; byte-identical across runs of the same
/// request and seed.
pub fn report_to_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Flat per-input table with `mean` and `std` footer rows, one probabilistic
/// radius column per confidence level.
pub fn report_to_csv(report: &Report) -> String {
    let mut out = String::new();
    out.push_str("index,source,predicted_class,worst_case_radius");
    for g in &report.request.confidences {
        out.push_str(&format!(",probabilistic_radius_{g}"));
    }
    out.push_str(",improvement_percent\n");
    for r in &report.inputs {
        out.push_str(&format!(
            "{},{},{},{}",
            r.index,
            csv_field(r.source.as_deref().unwrap_or("")),
            r.predicted_class,
            r.worst_case_radius
        ));
        for cr in &r.probabilistic_radii {
            out.push_str(&format!(",{}", cr.radius));
        }
        out.push_str(&format!(",{}\n", csv_opt(r.improvement_percent)));
    }
    if let Some(s) = &report.summary {
        out.push_str(&format!("mean,,,{}", s.worst_case_mean));
        for cs in &s.probabilistic {
            out.push_str(&format!(",{}", cs.mean));
        }
        out.push_str(&format!(",{}\n", csv_opt(s.improvement_mean)));
        out.push_str(&format!("std,,,{}", s.worst_case_std));
        for cs in &s.probabilistic {
            out.push_str(&format!(",{}", cs.std));
        }
        out.push_str(&format!(",{}\n", csv_opt(s.improvement_std)));
    }
    out
}

/// Per-layer pre-activation bounds of one input at one radius, for diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct BoundsDump {
    pub index: usize,
    pub epsilon: f64,
    pub norm: String,
    pub mode: String,
    pub layers: Vec<LayerBoundsDump>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerBoundsDump {
    pub layer: usize,
    pub activation: String,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Computes the dump for one input at a fixed radius.
pub fn bounds_dump(
    net: &Network,
    x0: &Array1<f64>,
    epsilon: f64,
    norm: Norm,
    mode: RelaxMode,
    index: usize,
) -> Result<BoundsDump> {
    let spec = InputSpec::new(net, x0.clone(), epsilon, norm, None)?;
    let pre = compute_preactivation_bounds(net, &spec, mode)?;
    let layers = net
        .layers()
        .iter()
        .enumerate()
        .map(|(k, layer)| LayerBoundsDump {
            layer: k,
            activation: layer.activation.as_str().into(),
            lower: pre.lower[k].to_vec(),
            upper: pre.upper[k].to_vec(),
        })
        .collect();
    Ok(BoundsDump {
        index,
        epsilon,
        norm: norm.as_str().into(),
        mode: mode.as_str().into(),
        layers,
    })
}
