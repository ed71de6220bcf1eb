//! Ground-truth estimators used to validate certificates: Monte-Carlo
//! probability estimation, deterministic low-dimensional quadrature, randomized
//! adversarial search, and closed-form reference distributions.
//!
//! Everything here is independent of the bound-propagation machinery on
//! purpose — these functions evaluate the network directly, so a bug in the
//! relaxations cannot hide inside its own validator.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::model::{ActivationKind, InputSpec, Layer, Network, Norm};
use crate::probabilistic::NoiseModel;
use crate::{Error, Result};

/// Samples drawn per independently-seeded batch; batches are merged by integer
/// counts so the estimate is identical however the batches are scheduled.
const MC_BATCH: usize = 8192;

/// Grid quadrature refuses inputs beyond this many dimensions.
const MAX_GRID_DIM: usize = 4;

/// Monte-Carlo estimate of `P[g_t(X) > a]`.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub p_hat: f64,
    pub n_samples: usize,
    /// Binomial standard error `sqrt(p(1-p)/n)`; zero at the boundary, so
    /// comparisons should also allow a few multiples of `1/n`.
    pub std_error: f64,
    pub seed: u64,
}

/// Decorrelates per-batch substreams from one user seed.
pub(crate) fn mix_seed(seed: u64, batch: u64) -> u64 {
    let mut z = seed ^ batch.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Estimates `P[g_t(X) > a]` with `X` drawn from `noise` around `x0`.
///
/// Deterministic for a given seed: each fixed-size batch runs its own
/// counter-seeded generator and batches merge by exact counts, so thread
/// scheduling cannot change the result.
pub fn mc_probability(
    net: &Network,
    x0: &Array1<f64>,
    noise: &NoiseModel,
    c: usize,
    t: usize,
    a: f64,
    n_samples: usize,
    seed: u64,
) -> McEstimate {
    assert!(n_samples >= 1000, "estimate would be meaningless");
    let n_batches = n_samples.div_ceil(MC_BATCH);
    let hits: u64 = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let size = MC_BATCH.min(n_samples - b * MC_BATCH);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, b as u64));
            let mut count = 0u64;
            for _ in 0..size {
                let x = noise.sample(x0, &mut rng);
                if net.margin(&x, c, t) > a {
                    count += 1;
                }
            }
            count
        })
        .sum();
    let p_hat = hits as f64 / n_samples as f64;
    McEstimate {
        p_hat,
        n_samples,
        std_error: (p_hat * (1.0 - p_hat) / n_samples as f64).sqrt(),
        seed,
    }
}

/// Estimates the joint retention probability `P[argmax f(X) = c]` (strictly:
/// every margin positive). Same deterministic batching as [`mc_probability`].
pub fn mc_retention_probability(
    net: &Network,
    x0: &Array1<f64>,
    noise: &NoiseModel,
    c: usize,
    n_samples: usize,
    seed: u64,
) -> McEstimate {
    assert!(n_samples >= 1000, "estimate would be meaningless");
    let n_batches = n_samples.div_ceil(MC_BATCH);
    let hits: u64 = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let size = MC_BATCH.min(n_samples - b * MC_BATCH);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, b as u64));
            let mut count = 0u64;
            for _ in 0..size {
                let x = noise.sample(x0, &mut rng);
                let logits = net.forward(&x);
                let retained = (0..logits.len()).all(|t| t == c || logits[c] > logits[t]);
                if retained {
                    count += 1;
                }
            }
            count
        })
        .sum();
    let p_hat = hits as f64 / n_samples as f64;
    McEstimate {
        p_hat,
        n_samples,
        std_error: (p_hat * (1.0 - p_hat) / n_samples as f64).sqrt(),
        seed,
    }
}

/// Deterministic midpoint-rule quadrature of `P[g_t(X) > a]` for uniform noise
/// on the box `[x0 - eps, x0 + eps]^n`. Refines the per-axis resolution until
/// two successive estimates agree to `1e-3`. Only for `n <= 4`.
pub fn exact_probability_grid(
    net: &Network,
    x0: &Array1<f64>,
    epsilon: f64,
    c: usize,
    t: usize,
    a: f64,
) -> Result<f64> {
    let dim = x0.len();
    if dim > MAX_GRID_DIM {
        return Err(Error::DimensionTooLarge {
            dim,
            max: MAX_GRID_DIM,
        });
    }
    if epsilon == 0.0 {
        return Ok(if net.margin(x0, c, t) > a { 1.0 } else { 0.0 });
    }
    let estimate = |k: usize| -> f64 {
        let total = k.pow(dim as u32);
        let mut hits = 0usize;
        let mut x = x0.clone();
        for flat in 0..total {
            let mut rem = flat;
            for i in 0..dim {
                let j = rem % k;
                rem /= k;
                x[i] = x0[i] + epsilon * (-1.0 + (2 * j + 1) as f64 / k as f64);
            }
            if net.margin(&x, c, t) > a {
                hits += 1;
            }
        }
        hits as f64 / total as f64
    };
    let mut k = 8usize;
    let mut prev = estimate(k);
    loop {
        k *= 2;
        if k.pow(dim as u32) > (1 << 24) {
            return Ok(prev);
        }
        let cur = estimate(k);
        if (cur - prev).abs() < 1e-3 {
            return Ok(cur);
        }
        prev = cur;
    }
}

/// One point uniformly distributed in the `norm` ball of radius `epsilon`
/// around `x0`.
pub fn sample_in_ball<R: Rng + ?Sized>(
    x0: &Array1<f64>,
    epsilon: f64,
    norm: Norm,
    rng: &mut R,
) -> Array1<f64> {
    let n = x0.len();
    if epsilon == 0.0 {
        return x0.clone();
    }
    match norm {
        Norm::LInf => x0.mapv(|c| c + rng.random_range(-epsilon..epsilon)),
        Norm::L2 => {
            // gaussian direction, radius by inverse-CDF of the volume law
            let dir = Array1::from_iter((0..n).map(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                z
            }));
            let len = Norm::L2.norm(&dir).max(f64::MIN_POSITIVE);
            let r = epsilon * rng.random_range(0.0..1.0f64).powf(1.0 / n as f64);
            x0 + &(dir * (r / len))
        }
        Norm::L1 => {
            // exponential magnitudes with random signs are uniform on the
            // l1 sphere after normalization
            let dir = Array1::from_iter((0..n).map(|_| {
                let e: f64 = rng.sample(rand_distr::Exp1);
                if rng.random_bool(0.5) {
                    e
                } else {
                    -e
                }
            }));
            let len = Norm::L1.norm(&dir).max(f64::MIN_POSITIVE);
            let r = epsilon * rng.random_range(0.0..1.0f64).powf(1.0 / n as f64);
            x0 + &(dir * (r / len))
        }
    }
}

/// Searches the ball of radius `epsilon` for a point the network classifies
/// away from `spec.c`: `n_random` uniform probes plus, per target, descent
/// extreme points from a finite-difference margin gradient. Returns the first
/// strict misclassification found.
pub fn attack_search(
    net: &Network,
    spec: &InputSpec,
    epsilon: f64,
    n_random: usize,
    seed: u64,
) -> Option<Array1<f64>> {
    if epsilon == 0.0 {
        return None;
    }
    let misclassified = |x: &Array1<f64>| -> bool {
        let logits = net.forward(x);
        spec.targets.iter().any(|&t| logits[t] > logits[spec.c])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_random {
        let x = sample_in_ball(&spec.x0, epsilon, spec.norm, &mut rng);
        if misclassified(&x) {
            return Some(x);
        }
    }
    // steepest-descent extreme point of each target margin, probed at a few
    // fractions of the budget
    let h = 1e-4 * epsilon;
    let n = spec.x0.len();
    for &t in &spec.targets {
        let mut grad = Array1::zeros(n);
        let mut x = spec.x0.clone();
        for i in 0..n {
            x[i] = spec.x0[i] + h;
            let up = net.margin(&x, spec.c, t);
            x[i] = spec.x0[i] - h;
            let down = net.margin(&x, spec.c, t);
            x[i] = spec.x0[i];
            grad[i] = (up - down) / (2.0 * h);
        }
        let step = match spec.norm {
            Norm::LInf => grad.mapv(f64::signum),
            Norm::L2 => {
                let len = Norm::L2.norm(&grad);
                if len == 0.0 {
                    continue;
                }
                grad.mapv(|g| g / len)
            }
            Norm::L1 => {
                let mut best = 0usize;
                for i in 1..n {
                    if grad[i].abs() > grad[best].abs() {
                        best = i;
                    }
                }
                let mut e = Array1::zeros(n);
                e[best] = grad[best].signum();
                e
            }
        };
        for frac in [0.25, 0.5, 0.75, 1.0] {
            let x = &spec.x0 - &(&step * (frac * epsilon));
            if misclassified(&x) {
                return Some(x);
            }
        }
    }
    None
}

/// CDF of the sum of `n` independent Uniform[0, 1] variables.
pub fn irwin_hall_cdf(n: usize, x: f64) -> f64 {
    assert!((1..=20).contains(&n), "n out of the supported range");
    if x <= 0.0 {
        return 0.0;
    }
    if x >= n as f64 {
        return 1.0;
    }
    let factorial: f64 = (1..=n).map(|i| i as f64).product();
    let mut sum = 0.0;
    let mut binom = 1.0; // C(n, k)
    for k in 0..=(x.floor() as usize) {
        let term = binom * (x - k as f64).powi(n as i32);
        sum += if k % 2 == 0 { term } else { -term };
        binom = binom * (n - k) as f64 / (k + 1) as f64;
    }
    (sum / factorial).clamp(0.0, 1.0)
}

/// Random fully-connected test network: hidden layers use `activation`, the
/// output layer is linear, weights are He-scaled uniform. Deterministic in the
/// seed.
pub fn synth_network(seed: u64, dims: &[usize], activation: ActivationKind) -> Network {
    assert!(dims.len() >= 2, "need at least input and output dims");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (k, pair) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let scale = (2.0 / fan_in as f64).sqrt();
        let weights =
            Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-scale..scale));
        let bias = Array1::from_shape_fn(fan_out, |_| rng.random_range(-0.1..0.1));
        let act = if k + 2 == dims.len() {
            ActivationKind::Identity
        } else {
            activation
        };
        layers.push(Layer {
            weights,
            bias,
            activation: act,
        });
    }
    Network::new(dims[0], layers).expect("synthetic dimensions are consistent")
}

/// Random certification instance for `net`: uniform nominal point, all targets.
/// Retries until the argmax at the nominal point is strict (ties are measure
/// zero but the loop keeps the helper total).
pub fn synth_input(seed: u64, net: &Network, epsilon: f64, norm: Norm) -> InputSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let x0 = Array1::from_shape_fn(net.input_dim(), |_| rng.random_range(-1.0..1.0));
        if let Ok(spec) = InputSpec::new(net, x0, epsilon, norm, None) {
            return spec;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probabilistic::Covariance;
    use crate::worst_case::certify_worst_case;
    use crate::RelaxMode;
    use ndarray::array;
    use statrs::function::erf::erf;

    /// Two-logit net whose margin g_1(x) = w.x + b.
    fn linear_margin_net(w: Vec<f64>, b: f64) -> Network {
        let n = w.len();
        let mut weights = Array2::zeros((2, n));
        for (i, wi) in w.iter().enumerate() {
            weights[[0, i]] = *wi;
        }
        let bias = array![b, 0.0];
        Network::new(
            n,
            vec![Layer {
                weights,
                bias,
                activation: ActivationKind::Identity,
            }],
        )
        .unwrap()
    }

    #[test]
    fn uniform_coin_flip_estimates_one_half() {
        let net = linear_margin_net(vec![1.0], 0.0);
        let noise = NoiseModel::bounded(1.0).unwrap();
        let est = mc_probability(&net, &array![0.0], &noise, 0, 1, 0.0, 100_000, 7);
        let slack = (3.0 * est.std_error).max(3.0 / est.n_samples as f64);
        assert!(
            (est.p_hat - 0.5).abs() <= slack,
            "p_hat = {} +- {}",
            est.p_hat,
            est.std_error
        );
    }

    #[test]
    fn gaussian_linear_tail_matches_normal_cdf() {
        // g(x) = x, X ~ N(0, 0.1^2): P[g > -0.1] = Phi(1)
        let net = linear_margin_net(vec![1.0], 0.0);
        let cov = Covariance::isotropic(0.01, 1).unwrap();
        let noise = NoiseModel::gaussian(cov);
        let est = mc_probability(&net, &array![0.0], &noise, 0, 1, -0.1, 200_000, 99);
        let phi_1 = 0.5 + 0.5 * erf(1.0 / std::f64::consts::SQRT_2);
        let slack = (3.0 * est.std_error).max(3.0 / est.n_samples as f64);
        assert!(
            (est.p_hat - phi_1).abs() <= slack,
            "p_hat = {}, Phi(1) = {phi_1}",
            est.p_hat
        );
    }

    #[test]
    fn mc_is_reproducible_per_seed() {
        let net = synth_network(5, &[3, 6, 3], ActivationKind::Relu);
        let x0 = array![0.1, -0.2, 0.3];
        let noise = NoiseModel::bounded(0.2).unwrap();
        // query at the nominal margin so p is interior and seeds are distinguishable
        let a = net.margin(&x0, 0, 1);
        let run1 = mc_probability(&net, &x0, &noise, 0, 1, a, 50_000, 42);
        let run2 = mc_probability(&net, &x0, &noise, 0, 1, a, 50_000, 42);
        assert_eq!(run1.p_hat.to_bits(), run2.p_hat.to_bits());
        assert!(run1.p_hat > 0.1 && run1.p_hat < 0.9, "p_hat = {}", run1.p_hat);
        let run3 = mc_probability(&net, &x0, &noise, 0, 1, a, 50_000, 43);
        assert_ne!(run1.p_hat.to_bits(), run3.p_hat.to_bits());
    }

    #[test]
    fn grid_quadrature_agrees_with_monte_carlo() {
        let net = synth_network(11, &[2, 5, 3], ActivationKind::Relu);
        let spec = synth_input(3, &net, 0.4, Norm::LInf);
        let t = spec.targets[0];
        let exact = exact_probability_grid(&net, &spec.x0, 0.4, spec.c, t, 0.0).unwrap();
        let noise = NoiseModel::bounded(0.4).unwrap();
        let est = mc_probability(&net, &spec.x0, &noise, spec.c, t, 0.0, 200_000, 5);
        let slack = (3.0 * est.std_error).max(3.0 / est.n_samples as f64) + 2e-3;
        assert!(
            (exact - est.p_hat).abs() <= slack,
            "grid {exact} vs mc {}",
            est.p_hat
        );
    }

    #[test]
    fn grid_quadrature_rejects_high_dimension() {
        let net = synth_network(17, &[5, 4, 2], ActivationKind::Tanh);
        let x0 = Array1::zeros(5);
        assert!(matches!(
            exact_probability_grid(&net, &x0, 0.1, 0, 1, 0.0),
            Err(Error::DimensionTooLarge { dim: 5, max: 4 })
        ));
    }

    #[test]
    fn irwin_hall_reference_points() {
        assert_eq!(irwin_hall_cdf(3, 0.0), 0.0);
        assert_eq!(irwin_hall_cdf(3, 3.0), 1.0);
        assert!((irwin_hall_cdf(3, 1.5) - 0.5).abs() < 1e-15);
        assert!((irwin_hall_cdf(3, 1.0) - 1.0 / 6.0).abs() < 1e-15);
        // n = 1 is the uniform CDF
        assert!((irwin_hall_cdf(1, 0.25) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ball_samples_respect_their_norm() {
        let x0 = array![0.5, -0.25, 0.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for norm in [Norm::LInf, Norm::L2, Norm::L1] {
            let mut max_seen = 0.0f64;
            for _ in 0..2000 {
                let x = sample_in_ball(&x0, 0.3, norm, &mut rng);
                let r = norm.norm(&(&x - &x0));
                assert!(r <= 0.3 + 1e-12, "{norm:?} sample outside the ball");
                max_seen = max_seen.max(r);
            }
            // the sampler actually fills the ball out to the boundary
            assert!(max_seen > 0.25, "{norm:?} samples never approach radius");
        }
    }

    #[test]
    fn attack_respects_certificates_and_breaks_beyond() {
        let net = synth_network(23, &[3, 8, 8, 3], ActivationKind::Relu);
        let spec = synth_input(29, &net, 0.1, Norm::LInf);
        let cert = certify_worst_case(&net, &spec, RelaxMode::Adaptive, 1.0, 1e-4).unwrap();
        let r = cert.epsilon_certified;
        assert!(r > 0.0, "fixture must certify a positive radius");
        // inside the certified radius nothing flips
        for seed in 0..20 {
            assert!(attack_search(&net, &spec, r * 0.99, 500, seed).is_none());
        }
        // well beyond it the gradient probe finds a flip for some seed
        let found = (0..20).any(|seed| attack_search(&net, &spec, 4.0 * r, 500, seed).is_some());
        assert!(found, "no adversarial example found even at 4x the radius");
    }

    #[test]
    fn adversarial_point_actually_flips_the_argmax() {
        let net = synth_network(31, &[2, 6, 2], ActivationKind::Tanh);
        let spec = synth_input(37, &net, 0.05, Norm::L2);
        if let Some(x) = attack_search(&net, &spec, 3.0, 2000, 0) {
            let logits = net.forward(&x);
            assert!(spec.targets.iter().any(|&t| logits[t] > logits[spec.c]));
            assert!(Norm::L2.norm(&(&x - &spec.x0)) <= 3.0 + 1e-9);
        } else {
            panic!("a radius-3 l2 ball around a tanh net should contain a flip");
        }
    }

    #[test]
    fn synth_network_is_deterministic() {
        let a = synth_network(123, &[4, 7, 3], ActivationKind::Sigmoid);
        let b = synth_network(123, &[4, 7, 3], ActivationKind::Sigmoid);
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            assert_eq!(la.weights, lb.weights);
            assert_eq!(la.bias, lb.bias);
        }
        let c = synth_network(124, &[4, 7, 3], ActivationKind::Sigmoid);
        assert_ne!(a.layers()[0].weights, c.layers()[0].weights);
    }
}
