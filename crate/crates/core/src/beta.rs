//! Beta response densities: evaluation, likelihood ratios, maximum-likelihood
//! fitting and Monte-Carlo L2 distances.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Likelihood ratios are capped here when the background density underflows.
pub const RATIO_CAP: f64 = 1e6;

/// Samples are clamped into `[CLAMP, 1 - CLAMP]` before fitting.
pub const CLAMP: f64 = 1e-6;

const MLE_TOL: f64 = 1e-8;
const MLE_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BetaParams", into = "BetaParams")]
pub struct BetaModel {
    alpha: f64,
    beta: f64,
    ln_norm: f64,
}

#[derive(Serialize, Deserialize)]
struct BetaParams {
    alpha: f64,
    beta: f64,
}

impl TryFrom<BetaParams> for BetaModel {
    type Error = Error;
    fn try_from(p: BetaParams) -> Result<Self> {
        BetaModel::new(p.alpha, p.beta)
    }
}

impl From<BetaModel> for BetaParams {
    fn from(m: BetaModel) -> Self {
        BetaParams { alpha: m.alpha, beta: m.beta }
    }
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Trigamma function by upward recurrence into the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x + x2 / 2.0 + (x2 / x) * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

impl BetaModel {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return invalid(format!("Beta shapes must be positive and finite, got ({alpha}, {beta})"));
        }
        Ok(Self { alpha, beta, ln_norm: ln_beta(alpha, beta) })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    /// Density without the domain check; `x` must lie in `[0, 1]`.
    pub(crate) fn density(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return endpoint(self.alpha, self.beta, self.ln_norm);
        }
        if x >= 1.0 {
            return endpoint(self.beta, self.alpha, self.ln_norm);
        }
        ((self.alpha - 1.0) * x.ln() + (self.beta - 1.0) * (-x).ln_1p() - self.ln_norm).exp()
    }

    fn ln_density_interior(&self, x: f64) -> f64 {
        (self.alpha - 1.0) * x.ln() + (self.beta - 1.0) * (-x).ln_1p() - self.ln_norm
    }

    pub fn pdf(&self, x: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) {
            return invalid(format!("Beta density evaluated outside [0, 1] at {x}"));
        }
        Ok(self.density(x))
    }

    /// Mean log-likelihood of sufficient statistics `(E ln x, E ln(1 - x))`.
    fn mean_log_likelihood(alpha: f64, beta: f64, g1: f64, g2: f64) -> f64 {
        (alpha - 1.0) * g1 + (beta - 1.0) * g2 - ln_beta(alpha, beta)
    }
}

/// Density at the endpoint where the exponent `a - 1` applies.
fn endpoint(a: f64, b: f64, ln_norm: f64) -> f64 {
    if a > 1.0 {
        0.0
    } else if a == 1.0 {
        // (1 - 0)^(b - 1) / B(1, b) = b
        (-ln_norm).exp()
    } else {
        let _ = b;
        f64::INFINITY
    }
}

pub fn beta_pdf(model: &BetaModel, x: f64) -> Result<f64> {
    model.pdf(x)
}

/// `fg(x) / bg(x)`: 1 where both vanish, capped at [`RATIO_CAP`].
pub fn likelihood_ratio(fg: &BetaModel, bg: &BetaModel, x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return invalid(format!("likelihood ratio evaluated outside [0, 1] at {x}"));
    }
    Ok(ratio_unchecked(fg, bg, x))
}

pub(crate) fn ratio_unchecked(fg: &BetaModel, bg: &BetaModel, x: f64) -> f64 {
    let f = fg.density(x);
    let b = bg.density(x);
    let r = if f == 0.0 && b == 0.0 {
        1.0
    } else if f.is_infinite() && b.is_infinite() {
        // Both diverge at an endpoint; take the ratio just inside.
        let xi = x.clamp(1e-12, 1.0 - 1e-12);
        (fg.ln_density_interior(xi) - bg.ln_density_interior(xi)).exp()
    } else if b == 0.0 {
        RATIO_CAP
    } else {
        f / b
    };
    if r.is_nan() {
        1.0
    } else {
        r.min(RATIO_CAP)
    }
}

/// Maximum-likelihood Beta fit: method-of-moments start, then damped Newton
/// iterations on the digamma score equations.
pub fn fit_beta_mle(samples: &[f64]) -> Result<BetaModel> {
    if samples.len() < 10 {
        return invalid(format!("need at least 10 samples to fit a Beta model, got {}", samples.len()));
    }
    if let Some(x) = samples.iter().find(|x| !x.is_finite()) {
        return invalid(format!("non-finite sample {x}"));
    }
    let xs: Vec<f64> = samples.iter().map(|x| x.clamp(CLAMP, 1.0 - CLAMP)).collect();
    let n = xs.len() as f64;
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if lo == hi {
        return Err(Error::DegenerateSample(format!("all {} samples equal {lo}", xs.len())));
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let g1 = xs.iter().map(|x| x.ln()).sum::<f64>() / n;
    let g2 = xs.iter().map(|x| (-x).ln_1p()).sum::<f64>() / n;

    let common = (mean * (1.0 - mean) / var - 1.0).max(1e-3);
    let mut a = (mean * common).max(1e-4);
    let mut b = ((1.0 - mean) * common).max(1e-4);
    let mut ll = BetaModel::mean_log_likelihood(a, b, g1, g2);

    for _ in 0..MLE_MAX_ITER {
        let psi_ab = digamma(a + b);
        let ga = g1 - digamma(a) + psi_ab;
        let gb = g2 - digamma(b) + psi_ab;
        if ga.hypot(gb) < MLE_TOL {
            break;
        }
        let t_ab = trigamma(a + b);
        let haa = t_ab - trigamma(a);
        let hbb = t_ab - trigamma(b);
        let hab = t_ab;
        let det = haa * hbb - hab * hab;
        // Newton direction -H^{-1} g; fall back to gradient ascent if H is not
        // numerically negative definite.
        let (mut da, mut db) = if det > 0.0 && haa < 0.0 {
            (-(hbb * ga - hab * gb) / det, -(haa * gb - hab * ga) / det)
        } else {
            (ga * a * a, gb * b * b)
        };
        let mut accepted = false;
        for _ in 0..60 {
            let (na, nb) = (a + da, b + db);
            if na > 0.0 && nb > 0.0 && na.is_finite() && nb.is_finite() {
                let nll = BetaModel::mean_log_likelihood(na, nb, g1, g2);
                if nll >= ll - 1e-14 * ll.abs().max(1.0) {
                    a = na;
                    b = nb;
                    ll = nll;
                    accepted = true;
                    break;
                }
            }
            da *= 0.5;
            db *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    BetaModel::new(a, b)
}

/// Maximum-likelihood fit restricted to `alpha, beta >= min_shape`. The
/// log-likelihood is concave, so when the free optimum is infeasible the
/// constrained one lies on the boundary and is found by one-dimensional
/// Newton solves along each edge.
pub fn fit_beta_mle_bounded(samples: &[f64], min_shape: f64) -> Result<BetaModel> {
    if !(min_shape > 0.0 && min_shape.is_finite()) {
        return invalid(format!("min_shape must be positive, got {min_shape}"));
    }
    let free = fit_beta_mle(samples)?;
    if free.alpha >= min_shape && free.beta >= min_shape {
        return Ok(free);
    }
    let n = samples.len() as f64;
    let g1 = samples.iter().map(|x| x.clamp(CLAMP, 1.0 - CLAMP).ln()).sum::<f64>() / n;
    let g2 = samples.iter().map(|x| (-x.clamp(CLAMP, 1.0 - CLAMP)).ln_1p()).sum::<f64>() / n;
    let candidates = [
        (min_shape, edge_optimum(g2, min_shape, min_shape)),
        (edge_optimum(g1, min_shape, min_shape), min_shape),
        (min_shape, min_shape),
    ];
    let (a, b) = candidates
        .into_iter()
        .max_by(|p, q| {
            BetaModel::mean_log_likelihood(p.0, p.1, g1, g2).total_cmp(&BetaModel::mean_log_likelihood(q.0, q.1, g1, g2))
        })
        .expect("three candidates");
    BetaModel::new(a, b)
}

/// Maximizer over `y >= lo` of the likelihood with the other shape fixed at
/// `fixed`, where `g` is the mean log term paired with `y`.
fn edge_optimum(g: f64, fixed: f64, lo: f64) -> f64 {
    let score = |y: f64| g - digamma(y) + digamma(y + fixed);
    if score(lo) <= 0.0 {
        return lo;
    }
    // score decreases in y; bracket the root, then bisect
    let mut hi = lo * 2.0;
    while score(hi) > 0.0 && hi < 1e12 {
        hi *= 2.0;
    }
    let mut low = lo;
    for _ in 0..200 {
        let mid = 0.5 * (low + hi);
        if score(mid) > 0.0 {
            low = mid;
        } else {
            hi = mid;
        }
        if hi - low <= 1e-12 * hi {
            break;
        }
    }
    0.5 * (low + hi)
}

/// Uniform evaluation points on the open unit interval for a seed.
pub(crate) fn mc_points(n_samples: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[0x4c32]);
    (0..n_samples).map(|_| rng.sample::<f64, _>(Open01)).collect()
}

pub(crate) fn mc_squared_difference(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len() as f64
}

/// Monte-Carlo estimate of `integral_0^1 (f_a - f_b)^2` from `n_samples`
/// uniform draws.
pub fn l2_distance(a: &BetaModel, b: &BetaModel, n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples < 1000 {
        return invalid(format!("l2_distance needs at least 1000 samples, got {n_samples}"));
    }
    let pts = mc_points(n_samples, seed);
    let fa: Vec<f64> = pts.iter().map(|&x| a.density(x)).collect();
    let fb: Vec<f64> = pts.iter().map(|&x| b.density(x)).collect();
    Ok(mc_squared_difference(&fa, &fb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Beta, Distribution};

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = 0.5 * (f(a) + f(b));
        for i in 1..n {
            s += f(a + i as f64 * h);
        }
        s * h
    }

    #[test]
    fn uniform_density() {
        let m = BetaModel::new(1.0, 1.0).unwrap();
        assert!((beta_pdf(&m, 0.3).unwrap() - 1.0).abs() < 1e-12);
        assert!((beta_pdf(&m, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((beta_pdf(&m, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn beta22_midpoint() {
        let m = BetaModel::new(2.0, 2.0).unwrap();
        // 6x(1-x) at 0.5, and the unnormalized x(1-x) integrates to 1/6.
        let norm = trapezoid(|x| x * (1.0 - x), 0.0, 1.0, 100_000);
        let oracle = 0.25 / norm;
        assert!((oracle - 1.5).abs() < 1e-6);
        assert!((beta_pdf(&m, 0.5).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn endpoint_zero() {
        let m = BetaModel::new(2.0, 5.0).unwrap();
        assert_eq!(beta_pdf(&m, 0.0).unwrap(), 0.0);
        assert_eq!(beta_pdf(&BetaModel::new(5.0, 2.0).unwrap(), 1.0).unwrap(), 0.0);
        assert!(beta_pdf(&m, 1.5).is_err());
        assert!(beta_pdf(&m, -0.1).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(BetaModel::new(0.0, 1.0).is_err());
        assert!(BetaModel::new(1.0, -2.0).is_err());
        assert!(BetaModel::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn pdf_normalizes() {
        for &(a, b) in &[(0.5, 0.5), (0.7, 3.0), (2.0, 5.0), (50.0, 50.0), (1.0, 50.0), (20.0, 0.9)] {
            let m = BetaModel::new(a, b).unwrap();
            let integral = if a >= 1.0 && b >= 1.0 {
                trapezoid(|x| m.density(x), 0.0, 1.0, 10_000)
            } else {
                // Integrable endpoint singularities: substitute x = t^k near the
                // singular end so the trapezoid rule sees a bounded integrand.
                let k = 8.0;
                let left = trapezoid(|t: f64| if t == 0.0 { 0.0 } else { m.density(t.powf(k) * 0.5) * k * t.powf(k - 1.0) * 0.5 }, 0.0, 1.0, 10_000);
                let mirror = BetaModel::new(b, a).unwrap();
                let right = trapezoid(|t: f64| if t == 0.0 { 0.0 } else { mirror.density(t.powf(k) * 0.5) * k * t.powf(k - 1.0) * 0.5 }, 0.0, 1.0, 10_000);
                left + right
            };
            assert!((integral - 1.0).abs() < 1e-4, "Beta({a},{b}) integrates to {integral}");
        }
    }

    #[test]
    fn ratio_cases() {
        let u = BetaModel::new(1.0, 1.0).unwrap();
        let b22 = BetaModel::new(2.0, 2.0).unwrap();
        for x in [0.0, 0.1, 0.5, 0.9, 1.0] {
            assert_eq!(likelihood_ratio(&b22, &b22, x).unwrap(), 1.0);
        }
        assert!((likelihood_ratio(&b22, &u, 0.5).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(likelihood_ratio(&b22, &u, 0.0).unwrap(), 0.0);
        // both zero at the endpoint
        let b25 = BetaModel::new(2.0, 5.0).unwrap();
        assert_eq!(likelihood_ratio(&b22, &b25, 0.0).unwrap(), 1.0);
        // background vanishes, foreground does not
        assert_eq!(likelihood_ratio(&u, &b25, 0.0).unwrap(), RATIO_CAP);
        // both diverge
        let s1 = BetaModel::new(0.3, 1.0).unwrap();
        let s2 = BetaModel::new(0.6, 1.0).unwrap();
        let r = likelihood_ratio(&s1, &s2, 0.0).unwrap();
        assert!(r.is_finite() && r > 1.0);
    }

    fn draw(a: f64, b: f64, n: usize, seed: u64) -> Vec<f64> {
        let dist = Beta::new(a, b).unwrap();
        let mut r = rng::stream(seed, &[1]);
        (0..n).map(|_| dist.sample(&mut r)).collect()
    }

    #[test]
    fn mle_recovers_beta_2_5() {
        let xs = draw(2.0, 5.0, 5000, 42);
        let m = fit_beta_mle(&xs).unwrap();
        assert!((1.8..=2.2).contains(&m.alpha()), "alpha {}", m.alpha());
        assert!((4.5..=5.5).contains(&m.beta()), "beta {}", m.beta());
    }

    #[test]
    fn mle_symmetric_jitter() {
        let mut r = rng::stream(3, &[]);
        let xs: Vec<f64> = (0..200).map(|_| 0.5 + (r.random::<f64>() - 0.5) * 1e-4).collect();
        let m = fit_beta_mle(&xs).unwrap();
        let rel = (m.alpha() - m.beta()).abs() / m.alpha();
        assert!(rel < 0.05, "alpha {} beta {}", m.alpha(), m.beta());
    }

    #[test]
    fn mle_errors() {
        assert!(matches!(fit_beta_mle(&[0.5; 9]), Err(Error::InvalidArgument(_))));
        assert!(matches!(fit_beta_mle(&[0.3; 20]), Err(Error::DegenerateSample(_))));
    }

    #[test]
    fn mle_binary_data_converges() {
        let xs: Vec<f64> = (0..1000).map(|i| if i % 7 == 0 { 1.0 } else { 0.0 }).collect();
        let m = fit_beta_mle(&xs).unwrap();
        // U-shaped fit with most mass near zero
        assert!(m.alpha() < 1.0 && m.beta() < 1.0, "{m:?}");
        assert!(m.mean() < 0.5);
        let clamped: Vec<f64> = xs.iter().map(|x| x.clamp(CLAMP, 1.0 - CLAMP)).collect();
        let g1 = clamped.iter().map(|x| x.ln()).sum::<f64>() / 1000.0;
        let psi = digamma(m.alpha() + m.beta());
        assert!((g1 - digamma(m.alpha()) + psi).abs() < 1e-6);
    }

    #[test]
    fn mle_gradient_vanishes_at_fit() {
        let xs: Vec<f64> = draw(0.7, 3.0, 3000, 9).into_iter().map(|x| x.clamp(CLAMP, 1.0 - CLAMP)).collect();
        let m = fit_beta_mle(&xs).unwrap();
        let g1 = xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64;
        let g2 = xs.iter().map(|x| (1.0 - x).ln()).sum::<f64>() / xs.len() as f64;
        let psi = digamma(m.alpha() + m.beta());
        assert!((g1 - digamma(m.alpha()) + psi).abs() < 1e-6);
        assert!((g2 - digamma(m.beta()) + psi).abs() < 1e-6);
    }

    #[test]
    fn trigamma_values() {
        // psi1(1) = pi^2 / 6, psi1(1/2) = pi^2 / 2
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((trigamma(1.0) - pi2 / 6.0).abs() < 1e-10);
        assert!((trigamma(0.5) - pi2 / 2.0).abs() < 1e-10);
        // finite-difference check against digamma
        for x in [0.05, 0.8, 3.0, 40.0] {
            let h = 1e-5 * x;
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((fd - trigamma(x)).abs() / trigamma(x) < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn l2_identical_is_zero() {
        let a = BetaModel::new(3.0, 4.0).unwrap();
        assert!(l2_distance(&a, &a, 1000, 1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn l2_uniform_vs_beta22() {
        // closed form: integral (1 - 6x + 6x^2)^2 dx = 1/5
        let closed: f64 = 1.0 - 6.0 + (36.0 + 12.0) / 3.0 - 72.0 / 4.0 + 36.0 / 5.0;
        assert!((closed - 0.2).abs() < 1e-12);
        let a = BetaModel::new(1.0, 1.0).unwrap();
        let b = BetaModel::new(2.0, 2.0).unwrap();
        let d = l2_distance(&a, &b, 1_000_000, 5).unwrap();
        assert!((d - closed).abs() < 0.02, "{d}");
    }

    #[test]
    fn l2_far_apart_is_larger() {
        let a = BetaModel::new(50.0, 2.0).unwrap();
        let b = BetaModel::new(2.0, 50.0).unwrap();
        let quad = trapezoid(|x| (a.density(x) - b.density(x)).powi(2), 0.0, 1.0, 200_000);
        let d = l2_distance(&a, &b, 100_000, 5).unwrap();
        assert!(quad > 0.2 && d > 0.2);
        assert!((d - quad).abs() / quad < 0.1);
    }

    #[test]
    fn l2_deterministic_and_checked() {
        let a = BetaModel::new(2.0, 3.0).unwrap();
        let b = BetaModel::new(3.0, 2.0).unwrap();
        assert_eq!(l2_distance(&a, &b, 5000, 11).unwrap().to_bits(), l2_distance(&a, &b, 5000, 11).unwrap().to_bits());
        assert!(l2_distance(&a, &b, 999, 11).is_err());
    }

    #[test]
    fn serde_round_trip_rebuilds_norm() {
        let m = BetaModel::new(2.5, 0.75).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"alpha":2.5,"beta":0.75}"#);
        let back: BetaModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<BetaModel>(r#"{"alpha":-1.0,"beta":1.0}"#).is_err());
    }

    #[test]
    fn bounded_fit_matches_grid_search() {
        let mut r = crate::rng::stream(5, &[1]);
        for &(a, b) in &[(0.3, 2.0), (3.0, 0.2), (0.2, 0.3), (2.0, 5.0)] {
            let xs: Vec<f64> = (0..2000).map(|_| Beta::new(a, b).unwrap().sample(&mut r)).collect();
            let fit = fit_beta_mle_bounded(&xs, 0.75).unwrap();
            assert!(fit.alpha() >= 0.75 && fit.beta() >= 0.75);
            let cl: Vec<f64> = xs.iter().map(|x| x.clamp(CLAMP, 1.0 - CLAMP)).collect();
            let g1 = cl.iter().map(|x| x.ln()).sum::<f64>() / cl.len() as f64;
            let g2 = cl.iter().map(|x| (-x).ln_1p()).sum::<f64>() / cl.len() as f64;
            let ll = |a: f64, b: f64| BetaModel::mean_log_likelihood(a, b, g1, g2);
            let best = (0..400)
                .flat_map(|i| (0..400).map(move |j| (0.75 + i as f64 * 0.02, 0.75 + j as f64 * 0.02)))
                .map(|(a, b)| ll(a, b))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(ll(fit.alpha(), fit.beta()) >= best - 1e-6, "({a}, {b}) -> {fit:?}");
        }
        let free = fit_beta_mle(&[0.1, 0.2, 0.3, 0.5, 0.6, 0.7, 0.8, 0.4, 0.35, 0.45]).unwrap();
        assert_eq!(fit_beta_mle_bounded(&[0.1, 0.2, 0.3, 0.5, 0.6, 0.7, 0.8, 0.4, 0.35, 0.45], 0.75).unwrap(), free);
    }
}
