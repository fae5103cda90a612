//! Exact samplers for the synthetic benchmark processes, with the true
//! per-event negative log-likelihood and compensator increments of each.
//!
//! | name              | conditional intensity / generator                              |
//! |-------------------|----------------------------------------------------------------|
//! | `s_poisson`       | `λ = 1`                                                        |
//! | `n_poisson`       | `λ(t) = 0.99 sin(2πt/20000) + 1`                               |
//! | `s_renewal`       | i.i.d. log-normal gaps, mean 1, sd 6                           |
//! | `n_renewal`       | gamma renewal (mean 1, sd 0.5) in time warped by the trend above |
//! | `self_correcting` | `λ(t) = exp(t - N(t))`                                         |
//! | `hawkes1`         | `μ = 0.2`, `α = 0.8`, `β = 1`                                  |
//! | `hawkes2`         | `μ = 0.2`, `α = (0.4, 0.4)`, `β = (1, 20)`                     |
//!
//! Hawkes kernels are `Σ_j α_j β_j exp(-β_j s)`, so `Σ α_j` is the branching
//! ratio. Every sequence starts at `t = 0` and stops after `n` events.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::events::EventSequence;
use crate::rng::{self, Rng};

#[derive(Debug, Error, PartialEq)]
pub enum SimulateError {
    #[error("unstable Hawkes process: branching ratio {0} >= 1")]
    Unstable(f64),
    #[error("rate {rate} at t = {t} exceeds the thinning bound {bound}")]
    RateAboveBound { t: f64, rate: f64, bound: f64 },
    #[error("invalid process parameters: {0}")]
    InvalidParameters(String),
    #[error("time-warp inversion did not converge for target {0}")]
    InversionFailed(f64),
    #[error("unknown process {0:?}")]
    UnknownProcess(String),
}

pub type Result<T> = std::result::Result<T, SimulateError>;

/// `r(t) = amplitude · sin(2πt/period) + 1` and its integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineTrend {
    pub amplitude: f64,
    pub period: f64,
}

impl Default for SineTrend {
    fn default() -> Self {
        SineTrend {
            amplitude: 0.99,
            period: 20_000.0,
        }
    }
}

impl SineTrend {
    fn omega(&self) -> f64 {
        2.0 * PI / self.period
    }

    fn half_swing(&self) -> f64 {
        self.amplitude * self.period / (2.0 * PI)
    }

    pub fn rate(&self, t: f64) -> f64 {
        self.amplitude * (self.omega() * t).sin() + 1.0
    }

    /// `R(t) = ∫₀ᵗ r(s) ds = t - (a P / 2π)(cos(2πt/P) - 1)`.
    pub fn integral(&self, t: f64) -> f64 {
        t - self.half_swing() * ((self.omega() * t).cos() - 1.0)
    }

    /// `R(b) - R(a)` without cancelling the large linear terms.
    pub fn increment(&self, a: f64, b: f64) -> f64 {
        (b - a) + self.half_swing() * ((self.omega() * a).cos() - (self.omega() * b).cos())
    }

    /// Solves `R(t) = target` for `t ≥ lower`: safeguarded Newton inside a
    /// shrinking bracket, falling back to bisection steps.
    pub fn invert(&self, target: f64, lower: f64) -> Result<f64> {
        const TOL: f64 = 1e-10;
        let swing = 2.0 * self.half_swing().abs();
        let mut lo = lower.max(target - swing).max(0.0);
        let mut hi = target.max(lo);
        // R(t) ≥ t - swing and R(t) ≤ t + swing bound the root; widen if needed
        while self.integral(hi) < target {
            hi = hi * 2.0 + 1.0;
        }
        if self.integral(lo) > target {
            lo = 0.0;
        }
        let mut t = 0.5 * (lo + hi);
        for _ in 0..400 {
            let f = self.integral(t) - target;
            if f.abs() < TOL {
                return Ok(t);
            }
            if f > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let newton = t - f / self.rate(t);
            t = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
                // bracket is down to a few ulps; accept if R is as close as
                // floating point allows
                let f = self.integral(t) - target;
                if f.abs() < TOL * 10.0 || hi - lo == 0.0 {
                    return Ok(t);
                }
            }
        }
        Err(SimulateError::InversionFailed(target))
    }
}

/// A synthetic process and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessSpec {
    SPoisson { rate: f64 },
    NPoisson { trend: SineTrend, lambda_max: f64 },
    SRenewal { mean: f64, std: f64 },
    NRenewal { mean: f64, std: f64, trend: SineTrend },
    SelfCorrecting,
    Hawkes { mu: f64, alpha: Vec<f64>, beta: Vec<f64> },
}

impl ProcessSpec {
    pub const PRESETS: [&'static str; 7] = [
        "s_poisson",
        "n_poisson",
        "s_renewal",
        "n_renewal",
        "self_correcting",
        "hawkes1",
        "hawkes2",
    ];

    /// The benchmark parameterisation for a preset name.
    pub fn preset(name: &str) -> Result<Self> {
        let spec = match name {
            "s_poisson" => ProcessSpec::SPoisson { rate: 1.0 },
            "n_poisson" => ProcessSpec::NPoisson {
                trend: SineTrend::default(),
                lambda_max: 1.99,
            },
            "s_renewal" => ProcessSpec::SRenewal { mean: 1.0, std: 6.0 },
            "n_renewal" => ProcessSpec::NRenewal {
                mean: 1.0,
                std: 0.5,
                trend: SineTrend::default(),
            },
            "self_correcting" => ProcessSpec::SelfCorrecting,
            "hawkes1" => ProcessSpec::Hawkes {
                mu: 0.2,
                alpha: vec![0.8],
                beta: vec![1.0],
            },
            "hawkes2" => ProcessSpec::Hawkes {
                mu: 0.2,
                alpha: vec![0.4, 0.4],
                beta: vec![1.0, 20.0],
            },
            other => return Err(SimulateError::UnknownProcess(other.to_string())),
        };
        Ok(spec)
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ProcessSpec::SPoisson { .. } => "s_poisson",
            ProcessSpec::NPoisson { .. } => "n_poisson",
            ProcessSpec::SRenewal { .. } => "s_renewal",
            ProcessSpec::NRenewal { .. } => "n_renewal",
            ProcessSpec::SelfCorrecting => "self_correcting",
            ProcessSpec::Hawkes { .. } => "hawkes",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimulateError::InvalidParameters(m));
        match self {
            ProcessSpec::SPoisson { rate } if !(*rate > 0.0 && rate.is_finite()) => bad(format!("rate {rate}")),
            ProcessSpec::NPoisson { trend, lambda_max } => {
                if lambda_max.is_nan() || *lambda_max <= 0.0 || trend.period <= 0.0 {
                    return bad(format!("lambda_max {lambda_max}, period {}", trend.period));
                }
                Ok(())
            }
            ProcessSpec::SRenewal { mean, std } if !(*mean > 0.0 && *std >= 0.0) => {
                bad(format!("mean {mean}, std {std}"))
            }
            ProcessSpec::NRenewal { mean, std, trend } => {
                gamma_shape_scale(*mean, *std)?;
                if trend.amplitude.abs() >= 1.0 || trend.period <= 0.0 {
                    return bad("trend must stay positive".into());
                }
                Ok(())
            }
            ProcessSpec::Hawkes { mu, alpha, beta } => {
                if alpha.len() != beta.len() || alpha.is_empty() {
                    return bad("alpha and beta must be non-empty and of equal length".into());
                }
                if mu.is_nan()
                    || *mu <= 0.0
                    || alpha.iter().any(|a| a.is_nan() || *a < 0.0)
                    || beta.iter().any(|b| b.is_nan() || *b <= 0.0)
                {
                    return bad(format!("mu {mu}, alpha {alpha:?}, beta {beta:?}"));
                }
                let ratio: f64 = alpha.iter().sum();
                if ratio >= 1.0 {
                    return Err(SimulateError::Unstable(ratio));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Stationary event rate where one exists.
    pub fn long_run_rate(&self) -> Option<f64> {
        match self {
            ProcessSpec::SPoisson { rate } => Some(*rate),
            ProcessSpec::NPoisson { .. } | ProcessSpec::SelfCorrecting => Some(1.0),
            ProcessSpec::SRenewal { mean, .. } | ProcessSpec::NRenewal { mean, .. } => Some(1.0 / mean),
            ProcessSpec::Hawkes { mu, alpha, .. } => Some(mu / (1.0 - alpha.iter().sum::<f64>())),
        }
    }
}

fn sequence(ts: Vec<f64>) -> EventSequence {
    EventSequence::from_timestamps(ts).expect("simulated times are ordered and finite")
}

fn exp1(rng: &mut Rng) -> f64 {
    Exp1.sample(rng)
}

pub fn sim_poisson(rate: f64, n: usize, rng: &mut Rng) -> EventSequence {
    assert!(rate > 0.0, "Poisson rate must be positive");
    let mut t = 0.0;
    let ts = (0..n)
        .map(|_| {
            t += exp1(rng) / rate;
            t
        })
        .collect();
    sequence(ts)
}

/// Thinning: proposals from a rate-`lambda_max` Poisson process, each kept
/// with probability `rate(t)/lambda_max`.
pub fn sim_nonstationary_poisson(
    rate: impl Fn(f64) -> f64,
    lambda_max: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<EventSequence> {
    let mut ts = Vec::with_capacity(n);
    let mut t = 0.0;
    while ts.len() < n {
        t += exp1(rng) / lambda_max;
        let r = rate(t);
        if r > lambda_max {
            return Err(SimulateError::RateAboveBound {
                t,
                rate: r,
                bound: lambda_max,
            });
        }
        if rng.random::<f64>() * lambda_max < r {
            ts.push(t);
        }
    }
    Ok(sequence(ts))
}

/// Normal parameters `(μ, σ)` of a log-normal with the given mean and sd.
pub fn lognormal_params(mean: f64, std: f64) -> (f64, f64) {
    let sigma2 = (1.0 + (std * std) / (mean * mean)).ln();
    (mean.ln() - sigma2 / 2.0, sigma2.sqrt())
}

pub fn sim_renewal_lognormal(mean: f64, std: f64, n: usize, rng: &mut Rng) -> EventSequence {
    let (mu, sigma) = lognormal_params(mean, std);
    let mut t = 0.0;
    let ts = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            t += (mu + sigma * z).exp();
            t
        })
        .collect();
    sequence(ts)
}

/// Integral shape `k` and scale `θ` of a gamma with the given moments.
pub fn gamma_shape_scale(mean: f64, std: f64) -> Result<(u32, f64)> {
    if !(mean > 0.0 && std > 0.0) {
        return Err(SimulateError::InvalidParameters(format!(
            "gamma mean {mean}, std {std}"
        )));
    }
    let shape = mean * mean / (std * std);
    let k = shape.round();
    if (shape - k).abs() > 1e-9 || k < 1.0 {
        return Err(SimulateError::InvalidParameters(format!(
            "gamma shape {shape} is not a positive integer"
        )));
    }
    Ok((k as u32, std * std / mean))
}

/// Gamma renewal in warped time `t' = R(t)`, mapped back through `R⁻¹`.
pub fn sim_nonstationary_renewal(
    mean: f64,
    std: f64,
    trend: &SineTrend,
    n: usize,
    rng: &mut Rng,
) -> Result<EventSequence> {
    let (k, theta) = gamma_shape_scale(mean, std)?;
    let mut warped = 0.0;
    let mut t = 0.0;
    let mut ts = Vec::with_capacity(n);
    for _ in 0..n {
        warped += theta * (0..k).map(|_| exp1(rng)).sum::<f64>();
        t = trend.invert(warped, t)?;
        ts.push(t);
    }
    Ok(sequence(ts))
}

/// With `i` events so far and the last at `t_i`, the next event solves
/// `e^{-i}(e^t - e^{t_i}) = E`, i.e. `t = t_i + ln(1 + e^{i - t_i} E)`.
pub fn self_correcting_next(i: usize, t_last: f64, e: f64) -> f64 {
    t_last + ((i as f64 - t_last).exp() * e).ln_1p()
}

pub fn sim_self_correcting(n: usize, rng: &mut Rng) -> EventSequence {
    let mut t = 0.0;
    let ts = (0..n)
        .map(|i| {
            t = self_correcting_next(i, t, exp1(rng));
            t
        })
        .collect();
    sequence(ts)
}

/// Ogata thinning with exponential kernels.
///
/// `state[j]` holds `Σ_{t_i ≤ t} exp(-β_j (t - t_i))`. The intensity right
/// after the latest event bounds the intensity until the next event, so it
/// is used as the proposal rate and refreshed after every proposal.
pub fn sim_hawkes(mu: f64, alpha: &[f64], beta: &[f64], n: usize, rng: &mut Rng) -> Result<EventSequence> {
    ProcessSpec::Hawkes {
        mu,
        alpha: alpha.to_vec(),
        beta: beta.to_vec(),
    }
    .validate()?;
    let intensity = |state: &[f64]| {
        mu + alpha
            .iter()
            .zip(beta)
            .zip(state)
            .map(|((a, b), s)| a * b * s)
            .sum::<f64>()
    };
    let mut state = vec![0.0; alpha.len()];
    let mut ts = Vec::with_capacity(n);
    let mut t = 0.0;
    while ts.len() < n {
        let bound = intensity(&state);
        let dt = exp1(rng) / bound;
        t += dt;
        for (s, b) in state.iter_mut().zip(beta) {
            *s *= (-b * dt).exp();
        }
        let lambda = intensity(&state);
        if rng.random::<f64>() * bound <= lambda {
            for s in state.iter_mut() {
                *s += 1.0;
            }
            ts.push(t);
        }
    }
    Ok(sequence(ts))
}

/// Draws `n` events of `spec` from a ChaCha8 stream seeded with `seed`.
pub fn simulate(spec: &ProcessSpec, n: usize, seed: u64) -> Result<EventSequence> {
    spec.validate()?;
    let mut r = rng::from_seed(seed);
    match spec {
        ProcessSpec::SPoisson { rate } => Ok(sim_poisson(*rate, n, &mut r)),
        ProcessSpec::NPoisson { trend, lambda_max } => {
            sim_nonstationary_poisson(|t| trend.rate(t), *lambda_max, n, &mut r)
        }
        ProcessSpec::SRenewal { mean, std } => Ok(sim_renewal_lognormal(*mean, *std, n, &mut r)),
        ProcessSpec::NRenewal { mean, std, trend } => sim_nonstationary_renewal(*mean, *std, trend, n, &mut r),
        ProcessSpec::SelfCorrecting => Ok(sim_self_correcting(n, &mut r)),
        ProcessSpec::Hawkes { mu, alpha, beta } => sim_hawkes(*mu, alpha, beta, n, &mut r),
    }
}

/// `-ln S(x)` for a gamma with integral shape `k` and scale `θ`:
/// `x/θ - ln Σ_{m<k} (x/θ)^m / m!`.
fn gamma_neg_log_survival(x: f64, k: u32, theta: f64) -> f64 {
    let z = x / theta;
    let mut term = 1.0;
    let mut sum = 1.0;
    for m in 1..k {
        term *= z / m as f64;
        sum += term;
    }
    z - sum.ln()
}

fn gamma_neg_log_pdf(x: f64, k: u32, theta: f64) -> f64 {
    let kf = k as f64;
    let ln_gamma_k: f64 = (1..k).map(|m| (m as f64).ln()).sum();
    -(kf - 1.0) * x.ln() + x / theta + ln_gamma_k + kf * theta.ln()
}

fn lognormal_neg_log_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x.ln() - mu) / sigma;
    x.ln() + sigma.ln() + 0.5 * (2.0 * PI).ln() + 0.5 * z * z
}

fn lognormal_neg_log_survival(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x.ln() - mu) / sigma;
    -(0.5 * erfc(z / std::f64::consts::SQRT_2)).ln()
}

/// Per-event `(compensator increment, −log p(t_{i+1} | past))` under the true
/// model. The first event is measured from the start of the observation
/// window, which the simulators place at zero.
fn true_terms(spec: &ProcessSpec, seq: &EventSequence) -> Result<Vec<(f64, f64)>> {
    spec.validate()?;
    let ts = seq.timestamps();
    let mut out = Vec::with_capacity(ts.len());
    let mut prev = seq.t_start();
    match spec {
        ProcessSpec::SPoisson { rate } => {
            for &t in ts {
                let comp = rate * (t - prev);
                out.push((comp, comp - rate.ln()));
                prev = t;
            }
        }
        ProcessSpec::NPoisson { trend, .. } => {
            for &t in ts {
                let comp = trend.increment(prev, t);
                out.push((comp, comp - trend.rate(t).ln()));
                prev = t;
            }
        }
        ProcessSpec::SRenewal { mean, std } => {
            let (mu, sigma) = lognormal_params(*mean, *std);
            for &t in ts {
                let gap = t - prev;
                out.push((
                    lognormal_neg_log_survival(gap, mu, sigma),
                    lognormal_neg_log_pdf(gap, mu, sigma),
                ));
                prev = t;
            }
        }
        ProcessSpec::NRenewal { mean, std, trend } => {
            let (k, theta) = gamma_shape_scale(*mean, *std)?;
            for &t in ts {
                let warped_gap = trend.increment(prev, t);
                out.push((
                    gamma_neg_log_survival(warped_gap, k, theta),
                    gamma_neg_log_pdf(warped_gap, k, theta) - trend.rate(t).ln(),
                ));
                prev = t;
            }
        }
        ProcessSpec::SelfCorrecting => {
            for (i, &t) in ts.iter().enumerate() {
                let past = i as f64;
                let comp = (prev - past).exp() * (t - prev).exp_m1();
                out.push((comp, comp - (t - past)));
                prev = t;
            }
        }
        ProcessSpec::Hawkes { mu, alpha, beta } => {
            let mut state = vec![0.0; alpha.len()];
            for &t in ts {
                let tau = t - prev;
                let mut comp = mu * tau;
                let mut lambda = *mu;
                for ((s, a), b) in state.iter_mut().zip(alpha).zip(beta) {
                    let decay = (-b * tau).exp();
                    comp += a * *s * (-(-b * tau).exp_m1());
                    *s *= decay;
                    lambda += a * b * *s;
                    *s += 1.0;
                }
                out.push((comp, comp - lambda.ln()));
                prev = t;
            }
        }
    }
    Ok(out)
}

/// `-log p(t_{i+1} | t_1..t_i)` for every event under the generating model.
pub fn true_nll(spec: &ProcessSpec, seq: &EventSequence) -> Result<Vec<f64>> {
    Ok(true_terms(spec, seq)?.into_iter().map(|(_, nll)| nll).collect())
}

/// `Λ(t_{i+1}) - Λ(t_i)` for every event under the generating model. These
/// are i.i.d. Exp(1) when `seq` was drawn from `spec`.
pub fn compensator_increments(spec: &ProcessSpec, seq: &EventSequence) -> Result<Vec<f64>> {
    Ok(true_terms(spec, seq)?.into_iter().map(|(c, _)| c).collect())
}

/// One-sample Kolmogorov–Smirnov test result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Kolmogorov survival function `Q(λ) = P(K > λ)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        let y = (-PI * PI / (8.0 * lambda * lambda)).exp();
        let mut s = 0.0;
        let mut k = 1.0f64;
        loop {
            let term = y.powf(k * k);
            s += term;
            if term < 1e-17 {
                break;
            }
            k += 2.0;
        }
        1.0 - (2.0 * PI).sqrt() / lambda * s
    } else {
        let mut s = 0.0;
        for j in 1..=100 {
            let jf = j as f64;
            let term = (-2.0 * jf * jf * lambda * lambda).exp();
            s += if j % 2 == 1 { term } else { -term };
            if term < 1e-17 {
                break;
            }
        }
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// KS test of `samples` against `cdf`, with the small-sample correction
/// `λ = (√n + 0.12 + 0.11/√n) D`.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let nf = n as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / nf).max((i + 1) as f64 / nf - f);
    }
    let sq = nf.sqrt();
    KsResult {
        statistic: d,
        p_value: if n == 0 {
            1.0
        } else {
            kolmogorov_q((sq + 0.12 + 0.11 / sq) * d)
        },
        n,
    }
}

/// KS test of compensator increments against Exp(1).
pub fn time_rescaling_ks(increments: &[f64]) -> KsResult {
    ks_test(increments, |x| if x <= 0.0 { 0.0 } else { -(-x).exp_m1() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaps(seq: &EventSequence) -> Vec<f64> {
        let mut out = vec![seq.timestamps()[0]];
        out.extend(seq.intervals());
        out
    }

    fn mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    #[test]
    fn poisson_mean_gap() {
        let s = simulate(&ProcessSpec::SPoisson { rate: 1.0 }, 100_000, 1).unwrap();
        assert!((mean(&gaps(&s)) - 1.0).abs() < 0.01);
        let s = simulate(&ProcessSpec::SPoisson { rate: 2.0 }, 100_000, 2).unwrap();
        assert!((mean(&gaps(&s)) - 0.5).abs() < 0.005);
        assert!(simulate(&ProcessSpec::SPoisson { rate: 1.0 }, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn nonstationary_poisson() {
        let s = simulate(&ProcessSpec::preset("n_poisson").unwrap(), 100_000, 3).unwrap();
        let rate = s.len() as f64 / s.t_end();
        assert!((rate - 1.0).abs() < 0.01, "{rate}");
        let mut r = rng::from_seed(4);
        let err = sim_nonstationary_poisson(|_| 2.5, 1.99, 10, &mut r).unwrap_err();
        assert!(matches!(err, SimulateError::RateAboveBound { .. }));
    }

    #[test]
    fn thinning_with_constant_rate_is_poisson() {
        let mut r = rng::from_seed(5);
        let s = sim_nonstationary_poisson(|_| 0.7, 1.99, 10_000, &mut r).unwrap();
        let inc: Vec<f64> = gaps(&s).iter().map(|g| 0.7 * g).collect();
        assert!(time_rescaling_ks(&inc).p_value > 0.01);
    }

    #[test]
    fn lognormal_parameters() {
        let (mu, sigma) = lognormal_params(1.0, 6.0);
        assert!((sigma * sigma - 37f64.ln()).abs() < 1e-12);
        assert!((mu + 1.80546).abs() < 1e-5);
        let s = simulate(&ProcessSpec::preset("s_renewal").unwrap(), 100_000, 6).unwrap();
        let mut g = gaps(&s);
        assert!((mean(&g) - 1.0).abs() < 0.05, "{}", mean(&g));
        g.sort_by(f64::total_cmp);
        let median = g[g.len() / 2];
        assert!((median / mu.exp() - 1.0).abs() < 0.02, "{median}");
        let mut r = rng::from_seed(1);
        let degenerate = sim_renewal_lognormal(1.0, 0.0, 10, &mut r);
        assert!(gaps(&degenerate).iter().all(|&g| (g - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sine_trend_integral() {
        let tr = SineTrend::default();
        assert!((tr.integral(20_000.0) - 20_000.0).abs() < 1e-8);
        for t in [0.0, 10.0, 4321.5, 15_000.0, 39_999.0] {
            let back = tr.invert(tr.integral(t), 0.0).unwrap();
            assert!((tr.integral(back) - tr.integral(t)).abs() < 1e-10);
            assert!((back - t).abs() < 1e-8 * t.max(1.0));
        }
        let flat = SineTrend {
            amplitude: 0.0,
            period: 1.0,
        };
        assert_eq!(flat.invert(3.5, 0.0).unwrap(), 3.5);
    }

    #[test]
    fn nonstationary_renewal_warped_moments() {
        let tr = SineTrend::default();
        let s = simulate(&ProcessSpec::preset("n_renewal").unwrap(), 100_000, 7).unwrap();
        let mut prev = 0.0;
        let warped: Vec<f64> = s
            .timestamps()
            .iter()
            .map(|&t| {
                let g = tr.increment(prev, t);
                prev = t;
                g
            })
            .collect();
        let m = mean(&warped);
        let sd = (warped.iter().map(|g| (g - m).powi(2)).sum::<f64>() / warped.len() as f64).sqrt();
        assert!((m - 1.0).abs() < 0.01, "{m}");
        assert!((sd - 0.5).abs() < 0.01, "{sd}");
        // R(20000) = 20000, so the count in [0, 20000] matches the warped count
        let real = s.timestamps().iter().filter(|&&t| t <= 20_000.0).count();
        let mut acc = 0.0;
        let warped_count = warped
            .iter()
            .take_while(|&&g| {
                acc += g;
                acc <= 20_000.0
            })
            .count();
        assert!((real as i64 - warped_count as i64).abs() <= 1);
        assert_eq!(gamma_shape_scale(1.0, 0.5).unwrap(), (4, 0.25));
    }

    #[test]
    fn self_correcting_inversion() {
        let t = self_correcting_next(0, 0.0, 2f64.ln());
        assert!((t - 0.5265890).abs() < 1e-6);
        let s = simulate(&ProcessSpec::SelfCorrecting, 100_000, 8).unwrap();
        let rate = s.len() as f64 / s.t_end();
        assert!((rate - 1.0).abs() < 0.02, "{rate}");
    }

    #[test]
    fn hawkes_rates_and_stability() {
        for (name, seed) in [("hawkes1", 9), ("hawkes2", 10)] {
            let s = simulate(&ProcessSpec::preset(name).unwrap(), 100_000, seed).unwrap();
            let rate = s.len() as f64 / s.t_end();
            assert!((rate - 1.0).abs() < 0.05, "{name}: {rate}");
        }
        let bad = ProcessSpec::Hawkes {
            mu: 0.2,
            alpha: vec![1.2],
            beta: vec![1.0],
        };
        assert_eq!(simulate(&bad, 10, 0).unwrap_err(), SimulateError::Unstable(1.2));
    }

    #[test]
    fn hawkes_without_excitation_is_poisson() {
        let spec = ProcessSpec::Hawkes {
            mu: 0.5,
            alpha: vec![0.0],
            beta: vec![1.0],
        };
        let s = simulate(&spec, 10_000, 11).unwrap();
        let inc: Vec<f64> = gaps(&s).iter().map(|g| 0.5 * g).collect();
        assert!(time_rescaling_ks(&inc).p_value > 0.01);
        let hawkes_nll = true_nll(&spec, &s).unwrap();
        let poisson_nll = true_nll(&ProcessSpec::SPoisson { rate: 0.5 }, &s).unwrap();
        for (a, b) in hawkes_nll.iter().zip(&poisson_nll) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_true_nll_mean() {
        let s = simulate(&ProcessSpec::SPoisson { rate: 1.0 }, 20_000, 12).unwrap();
        let nll = true_nll(&ProcessSpec::SPoisson { rate: 1.0 }, &s).unwrap();
        assert!((mean(&nll) - 1.0).abs() < 0.02);
    }

    #[test]
    fn self_correcting_nll_is_stable_across_seeds() {
        let means: Vec<f64> = (0..3)
            .map(|seed| {
                let s = simulate(&ProcessSpec::SelfCorrecting, 20_000, 100 + seed).unwrap();
                mean(&true_nll(&ProcessSpec::SelfCorrecting, &s).unwrap())
            })
            .collect();
        assert!(means.iter().all(|m| m.is_finite()));
        let spread = means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 0.04, "{means:?}");
    }

    #[test]
    fn seeds_are_deterministic() {
        for name in ProcessSpec::PRESETS {
            let spec = ProcessSpec::preset(name).unwrap();
            let a = simulate(&spec, 500, 77).unwrap();
            let b = simulate(&spec, 500, 77).unwrap();
            let bits = |s: &EventSequence| s.timestamps().iter().map(|t| t.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b), "{name}");
        }
    }

    #[test]
    fn ks_rejects_wrong_distribution() {
        let s = simulate(&ProcessSpec::SPoisson { rate: 1.0 }, 5_000, 13).unwrap();
        let doubled: Vec<f64> = gaps(&s).iter().map(|g| 2.0 * g).collect();
        assert!(time_rescaling_ks(&doubled).p_value < 1e-6);
    }

    #[test]
    fn every_preset_passes_time_rescaling() {
        for (i, name) in ProcessSpec::PRESETS.iter().enumerate() {
            let spec = ProcessSpec::preset(name).unwrap();
            let s = simulate(&spec, 10_000, 500 + i as u64).unwrap();
            let inc = compensator_increments(&spec, &s).unwrap();
            let ks = time_rescaling_ks(&inc);
            assert!(ks.p_value > 0.01, "{name}: {ks:?}");
        }
    }

    #[test]
    fn kolmogorov_branches_agree() {
        // both series are valid everywhere; compare at the switch point
        let l: f64 = 1.18;
        let small = {
            let y = (-PI * PI / (8.0 * l * l)).exp();
            1.0 - (2.0 * PI).sqrt() / l * (y + y.powi(9) + y.powi(25) + y.powi(49))
        };
        let large = kolmogorov_q(l);
        assert!((small - large).abs() < 1e-10);
        assert!((kolmogorov_q(1.3581) - 0.05).abs() < 1e-3);
    }
}
