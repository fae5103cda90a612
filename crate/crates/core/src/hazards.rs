//! Hazard families conditioned on the encoder state.
//!
//! Every family provides the cumulative hazard `Φ(τ|h)` and the log hazard
//! `log φ(τ|h)` for the elapsed time `τ` since the last event. The per-event
//! negative log-likelihood is `Φ - log φ`.
//!
//! * constant: `φ = exp(v·h + b)`
//! * exponential: `φ = exp(w τ + v·h + b)`
//! * piecewise: `φ = softplus(v_j·h + b_j)` on the `j`-th of `J` bins of
//!   width `l`; the last bin extends past `τ_max`.
//! * network: `Φ = Z(τ)`, the output of a feedforward network whose weights
//!   on every path from `τ` are kept positive, and `φ = ∂Z/∂τ` built on the
//!   tape with [`derivative_subgraph`].
//!
//! Each family has two evaluators: a tape builder used for training and a
//! plain evaluator ([`ConditionedHazard`]) used for scoring and root finding.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, derivative_subgraph, feedforward, Activation, AutodiffError, Dense, Shape, Tape, Var};
use crate::events::{encode_interval, LOG_EPSILON};
use crate::params::{Constraint, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HazardKind {
    Constant,
    Exponential,
    Piecewise,
    Chfn,
}

impl HazardKind {
    pub const ALL: [HazardKind; 4] = [
        HazardKind::Constant,
        HazardKind::Exponential,
        HazardKind::Piecewise,
        HazardKind::Chfn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HazardKind::Constant => "constant",
            HazardKind::Exponential => "exponential",
            HazardKind::Piecewise => "piecewise",
            HazardKind::Chfn => "chfn",
        }
    }
}

impl fmt::Display for HazardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HazardKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HazardKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown model kind {s:?} (expected constant, exponential, piecewise or chfn)"))
    }
}

/// Architecture of a model. Serialised into checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazardConfig {
    pub kind: HazardKind,
    pub rnn_units: usize,
    /// Hidden layers of the cumulative hazard network.
    pub hidden_layers: usize,
    pub hidden_units: usize,
    /// Number of piecewise-constant bins `J`.
    #[serde(rename = "J")]
    pub bins: usize,
    /// Bin width `l = τ_max / J`.
    #[serde(rename = "l")]
    pub bin_width: f64,
    pub tau_max: f64,
}

impl HazardConfig {
    pub fn new(kind: HazardKind) -> Self {
        HazardConfig {
            kind,
            rnn_units: 64,
            hidden_layers: 2,
            hidden_units: 64,
            bins: 128,
            bin_width: 1.0 / 128.0,
            tau_max: 1.0,
        }
    }

    /// Sets `τ_max` and derives the bin width from it.
    pub fn with_tau_max(mut self, tau_max: f64) -> Self {
        assert!(tau_max > 0.0 && tau_max.is_finite(), "tau_max must be positive");
        self.tau_max = tau_max;
        self.bin_width = tau_max / self.bins as f64;
        self
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            HazardKind::Constant => 2,
            HazardKind::Exponential => 3,
            HazardKind::Piecewise => 2,
            HazardKind::Chfn => 2 * (self.hidden_layers + 1),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HazardError {
    #[error("negative elapsed time {0}")]
    NegativeTau(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Initial hazard parameters. Weights are uniform in `±1/√fan_in`, with the
/// absolute value taken for constrained entries; biases start at zero.
pub fn init_params<R: Rng>(cfg: &HazardConfig, rng: &mut R) -> Vec<Param> {
    let u = cfg.rnn_units;
    let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    match cfg.kind {
        HazardKind::Constant => vec![
            Param::uniform("hazard.v", Shape::matrix(1, u), Constraint::Free, bound(u), rng),
            Param::zeros("hazard.b", Shape::vector(1), Constraint::Free),
        ],
        HazardKind::Exponential => vec![
            Param::zeros("hazard.w_t", Shape::vector(1), Constraint::Free),
            Param::uniform("hazard.v", Shape::matrix(1, u), Constraint::Free, bound(u), rng),
            Param::zeros("hazard.b", Shape::vector(1), Constraint::Free),
        ],
        HazardKind::Piecewise => vec![
            Param::uniform("hazard.v", Shape::matrix(cfg.bins, u), Constraint::Free, bound(u), rng),
            Param::zeros("hazard.b", Shape::vector(cfg.bins), Constraint::Free),
        ],
        HazardKind::Chfn => {
            assert!(cfg.hidden_layers >= 1, "the network needs at least one hidden layer");
            let hu = cfg.hidden_units;
            let mut out = vec![
                Param::uniform(
                    "chfn.w1",
                    Shape::matrix(hu, u + 1),
                    Constraint::PositiveColumn(0),
                    bound(u + 1),
                    rng,
                ),
                Param::zeros("chfn.b1", Shape::vector(hu), Constraint::Free),
            ];
            for layer in 2..=cfg.hidden_layers {
                out.push(Param::uniform(
                    &format!("chfn.w{layer}"),
                    Shape::matrix(hu, hu),
                    Constraint::Positive,
                    bound(hu),
                    rng,
                ));
                out.push(Param::zeros(
                    &format!("chfn.b{layer}"),
                    Shape::vector(hu),
                    Constraint::Free,
                ));
            }
            out.push(Param::uniform(
                "chfn.w_out",
                Shape::matrix(1, hu),
                Constraint::Positive,
                bound(hu),
                rng,
            ));
            out.push(Param::zeros("chfn.b_out", Shape::vector(1), Constraint::Free));
            out
        }
    }
}

/// `Φ` and `log φ` as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct HazardTerms {
    pub cumulative: Var,
    pub log_hazard: Var,
}

/// Bin index (0-based) holding `τ`: bins are `((j-1)l, jl]`, `τ = 0` falls in
/// the first, anything past the last edge in the last.
pub fn bin_index(tau: f64, width: f64, bins: usize) -> usize {
    let k = (tau / width).ceil() as usize;
    k.clamp(1, bins) - 1
}

/// Coefficients `c` with `Φ(τ) = Σ_j c_j φ_j` for the piecewise family.
pub fn piecewise_coefficients(tau: f64, width: f64, bins: usize) -> Vec<f64> {
    let k = bin_index(tau, width, bins);
    let mut c = vec![0.0; bins];
    c[..k].iter_mut().for_each(|v| *v = width);
    c[k] = tau - k as f64 * width;
    c
}

/// Appends the hazard of one event to `tape`.
///
/// `vars` are the hazard's parameter leaves in [`init_params`] order and `h`
/// is the encoder state node.
pub fn build(
    tape: &mut Tape<'_>,
    cfg: &HazardConfig,
    vars: &[Var],
    tau: f64,
    h: Var,
) -> Result<HazardTerms, HazardError> {
    if tau < 0.0 || tau.is_nan() {
        return Err(HazardError::NegativeTau(tau));
    }
    let terms = match cfg.kind {
        HazardKind::Constant => {
            let vh = tape.matvec(vars[0], h);
            let lin = tape.add(vh, vars[1]);
            let rate = tape.exp(lin);
            HazardTerms {
                cumulative: tape.scale(rate, tau),
                log_hazard: lin,
            }
        }
        HazardKind::Exponential => {
            let w = vars[0];
            let vh = tape.matvec(vars[1], h);
            let lin = tape.add(vh, vars[2]);
            let wt = tape.scale(w, tau);
            let log_hazard = tape.add(wt, lin);
            let base = tape.exp(lin);
            let growth = tape.growth_integral(w, tau);
            HazardTerms {
                cumulative: tape.mul(base, growth),
                log_hazard,
            }
        }
        HazardKind::Piecewise => {
            let vh = tape.matvec(vars[0], h);
            let pre = tape.add(vh, vars[1]);
            let rates = tape.softplus(pre);
            let coeffs = piecewise_coefficients(tau, cfg.bin_width, cfg.bins);
            let c = tape.constant(Shape::vector(cfg.bins), coeffs);
            let k = bin_index(tau, cfg.bin_width, cfg.bins);
            let rate_k = tape.index(rates, k);
            HazardTerms {
                cumulative: tape.dot(c, rates),
                log_hazard: tape.log(rate_k),
            }
        }
        HazardKind::Chfn => {
            let x = tape.scalar(encode_interval(tau));
            let input = tape.concat(x, h);
            let layers = chfn_layers(cfg, vars);
            let (z, trace) = feedforward(tape, input, &layers);
            // ∂Z/∂x with x = log(τ + ε); the chain rule contributes 1/(τ + ε).
            let dz_dx = derivative_subgraph(tape, &trace, 0)?;
            let log_dz = tape.log(dz_dx);
            let jacobian = tape.scalar(-(tau + LOG_EPSILON).ln());
            HazardTerms {
                cumulative: z,
                log_hazard: tape.add(log_dz, jacobian),
            }
        }
    };
    Ok(terms)
}

fn chfn_layers(cfg: &HazardConfig, vars: &[Var]) -> Vec<Dense> {
    let n = cfg.hidden_layers + 1;
    (0..n)
        .map(|i| Dense {
            weight: vars[2 * i],
            bias: vars[2 * i + 1],
            activation: if i + 1 == n {
                Activation::Softplus
            } else {
                Activation::Tanh
            },
        })
        .collect()
}

/// `Φ - log φ`, the negated log-likelihood contribution of one event.
pub fn nll_term(tape: &mut Tape<'_>, terms: HazardTerms) -> Var {
    tape.sub(terms.cumulative, terms.log_hazard)
}

/// A hazard with the encoder state already folded in, evaluated without a
/// tape.
#[derive(Debug, Clone)]
pub enum ConditionedHazard<'a> {
    Constant {
        log_rate: f64,
    },
    Exponential {
        w: f64,
        c: f64,
    },
    Piecewise {
        rates: Vec<f64>,
        width: f64,
    },
    Chfn {
        /// First-layer pre-activation without the `τ` contribution.
        base: Vec<f64>,
        /// First-layer weights on the `τ` input.
        tau_weights: Vec<f64>,
        /// Remaining `(weight, bias)` pairs; the last one is the output.
        layers: Vec<(&'a Param, &'a Param)>,
    },
}

impl<'a> ConditionedHazard<'a> {
    pub fn new(cfg: &HazardConfig, params: &'a [Param], h: &[f64]) -> Self {
        let lin = |v: &Param, b: f64| autodiff::dot(&v.data, h) + b;
        match cfg.kind {
            HazardKind::Constant => ConditionedHazard::Constant {
                log_rate: lin(&params[0], params[1].data[0]),
            },
            HazardKind::Exponential => ConditionedHazard::Exponential {
                w: params[0].data[0],
                c: lin(&params[1], params[2].data[0]),
            },
            HazardKind::Piecewise => {
                let v = &params[0];
                let mut pre = vec![0.0; cfg.bins];
                autodiff::matvec_into(&v.data, v.shape, h, &mut pre);
                let rates = pre
                    .iter()
                    .zip(&params[1].data)
                    .map(|(p, b)| autodiff::softplus(p + b))
                    .collect();
                ConditionedHazard::Piecewise {
                    rates,
                    width: cfg.bin_width,
                }
            }
            HazardKind::Chfn => {
                let w1 = &params[0];
                let cols = w1.shape.cols;
                let mut base = params[1].data.clone();
                let mut tau_weights = Vec::with_capacity(w1.shape.rows);
                for (r, b) in base.iter_mut().enumerate() {
                    let row = &w1.data[r * cols..(r + 1) * cols];
                    tau_weights.push(row[0]);
                    *b += autodiff::dot(&row[1..], h);
                }
                let layers = params[2..].chunks(2).map(|pair| (&pair[0], &pair[1])).collect();
                ConditionedHazard::Chfn {
                    base,
                    tau_weights,
                    layers,
                }
            }
        }
    }

    pub fn cumulative(&self, tau: f64) -> f64 {
        match self {
            ConditionedHazard::Constant { log_rate } => tau * log_rate.exp(),
            ConditionedHazard::Exponential { w, c } => c.exp() * autodiff::growth_integral(*w, tau).0,
            ConditionedHazard::Piecewise { rates, width } => {
                let coeffs = piecewise_coefficients(tau, *width, rates.len());
                autodiff::dot(&coeffs, rates)
            }
            ConditionedHazard::Chfn { .. } => self.chfn_forward(tau, false).0,
        }
    }

    pub fn log_hazard(&self, tau: f64) -> f64 {
        self.evaluate(tau).1
    }

    /// `(Φ(τ), log φ(τ))`.
    pub fn evaluate(&self, tau: f64) -> (f64, f64) {
        match self {
            ConditionedHazard::Constant { log_rate } => (tau * log_rate.exp(), *log_rate),
            ConditionedHazard::Exponential { w, c } => (self.cumulative(tau), w * tau + c),
            ConditionedHazard::Piecewise { rates, width } => {
                let k = bin_index(tau, *width, rates.len());
                (self.cumulative(tau), rates[k].ln())
            }
            ConditionedHazard::Chfn { .. } => {
                let (z, dz_dx) = self.chfn_forward(tau, true);
                (z, dz_dx.ln() - (tau + LOG_EPSILON).ln())
            }
        }
    }

    pub fn nll(&self, tau: f64) -> f64 {
        let (cum, log_h) = self.evaluate(tau);
        cum - log_h
    }

    /// Network output and, when asked, its derivative with respect to the
    /// encoded input, propagated forward alongside the values.
    fn chfn_forward(&self, tau: f64, with_derivative: bool) -> (f64, f64) {
        let ConditionedHazard::Chfn {
            base,
            tau_weights,
            layers,
        } = self
        else {
            unreachable!()
        };
        let x = encode_interval(tau);
        let mut pre: Vec<f64> = base.iter().zip(tau_weights).map(|(b, w)| b + w * x).collect();
        let mut dpre: Vec<f64> = if with_derivative {
            tau_weights.clone()
        } else {
            Vec::new()
        };
        for (weight, bias) in layers {
            let act: Vec<f64> = pre.iter().map(|p| p.tanh()).collect();
            let mut next = vec![0.0; weight.shape.rows];
            autodiff::matvec_into(&weight.data, weight.shape, &act, &mut next);
            for (n, b) in next.iter_mut().zip(&bias.data) {
                *n += b;
            }
            if with_derivative {
                let dact: Vec<f64> = pre.iter().zip(&dpre).map(|(&p, d)| autodiff::sech2(p) * d).collect();
                let mut dnext = vec![0.0; weight.shape.rows];
                autodiff::matvec_into(&weight.data, weight.shape, &dact, &mut dnext);
                dpre = dnext;
            }
            pre = next;
        }
        let out = pre[0];
        let dz = if with_derivative {
            autodiff::sigmoid(out) * dpre[0]
        } else {
            0.0
        };
        (autodiff::softplus(out), dz)
    }
}
