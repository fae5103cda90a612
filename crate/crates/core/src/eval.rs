//! Test-phase scoring: per-event negative log-likelihood, median
//! next-event prediction, MAE, standardized scores and block percentile bands.
//!
//! Test events are scored with the encoder fed from the events that precede
//! them, including the tail of the training data.

use std::f64::consts::LN_2;
use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{windows_for_targets, EventSequence, EventsError};
use crate::hazards::ConditionedHazard;
use crate::model::Model;
use crate::rng;
use crate::simulate::{self, ProcessSpec, SimulateError};

/// Events per block for percentile bands.
pub const BLOCK_SIZE: usize = 300;
/// Upper limit on the bracket for the median search, in time units.
pub const TAU_CAP: f64 = 18_446_744_073_709_551_616.0; // 2^64
const BRACKET_START: f64 = 1e-6;
const MEDIAN_TOL: f64 = 1e-9;
const TARGET_TOL: f64 = 1e-12;
const MAX_ITERATIONS: usize = 2_000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("non-finite score {value} at event {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("no test event has {needed} preceding events to condition on")]
    TooShort { needed: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Events(#[from] EventsError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedianPrediction {
    pub predicted_time: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Solves `Φ(τ) = log 2` and returns `t_last + τ`.
///
/// The bracket doubles from `1e-6` until `Φ ≥ log 2`; bisection then narrows
/// it until `|Φ - log 2| < 1e-12` or the bracket cannot shrink further. The
/// best point found counts as converged when `|Φ - log 2| < 1e-9`.
///
/// A cumulative hazard that stays below `log 2` up to [`TAU_CAP`] yields
/// `t_last + TAU_CAP`, one that is already at or above `log 2` at `τ = 0`
/// yields `t_last`; both are flagged as not converged.
pub fn predict_median(hazard: &ConditionedHazard<'_>, t_last: f64) -> MedianPrediction {
    predict_median_with(|tau| hazard.cumulative(tau), t_last)
}

/// [`predict_median`] for any non-decreasing cumulative hazard.
pub fn predict_median_with(cumulative: impl Fn(f64) -> f64, t_last: f64) -> MedianPrediction {
    let mut iterations = 0;
    let flagged = |tau: f64, iterations: usize| MedianPrediction {
        predicted_time: t_last + tau,
        converged: false,
        iterations,
    };
    let mut best = (f64::INFINITY, 0.0);
    let mut lo = 0.0;
    let mut hi = BRACKET_START;
    loop {
        iterations += 1;
        let f = cumulative(hi);
        if (f - LN_2).abs() < best.0 {
            best = ((f - LN_2).abs(), hi);
        }
        if f >= LN_2 {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > TAU_CAP {
            return flagged(TAU_CAP, iterations);
        }
    }
    if lo == 0.0 && cumulative(0.0) >= LN_2 {
        return flagged(0.0, iterations);
    }
    while best.0 >= TARGET_TOL && iterations < MAX_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        iterations += 1;
        let f = cumulative(mid);
        if (f - LN_2).abs() < best.0 {
            best = ((f - LN_2).abs(), mid);
        }
        if f < LN_2 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    MedianPrediction {
        predicted_time: t_last + best.1,
        converged: best.0 < MEDIAN_TOL,
        iterations,
    }
}

/// Scores of one test event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventScore {
    /// Position of the event in the concatenated history + test sequence.
    pub index: usize,
    pub tau: f64,
    pub nll: f64,
    pub predicted: f64,
    pub abs_error: f64,
    pub converged: bool,
}

/// Scores every test event that has at least `d + 1` predecessors in
/// `history` followed by `test`.
pub fn score_events(model: &Model, history: &EventSequence, test: &EventSequence) -> Result<Vec<EventScore>> {
    let all = history.concat(test)?;
    let first = history.len();
    let windows = windows_for_targets(&all, model.depth, first..all.len());
    if windows.is_empty() && !test.is_empty() {
        return Err(EvalError::TooShort {
            needed: model.depth + 1,
        });
    }
    let ts = all.timestamps();
    windows
        .par_iter()
        .map(|w| {
            let k = w.target_index;
            let h = model.hidden_state(&w.inputs);
            let hazard = model.conditioned(&h);
            let nll = hazard.nll(w.target_interval);
            if !nll.is_finite() {
                return Err(EvalError::NonFinite { index: k, value: nll });
            }
            let median = predict_median(&hazard, ts[k - 1]);
            Ok(EventScore {
                index: k,
                tau: w.target_interval,
                nll,
                predicted: median.predicted_time,
                abs_error: (ts[k] - median.predicted_time).abs(),
                converged: median.converged,
            })
        })
        .collect()
}

/// True-model NLL of the test events, keyed by position in the concatenated
/// sequence, for the events listed in `indices`.
pub fn true_scores(
    spec: &ProcessSpec,
    history: &EventSequence,
    test: &EventSequence,
    indices: &[usize],
) -> Result<Vec<f64>> {
    let all = history.concat(test)?;
    let nll = simulate::true_nll(spec, &all)?;
    indices
        .iter()
        .map(|&k| nll.get(k).copied().ok_or(EvalError::LengthMismatch(k, nll.len())))
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `mean(model) - mean(true)` over the same events.
pub fn standardized_score(model_nll: &[f64], true_nll: &[f64]) -> Result<f64> {
    if model_nll.len() != true_nll.len() {
        return Err(EvalError::LengthMismatch(model_nll.len(), true_nll.len()));
    }
    Ok(mean(model_nll) - mean(true_nll))
}

/// Mean absolute error over converged predictions and the number excluded.
pub fn mae(scores: &[EventScore]) -> (Option<f64>, usize) {
    let errs: Vec<f64> = scores.iter().filter(|s| s.converged).map(|s| s.abs_error).collect();
    let excluded = scores.len() - errs.len();
    ((!errs.is_empty()).then(|| mean(&errs)), excluded)
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of unsorted data.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < v.len() {
        v[i] + frac * (v[i + 1] - v[i])
    } else {
        v[i]
    }
}

/// Means of consecutive blocks of `block` values; the last block may be
/// shorter.
pub fn block_means(xs: &[f64], block: usize) -> Vec<f64> {
    xs.chunks(block).map(mean).collect()
}

/// 25th and 75th percentiles of block means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub block_size: usize,
    pub block_means: Vec<f64>,
    pub p25: f64,
    pub p75: f64,
}

impl Bands {
    pub fn new(xs: &[f64], block: usize) -> Self {
        let means = block_means(xs, block);
        Bands {
            block_size: block,
            p25: percentile(&means, 25.0),
            p75: percentile(&means, 75.0),
            block_means: means,
        }
    }
}

/// Two-sided paired sign-flip permutation test of `mean(a - b) = 0`.
pub fn paired_permutation_test(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = diffs.iter().sum::<f64>().abs();
    let mut r = rng::from_seed(seed);
    let mut extreme = 0usize;
    for _ in 0..resamples {
        let s: f64 = diffs.iter().map(|d| if r.random::<bool>() { *d } else { -*d }).sum();
        if s.abs() >= observed * (1.0 - 1e-12) {
            extreme += 1;
        }
    }
    Ok((extreme + 1) as f64 / (resamples + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub depth: usize,
    pub n_events: usize,
    pub mean_nll: f64,
    pub nll_bands: Bands,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_mean_nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub standardized_mean_nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub standardized_bands: Option<Bands>,
    pub mae: Option<f64>,
    pub non_converged: usize,
    pub config_hash: String,
    pub seed: u64,
    pub events: Vec<EventScore>,
}

impl EvalReport {
    pub fn per_event_nll(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.nll).collect()
    }
}

/// Scores the test part of every `(history, test)` pair and, when
/// `true_spec` is given, standardizes against the generating process.
/// Event scores are concatenated in pair order.
pub fn evaluate(
    model: &Model,
    pairs: &[(EventSequence, EventSequence)],
    true_spec: Option<&ProcessSpec>,
    config_hash: &str,
    seed: u64,
) -> Result<EvalReport> {
    let mut events = Vec::new();
    let mut truth = Vec::new();
    for (history, test) in pairs {
        let scored = score_events(model, history, test)?;
        if let Some(spec) = true_spec {
            let idx: Vec<usize> = scored.iter().map(|e| e.index).collect();
            truth.extend(true_scores(spec, history, test, &idx)?);
        }
        events.extend(scored);
    }
    let nll: Vec<f64> = events.iter().map(|e| e.nll).collect();
    let (mae, non_converged) = mae(&events);
    let (true_mean_nll, standardized_mean_nll, standardized_bands) = match true_spec {
        Some(_) => {
            let diff: Vec<f64> = nll.iter().zip(&truth).map(|(m, t)| m - t).collect();
            (
                Some(mean(&truth)),
                Some(standardized_score(&nll, &truth)?),
                Some(Bands::new(&diff, BLOCK_SIZE)),
            )
        }
        None => (None, None, None),
    };
    Ok(EvalReport {
        model: model.config.kind.to_string(),
        depth: model.depth,
        n_events: events.len(),
        mean_nll: mean(&nll),
        nll_bands: Bands::new(&nll, BLOCK_SIZE),
        true_mean_nll,
        standardized_mean_nll,
        standardized_bands,
        mae,
        non_converged,
        config_hash: config_hash.to_string(),
        seed,
        events,
    })
}

fn header_lines(out: &mut String, header: &[String]) {
    for h in header {
        let _ = writeln!(out, "# {h}");
    }
}

/// One row per event: `index,tau,nll,predicted,abs_error,converged`.
pub fn events_csv(events: &[EventScore], header: &[String]) -> String {
    let mut out = String::new();
    header_lines(&mut out, header);
    out.push_str("index,tau,nll,predicted,abs_error,converged\n");
    for e in events {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{}",
            e.index, e.tau, e.nll, e.predicted, e.abs_error, e.converged
        );
    }
    out
}

/// Plot-ready block scores: `block,mean_nll[,standardized]`.
pub fn blocks_csv(report: &EvalReport, header: &[String]) -> String {
    let mut out = String::new();
    header_lines(&mut out, header);
    let std = report.standardized_bands.as_ref();
    out.push_str(if std.is_some() {
        "block,mean_nll,standardized\n"
    } else {
        "block,mean_nll\n"
    });
    for (i, m) in report.nll_bands.block_means.iter().enumerate() {
        match std {
            Some(b) => {
                let _ = writeln!(out, "{i},{m:?},{:?}", b.block_means[i]);
            }
            None => {
                let _ = writeln!(out, "{i},{m:?}");
            }
        }
    }
    out
}

/// One row of a model comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub depth: usize,
    pub n_events: usize,
    pub mean_nll: f64,
    pub nll_p25: f64,
    pub nll_p75: f64,
    pub standardized: Option<f64>,
    pub standardized_p25: Option<f64>,
    pub standardized_p75: Option<f64>,
    pub mae: Option<f64>,
    pub non_converged: usize,
    /// Paired permutation p-value of this model's absolute errors against the
    /// model with the lowest MAE, over events both predicted. `None` for
    /// that model itself or when the reports cover different events.
    pub mae_p_value: Option<f64>,
}

/// Resamples used for MAE significance in [`compare`].
pub const PERMUTATION_RESAMPLES: usize = 10_000;

/// Builds comparison rows, one per report, in input order.
pub fn compare(reports: &[EvalReport], seed: u64) -> Result<Vec<ComparisonRow>> {
    let best = reports
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.mae.map(|m| (i, m)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mae_p_value = match best {
                Some(b) if b != i => {
                    let other = &reports[b];
                    let aligned = other.events.len() == r.events.len()
                        && other.events.iter().zip(&r.events).all(|(x, y)| x.index == y.index);
                    if aligned {
                        let (a, o): (Vec<f64>, Vec<f64>) = r
                            .events
                            .iter()
                            .zip(&other.events)
                            .filter(|(x, y)| x.converged && y.converged)
                            .map(|(x, y)| (x.abs_error, y.abs_error))
                            .unzip();
                        (!a.is_empty())
                            .then(|| paired_permutation_test(&a, &o, PERMUTATION_RESAMPLES, seed))
                            .transpose()?
                    } else {
                        None
                    }
                }
                _ => None,
            };
            let sb = r.standardized_bands.as_ref();
            Ok(ComparisonRow {
                model: r.model.clone(),
                depth: r.depth,
                n_events: r.n_events,
                mean_nll: r.mean_nll,
                nll_p25: r.nll_bands.p25,
                nll_p75: r.nll_bands.p75,
                standardized: r.standardized_mean_nll,
                standardized_p25: sb.map(|b| b.p25),
                standardized_p75: sb.map(|b| b.p75),
                mae: r.mae,
                non_converged: r.non_converged,
                mae_p_value,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Comparison rows as CSV. The standardized columns appear only when some
/// report has them.
pub fn comparison_csv(rows: &[ComparisonRow], header: &[String]) -> String {
    let with_std = rows.iter().any(|r| r.standardized.is_some());
    let mut out = String::new();
    header_lines(&mut out, header);
    out.push_str("model,depth,n_events,mean_nll,nll_p25,nll_p75");
    if with_std {
        out.push_str(",standardized,standardized_p25,standardized_p75");
    }
    out.push_str(",mae,non_converged,mae_p_value\n");
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{:?},{:?},{:?}",
            r.model, r.depth, r.n_events, r.mean_nll, r.nll_p25, r.nll_p75
        );
        if with_std {
            let _ = write!(
                out,
                ",{},{},{}",
                opt(r.standardized),
                opt(r.standardized_p25),
                opt(r.standardized_p75)
            );
        }
        let _ = writeln!(out, ",{},{},{}", opt(r.mae), r.non_converged, opt(r.mae_p_value));
    }
    out
}

/// Comparison rows as a Markdown table for terminals and notes.
pub fn comparison_markdown(rows: &[ComparisonRow]) -> String {
    let with_std = rows.iter().any(|r| r.standardized.is_some());
    let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let mut out = String::from("| model | d | NLL | NLL 25-75% |");
    if with_std {
        out.push_str(" standardized | std 25-75% |");
    }
    out.push_str(" MAE | p (MAE) | non-converged |\n|---|---|---|---|");
    if with_std {
        out.push_str("---|---|");
    }
    out.push_str("---|---|---|\n");
    for r in rows {
        let _ = write!(
            out,
            "| {} | {} | {:.4} | {:.4} .. {:.4} |",
            r.model, r.depth, r.mean_nll, r.nll_p25, r.nll_p75
        );
        if with_std {
            let _ = write!(
                out,
                " {} | {} .. {} |",
                f(r.standardized),
                f(r.standardized_p25),
                f(r.standardized_p75)
            );
        }
        let _ = writeln!(out, " {} | {} | {} |", f(r.mae), f(r.mae_p_value), r.non_converged);
    }
    out
}
