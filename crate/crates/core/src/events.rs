//! Event sequences, input encoding, train/test splitting and windowing.
//!
//! Two on-disk formats are supported:
//!
//! * plain text: one timestamp per line, one file per sequence. Blank lines
//!   and lines starting with `#` are ignored.
//! * JSON Lines: one sequence per line,
//!   `{"timestamps": [...], "t_start": 0.0, "t_end": 12.5}` with both bounds
//!   optional.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Offset added to inter-event intervals before taking the logarithm, so that
/// tied timestamps still encode to a finite value.
pub const LOG_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EventsError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("non-monotone at line {line}")]
    NonMonotone { line: usize },
    #[error("invalid sequence: {0}")]
    Invalid(String),
    #[error("cannot split a sequence of {0} events")]
    TooShortToSplit(usize),
    #[error("train fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
}

pub type Result<T> = std::result::Result<T, EventsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceFormat {
    Plain,
    Jsonl,
}

impl SequenceFormat {
    /// `.jsonl`/`.json` files are JSON Lines, everything else is plain.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => SequenceFormat::Jsonl,
            _ => SequenceFormat::Plain,
        }
    }
}

/// Ordered event times inside an observation window `[t_start, t_end]`.
///
/// Timestamps are non-decreasing; ties are kept and handled by
/// [`LOG_EPSILON`] when encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    timestamps: Vec<f64>,
    t_start: f64,
    t_end: f64,
}

impl EventSequence {
    pub fn new(timestamps: Vec<f64>, t_start: f64, t_end: f64) -> Result<Self> {
        if !t_start.is_finite() || !t_end.is_finite() || t_start > t_end {
            return Err(EventsError::Invalid(format!(
                "observation window [{t_start}, {t_end}] is not valid"
            )));
        }
        for (i, &t) in timestamps.iter().enumerate() {
            if !t.is_finite() {
                return Err(EventsError::Invalid(format!("timestamp {i} is not finite")));
            }
            if i > 0 && t < timestamps[i - 1] {
                return Err(EventsError::NonMonotone { line: i + 1 });
            }
            if t < t_start || t > t_end {
                return Err(EventsError::Invalid(format!(
                    "timestamp {t} at index {i} lies outside [{t_start}, {t_end}]"
                )));
            }
        }
        Ok(EventSequence {
            timestamps,
            t_start,
            t_end,
        })
    }

    /// Window `[0, last event]`, or `[0, 0]` when empty. Timestamps before
    /// zero pull the start back to the first event.
    pub fn from_timestamps(timestamps: Vec<f64>) -> Result<Self> {
        let t_start = timestamps.first().map_or(0.0, |&t| t.min(0.0));
        let t_end = timestamps.last().copied().unwrap_or(0.0).max(t_start);
        Self::new(timestamps, t_start, t_end)
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Inter-event intervals `t_{i+1} - t_i`, one fewer than the events.
    pub fn intervals(&self) -> Vec<f64> {
        self.timestamps.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Appends the events of `later` (which must start no earlier than this
    /// sequence ends) and widens the window.
    pub fn concat(&self, later: &EventSequence) -> Result<EventSequence> {
        let mut ts = self.timestamps.clone();
        ts.extend_from_slice(&later.timestamps);
        EventSequence::new(ts, self.t_start.min(later.t_start), self.t_end.max(later.t_end))
    }
}

/// `log(τ + ε)`.
pub fn encode_interval(tau: f64) -> f64 {
    (tau + LOG_EPSILON).ln()
}

/// One RNN input: the encoded interval ending at an event together with the
/// raw interval it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputFeature {
    pub x: f64,
    pub raw_interval: f64,
}

impl InputFeature {
    pub fn from_interval(tau: f64) -> Self {
        InputFeature {
            x: encode_interval(tau),
            raw_interval: tau,
        }
    }
}

/// The `d` most recent inputs before an event and the interval that follows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub inputs: Vec<InputFeature>,
    pub target_interval: f64,
    /// Index (0-based) into the source sequence of the event that the target
    /// interval ends at.
    pub target_index: usize,
}

impl TrainingWindow {
    pub fn depth(&self) -> usize {
        self.inputs.len()
    }
}

/// Windows whose target event index lies in `targets` (0-based, half-open).
///
/// A target at index `k` uses the intervals ending at events `k-d .. k-1`,
/// so it needs `k ≥ d + 1`. Targets without enough history are skipped.
pub fn windows_for_targets(seq: &EventSequence, depth: usize, targets: std::ops::Range<usize>) -> Vec<TrainingWindow> {
    assert!(depth > 0, "truncation depth must be positive");
    let ts = seq.timestamps();
    let start = targets.start.max(depth + 1);
    let end = targets.end.min(ts.len());
    (start..end)
        .map(|k| TrainingWindow {
            inputs: (k - depth..k)
                .map(|j| InputFeature::from_interval(ts[j] - ts[j - 1]))
                .collect(),
            target_interval: ts[k] - ts[k - 1],
            target_index: k,
        })
        .collect()
}

/// Every window of depth `d` in a sequence: `n - d - 1` of them when the
/// sequence has at least `d + 2` events, otherwise none.
pub fn make_windows(seq: &EventSequence, depth: usize) -> Vec<TrainingWindow> {
    if seq.len() < depth + 2 {
        log::warn!(
            "sequence of {} events is too short for truncation depth {depth}; no windows",
            seq.len()
        );
        return Vec::new();
    }
    windows_for_targets(seq, depth, 0..seq.len())
}

/// First `⌊n·train_frac⌋` events go to training, the rest to testing. The
/// observation window is cut at the last training event.
pub fn split_train_test(seq: &EventSequence, train_frac: f64) -> Result<(EventSequence, EventSequence)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(EventsError::BadFraction(train_frac));
    }
    let n = seq.len();
    if n < 2 {
        return Err(EventsError::TooShortToSplit(n));
    }
    let m = (n as f64 * train_frac).floor() as usize;
    let cut = if m == 0 { seq.t_start } else { seq.timestamps[m - 1] };
    let train = EventSequence::new(seq.timestamps[..m].to_vec(), seq.t_start, cut)?;
    let test = EventSequence::new(seq.timestamps[m..].to_vec(), cut, seq.t_end)?;
    Ok((train, test))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSequence {
    timestamps: Vec<f64>,
    #[serde(default)]
    t_start: Option<f64>,
    #[serde(default)]
    t_end: Option<f64>,
}

#[derive(Serialize)]
struct JsonSequenceOut<'a> {
    timestamps: &'a [f64],
    t_start: f64,
    t_end: f64,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| EventsError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses one plain-text sequence.
pub fn parse_plain(text: &str) -> Result<EventSequence> {
    let mut timestamps: Vec<f64> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let t: f64 = line.parse().map_err(|_| EventsError::Parse {
            line: idx + 1,
            message: format!("cannot parse {line:?} as a number"),
        })?;
        if !t.is_finite() {
            return Err(EventsError::Parse {
                line: idx + 1,
                message: format!("{line:?} is not finite"),
            });
        }
        if timestamps.last().is_some_and(|&prev| t < prev) {
            return Err(EventsError::NonMonotone { line: idx + 1 });
        }
        timestamps.push(t);
    }
    EventSequence::from_timestamps(timestamps)
}

/// Parses JSON Lines, one sequence per line. Blank lines and lines starting
/// with `#` are skipped.
pub fn parse_jsonl(text: &str) -> Result<Vec<EventSequence>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let obj: JsonSequence = serde_json::from_str(line).map_err(|e| EventsError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if let Some(pos) = obj.timestamps.windows(2).position(|w| w[1] < w[0]) {
            log::debug!("line {} breaks ordering at element {}", idx + 1, pos + 1);
            return Err(EventsError::NonMonotone { line: idx + 1 });
        }
        let default = EventSequence::from_timestamps(obj.timestamps.clone())?;
        let t_start = obj.t_start.unwrap_or(default.t_start);
        let t_end = obj.t_end.unwrap_or(default.t_end);
        out.push(EventSequence::new(obj.timestamps, t_start, t_end)?);
    }
    Ok(out)
}

pub fn load_sequences(path: &Path, format: SequenceFormat) -> Result<Vec<EventSequence>> {
    let text = read_to_string(path)?;
    match format {
        SequenceFormat::Plain => Ok(vec![parse_plain(&text)?]),
        SequenceFormat::Jsonl => parse_jsonl(&text),
    }
}

/// Shortest decimal form that parses back to the same `f64`.
fn format_real(t: f64) -> String {
    format!("{t:?}")
}

/// Plain text with optional `#` header lines.
pub fn to_plain(seq: &EventSequence, header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        out.push_str("# ");
        out.push_str(h);
        out.push('\n');
    }
    for &t in seq.timestamps() {
        out.push_str(&format_real(t));
        out.push('\n');
    }
    out
}

pub fn to_jsonl(seqs: &[EventSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        let line = serde_json::to_string(&JsonSequenceOut {
            timestamps: &s.timestamps,
            t_start: s.t_start,
            t_end: s.t_end,
        })
        .expect("sequences serialise");
        out.push_str(&line);
        out.push('\n');
    }
    out
}
