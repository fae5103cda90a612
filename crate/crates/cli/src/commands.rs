//! Subcommand implementations.
//!
//! Every output carries the hash of the resolved configuration and the seed:
//! as `#` header lines in text files and as fields in JSON files. The hash
//! covers every setting that can change an output and nothing else, so the
//! output directory and thread count are left out.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tpp_core::eval::{self, EvalReport};
use tpp_core::events::{self, EventSequence, SequenceFormat};
use tpp_core::hazards::{HazardConfig, HazardKind};
use tpp_core::rng;
use tpp_core::simulate::{self, ProcessSpec, SimulateError};
use tpp_core::train::{self, Checkpoint, TrainConfig};

use crate::config::{pick, require, ArchSection, FileConfig};
use crate::{CliError, Common};

/// Settings shared by every command after merging flags and file.
struct Setup {
    file: FileConfig,
    seed: u64,
    out: PathBuf,
}

fn setup(common: &Common) -> Result<Setup, CliError> {
    let file = FileConfig::load(common.config.as_deref())?;
    if let Some(n) = common.threads.or(file.threads) {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("thread pool already initialised; --threads ignored");
        }
    }
    let seed = pick(common.seed, file.seed, 0);
    let out = pick(common.out.clone(), file.out.clone(), PathBuf::from("."));
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    Ok(Setup { file, seed, out })
}

fn header(hash: &str, seed: u64) -> String {
    format!("config_hash={hash} seed={seed}")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn parse_kind(name: &str) -> Result<HazardKind, CliError> {
    name.parse().map_err(CliError::Usage)
}

fn load_data(path: &Path) -> Result<Vec<EventSequence>, CliError> {
    Ok(events::load_sequences(path, SequenceFormat::from_path(path))?)
}

/// `(history, test)` pairs for every sequence long enough to split.
fn split_all(seqs: &[EventSequence], train_frac: f64) -> Result<Vec<(EventSequence, EventSequence)>, CliError> {
    check_fraction(train_frac)?;
    let mut pairs = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        if s.len() < 2 {
            log::warn!("sequence {i} has {} events; not scored", s.len());
            continue;
        }
        pairs.push(events::split_train_test(s, train_frac)?);
    }
    Ok(pairs)
}

fn check_fraction(train_frac: f64) -> Result<(), CliError> {
    if train_frac > 0.0 && train_frac < 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "train_frac must lie in (0, 1), got {train_frac}"
        )))
    }
}

pub struct SimulateFlags {
    pub process: Option<String>,
    pub n: Option<usize>,
    pub sequences: Option<usize>,
    pub format: Option<String>,
    pub mu: Option<f64>,
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct SimulateResolved<'a> {
    command: &'static str,
    process: &'a str,
    spec: &'a ProcessSpec,
    n: usize,
    sequences: usize,
    format: SequenceFormat,
    seed: u64,
}

/// Written next to simulated data; also accepted by `--true-spec`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub process: String,
    pub spec: ProcessSpec,
    pub n: usize,
    pub sequences: usize,
    pub format: SequenceFormat,
    pub files: Vec<String>,
    /// Seed of sequence `i` is `split_seed(seed, i)`.
    pub seed: u64,
    pub config_hash: String,
}

fn process_spec(
    name: &str,
    flags: &SimulateFlags,
    file: &crate::config::SimulateSection,
) -> Result<ProcessSpec, CliError> {
    let mu = flags.mu.or(file.mu);
    let alpha = flags.alpha.clone().or_else(|| file.alpha.clone());
    let beta = flags.beta.clone().or_else(|| file.beta.clone());
    if name == "hawkes" {
        let alpha = alpha.unwrap_or_else(|| vec![0.8]);
        let beta = beta.unwrap_or_else(|| vec![1.0; alpha.len()]);
        return Ok(ProcessSpec::Hawkes {
            mu: mu.unwrap_or(0.2),
            alpha,
            beta,
        });
    }
    if mu.is_some() || alpha.is_some() || beta.is_some() {
        return Err(CliError::Usage(format!(
            "--mu/--alpha/--beta apply only to --process hawkes, not {name}"
        )));
    }
    ProcessSpec::preset(name).map_err(|e| match e {
        SimulateError::UnknownProcess(_) => CliError::Usage(format!(
            "{e}; expected one of {} or hawkes",
            ProcessSpec::PRESETS.join(", ")
        )),
        other => other.into(),
    })
}

pub fn simulate(common: &Common, flags: SimulateFlags) -> Result<(), CliError> {
    let s = setup(common)?;
    let sec = &s.file.simulate;
    let process = require(flags.process.clone(), sec.process.clone(), "process")?;
    let spec = process_spec(&process, &flags, sec)?;
    spec.validate()?;
    let n = pick(flags.n, sec.n, 100_000);
    let sequences = pick(flags.sequences, sec.sequences, 1);
    if sequences == 0 {
        return Err(CliError::Usage("--sequences must be positive".into()));
    }
    let format = match flags.format.as_deref() {
        Some("plain") => SequenceFormat::Plain,
        Some("jsonl") => SequenceFormat::Jsonl,
        Some(other) => return Err(CliError::Usage(format!("unknown format {other:?} (plain or jsonl)"))),
        None => sec.format.unwrap_or(SequenceFormat::Plain),
    };
    let hash = train::config_hash(&SimulateResolved {
        command: "simulate",
        process: &process,
        spec: &spec,
        n,
        sequences,
        format,
        seed: s.seed,
    });
    let seqs: Vec<EventSequence> = (0..sequences)
        .into_par_iter()
        .map(|i| simulate::simulate(&spec, n, rng::split_seed(s.seed, i as u64)))
        .collect::<Result<_, _>>()?;

    let head = vec![header(&hash, s.seed), format!("process={process} n={n}")];
    let mut files = Vec::new();
    match format {
        SequenceFormat::Plain => {
            for (i, seq) in seqs.iter().enumerate() {
                let name = if sequences == 1 {
                    format!("{process}.txt")
                } else {
                    format!("{process}_{i}.txt")
                };
                write_file(&s.out.join(&name), events::to_plain(seq, &head))?;
                files.push(name);
            }
        }
        SequenceFormat::Jsonl => {
            let name = format!("{process}.jsonl");
            let mut text: String = head.iter().map(|h| format!("# {h}\n")).collect();
            text.push_str(&events::to_jsonl(&seqs));
            write_file(&s.out.join(&name), text)?;
            files.push(name);
        }
    }
    let manifest = Manifest {
        process: process.clone(),
        spec,
        n,
        sequences,
        format,
        files: files.clone(),
        seed: s.seed,
        config_hash: hash,
    };
    let manifest_path = s.out.join(format!("{process}_manifest.json"));
    write_file(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    for f in &files {
        println!("wrote {}", s.out.join(f).display());
    }
    println!("wrote {}", manifest_path.display());
    Ok(())
}

pub struct FitFlags {
    pub data: Option<PathBuf>,
    pub model: Option<String>,
    pub train_frac: Option<f64>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub depth_grid: Option<Vec<usize>>,
    pub validation_fraction: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub clip_norm: Option<f64>,
}

#[derive(Serialize)]
struct FitResolved<'a> {
    command: &'static str,
    data: &'a Path,
    model: HazardKind,
    train_frac: f64,
    train: &'a TrainConfig,
    arch: &'a ArchSection,
}

fn hazard_config(kind: HazardKind, arch: &ArchSection) -> HazardConfig {
    let mut cfg = HazardConfig::new(kind);
    cfg.rnn_units = arch.rnn_units.unwrap_or(cfg.rnn_units);
    cfg.hidden_layers = arch.hidden_layers.unwrap_or(cfg.hidden_layers);
    cfg.hidden_units = arch.hidden_units.unwrap_or(cfg.hidden_units);
    cfg.bins = arch.bins.unwrap_or(cfg.bins);
    cfg
}

pub fn fit(common: &Common, flags: FitFlags) -> Result<(), CliError> {
    let s = setup(common)?;
    let sec = &s.file.fit;
    let data = require(flags.data, sec.data.clone(), "data")?;
    let kind = parse_kind(&require(flags.model, sec.model.clone(), "model")?)?;
    let train_frac = pick(flags.train_frac, sec.train_frac, 0.8);
    check_fraction(train_frac)?;
    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        learning_rate: pick(flags.learning_rate, sec.learning_rate, defaults.learning_rate),
        batch_size: pick(flags.batch_size, sec.batch_size, defaults.batch_size),
        depth_grid: pick(flags.depth_grid, sec.depth_grid.clone(), defaults.depth_grid.clone()),
        validation_fraction: pick(
            flags.validation_fraction,
            sec.validation_fraction,
            defaults.validation_fraction,
        ),
        max_epochs: pick(flags.max_epochs, sec.max_epochs, defaults.max_epochs),
        patience: pick(flags.patience, sec.patience, defaults.patience),
        clip_norm: pick(flags.clip_norm, sec.clip_norm, defaults.clip_norm),
        seed: s.seed,
        ..defaults
    };
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let hazard = hazard_config(kind, &sec.arch);
    let hash = train::config_hash(&FitResolved {
        command: "fit",
        data: &data,
        model: kind,
        train_frac,
        train: &tc,
        arch: &sec.arch,
    });

    let seqs = load_data(&data)?;
    let train_parts = seqs
        .iter()
        .map(|q| events::split_train_test(q, train_frac).map(|(tr, _)| tr))
        .collect::<Result<Vec<_>, _>>()?;
    let started = Instant::now();
    let mut output = train::fit(&train_parts, &hazard, &tc)?;
    log::info!("fit took {:.1} s", started.elapsed().as_secs_f64());
    output.checkpoint.meta.config_hash = hash.clone();

    let stem = kind.as_str();
    let ckpt = s.out.join(format!("{stem}.ckpt"));
    output.checkpoint.save(&ckpt)?;
    let mut log_csv = format!(
        "# {}\ndepth,epoch,train_nll,validation_nll,clipped\n",
        header(&hash, s.seed)
    );
    for r in &output.log {
        log_csv.push_str(&format!(
            "{},{},{:?},{:?},{}\n",
            r.depth, r.epoch, r.train_nll, r.validation_nll, r.clipped
        ));
    }
    let log_path = s.out.join(format!("{stem}_train_log.csv"));
    write_file(&log_path, log_csv)?;
    let meta = &output.checkpoint.meta;
    for r in &meta.depth_results {
        println!(
            "{stem} d={}: best validation NLL {:.5} at epoch {} of {}",
            r.depth, r.best_validation_nll, r.best_epoch, r.epochs_run
        );
    }
    println!(
        "{stem}: chose d={} (validation NLL {:.5})",
        meta.depth, meta.validation_nll
    );
    println!("wrote {}", ckpt.display());
    println!("wrote {}", log_path.display());
    Ok(())
}

fn resolve_true_spec(arg: &str) -> Result<ProcessSpec, CliError> {
    let path = Path::new(arg);
    if path.extension().is_some_and(|e| e == "json") {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        return Ok(manifest.spec);
    }
    ProcessSpec::preset(arg).map_err(|e| CliError::Usage(e.to_string()))
}

#[derive(Serialize)]
struct EvaluateResolved<'a> {
    command: &'static str,
    data: &'a Path,
    checkpoints: &'a [PathBuf],
    train_frac: f64,
    true_spec: Option<&'a ProcessSpec>,
    seed: u64,
}

fn write_comparison(out: &Path, reports: &[EvalReport], hash: &str, seed: u64) -> Result<(), CliError> {
    let rows = eval::compare(reports, seed)?;
    let head = [header(hash, seed)];
    write_file(&out.join("comparison.csv"), eval::comparison_csv(&rows, &head))?;
    let md = eval::comparison_markdown(&rows);
    write_file(&out.join("comparison.md"), format!("<!-- {} -->\n{md}", head[0]))?;
    print!("{md}");
    Ok(())
}

pub fn evaluate(
    common: &Common,
    data: Option<PathBuf>,
    checkpoints: Option<Vec<PathBuf>>,
    train_frac: Option<f64>,
    true_spec: Option<String>,
) -> Result<(), CliError> {
    let s = setup(common)?;
    let sec = &s.file.evaluate;
    let data = require(data, sec.data.clone(), "data")?;
    let checkpoints = require(checkpoints, sec.checkpoints.clone(), "checkpoints")?;
    if checkpoints.is_empty() {
        return Err(CliError::Usage("at least one checkpoint is required".into()));
    }
    let train_frac = pick(train_frac, sec.train_frac, 0.8);
    let spec = true_spec
        .or_else(|| sec.true_spec.clone())
        .map(|t| resolve_true_spec(&t))
        .transpose()?;
    let hash = train::config_hash(&EvaluateResolved {
        command: "evaluate",
        data: &data,
        checkpoints: &checkpoints,
        train_frac,
        true_spec: spec.as_ref(),
        seed: s.seed,
    });
    let pairs = split_all(&load_data(&data)?, train_frac)?;
    let head = [header(&hash, s.seed)];
    let mut reports = Vec::new();
    for path in &checkpoints {
        let ck = Checkpoint::load(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let report = eval::evaluate(&ck.model, &pairs, spec.as_ref(), &hash, s.seed)?;
        let stem = file_stem(path);
        write_file(
            &s.out.join(format!("{stem}_report.json")),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
        write_file(
            &s.out.join(format!("{stem}_events.csv")),
            eval::events_csv(&report.events, &head),
        )?;
        write_file(
            &s.out.join(format!("{stem}_blocks.csv")),
            eval::blocks_csv(&report, &head),
        )?;
        if report.non_converged > 0 {
            println!(
                "{stem}: {} of {} medians did not converge and are excluded from MAE",
                report.non_converged, report.n_events
            );
        }
        reports.push(report);
    }
    write_comparison(&s.out, &reports, &hash, s.seed)
}

#[derive(Serialize)]
struct PredictResolved<'a> {
    command: &'static str,
    data: &'a Path,
    checkpoint: &'a Path,
    train_frac: f64,
    seed: u64,
}

/// Windows are scored this many at a time and written before the next
/// batch starts.
const PREDICT_CHUNK: usize = 4096;

pub fn predict(
    common: &Common,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    train_frac: Option<f64>,
) -> Result<(), CliError> {
    let s = setup(common)?;
    let sec = &s.file.predict;
    let data = require(data, sec.data.clone(), "data")?;
    let checkpoint = require(checkpoint, sec.checkpoint.clone(), "checkpoint")?;
    let train_frac = pick(train_frac, sec.train_frac, 0.8);
    let hash = train::config_hash(&PredictResolved {
        command: "predict",
        data: &data,
        checkpoint: &checkpoint,
        train_frac,
        seed: s.seed,
    });
    let ck = Checkpoint::load(&checkpoint).map_err(|e| CliError::Runtime(format!("{}: {e}", checkpoint.display())))?;
    let model = &ck.model;
    let pairs = split_all(&load_data(&data)?, train_frac)?;

    let path = s.out.join(format!("{}_predictions.csv", file_stem(&checkpoint)));
    let file = File::create(&path).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# {}", header(&hash, s.seed))?;
    writeln!(w, "sequence,index,t_last,predicted,converged,iterations")?;
    let started = Instant::now();
    let (mut total, mut flagged) = (0usize, 0usize);
    for (sid, (history, test)) in pairs.iter().enumerate() {
        let all = history.concat(test)?;
        let ts = all.timestamps();
        let windows = events::windows_for_targets(&all, model.depth, history.len()..all.len());
        for chunk in windows.chunks(PREDICT_CHUNK) {
            let preds: Vec<_> = chunk
                .par_iter()
                .map(|win| {
                    let h = model.hidden_state(&win.inputs);
                    let t_last = ts[win.target_index - 1];
                    (
                        win.target_index,
                        t_last,
                        eval::predict_median(&model.conditioned(&h), t_last),
                    )
                })
                .collect();
            for (k, t_last, m) in preds {
                total += 1;
                flagged += usize::from(!m.converged);
                writeln!(
                    w,
                    "{sid},{k},{t_last:?},{:?},{},{}",
                    m.predicted_time, m.converged, m.iterations
                )?;
            }
        }
    }
    w.flush()?;
    let secs = started.elapsed().as_secs_f64();
    log::info!("{total} predictions in {secs:.3} s");
    println!("{total} predictions ({flagged} not converged) in {secs:.2} s");
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct ReportResolved<'a> {
    command: &'static str,
    reports: &'a [PathBuf],
    seed: u64,
}

pub fn report(common: &Common, reports: Option<Vec<PathBuf>>) -> Result<(), CliError> {
    let s = setup(common)?;
    let paths = require(reports, s.file.report.reports.clone(), "reports")?;
    if paths.is_empty() {
        return Err(CliError::Usage("at least one report is required".into()));
    }
    let hash = train::config_hash(&ReportResolved {
        command: "report",
        reports: &paths,
        seed: s.seed,
    });
    let loaded = paths
        .iter()
        .map(|p| {
            let text =
                fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<EvalReport>(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_comparison(&s.out, &loaded, &hash, s.seed)
}
