//! The `omcrd` command-line driver.
//!
//! A training run directory holds:
//!
//! ```text
//! config.toml          resolved configuration (rerunnable as-is)
//! split.json           subject split used
//! epochs.jsonl         one record per fold and epoch
//! checkpoints/foldK.ckpt
//! models/foldK.model   selected peer of fold K, with heads
//! folds.json           per-fold results
//! report.txt, report.json
//! ```

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use omcrd_core::data::{make_subject_folds, synth_generate};
use omcrd_core::metrics::{compression_report, embedding_rows};
use omcrd_core::trainer::{predict, run_protocol, ProtocolObserver, TrainState};
use omcrd_core::{Dataset, Emotion, EpochLog, FoldResult, LossTerms, PeerEnsemble, SplitPlan, CLASS_COUNT};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::checkpoint::{load_checkpoint, save_checkpoint, RunIdentity};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, save_dataset};
use crate::embeddings::{save_embeddings, EmbeddingDump};
use crate::error::{Error, Result};
use crate::model_file::{export_peer_with_notes, import_peer_with_header};
use crate::report::{render_report, render_sweep, MethodRow, Report, SweepReport, SweepRow};
use crate::text::{append_epoch, load_json, save_json, EpochRecord};

#[derive(Debug, Parser)]
#[command(
    name = "omcrd",
    version,
    about = "Online multi-level contrastive representation distillation for fNIRS"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset container; overrides `paths.dataset`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Split plan; overrides `paths.split`.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset container.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a cross-subject split plan.
    Split {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the training protocol over every fold.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Number of peers; re-derives epoch and weight-decay defaults.
        #[arg(long)]
        peers: Option<usize>,
        /// Loss-term variant: full, baseline, no-kl, no-kl-cr-ch, no-kl-cr-rg.
        #[arg(long)]
        ablate: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from checkpoints in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Accuracy of an exported peer on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Copy a model file, dropping projection heads unless asked not to.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        keep_heads: bool,
    },
    /// Dump pre-projection embeddings of a dataset (or one fold's test subjects).
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, requires = "fold")]
        split: Option<PathBuf>,
        /// Fold index (0-based) whose test subjects are embedded.
        #[arg(long, requires = "split")]
        fold: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render result tables from one or more run directories.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        /// Extra method rows as NAME=RUN_DIR.
        #[arg(long = "method", value_name = "NAME=DIR")]
        methods: Vec<String>,
        /// Ablation rows as NAME=RUN_DIR.
        #[arg(long = "ablation", value_name = "NAME=DIR")]
        ablations: Vec<String>,
        /// Directory for report.txt and report.json (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with several peer counts and tabulate accuracy against M.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 3, 4])]
        peers: Vec<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Skip the independent-peer reference runs.
        #[arg(long)]
        no_baseline: bool,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth { config, out: path, seed } => {
            let mut over = Vec::new();
            if let Some(s) = seed {
                over.push(("synth.seed", int(s)?));
            }
            let cfg = RunConfig::load(config.config.as_deref(), &over)?;
            cmd_synth(&cfg, &path, out)
        }
        Command::Split {
            config,
            dataset,
            out: path,
        } => {
            let cfg = RunConfig::load(config.config.as_deref(), &[])?;
            let data = obtain_dataset(&cfg, dataset.as_deref())?;
            let split = make_subject_folds(&data, cfg.split.folds, cfg.split.train_fraction, cfg.split.seed)?;
            save_json(&path, &split)?;
            say(out, format_args!("{} folds written to {}", split.folds.len(), path.display()))
        }
        Command::Train {
            config,
            data,
            run_dir,
            peers,
            ablate,
            epochs,
            seed,
            resume,
        } => {
            let mut over = Vec::new();
            if let Some(m) = peers {
                over.push(("train.peers", int(m as u64)?));
            }
            if let Some(e) = epochs {
                over.push(("train.epochs", int(e as u64)?));
            }
            if let Some(s) = seed {
                over.push(("train.seed", int(s)?));
            }
            if let Some(name) = &ablate {
                let terms = LossTerms::from_ablation(name).ok_or_else(|| Error::Usage(format!("unknown ablation {:?}", name)))?;
                over.push(("train.terms", Value::try_from(terms).map_err(|e| Error::Config(e.to_string()))?));
            }
            if let Some(d) = &run_dir {
                over.push(("paths.run_dir", Value::String(d.display().to_string())));
            }
            if let Some(d) = &data.dataset {
                over.push(("paths.dataset", Value::String(d.display().to_string())));
            }
            if let Some(s) = &data.split {
                over.push(("paths.split", Value::String(s.display().to_string())));
            }
            let cfg = RunConfig::load(config.config.as_deref(), &over)?;
            cmd_train(&cfg, resume, out).map(|_| ())
        }
        Command::Eval { model, dataset, json } => cmd_eval(&model, &dataset, json, out),
        Command::Export {
            model,
            out: path,
            keep_heads,
        } => {
            let (peer, header) = import_peer_with_header(&model)?;
            export_peer_with_notes(&path, &peer, keep_heads, header.notes)?;
            let size = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
            say(
                out,
                format_args!(
                    "exported {} ({} heads, {} bytes)",
                    path.display(),
                    if keep_heads && peer.has_heads() { "with" } else { "without" },
                    size
                ),
            )
        }
        Command::Embed {
            model,
            dataset,
            split,
            fold,
            out: path,
        } => cmd_embed(&model, &dataset, split.as_deref().zip(fold), &path, out),
        Command::Report {
            run_dir,
            methods,
            ablations,
            out: dest,
        } => cmd_report(&run_dir, &methods, &ablations, dest.as_deref(), out),
        Command::Sweep {
            config,
            data,
            run_dir,
            peers,
            epochs,
            no_baseline,
        } => {
            let mut over = Vec::new();
            if let Some(e) = epochs {
                over.push(("train.epochs", int(e as u64)?));
            }
            if let Some(d) = &run_dir {
                over.push(("paths.run_dir", Value::String(d.display().to_string())));
            }
            if let Some(d) = &data.dataset {
                over.push(("paths.dataset", Value::String(d.display().to_string())));
            }
            if let Some(s) = &data.split {
                over.push(("paths.split", Value::String(s.display().to_string())));
            }
            let text = match &config.config {
                Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
                None => String::new(),
            };
            cmd_sweep(&text, &over, &peers, !no_baseline, out).map(|_| ())
        }
    }
}

fn int(v: u64) -> Result<Value> {
    i64::try_from(v)
        .map(Value::Integer)
        .map_err(|_| Error::Usage(format!("{} is too large", v)))
}

fn say(out: &mut dyn Write, args: std::fmt::Arguments<'_>) -> Result<()> {
    writeln!(out, "{}", args).map_err(|e| Error::io(Path::new("<stdout>"), e))
}

pub fn cmd_synth(cfg: &RunConfig, path: &Path, out: &mut dyn Write) -> Result<()> {
    let data = synth_generate(&cfg.synth)?;
    save_dataset(path, &data)?;
    let counts = data.class_counts();
    let per_class: Vec<String> = Emotion::NAMES.iter().zip(counts).map(|(n, c)| format!("{}={}", n, c)).collect();
    say(
        out,
        format_args!(
            "{} records from {} subjects ({}) written to {}",
            data.len(),
            data.subjects().len(),
            per_class.join(" "),
            path.display()
        ),
    )?;
    if cfg.synth.class_separation == 0.0 {
        say(out, format_args!("class_separation = 0: chance-level dataset"))?;
    }
    Ok(())
}

/// Loads the configured dataset or synthesizes it, and checks that it fits
/// the peer architecture.
pub fn obtain_dataset(cfg: &RunConfig, path: Option<&Path>) -> Result<Dataset> {
    let data = match path.or(cfg.paths.dataset.as_deref()) {
        Some(p) => load_dataset(p)?,
        None => synth_generate(&cfg.synth)?,
    };
    if data.channels() != cfg.peer.channels || data.samples() != cfg.peer.samples {
        return Err(Error::Config(format!(
            "dataset trials are [2][{}][{}] but peer.channels/peer.samples are {}/{}",
            data.channels(),
            data.samples(),
            cfg.peer.channels,
            cfg.peer.samples
        )));
    }
    Ok(data)
}

fn obtain_split(cfg: &RunConfig, data: &Dataset) -> Result<SplitPlan> {
    match &cfg.paths.split {
        Some(p) => load_json(p),
        None => Ok(make_subject_folds(data, cfg.split.folds, cfg.split.train_fraction, cfg.split.seed)?),
    }
}

struct RunObserver<'a> {
    dir: &'a Path,
    cfg: &'a RunConfig,
    resume: bool,
    started: Instant,
    out: &'a mut dyn Write,
}

impl RunObserver<'_> {
    fn identity(&self, fold: usize) -> RunIdentity {
        RunIdentity {
            peer: self.cfg.peer,
            train: self.cfg.train,
            fold,
        }
    }

    fn checkpoint(&self, fold: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("fold{}.ckpt", fold))
    }
}

impl ProtocolObserver<f32> for RunObserver<'_> {
    type Error = Error;

    fn resume(&mut self, fold: usize) -> Result<Option<TrainState<f32>>> {
        let path = self.checkpoint(fold);
        if self.resume && path.exists() {
            let state = load_checkpoint(&path, &self.identity(fold))?;
            say(self.out, format_args!("fold {}: resuming at epoch {}", fold + 1, state.epoch))?;
            return Ok(Some(state));
        }
        Ok(None)
    }

    fn epoch_started(&mut self, _fold: usize, _epoch: usize) {
        self.started = Instant::now();
    }

    fn epoch_finished(&mut self, fold: usize, log: &mut EpochLog, state: &TrainState<f32>) -> Result<()> {
        log.wall_time_secs = self.started.elapsed().as_secs_f64();
        append_epoch(&self.dir.join("epochs.jsonl"), &EpochRecord { fold, log: log.clone() })?;
        save_checkpoint(&self.checkpoint(fold), state, &self.identity(fold))
    }

    fn fold_finished(&mut self, result: &FoldResult, ensemble: &PeerEnsemble<f32>) -> Result<()> {
        let mut notes = serde_json::Map::new();
        notes.insert("fold".into(), result.fold.into());
        notes.insert("peer".into(), result.selected_peer.into());
        notes.insert("accuracy".into(), result.selected_accuracy.into());
        let path = self.dir.join("models").join(format!("fold{}.model", result.fold));
        export_peer_with_notes(&path, &ensemble.peers[result.selected_peer], true, notes)?;
        let accs: Vec<String> = result.peer_accuracy.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
        say(
            self.out,
            format_args!(
                "fold {}: peer accuracy [{}] %, selected peer {} ({:.2}%)",
                result.fold + 1,
                accs.join(", "),
                result.selected_peer,
                100.0 * result.selected_accuracy
            ),
        )
    }
}

/// Runs the protocol, writing the run directory; returns the fold results.
pub fn cmd_train(cfg: &RunConfig, resume: bool, out: &mut dyn Write) -> Result<Vec<FoldResult>> {
    let data = obtain_dataset(cfg, None)?;
    let split = obtain_split(cfg, &data)?;
    let dir = cfg.paths.run_dir.as_path();
    let echo = dir.join("config.toml");
    if resume && echo.exists() {
        let saved = RunConfig::load(Some(&echo), &[])?;
        if saved.peer != cfg.peer || saved.train != cfg.train {
            return Err(omcrd_core::Error::ConfigMismatch(format!(
                "{} was trained with a different configuration; rerun without --resume or with matching settings",
                dir.display()
            ))
            .into());
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::bytes::write_file(&echo, cfg.to_toml()?.as_bytes())?;
    save_json(&dir.join("split.json"), &split)?;
    let log = dir.join("epochs.jsonl");
    if !resume && log.exists() {
        std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
    }
    say(
        out,
        format_args!(
            "training {} peers ({}) for {} epochs on {} folds, {} records",
            cfg.train.peers,
            cfg.train.terms.ablation_name(),
            cfg.train.epochs,
            split.folds.len(),
            data.len()
        ),
    )?;
    let mut obs = RunObserver {
        dir,
        cfg,
        resume,
        started: Instant::now(),
        out,
    };
    let results = run_protocol::<f32, _>(&data, &split, &cfg.peer, &cfg.train, &mut obs)?;
    save_json(&dir.join("folds.json"), &results)?;
    let report = Report {
        task: data.task().name().into(),
        methods: vec![MethodRow::from_results(method_name(&cfg.train.terms), &results)?],
        compression: Some(compression_report(&cfg.peer, cfg.train.peers, true)?),
        ablations: Vec::new(),
    };
    write_report(dir, &report)?;
    say(out, format_args!("{}", render_report(&report)))?;
    Ok(results)
}

fn method_name(terms: &LossTerms) -> &'static str {
    match terms.ablation_name() {
        "full" => "OMCRD",
        "baseline" => "Baseline",
        other => other,
    }
}

fn write_report(dir: &Path, report: &Report) -> Result<()> {
    crate::bytes::write_file(&dir.join("report.txt"), render_report(report).as_bytes())?;
    save_json(&dir.join("report.json"), report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub records: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub records: usize,
    pub accuracy: Option<f64>,
}

pub fn cmd_eval(model: &Path, dataset: &Path, json: bool, out: &mut dyn Write) -> Result<()> {
    let (peer, _) = import_peer_with_header(model)?;
    let data = load_dataset(dataset)?;
    let pred = predict(&peer, &data, 256)?;
    let labels = data.labels();
    let mut hits = [0usize; CLASS_COUNT];
    let mut totals = [0usize; CLASS_COUNT];
    for (p, y) in pred.iter().zip(&labels) {
        totals[*y] += 1;
        hits[*y] += usize::from(p == y);
    }
    let summary = EvalSummary {
        records: data.len(),
        accuracy: hits.iter().sum::<usize>() as f64 / data.len() as f64,
        per_class: (0..CLASS_COUNT)
            .map(|c| ClassAccuracy {
                class: Emotion::NAMES[c].into(),
                records: totals[c],
                accuracy: (totals[c] > 0).then(|| hits[c] as f64 / totals[c] as f64),
            })
            .collect(),
    };
    if json {
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::format(model, e.to_string()))?;
        return say(out, format_args!("{}", text));
    }
    for c in &summary.per_class {
        match c.accuracy {
            Some(a) => say(out, format_args!("{:<6}{:>6} records {:>8.2}%", c.class, c.records, 100.0 * a))?,
            None => say(out, format_args!("{:<6}{:>6} records {:>9}", c.class, c.records, "-"))?,
        }
    }
    say(
        out,
        format_args!("{:<6}{:>6} records {:>8.2}%", "all", summary.records, 100.0 * summary.accuracy),
    )
}

pub fn cmd_embed(model: &Path, dataset: &Path, fold: Option<(&Path, usize)>, path: &Path, out: &mut dyn Write) -> Result<()> {
    let (peer, header) = import_peer_with_header(model)?;
    let mut data = load_dataset(dataset)?;
    let note = |k: &str| header.notes.get(k).and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let mut fold_id = note("fold");
    if let Some((split_path, f)) = fold {
        let split: SplitPlan = load_json(split_path)?;
        let (_, test) = split.fold_indices(&data, f)?;
        data = data.subset(&test)?;
        fold_id = f;
    }
    let rows = embedding_rows(&peer, note("peer"), fold_id, &data, 256)?;
    let dump = EmbeddingDump::new(rows)?;
    save_embeddings(path, &dump)?;
    say(
        out,
        format_args!(
            "{} rows (e_rg {}, e_ch {}) written to {}",
            dump.rows.len(),
            dump.rg_dim,
            dump.ch_dim,
            path.display()
        ),
    )
}

fn named_dir(spec: &str) -> Result<(&str, &Path)> {
    spec.split_once('=')
        .filter(|(n, d)| !n.is_empty() && !d.is_empty())
        .map(|(n, d)| (n, Path::new(d)))
        .ok_or_else(|| Error::Usage(format!("expected NAME=DIR, got {:?}", spec)))
}

fn run_row(name: &str, dir: &Path) -> Result<MethodRow> {
    let results: Vec<FoldResult> = load_json(&dir.join("folds.json"))?;
    MethodRow::from_results(name, &results)
}

pub fn cmd_report(run_dir: &Path, methods: &[String], ablations: &[String], dest: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(Some(&run_dir.join("config.toml")), &[])?;
    let task = match &cfg.paths.dataset {
        Some(p) => load_dataset(p)?.task(),
        None => cfg.synth.task,
    };
    let mut rows = vec![run_row(method_name(&cfg.train.terms), run_dir)?];
    for spec in methods {
        let (name, dir) = named_dir(spec)?;
        rows.push(run_row(name, dir)?);
    }
    let ablations = ablations
        .iter()
        .map(|s| named_dir(s).and_then(|(n, d)| run_row(n, d)))
        .collect::<Result<Vec<_>>>()?;
    let report = Report {
        task: task.name().into(),
        methods: rows,
        compression: Some(compression_report(&cfg.peer, cfg.train.peers, true)?),
        ablations,
    };
    write_report(dest.unwrap_or(run_dir), &report)?;
    say(out, format_args!("{}", render_report(&report)))
}

/// Trains every requested peer count (and, optionally, the independent
/// baseline with the same count) into `run_dir/m{M}[-baseline]`.
pub fn cmd_sweep(text: &str, overrides: &[(&str, Value)], peers: &[usize], baseline: bool, out: &mut dyn Write) -> Result<SweepReport> {
    if peers.is_empty() {
        return Err(Error::Usage("no peer counts given".into()));
    }
    let base = RunConfig::from_toml(text, overrides)?;
    let mut rows = Vec::with_capacity(peers.len());
    let mut task = base.synth.task.name().to_string();
    for &m in peers {
        let mut variants = vec![("OMCRD", LossTerms::FULL)];
        if baseline {
            variants.push(("Baseline", LossTerms::BASELINE));
        }
        let mut found = Vec::new();
        for (name, terms) in variants {
            let mut over = overrides.to_vec();
            over.push(("train.peers", int(m as u64)?));
            over.push(("train.terms", Value::try_from(terms).map_err(|e| Error::Config(e.to_string()))?));
            let sub = base
                .paths
                .run_dir
                .join(format!("m{}{}", m, if terms == LossTerms::FULL { "" } else { "-baseline" }));
            over.push(("paths.run_dir", Value::String(sub.display().to_string())));
            let cfg = RunConfig::from_toml(text, &over)?;
            let results = cmd_train(&cfg, false, out)?;
            if let Some(p) = &cfg.paths.dataset {
                task = load_dataset(p)?.task().name().to_string();
            }
            found.push(MethodRow::from_results(name, &results)?);
        }
        let mut it = found.into_iter();
        rows.push(SweepRow {
            peers: m,
            omcrd: it.next().expect("full variant always runs"),
            baseline: it.next(),
        });
    }
    let report = SweepReport { task, rows };
    let dir = &base.paths.run_dir;
    crate::bytes::write_file(&dir.join("sweep.txt"), render_sweep(&report).as_bytes())?;
    save_json(&dir.join("sweep.json"), &report)?;
    say(out, format_args!("{}", render_sweep(&report)))?;
    Ok(report)
}
