//! Subcommand dispatch.

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use vcsl_core::probe::{grad_check_all, linear_probe, ProbeReport};
use vcsl_core::training::corpus::generate_corpus;
use vcsl_core::training::{run_stage, slice_embeddings, volume_embeddings, MetricRecord, Stage};
use vcsl_core::{Corpus64, ModelState64};

use crate::checkpoint::{fnv1a, Checkpoint};
use crate::config::{RunConfig, PAPER_PRESET};
use crate::{exit, CliError};

pub const CHECKPOINT_FILE: &str = "checkpoint.vcsl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LOCK_FILE: &str = ".vcsl.lock";

#[derive(Parser, Debug)]
#[command(name = "vcsl", version, about = "Joint slice/volume self-supervised pre-training on synthetic volumes")]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and write its manifest.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage, resuming from the checkpoint in `--out`.
    Pretrain {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a linear probe on frozen embeddings from the checkpoint.
    Probe {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Source::Volume)]
        source: Source,
    },
    /// Finite-difference check of every loss and parameter group.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the metric stream of a run directory.
    ExportMetrics {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Jsonl)]
        format: Format,
    },
    /// Print version, config schema and the paper-scale preset.
    Info,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Source {
    Slice,
    Volume,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Jsonl,
    Csv,
}

/// Entry point of the binary: real arguments, environment and streams.
pub fn run_command<I: IntoIterator<Item = OsString>>(argv: I) -> i32 {
    let seed = std::env::var("VCSL_SEED").ok();
    run_with(argv, seed.as_deref(), &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

/// Runs one invocation with an explicit `VCSL_SEED` value and output
/// streams. Returns the exit code.
pub fn run_with<I: IntoIterator<Item = OsString>>(
    argv: I,
    env_seed: Option<&str>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return exit::OK;
            }
            let _ = write!(err, "{}", e.render());
            let _ = writeln!(err, "{}", CliError::Usage(e.kind().to_string()).to_json_line());
            return exit::USAGE;
        }
    };
    match dispatch(cli, env_seed, out, err) {
        Ok(()) => exit::OK,
        Err(e) => {
            let _ = writeln!(err, "{}", e.to_json_line());
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>, env_seed: Option<&str>) -> Result<(RunConfig, &'static str), CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_json(&std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?)?,
        None => RunConfig::default(),
    };
    let source = if cfg.apply_seed_override(env_seed)? { "VCSL_SEED" } else { "config" };
    Ok((cfg, source))
}

fn dispatch(cli: Cli, env_seed: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let (cfg, seed_source) = load_config(cli.config.as_deref(), env_seed)?;
    let log = json!({
        "event": "resolved_config",
        "config": &cfg,
        "seeds": { "train": cfg.train.seed, "corpus": cfg.corpus.seed, "train_source": seed_source },
    });
    writeln!(err, "{log}").map_err(|e| CliError::io(Path::new("<stderr>"), e))?;
    let print =
        |out: &mut dyn Write, text: &str| writeln!(out, "{text}").map_err(|e| CliError::io(Path::new("<stdout>"), e));

    match cli.command {
        Command::GenCorpus { out: dir } => {
            let _lock = DirLock::acquire(&dir)?;
            let corpus = generate_corpus::<f64>(&cfg.corpus)?;
            let manifest = corpus_manifest(&cfg, &corpus);
            write_file(&dir.join("corpus.json"), &serde_json::to_string_pretty(&manifest).expect("json"))?;
            print(out, &manifest.to_string())
        }
        Command::Pretrain { stage, out: dir } => {
            let stage = Stage::try_from(stage).map_err(|_| CliError::Usage(format!("unknown stage {stage}")))?;
            let records = pretrain(&cfg, stage, &dir)?;
            let last = records.last().map(|r| r.loss);
            print(out, &json!({ "stage": stage.number(), "epochs": records.len(), "final_loss": last }).to_string())
        }
        Command::Probe { out: dir, source } => {
            let report = probe(&cfg, &dir, matches!(source, Source::Slice))?;
            print(out, &serde_json::to_string(&report).expect("json"))
        }
        Command::GradCheck { seed } => {
            let report = grad_check_all(seed)?;
            print(out, &serde_json::to_string_pretty(&report).expect("json"))?;
            let failed: Vec<String> = report.failures().iter().map(|f| format!("{}/{}", f.loss, f.group)).collect();
            if !failed.is_empty() {
                return Err(CliError::GradCheck(failed.join(", ")));
            }
            if !report.codes_detached() {
                return Err(CliError::GradCheck("detached code path".into()));
            }
            Ok(())
        }
        Command::ExportMetrics { out: dir, format } => {
            let records = read_metrics(&dir.join(METRICS_FILE))?;
            if matches!(format, Format::Csv) {
                print(out, "stage,epoch,loss,wall_ms,seed")?;
            }
            for r in records {
                let line = match format {
                    Format::Jsonl => serde_json::to_string(&r).expect("json"),
                    Format::Csv => format!("{},{},{},{},{}", r.stage, r.epoch, r.loss, r.wall_ms, r.seed),
                };
                print(out, &line)?;
            }
            Ok(())
        }
        Command::Info => print(out, &info_text()),
    }
}

/// Runs `stage` in `dir`, resuming from its checkpoint, appending metrics
/// and writing the updated checkpoint.
pub fn pretrain(cfg: &RunConfig, stage: Stage, dir: &Path) -> Result<Vec<MetricRecord>, CliError> {
    let _lock = DirLock::acquire(dir)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut state = ModelState64::new(&cfg.model_config(), cfg.train.seed)?;
    if ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        if ckpt.corpus_seed != cfg.corpus.seed {
            return Err(CliError::Prerequisite(format!(
                "checkpoint in {} was trained on corpus seed {}, config has {}",
                dir.display(),
                ckpt.corpus_seed,
                cfg.corpus.seed
            )));
        }
        ckpt.restore(&mut state)?;
    } else if stage != Stage::Slice && !cfg.train.cold_start {
        return Err(CliError::Prerequisite(format!(
            "stage {} requires a completed stage {}; no checkpoint found in {}",
            stage.number(),
            stage.number() - 1,
            dir.display()
        )));
    }
    let corpus = generate_corpus::<f64>(&cfg.corpus)?;
    let records = run_stage(stage, &mut state, corpus.volumes(), &cfg.stage_config())?;
    write_file(&dir.join("config.json"), &cfg.to_json())?;
    let metrics = dir.join(METRICS_FILE);
    let mut file =
        OpenOptions::new().create(true).append(true).open(&metrics).map_err(|e| CliError::io(&metrics, e))?;
    for r in &records {
        writeln!(file, "{}", serde_json::to_string(r).expect("json")).map_err(|e| CliError::io(&metrics, e))?;
    }
    Checkpoint::capture(&state, cfg.corpus.seed).save(&ckpt_path)?;
    Ok(records)
}

/// Probes frozen slice or volume embeddings of the checkpoint in `dir`.
pub fn probe(cfg: &RunConfig, dir: &Path, slices: bool) -> Result<ProbeReport, CliError> {
    let _lock = DirLock::acquire(dir)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    if !ckpt_path.exists() {
        return Err(CliError::Prerequisite(format!("probe requires a checkpoint in {}", dir.display())));
    }
    let mut state = ModelState64::new(&cfg.model_config(), cfg.train.seed)?;
    Checkpoint::load(&ckpt_path)?.restore(&mut state)?;
    let corpus = generate_corpus::<f64>(&cfg.corpus)?;
    let view = corpus.probe_view();
    let report = if slices {
        let n = cfg.corpus.slices;
        let labels: Vec<usize> = view.labels.iter().flat_map(|&l| std::iter::repeat_n(l, n)).collect();
        let groups: Vec<usize> = (0..labels.len()).map(|i| i / n).collect();
        linear_probe(&slice_embeddings(&state, view.volumes)?, &labels, Some(&groups), "slice", &cfg.probe)?
    } else {
        linear_probe(&volume_embeddings(&state, view.volumes)?, view.labels, None, "volume", &cfg.probe)?
    };
    let name = format!("probe-{}-stage{}.json", report.source, state.progress.stage);
    write_file(&dir.join(name), &serde_json::to_string_pretty(&report).expect("json"))?;
    Ok(report)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        let record = serde_json::from_str(&line)
            .map_err(|e| CliError::Io { path: path.to_path_buf(), message: format!("line {}: {e}", i + 1) })?;
        out.push(record);
    }
    Ok(out)
}

fn corpus_manifest(cfg: &RunConfig, corpus: &Corpus64) -> serde_json::Value {
    let mut bytes = Vec::new();
    for v in corpus.volumes() {
        for s in v.slices() {
            s.data().iter().for_each(|x| bytes.extend_from_slice(&x.to_bits().to_le_bytes()));
        }
    }
    json!({
        "spec": &cfg.corpus,
        "volumes": corpus.len(),
        "datasets": corpus.volumes().iter().map(|v| v.dataset()).max().map_or(0, |d| d + 1),
        "fingerprint": format!("{:016x}", fnv1a(&bytes)),
    })
}

fn info_text() -> String {
    let mut s =
        format!("vcsl {}\n\nconfig schema (every key optional; shown with defaults):\n", env!("CARGO_PKG_VERSION"));
    s.push_str(&RunConfig::default().to_json());
    s.push_str("\n\npaper-scale preset (not exercised by tests):\n");
    let preset: serde_json::Value = serde_json::from_str(PAPER_PRESET).expect("preset is valid JSON");
    let mut rows = Vec::new();
    flatten("", &preset, &mut rows);
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in rows.iter().filter(|(k, _)| k != "description") {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s
}

fn flatten(prefix: &str, v: &serde_json::Value, rows: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, rows);
            }
        }
        other => rows.push((prefix.to_string(), other.to_string())),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, format!("{text}\n")).map_err(|e| CliError::io(path, e))
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}
