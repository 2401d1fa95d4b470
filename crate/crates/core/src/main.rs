use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mtts_core::checkpoint::{write_atomic, CheckpointError};
use mtts_core::config::{Config, ConfigError, ENV_OUT, ENV_SEED};
use mtts_core::corpus::{synth_corpus, CorpusError, Dataset, Split};
use mtts_core::gradcheck;
use mtts_core::trainer::{unix_now, RunDir, RunManifest, TrainError, Trainer};

/// Exit statuses.
mod code {
    pub const VERIFY: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const NUMERIC: u8 = 4;
    pub const CORRUPT: u8 = 5;
}

struct Failure(u8, String);

type Outcome = Result<(), Failure>;

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure(code::USAGE, e.to_string())
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        let c = match e {
            CorpusError::Invalid(_) => code::USAGE,
            CorpusError::Io { .. } => code::IO,
            CorpusError::Corrupt { .. } => code::CORRUPT,
        };
        Failure(c, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let c = match e {
            CheckpointError::Io { .. } => code::IO,
            CheckpointError::Corrupt { .. } => code::CORRUPT,
        };
        Failure(c, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Failure(code::NUMERIC, e.to_string()),
            TrainError::Corpus(c) => c.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Io { .. } => Failure(code::IO, e.to_string()),
            TrainError::Setup(_) | TrainError::Tensor(_) => Failure(code::USAGE, e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure(code::IO, format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "mtts", version, about = "Multi-task adversarial training for multi-speaker TTS")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus described by a config.
    SynthData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain, then run the adversarial phase.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = ENV_SEED)]
        seed: Option<u64>,
        #[arg(long, env = ENV_OUT)]
        out: Option<PathBuf>,
        /// Objective: fs2, gan or mt.
        #[arg(long)]
        mode: Option<String>,
        /// Dataset directory from synth-data; regenerated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps (the schedule is unchanged).
        #[arg(long, hide = true)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Metrics JSON path; defaults to `<ckpt>.<split>.eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the analytic gradient of one case.
        #[arg(long, hide = true)]
        perturb: Option<String>,
    },
}

fn dataset(cfg: &Config, data: Option<&Path>) -> Result<Dataset, Failure> {
    match data {
        Some(dir) => {
            let ds = Dataset::load(dir)?;
            if ds.config != cfg.corpus {
                return Err(Failure(
                    code::USAGE,
                    format!("dataset {} was generated from a different corpus config", dir.display()),
                ));
            }
            Ok(ds)
        }
        None => Ok(synth_corpus(&cfg.corpus)?),
    }
}

fn synth_data(config: &Path, out: &Path) -> Outcome {
    let (cfg, _) = Config::load(config)?;
    let ds = synth_corpus(&cfg.corpus)?;
    ds.save(out)?;
    println!("wrote {} items to {}", ds.items.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    mode: Option<String>,
    data: Option<PathBuf>,
    resume: Option<PathBuf>,
    stop_after: Option<u64>,
) -> Outcome {
    let (mut cfg, bytes) = Config::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.train.out_dir = o;
    }
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    cfg.validate()?;
    let ds = dataset(&cfg, data.as_deref())?;
    let run = RunDir::create(&cfg.train.out_dir)?;
    let mut trainer = match &resume {
        Some(ck) => {
            let mut t = Trainer::load_checkpoint(ck)?;
            t.set_run_settings(&cfg)?;
            t
        }
        None => Trainer::new(cfg.clone())?,
    };
    let mut manifest = RunManifest::start(&run, &bytes, &cfg)?;
    manifest.dataset = data;
    manifest.resumed_from = resume;
    manifest.write(&run)?;
    println!(
        "mode {} seed {}: steps {}..{} into {}",
        cfg.train.mode,
        cfg.train.seed,
        trainer.step(),
        trainer.total_steps(),
        run.0.display()
    );
    let last = trainer.run(&ds, &run, stop_after)?;
    manifest.final_checkpoint = last.clone();
    manifest.finished_unix = Some(unix_now());
    manifest.write(&run)?;
    if let Some(p) = last {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn eval(ckpt: &Path, split: &str, data: Option<PathBuf>, out: Option<PathBuf>) -> Outcome {
    let split = Split::parse(split).ok_or_else(|| {
        let valid: Vec<&str> = Split::ALL.iter().map(|s| s.name()).collect();
        Failure(
            code::USAGE,
            format!("unknown split `{split}`; valid splits: {}", valid.join(", ")),
        )
    })?;
    let trainer = Trainer::load_checkpoint(ckpt)?;
    let ds = dataset(&trainer.config, data.as_deref())?;
    let metrics = trainer.evaluate(&ds, split)?;
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    println!("{json}");
    let path = out.unwrap_or_else(|| ckpt.with_extension(format!("{}.eval.json", split.name())));
    write_atomic(&path, json.as_bytes()).map_err(|e| io_failure(&path, e))?;
    Ok(())
}

fn run_gradcheck(seed: u64, perturb: Option<String>) -> Outcome {
    let start = std::time::Instant::now();
    let results = gradcheck::run_suite(seed, perturb.as_deref()).map_err(|e| Failure(code::USAGE, e.to_string()))?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24} max_rel_err {:.3e} over {:>4} coords  {verdict}",
            r.name, r.max_rel_error, r.coordinates
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    println!(
        "{} cases, tolerance {:e}, {:.1}s",
        results.len(),
        gradcheck::TOLERANCE,
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure(code::VERIFY, format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Command::SynthData { config, out } => synth_data(&config, &out),
        Command::Train {
            config,
            seed,
            out,
            mode,
            data,
            resume,
            stop_after,
        } => train(&config, seed, out, mode, data, resume, stop_after),
        Command::Eval { ckpt, split, data, out } => eval(&ckpt, &split, data, out),
        Command::Gradcheck { seed, perturb } => run_gradcheck(seed, perturb),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(c, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(c)
        }
    }
}
