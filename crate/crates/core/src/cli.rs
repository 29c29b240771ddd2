//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{
    balanced_trials, generate_synthetic_corpus, held_out_split, parse_trials, write_trials, Corpus, TrialList,
    Waveform, SAMPLE_RATE, TEST_TRIALS_FILE, VALIDATION_TRIALS_FILE,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_repeated, report_text, write_scores};
use crate::pooling::PoolingMethod;
use crate::schedule::{lr_range_test, RangeSuggestion};
use crate::train::{metrics_csv, run_ablation, train_run, training_split, Checkpoint, TrainingSession, Validation};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
/// Training hit a non-finite loss or gradient.
pub const EXIT_DIVERGED: i32 = 3;
/// The range test found no descending region.
pub const EXIT_NO_DESCENT: i32 = 4;

pub const RESOLVED_CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(name = "w2v2-speaker", version, about = "Speaker recognition with a wav2vec2-style encoder")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic speaker corpus with validation and test trial lists.
    GenerateCorpus {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of speakers.
        #[arg(long, default_value_t = 20)]
        speakers: usize,
        /// Utterances per speaker.
        #[arg(long, default_value_t = 10)]
        utts: usize,
        /// Utterance length in seconds.
        #[arg(long, default_value_t = 3.0)]
        duration: f64,
        /// Seed of the synthetic voices and trial lists.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Same-speaker (and different-speaker) trials per list, at most.
        #[arg(long, default_value_t = 5000)]
        trials_per_class: usize,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train and keep the checkpoint with the best validation EER.
    Train {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep the learning rate and suggest a 7-point grid.
    LrRangeTest {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a trial list with a checkpoint.
    Evaluate {
        /// Checkpoint directory written by train.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config stored with the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the configured test trials.
        #[arg(long)]
        trials: Option<PathBuf>,
        /// Defaults to the configured corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Pooling method (overrides the config).
        #[arg(long)]
        pooling: Option<PoolingMethod>,
        /// Number of scoring passes, each with its own pooling draws.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Output directory (default: <checkpoint>/evaluation).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed of the pooling draws.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate one named ablation of a base config.
    Ablate {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Ablation name.
        name: String,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// A failed command and the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: EXIT_ERROR,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenerateCorpus {
            out,
            speakers,
            utts,
            duration,
            seed,
            trials_per_class,
            force,
        } => cmd_generate_corpus(&out, speakers, utts, duration, seed, trials_per_class, force),
        Command::Train { config, out, seed } => {
            let cfg = load_config(&config, out, seed)?;
            cmd_train(&cfg).map(|_| ())
        }
        Command::LrRangeTest { config, out, seed } => cmd_lr_range_test(&load_config(&config, out, seed)?),
        Command::Evaluate {
            checkpoint,
            config,
            trials,
            corpus,
            pooling,
            repeats,
            out,
            seed,
        } => cmd_evaluate(&EvaluateArgs {
            checkpoint,
            config,
            trials,
            corpus,
            pooling,
            repeats,
            out,
            seed,
        })
        .map(|_| ()),
        Command::Ablate { config, name, out, seed } => cmd_ablate(&load_config(&config, out, seed)?, &name),
    }
}

fn load_config(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(o) = out {
        cfg.out = Some(o);
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn required<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    v.as_ref()
        .ok_or_else(|| Error::Config(vec![format!("'{key}' must be set for this command")]))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Corpus split by the configured trial lists.
struct Data {
    corpus: Corpus,
    train: Corpus,
    validation: Option<TrialList>,
    eval_corpus: Corpus,
}

/// Utterances cut to their first `seconds`, or unchanged.
fn eval_view(corpus: &Corpus, seconds: Option<f64>) -> Result<Corpus> {
    let Some(s) = seconds else {
        return Ok(corpus.clone());
    };
    let n = (s * f64::from(SAMPLE_RATE)).round() as usize;
    Corpus::from_waveforms(
        corpus
            .utterances()
            .iter()
            .map(|w| Waveform {
                samples: w.samples[..n.min(w.len())].to_vec(),
                ..w.clone()
            })
            .collect(),
    )
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    let corpus = Corpus::load(required(&cfg.corpus, "corpus")?)?;
    let validation = cfg.validation_trials.as_deref().map(parse_trials).transpose()?;
    let test = cfg.test_trials.as_deref().map(parse_trials).transpose()?;
    let held: Vec<&TrialList> = validation.iter().chain(test.iter()).collect();
    let train = training_split(&corpus, &held);
    let eval_corpus = eval_view(&corpus, cfg.eval_crop_seconds)?;
    Ok(Data {
        corpus,
        train,
        validation,
        eval_corpus,
    })
}

pub fn cmd_generate_corpus(
    out: &Path,
    speakers: usize,
    utts: usize,
    duration: f64,
    seed: u64,
    trials_per_class: usize,
    force: bool,
) -> CmdResult {
    let non_empty = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !force {
        return Err(Error::invalid(format!(
            "{} exists and is not empty; pass --force to write into it",
            out.display()
        ))
        .into());
    }
    let corpus = generate_synthetic_corpus(out, speakers, utts, duration, seed)?;
    let entries: Vec<(usize, String, String)> = corpus
        .manifest
        .iter()
        .enumerate()
        .map(|(i, m)| (i % utts, m.utterance_id.clone(), m.speaker_id.clone()))
        .collect();
    let pick = |range: Option<std::ops::Range<usize>>| -> Vec<(String, String)> {
        entries
            .iter()
            .filter(|(u, _, _)| range.as_ref().is_none_or(|r| r.contains(u)))
            .map(|(_, id, s)| (id.clone(), s.clone()))
            .collect()
    };
    let (val, test) = match held_out_split(utts) {
        Some((v, t)) => (pick(Some(v)), pick(Some(t))),
        None => (pick(None), pick(None)),
    };
    for (k, (ids, file)) in [(val, VALIDATION_TRIALS_FILE), (test, TEST_TRIALS_FILE)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(10 + k as u64);
        let list = balanced_trials(&ids, trials_per_class, &mut rng);
        write_trials(&out.join(file), &list)?;
    }
    println!(
        "wrote {} utterances of {speakers} speakers to {}",
        corpus.manifest.len(),
        out.display()
    );
    Ok(())
}

/// Runs training and writes the resolved config, metrics log and the best
/// and final checkpoints under the configured output directory.
pub fn cmd_train(cfg: &RunConfig) -> std::result::Result<PathBuf, Failure> {
    let out = required(&cfg.out, "out")?.clone();
    create_dir(&out)?;
    cfg.write(&out.join(RESOLVED_CONFIG_FILE))?;
    let data = load_data(cfg)?;
    let validation = data.validation.as_ref().map(|trials| Validation {
        corpus: &data.eval_corpus,
        trials,
    });
    info!(
        "training on {} utterances of {} speakers",
        data.train.len(),
        data.train.speakers().len()
    );
    let outcome = train_run(&cfg.train, &data.train, validation)?;
    write_text(&out.join("metrics.csv"), &metrics_csv(&outcome.log))?;
    for (name, ckpt) in [("best", &outcome.best), ("final", &outcome.last)] {
        let dir = out.join(name);
        ckpt.save(&dir)?;
        cfg.write(&dir.join(RESOLVED_CONFIG_FILE))?;
    }
    if let Some(step) = outcome.diverged_at {
        return Err(Failure {
            code: EXIT_DIVERGED,
            message: format!("training diverged at step {step}; partial log in {}", out.display()),
        });
    }
    match outcome.best.validation_eer {
        Some(e) => println!("best validation EER {:.4} at step {}", e, outcome.best.step),
        None => println!("trained {} steps", outcome.last.step),
    }
    let _ = data.corpus;
    Ok(out)
}

pub fn cmd_lr_range_test(cfg: &RunConfig) -> CmdResult {
    let out = required(&cfg.out, "out")?;
    create_dir(out)?;
    cfg.write(&out.join(RESOLVED_CONFIG_FILE))?;
    let data = load_data(cfg)?;
    let mut session = TrainingSession::new(&cfg.train, &data.train)?;
    let result = lr_range_test(&mut session, &cfg.range_test)?;
    result.write_csv(&out.join("range_test.csv"))?;
    if let Some(k) = result.diverged_at {
        println!("loss became non-finite at step {k}; sweep stopped");
    }
    match result.suggestion {
        RangeSuggestion::Found {
            suggested_lr,
            lower,
            upper,
            grid,
        } => {
            println!("suggested lr {suggested_lr:e} (descent from {lower:e} to {upper:e})");
            let g: Vec<String> = grid.iter().map(|v| format!("{v:e}")).collect();
            println!("grid {}", g.join(" "));
            Ok(())
        }
        RangeSuggestion::NoDescent => Err(Failure {
            code: EXIT_NO_DESCENT,
            message: "no-descent: the smoothed loss never decreased; no learning rate suggested".into(),
        }),
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub trials: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub pooling: Option<PoolingMethod>,
    pub repeats: usize,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Returns the EER of each repeat.
pub fn cmd_evaluate(args: &EvaluateArgs) -> std::result::Result<Vec<f64>, Failure> {
    let cfg_path = args
        .config
        .clone()
        .unwrap_or_else(|| args.checkpoint.join(RESOLVED_CONFIG_FILE));
    let mut cfg = RunConfig::load(&cfg_path)?;
    if let Some(c) = &args.corpus {
        cfg.corpus = Some(c.clone());
    }
    if let Some(t) = &args.trials {
        cfg.test_trials = Some(t.clone());
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut model = ckpt.model(&cfg.train)?;
    if let Some(p) = args.pooling {
        model.pooling = p;
    }
    if args.repeats == 0 {
        return Err(Error::invalid("--repeats must be at least 1").into());
    }
    let trials = parse_trials(required(&cfg.test_trials, "test_trials")?)?;
    let corpus = eval_view(&Corpus::load(required(&cfg.corpus, "corpus")?)?, cfg.eval_crop_seconds)?;
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let mut rngs: Vec<ChaCha8Rng> = (0..args.repeats)
        .map(|k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(3 + k as u64);
            r
        })
        .collect();
    let evals = evaluate_repeated(&model, &trials, &corpus, &mut rngs, None)?;
    let out = args.out.clone().unwrap_or_else(|| args.checkpoint.join("evaluation"));
    create_dir(&out)?;
    let mut report = String::new();
    for (k, e) in evals.iter().enumerate() {
        let name = if evals.len() == 1 {
            "scores.txt".to_string()
        } else {
            format!("scores_{}.txt", k + 1)
        };
        write_scores(&out.join(name), &e.scores)?;
        if evals.len() > 1 {
            report.push_str(&format!("repeat {}\n", k + 1));
        }
        report.push_str(&report_text(&e.eer));
        println!("eer {:.6}", e.eer.eer);
    }
    write_text(&out.join("report.txt"), &report)?;
    Ok(evals.iter().map(|e| e.eer.eer).collect())
}

/// Trains the named ablation into `<out>/<name>` and evaluates its best
/// checkpoint on the test trials (validation trials when none are set).
pub fn cmd_ablate(base: &RunConfig, name: &str) -> CmdResult {
    let root = required(&base.out, "out")?;
    let cfg = RunConfig {
        train: run_ablation(&base.train, name)?,
        out: Some(root.join(name)),
        ..base.clone()
    };
    let out = cmd_train(&cfg)?;
    let trials = cfg.test_trials.clone().or_else(|| cfg.validation_trials.clone());
    cmd_evaluate(&EvaluateArgs {
        checkpoint: out.join("best"),
        trials: Some(required(&trials, "test_trials")?.clone()),
        repeats: 1,
        out: Some(out.join("evaluation")),
        ..EvaluateArgs::default()
    })
    .map(|_| ())
}
