//! Command-line front end.
//!
//! Exit codes: 0 success, 1 numeric or verification failure, 2 usage,
//! configuration, I/O or format failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{all_combos, analyze, emit_cost_table};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{load_dataset_dir, save_dataset_dir, synthesize_dataset, Dataset, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::{predict, train, Metrics};
use crate::verify::{run_cases, standard_cases, GradCheckCase, Scale};
use crate::gradcheck::DEFAULT_TOLERANCE;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERIC: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const THREADS_ENV: &str = "HAFF_THREADS";
pub const CHECKPOINT_FILE: &str = "model.hafc";
pub const LOG_FILE: &str = "train_log.jsonl";
/// Sequence length used by `--scale small` for synth/train/eval.
pub const SMALL_SEQ_LEN: usize = 512;

#[derive(Parser, Debug)]
#[command(name = "hafformer", version, about = "Hierarchical attention-free transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter and MAC accounting.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Print the full token x channel mixer grid.
        #[arg(long)]
        all_combos: bool,
    },
    /// Finite-difference verification of every block and a whole model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic train/test dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train and write a checkpoint plus a JSON-lines log.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint and print metrics as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory holding `manifest.csv` and `<id>.hafe` files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write machine-readable output to this file.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = ScaleArg::Paper)]
    scale: ScaleArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScaleArg {
    Paper,
    Small,
}

/// Captured result of one command.
#[derive(Debug, Default)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Self {
            code: EXIT_OK,
            stdout,
            stderr: String::new(),
        }
    }

    fn from_error(e: &Error) -> Self {
        Self {
            code: exit_code(e),
            stdout: String::new(),
            stderr: format!("error: {e}\n"),
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

/// Parses arguments (program name first) and runs the selected command.
pub fn run<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            return if code == EXIT_OK {
                Outcome::ok(text)
            } else {
                Outcome {
                    code,
                    stdout: String::new(),
                    stderr: text,
                }
            };
        }
    };
    let result = match cli.command {
        Command::Analyze { common, all_combos } => cmd_analyze(&common, all_combos),
        Command::Gradcheck { common } => load_config(&common).map(|cfg| {
            let scale = match common.scale {
                ScaleArg::Paper => Scale::Paper,
                ScaleArg::Small => Scale::Small,
            };
            gradcheck_outcome(&standard_cases(&cfg.model, scale))
        }),
        Command::Synth { common } => cmd_synth(&common),
        Command::Train { common } => cmd_train(&common),
        Command::Eval { common } => cmd_eval(&common),
    };
    result.unwrap_or_else(|e| Outcome::from_error(&e))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.model.seed = seed;
        cfg.synth.seed = seed;
    }
    if common.scale == ScaleArg::Small && cfg.model.seq_len > SMALL_SEQ_LEN {
        cfg.model.seq_len = SMALL_SEQ_LEN;
    }
    cfg.train.seed = cfg.model.seed;
    cfg.train.threads = threads_from_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Argument(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Argument("--out DIR is required".into()))
}

fn cmd_analyze(common: &Common, all: bool) -> Result<Outcome> {
    let cfg = load_config(common)?;
    let (text, json) = if all {
        let table = emit_cost_table(&cfg.model, &all_combos());
        (table.to_text(), table.to_json())
    } else {
        let report = analyze(&cfg.model);
        let table = emit_cost_table(&cfg.model, &[(cfg.model.token_mixer, cfg.model.channel_mixer)]);
        (report.to_text(), table.to_json())
    };
    if let Some(path) = &common.json {
        write_file(path, &(json + "\n"))?;
    }
    Ok(Outcome::ok(text))
}

/// Runs gradient-check cases and renders one line per case.
pub fn gradcheck_outcome(cases: &[GradCheckCase]) -> Outcome {
    let outcomes = run_cases(cases, DEFAULT_TOLERANCE);
    let mut stdout: String = outcomes.iter().map(|o| o.line() + "\n").collect();
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.name.as_str())
        .collect();
    if failed.is_empty() {
        stdout.push_str(&format!("all {} cases passed\n", outcomes.len()));
        Outcome::ok(stdout)
    } else {
        Outcome {
            code: EXIT_NUMERIC,
            stdout,
            stderr: format!("failing cases: {}\n", failed.join(", ")),
        }
    }
}

fn synth_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let s = &cfg.synth;
    let (n, seed) = match split {
        Split::Train => (s.train_per_class, s.seed),
        Split::Test => (s.test_per_class, s.seed.wrapping_add(1)),
    };
    let spec = SynthSpec {
        n_per_class: n,
        seed,
        difficulty: s.difficulty,
        input_dim: cfg.model.input_dim,
        max_frames: Some(cfg.model.seq_len),
    };
    let mut ds = synthesize_dataset(&spec)?;
    ds.split = split;
    Ok(ds)
}

fn cmd_synth(common: &Common) -> Result<Outcome> {
    let cfg = load_config(common)?;
    let out = require_out(common)?;
    let train = synth_split(&cfg, Split::Train)?;
    let test = synth_split(&cfg, Split::Test)?;
    save_dataset_dir(&train, &out.join("train"))?;
    save_dataset_dir(&test, &out.join("test"))?;
    Ok(Outcome::ok(format!(
        "wrote {} train and {} test records to {}\n",
        train.len(),
        test.len(),
        out.display()
    )))
}

fn dataset_for(common: &Common, cfg: &RunConfig, split: Split) -> Result<Dataset> {
    match &common.data {
        Some(dir) => load_dataset_dir(dir, split, cfg.model.input_dim),
        None if cfg.synth.enabled => synth_split(cfg, split),
        None => Err(Error::Argument(
            "--data DIR is required unless the config sets `synthetic = true`".into(),
        )),
    }
}

fn cmd_train(common: &Common) -> Result<Outcome> {
    let cfg = load_config(common)?;
    let out = require_out(common)?;
    let data = dataset_for(common, &cfg, Split::Train)?.fixed_length(cfg.model.seq_len);
    let mut model = Model::build(cfg.model.clone())?;
    let log = train(&mut model, &data, &cfg.train)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &ckpt)?;
    write_file(&out.join(LOG_FILE), &log.to_json_lines())?;
    let last = log
        .epochs
        .last()
        .map(|r| format!(", final loss {:.6}, train accuracy {:.4}", r.mean_loss, r.train_acc))
        .unwrap_or_default();
    Ok(Outcome::ok(format!(
        "trained {} epochs on {} records{last}\ncheckpoint: {}\n",
        log.epochs.len(),
        data.len(),
        ckpt.display()
    )))
}

fn cmd_eval(common: &Common) -> Result<Outcome> {
    let cfg = load_config(common)?;
    let ckpt = match (&cfg.checkpoint, &common.out) {
        (Some(p), _) => p.clone(),
        (None, Some(out)) => out.join(CHECKPOINT_FILE),
        (None, None) => {
            return Err(Error::Argument(
                "no checkpoint: set `checkpoint` in the config or pass --out DIR".into(),
            ))
        }
    };
    let model = load_checkpoint(&ckpt)?;
    let data = dataset_for(common, &cfg, Split::Test)?.fixed_length(model.config().seq_len);
    let mut labels = Vec::with_capacity(data.len());
    let mut preds = Vec::with_capacity(data.len());
    for rec in &data.records {
        labels.push(
            rec.label
                .ok_or_else(|| Error::Argument(format!("record `{}` has no label", rec.id)))?,
        );
        let fwd = model.forward_with_precision(&rec.features, cfg.precision)?;
        preds.push(predict(&fwd.logits));
    }
    let metrics = Metrics::from_predictions(&labels, &preds, model.config().num_classes)?;
    let json = serde_json::to_string(&metrics).expect("metrics serialize") + "\n";
    if let Some(path) = &common.json {
        write_file(path, &json)?;
    }
    Ok(Outcome::ok(json))
}
