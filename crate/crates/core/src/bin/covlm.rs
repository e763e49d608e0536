use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::json;

use covlm::decoder::{communicative_decode, DecodeConfig};
use covlm::eval::{self, EvalConfig, MetricReport};
use covlm::grammar::{CommSequence, Vocab};
use covlm::model::Covlm;
use covlm::numerics::read_checkpoint;
use covlm::pipeline::{self, CaptionedImage, PipelineConfig};
use covlm::raster::Image;
use covlm::trainer::{train_items, TrainConfig, Trainer};
use covlm::world::{Holdout, Split, SyntheticScene};

#[derive(Parser)]
#[command(name = "covlm", version, about = "Communicative vision-language model on a synthetic micro-world")]
struct Cli {
    /// Global seed.
    #[arg(long, global = true, env = "COVLM_SEED", default_value_t = 0)]
    seed: u64,
    /// JSON file with settings for the subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Any,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Aro,
    Cola,
    Hoi,
    Refexp,
    Vqa,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes and their grounded corpus.
    GenData {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Number of held-out (subject, relation, object) tuples.
        #[arg(long, default_value_t = 24)]
        holdout: usize,
        /// Seed of the holdout draw, shared by train and test sets.
        #[arg(long, default_value_t = 0)]
        holdout_seed: u64,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long)]
        qa_fraction: Option<f64>,
    },
    /// Ground external captioned images (JSONL of {id, image, caption}).
    Ground {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus and write a checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// TrainLog JSONL destination.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        no_comm: bool,
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Decode a continuation of a prompt on an image.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the image with every detected box drawn (PPM).
        #[arg(long)]
        annotate: Option<PathBuf>,
        #[arg(long)]
        max_tokens: Option<usize>,
        #[arg(long)]
        no_comm: bool,
    },
    /// Run an evaluation protocol over scene ground truth.
    Eval {
        #[arg(long, value_enum)]
        task: Task,
        /// Scene ground-truth JSONL.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Evaluate at most this many scenes.
        #[arg(long)]
        limit: Option<usize>,
        /// Training scenes, for the Rare/Non-Rare split of `hoi`.
        #[arg(long)]
        train_scenes: Option<PathBuf>,
        #[arg(long)]
        m_prebox: Option<usize>,
        #[arg(long)]
        no_comm: bool,
    },
    /// Print a checkpoint's manifest summary.
    InspectCkpt { path: PathBuf },
}

/// Errors that deserve exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Prints a line to stdout; a closed pipe (`covlm ... | head`) is not an error.
fn emit(line: &str) -> Result<()> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{line}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load_model(path: &Path) -> Result<(Covlm, bool)> {
    if !path.exists() {
        bail!("checkpoint not found: {}", path.display());
    }
    let model = Covlm::load(path)?;
    let ck = read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    let no_comm = ck.config_snapshot.get("no_comm").and_then(|v| v.as_bool()).unwrap_or(false);
    Ok((model, no_comm))
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::GenData { n, out, holdout, holdout_seed, split, qa_fraction } => {
            let mut cfg: PipelineConfig = load_config(config)?;
            if let Some(q) = qa_fraction {
                cfg.qa_fraction = q;
            }
            let h = Holdout::sample(holdout, holdout_seed);
            let split = match split {
                SplitArg::Train => Split::Train(&h),
                SplitArg::Test => Split::Test(&h),
                SplitArg::Any => Split::Any,
            };
            let (scenes, examples, stats) = pipeline::synthetic_corpus(n, cli.seed, split, &cfg, &Vocab::synthetic());
            pipeline::write_corpus(&out, &scenes, &examples)?;
            write_json(&out.join("holdout.json"), &h)?;
            write_json(&out.join("stats.json"), &stats)?;
            emit(&serde_json::to_string(&stats)?)?;
        }
        Command::Ground { input, out } => {
            let cfg: PipelineConfig = load_config(config)?;
            let items: Vec<CaptionedImage> = pipeline::read_jsonl(&input)?;
            let base = input.parent().unwrap_or(Path::new("."));
            let (records, stats) = pipeline::ground_records(&items, base, cli.seed, &cfg, &Vocab::synthetic());
            pipeline::write_jsonl(&out, &records)?;
            emit(&serde_json::to_string(&stats)?)?;
        }
        Command::Train { data, out, log, resume, steps, batch_size, lr, lambda, no_comm, checkpoint_every } => {
            let mut cfg: TrainConfig = load_config(config)?;
            if config.is_none() || cli.seed != 0 {
                cfg.seed = cli.seed;
            }
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.lr = lr.unwrap_or(cfg.lr);
            cfg.lambda = lambda.unwrap_or(cfg.lambda);
            cfg.no_comm |= no_comm;
            cfg.checkpoint_every = checkpoint_every.unwrap_or(cfg.checkpoint_every);
            let (Some(data), Some(out)) = (data, out) else {
                return Err(UsageError("train needs --data and --out".into()).into());
            };
            cfg.check().map_err(|e| UsageError(e.to_string()))?;
            let vocab = Vocab::synthetic();
            let examples = pipeline::load_corpus(&data, &vocab)?;
            let mut trainer = match resume {
                Some(p) => Trainer::resume(&p, Some(cfg))?,
                None => Trainer::new(cfg, vocab)?,
            };
            let items = train_items(&examples, trainer.cfg.no_comm);
            let mut log_file = match &log {
                Some(p) => Some(BufWriter::new(
                    File::create(p).with_context(|| format!("creating {}", p.display()))?,
                )),
                None => None,
            };
            let logs = trainer.run(&items, log_file.as_mut().map(|w| w as &mut dyn Write), Some(&out))?;
            if let Some(mut w) = log_file {
                w.flush()?;
            }
            if let Some(last) = logs.last() {
                emit(&serde_json::to_string(last)?)?;
            }
        }
        Command::Decode { ckpt, image, prompt, out, annotate, max_tokens, no_comm } => {
            let mut cfg: DecodeConfig = load_config(config)?;
            cfg.seed = cli.seed;
            cfg.max_tokens = max_tokens.unwrap_or(cfg.max_tokens);
            let (model, trained_plain) = load_model(&ckpt)?;
            cfg.communicate &= !(no_comm || trained_plain);
            let img = Image::load_ppm(&image).with_context(|| format!("loading image {}", image.display()))?;
            let prompt = CommSequence::parse(&prompt, model.vocab()).map_err(|e| UsageError(format!("prompt: {e}")))?;
            let result = communicative_decode(&model, &img, &prompt, &cfg)?;
            write_json(&out, &result)?;
            if let Some(path) = annotate {
                let mut canvas = img.clone();
                for p in result.boxes.values() {
                    canvas.draw_box(&p.bbox, [1.0, 1.0, 1.0]);
                }
                canvas.save_ppm(&path).with_context(|| format!("writing {}", path.display()))?;
            }
            emit(&result.comm_text)?;
        }
        Command::Eval { task, data, ckpt, report, limit, train_scenes, m_prebox, no_comm } => {
            let mut cfg: EvalConfig = load_config(config)?;
            cfg.seed = cli.seed;
            cfg.decode.m_prebox = m_prebox.unwrap_or(cfg.decode.m_prebox);
            let (model, trained_plain) = load_model(&ckpt)?;
            cfg.decode.communicate &= !(no_comm || trained_plain);
            let mut scenes: Vec<SyntheticScene> = pipeline::read_jsonl(&data)?;
            if let Some(n) = limit {
                scenes.truncate(n);
            }
            let r: MetricReport = match task {
                Task::Aro => eval::eval_aro(&model, &eval::aro_items(&scenes), &cfg)?,
                Task::Cola => eval::eval_cola(&model, &eval::cola_pairs(&scenes), &cfg)?,
                Task::Hoi => {
                    let counts = match &train_scenes {
                        Some(p) => Some(eval::hoi_train_counts(&pipeline::read_jsonl(p)?)),
                        None => None,
                    };
                    eval::eval_hoi(&model, &eval::hoi_items(&scenes), counts.as_ref(), &cfg)?
                }
                Task::Refexp => eval::eval_refexp(&model, &eval::refexp_items(&scenes, cfg.seed), &cfg)?,
                Task::Vqa => eval::eval_vqa(&model, &eval::vqa_items(&scenes, cfg.seed), &cfg)?,
            };
            write_json(&report, &r)?;
            emit(&serde_json::to_string(&r.metrics)?)?;
        }
        Command::InspectCkpt { path } => {
            let ck = read_checkpoint(&path).with_context(|| format!("reading checkpoint {}", path.display()))?;
            let params: Vec<_> = ck
                .entries
                .iter()
                .filter(|e| !e.name.starts_with(covlm::numerics::Checkpoint::AUX_PREFIX))
                .map(|e| json!({"name": e.name, "shape": e.shape}))
                .collect();
            let scalars: usize = ck
                .entries
                .iter()
                .filter(|e| !e.name.starts_with(covlm::numerics::Checkpoint::AUX_PREFIX))
                .map(|e| e.shape.iter().product::<usize>())
                .sum();
            let summary = json!({
                "parameters": params,
                "num_scalars": scalars,
                "aux_entries": ck.entries.len() - params.len(),
                "config": ck.config_snapshot,
                "train_step": ck.meta.get("train_step"),
                "model": ck.meta.get("model"),
            });
            emit(&serde_json::to_string_pretty(&summary)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
