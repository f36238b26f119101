//! Command-line front end. Machine-readable results go to stdout as JSON,
//! logs and errors to stderr.
//!
//! Exit codes: 0 success, 2 usage, 3 data or format, 4 numerical abort.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::bench::run_bench;
use crate::config::KvFile;
use crate::data::{MiniTokenizer, TokenShard, BYTE_VOCAB};
use crate::error::{Error, Result};
use crate::eval::{evaluate, McTask};
use crate::fsutil::write_atomic;
use crate::infer::{generate, GenerationConfig};
use crate::model::{count_params, Model};
use crate::train::{
    checkpoint_path, mixture_sampler, train_loop, BatchSource, Checkpoint, PrefetchSource,
    RunOutputs, SystemClock, TrainConfig, Trainer,
};

pub const BUILD_ID: &str = env!("TINYLLAMA_BUILD_ID");

#[derive(Parser, Debug)]
#[command(
    name = "tinyllama",
    version,
    about = "Train, sample and score a small Llama-style model"
)]
pub struct Cli {
    /// Seed for every stochastic choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Where to write the run manifest (train defaults to <out>/manifest.json).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build or examine token shards.
    #[command(subcommand)]
    Shards(ShardsCmd),
    /// Train from a key = value config file.
    Train(TrainArgs),
    /// Continue a prompt with a checkpointed model.
    Generate(GenerateArgs),
    /// Score a multiple-choice task file.
    Eval(EvalArgs),
    /// Time training steps and decoding.
    Bench(BenchArgs),
    /// Checkpoint utilities.
    #[command(subcommand)]
    Ckpt(CkptCmd),
}

#[derive(Subcommand, Debug)]
pub enum ShardsCmd {
    /// Pack documents into a shard: one document per line of text, or one
    /// document of whitespace-separated ids per line.
    Pack {
        /// `source` or `source:subset`.
        #[arg(long)]
        tag: String,
        #[arg(long, conflicts_with = "ids", required_unless_present = "ids")]
        text: Option<PathBuf>,
        #[arg(long)]
        ids: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Subsets dropped at pack time.
        #[arg(long, value_delimiter = ',', default_value = "github")]
        exclude: Vec<String>,
        /// Largest allowed token id + 1.
        #[arg(long, default_value_t = BYTE_VOCAB)]
        vocab: usize,
    },
    /// Print tag, document and token counts.
    Inspect { files: Vec<PathBuf> },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for checkpoints, the loss log and the manifest.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Config overrides, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub total_steps: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Whitespace-separated token ids.
    #[arg(long)]
    pub prompt_ids: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f32,
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub task: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub steps: usize,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum CkptCmd {
    /// Print the header of a checkpoint.
    Inspect { file: PathBuf },
}

/// Everything needed to repeat a run.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub build_id: String,
    pub seed: Option<u64>,
    pub config: Option<String>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub outputs: Vec<PathBuf>,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let command: Vec<String> = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match dispatch(cli, command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn emit(stdout: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *stdout, value)?;
    writeln!(stdout)?;
    Ok(())
}

fn load_config(path: &Path, overrides: &[String]) -> Result<KvFile> {
    let mut kv = KvFile::load(path)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

fn read_ids(path: &Path) -> Result<Vec<Vec<u32>>> {
    crate::fsutil::read_to_string(path)?
        .lines()
        .map(|line| {
            line.split_whitespace()
                .map(|w| {
                    w.parse::<u32>().map_err(|e| {
                        Error::Format(format!("{}: bad token id {w:?}: {e}", path.display()))
                    })
                })
                .collect()
        })
        .collect()
}

fn dispatch(cli: Cli, command: Vec<String>, stdout: &mut dyn Write) -> Result<()> {
    let mut manifest = RunManifest {
        command,
        build_id: BUILD_ID.to_string(),
        seed: cli.seed,
        config: None,
        started_unix: unix_now(),
        finished_unix: None,
        outputs: Vec::new(),
    };
    let manifest_path = cli.manifest.clone();
    match cli.command {
        Command::Shards(ShardsCmd::Pack {
            tag,
            text,
            ids,
            out,
            exclude,
            vocab,
        }) => {
            let docs = match (&text, &ids) {
                (Some(t), _) => crate::fsutil::read(t)?
                    .split(|&b| b == b'\n')
                    .filter(|l| !l.is_empty())
                    .map(|l| MiniTokenizer.encode(l))
                    .collect(),
                (_, Some(i)) => read_ids(i)?,
                _ => return Err(Error::Config("one of --text or --ids is required".into())),
            };
            let shard = TokenShard::new(tag, docs);
            shard.validate(vocab)?;
            if let Some(subset) = shard.subset().filter(|s| exclude.iter().any(|e| e == s)) {
                emit(
                    stdout,
                    &json!({"skipped": true, "reason": format!("subset {subset:?} is excluded")}),
                )?;
                return Ok(());
            }
            manifest.outputs.push(out.clone());
            if let Some(p) = &manifest_path {
                manifest.write(p)?;
            }
            shard.save(&out)?;
            emit(
                stdout,
                &json!({
                    "path": out,
                    "source_tag": shard.source_tag,
                    "docs": shard.docs.len(),
                    "tokens": shard.token_count(),
                }),
            )?;
        }
        Command::Shards(ShardsCmd::Inspect { files }) => {
            if files.is_empty() {
                return Err(Error::Config("no shard files given".into()));
            }
            for f in files {
                let s = TokenShard::load(&f)?;
                emit(
                    stdout,
                    &json!({
                        "path": f,
                        "source_tag": s.source_tag,
                        "docs": s.docs.len(),
                        "tokens": s.token_count(),
                    }),
                )?;
            }
        }
        Command::Train(args) => {
            let mut kv = load_config(&args.config, &args.overrides)?;
            if let Some(seed) = cli.seed {
                kv.set("seed", seed);
            }
            if let Some(n) = args.total_steps {
                kv.set("total_steps", n);
            }
            let cfg = TrainConfig::from_kv(&kv)?;
            let resumed = args.resume.as_deref().map(Checkpoint::load).transpose()?;
            let mut sampler_state = None;
            let mut trainer = match resumed {
                Some(ck) => {
                    if ck.model != cfg.model {
                        return Err(Error::Config(
                            "checkpoint model differs from the config".into(),
                        ));
                    }
                    sampler_state = ck.sampler.clone();
                    let mut t = Trainer::from_checkpoint(ck)?;
                    t.schedule = cfg.schedule.clone();
                    t
                }
                None => Trainer::from_config(&cfg)?,
            };
            let sampler = mixture_sampler(&cfg, sampler_state)?;

            std::fs::create_dir_all(&args.out)?;
            let outputs = RunOutputs {
                checkpoint_dir: Some(args.out.clone()),
                loss_log: Some(args.out.join("loss.csv")),
            };
            manifest.config = Some(kv.to_text());
            manifest.seed = Some(cfg.seed);
            manifest.outputs = vec![args.out.clone()];
            let manifest_path = manifest_path.unwrap_or_else(|| args.out.join("manifest.json"));
            manifest.write(&manifest_path)?;

            let mut source = PrefetchSource::new(
                sampler,
                cfg.batch_tokens,
                cfg.model.context_len,
                cfg.prefetch,
            );
            let history = train_loop(
                &mut trainer,
                cfg.total_steps,
                cfg.checkpoint_every,
                cfg.log_every,
                &mut source,
                &mut SystemClock::default(),
                &outputs,
            )?;
            let report = mixture_sampler(&cfg, source.sampler_state())?.epoch_report();
            manifest.finished_unix = Some(unix_now());
            manifest.write(&manifest_path)?;
            let last = history.last();
            emit(
                stdout,
                &json!({
                    "step": trainer.step(),
                    "final_loss": last.map(|s| s.loss),
                    "checkpoint": checkpoint_path(&args.out, trainer.step()),
                    "loss_log": args.out.join("loss.csv"),
                    "epochs": report.epochs,
                    "warnings": report.warnings,
                }),
            )?;
        }
        Command::Generate(args) => {
            let ck = Checkpoint::load(&args.ckpt)?;
            let model = Model::new(ck.model, ck.params)?;
            let prompt: Vec<u32> = read_ids(&args.prompt_ids)?.concat();
            let gen = GenerationConfig {
                max_new_tokens: args.max_new,
                temperature: args.temperature,
                top_k: args.top_k,
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            let tokens = generate(&model, &prompt, &gen)?;
            let text = (model.cfg.vocab == BYTE_VOCAB)
                .then(|| MiniTokenizer.decode(&tokens).ok())
                .flatten()
                .map(|b| String::from_utf8_lossy(&b).into_owned());
            emit(
                stdout,
                &json!({"prompt": prompt, "tokens": tokens, "text": text}),
            )?;
        }
        Command::Eval(args) => {
            let ck = Checkpoint::load(&args.ckpt)?;
            let model = Model::new(ck.model, ck.params)?;
            let task = McTask::load(&args.task)?;
            emit(stdout, &evaluate(&model, &task)?)?;
        }
        Command::Bench(args) => {
            if args.steps == 0 {
                return Err(Error::Config("--steps must be at least 1".into()));
            }
            let mut kv = load_config(&args.config, &args.overrides)?;
            if let Some(seed) = cli.seed {
                kv.set("seed", seed);
            }
            if kv.raw("total_steps").is_none() {
                kv.set(
                    "total_steps",
                    args.steps.max(1) as u64 + kv.get::<u64>("warmup_steps")?.unwrap_or(2000),
                );
            }
            let cfg = TrainConfig::from_kv(&kv)?;
            if let Some(p) = &manifest_path {
                manifest.config = Some(kv.to_text());
                manifest.write(p)?;
            }
            emit(
                stdout,
                &run_bench(&cfg, args.steps, &mut SystemClock::default())?,
            )?;
        }
        Command::Ckpt(CkptCmd::Inspect { file }) => {
            let ck = Checkpoint::load(&file)?;
            emit(
                stdout,
                &json!({
                    "step": ck.step(),
                    "model": ck.model,
                    "parameters": count_params(&ck.model),
                    "schedule": ck.schedule,
                    "optimizer": ck.opt,
                    "sampler": ck.sampler,
                }),
            )?;
        }
    }
    Ok(())
}
