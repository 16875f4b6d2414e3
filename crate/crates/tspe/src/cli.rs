//! Command-line driver for the two-stage pipeline.
//!
//! Every subcommand reads an optional JSON run configuration and applies
//! command-line flags on top (flags win), then writes its artifacts into
//! `out/{run_id}/` — `model.bin`, `losses.csv`, `predictions.json`,
//! `report.json`, `config.json` as applicable. The output root comes
//! from `--out-dir`, else the `TSPE_OUT_DIR` environment variable, else
//! `./out`; the run id defaults to the subcommand name, so repeated runs
//! with the same arguments land in the same place and produce
//! byte-identical files.
//!
//! Exit codes: 0 success, 1 usage or configuration problems, 2 malformed
//! or mismatched data, 3 numeric failures.

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use crate::artifacts::{
    load_global_model, load_local_model, read_json, save_global_model, save_local_model,
    write_json, write_losses_csv,
};
use crate::corpus::{
    audit_global_corpus, corpus_vocabulary, gen_global_corpus, gen_local_corpus, split_dataset,
    Corpus, DatasetSplit, GlobalCorpusCfg, LocalCorpusCfg,
};
use crate::decoder::GenerateOptions;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::global::{
    infer_global, init_global_model, train_global, GlobalModel, GlobalPrediction, GlobalStageCfg,
    TrainGlobalCfg,
};
use crate::local::{
    infer_local, init_local_model, instance_loss as local_instance_loss, train_local, FuseMode,
    LocalInstance, LocalModel, LocalPrediction, LocalStageCfg, TrainLocalCfg, TrainLog,
};
use crate::metrics::{evaluate_run, EvalProtocol, GoldReference, MetricReport, PredictionText};
use crate::tensor::gradcheck::gradient_check;
use crate::tensor::optim::LeafMap;
use crate::tensor::Matrix;
use crate::text::Vocabulary;

/// Decoding strategy for generation commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    /// Always pick the most likely token.
    Greedy,
    /// Sample among the `top_k` most likely tokens.
    TopK,
}

/// Which pipeline stage a data or ablation command targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    /// Clip-level event summarization.
    Local,
    /// Movie-level event attribution.
    Global,
}

/// One run configuration covering both stages.
///
/// Serialized as `config.json` next to every run's artifacts so the run
/// can be reproduced from the file alone. Unknown keys in a supplied
/// config file are rejected rather than silently ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model dimensions
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    /// Raw frame-feature width (clip stage only).
    pub frame_dim: usize,
    /// How many previous events survive the similarity prefilter
    /// (movie stage only).
    pub prefilter_k: usize,
    pub tie_embeddings: bool,
    pub share_projections: bool,
    // training
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub freeze_encoder: bool,
    /// Decoder blocks left trainable, counted from the output side.
    pub trainable_decoder_depth: usize,
    // decoding
    pub decode: DecodeMode,
    pub top_k: usize,
    pub max_new_tokens: usize,
    // data handling
    pub split: (f64, f64, f64),
    /// Seed for the movie-level split; separate from `seed` so changing
    /// the training seed cannot leak test movies into training.
    pub split_seed: u64,
    pub seed: u64,
    // ablation switches, each removing exactly one signal
    pub no_visual_attn: bool,
    pub no_text_attn: bool,
    pub no_subtitle: bool,
    pub no_kg: bool,
    pub no_prev_events: bool,
    pub no_event_prefix: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_model: 64,
            n_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            d_ff: 128,
            max_len: 64,
            frame_dim: 32,
            prefilter_k: 10,
            tie_embeddings: true,
            share_projections: true,
            steps: 200,
            batch_size: 4,
            lr: 1e-5,
            weight_decay: 0.01,
            freeze_encoder: false,
            trainable_decoder_depth: 5,
            decode: DecodeMode::Greedy,
            top_k: 4,
            max_new_tokens: 16,
            split: (0.7, 0.1, 0.2),
            split_seed: 0,
            seed: 0,
            no_visual_attn: false,
            no_text_attn: false,
            no_subtitle: false,
            no_kg: false,
            no_prev_events: false,
            no_event_prefix: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 {
            return Err(Error::Config("top-k must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.trainable_decoder_depth < 1 {
            return Err(Error::Config(
                "trainable decoder depth must be at least 1".into(),
            ));
        }
        if self.steps < 1 {
            return Err(Error::Config("step count must be at least 1".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model width {} must be a positive multiple of the head count {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Attention fusion implied by the clip-stage ablation switches.
    pub fn fuse(&self) -> FuseMode {
        match (self.no_visual_attn, self.no_text_attn) {
            (false, false) => FuseMode::Both,
            (true, false) => FuseMode::TextOnly,
            (false, true) => FuseMode::VisualOnly,
            (true, true) => FuseMode::Uniform,
        }
    }

    fn encoder_cfg(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_layers: self.encoder_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
        }
    }

    fn decoder_cfg(&self) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.decoder_layers,
            ..self.encoder_cfg()
        }
    }

    pub fn local_stage(&self) -> LocalStageCfg {
        LocalStageCfg {
            encoder: self.encoder_cfg(),
            decoder: self.decoder_cfg(),
            frame_dim: self.frame_dim,
            fuse: self.fuse(),
            share_projections: self.share_projections,
            tie_embeddings: self.tie_embeddings,
        }
    }

    pub fn global_stage(&self) -> GlobalStageCfg {
        GlobalStageCfg {
            encoder: self.encoder_cfg(),
            decoder: self.decoder_cfg(),
            prefilter_k: self.prefilter_k,
            tie_embeddings: self.tie_embeddings,
            use_kg: !self.no_kg,
            use_prev_events: !self.no_prev_events,
            use_subtitle: !self.no_subtitle,
            use_event_prefix: !self.no_event_prefix,
        }
    }

    pub fn train_local_cfg(&self) -> TrainLocalCfg {
        TrainLocalCfg {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            freeze_encoder: self.freeze_encoder,
            trainable_decoder_depth: self.trainable_decoder_depth,
            seed: self.seed,
        }
    }

    pub fn train_global_cfg(&self) -> TrainGlobalCfg {
        TrainGlobalCfg {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            freeze_encoder: self.freeze_encoder,
            trainable_decoder_depth: self.trainable_decoder_depth,
            seed: self.seed,
        }
    }

    pub fn generate_options(&self) -> GenerateOptions {
        GenerateOptions {
            max_new_tokens: self.max_new_tokens,
            top_k: match self.decode {
                DecodeMode::Greedy => 1,
                DecodeMode::TopK => self.top_k,
            },
            seed: self.seed,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tspe",
    version,
    about = "Two-stage prefix-enhanced pipeline: clip-level event summarization \
             and movie-level event attribution"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted structure.
    GenCorpus(GenCorpusArgs),
    /// Train the clip-stage summarizer.
    TrainLocal(TrainArgs),
    /// Train the movie-stage attribution model.
    TrainGlobal(TrainArgs),
    /// Generate event descriptions with a trained clip-stage model.
    InferLocal(InferArgs),
    /// Generate event reasons with a trained movie-stage model.
    InferGlobal(InferArgs),
    /// Score predictions against gold references.
    Eval(EvalArgs),
    /// Retrain and score every ablation variant of one stage.
    Ablate(AblateArgs),
    /// Verify tape gradients of both stage losses by central differences.
    Gradcheck(GradcheckArgs),
}

/// Flags shared by every command that builds or runs a model. Each flag
/// overrides the matching field of the (optional) `--config` file.
#[derive(Debug, Clone, Args, Default)]
struct ConfigArgs {
    /// JSON run-config file; flags given here override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    frame_dim: Option<usize>,
    #[arg(long)]
    prefilter_k: Option<usize>,
    #[arg(long, value_name = "BOOL")]
    tie_embeddings: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    share_projections: Option<bool>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, value_name = "BOOL")]
    freeze_encoder: Option<bool>,
    #[arg(long)]
    trainable_decoder_depth: Option<usize>,
    #[arg(long, value_enum)]
    decode: Option<DecodeMode>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Training and decoding seed (always recorded in config.json).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Remove the visual attention branch (clip stage).
    #[arg(long)]
    no_visual_attn: bool,
    /// Remove the textual attention branch (clip stage).
    #[arg(long)]
    no_text_attn: bool,
    /// Drop subtitle rows from the decoder memory (movie stage).
    #[arg(long)]
    no_subtitle: bool,
    /// Embed raw instead of knowledge-enriched event text (movie stage).
    #[arg(long)]
    no_kg: bool,
    /// Hide all previous events from the decoder (movie stage).
    #[arg(long)]
    no_prev_events: bool,
    /// Drop the pooled event-prefix token, keeping the memory (movie stage).
    #[arg(long)]
    no_event_prefix: bool,
}

impl ConfigArgs {
    /// Resolve the effective run configuration: defaults, then the
    /// config file, then explicit flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    Error::Data(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Data(format!("config {}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        macro_rules! flag {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        flag!(d_model);
        flag!(n_heads);
        flag!(encoder_layers);
        flag!(decoder_layers);
        flag!(d_ff);
        flag!(max_len);
        flag!(frame_dim);
        flag!(prefilter_k);
        flag!(tie_embeddings);
        flag!(share_projections);
        flag!(steps);
        flag!(lr);
        flag!(weight_decay);
        flag!(freeze_encoder);
        flag!(trainable_decoder_depth);
        flag!(decode);
        flag!(top_k);
        flag!(max_new_tokens);
        flag!(seed);
        flag!(split_seed);
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        // switches only turn signals off; absence keeps the config value
        cfg.no_visual_attn |= self.no_visual_attn;
        cfg.no_text_attn |= self.no_text_attn;
        cfg.no_subtitle |= self.no_subtitle;
        cfg.no_kg |= self.no_kg;
        cfg.no_prev_events |= self.no_prev_events;
        cfg.no_event_prefix |= self.no_event_prefix;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where a command writes its artifacts.
#[derive(Debug, Clone, Args, Default)]
struct OutArgs {
    /// Output root; defaults to $TSPE_OUT_DIR, then ./out.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Subdirectory under the output root; defaults to the subcommand
    /// name so identical invocations overwrite their own artifacts.
    #[arg(long)]
    run_id: Option<String>,
}

impl OutArgs {
    fn run_dir(&self, default_id: &str) -> PathBuf {
        let root = self
            .out_dir
            .clone()
            .or_else(|| std::env::var_os("TSPE_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        root.join(self.run_id.as_deref().unwrap_or(default_id))
    }
}

#[derive(Debug, Args)]
struct GenCorpusArgs {
    #[arg(long, value_enum)]
    stage: Stage,
    /// Directory to write the corpus into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total clips (clip stage).
    #[arg(long)]
    clips: Option<usize>,
    /// Movies to spread content over.
    #[arg(long)]
    movies: Option<usize>,
    /// Timesteps per clip (clip stage).
    #[arg(long)]
    timesteps: Option<usize>,
    /// Interaction/topic clusters (clip stage).
    #[arg(long)]
    clusters: Option<usize>,
    /// Raw frame feature width.
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Gaussian noise on planted frame rows (clip stage).
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Fraction of clips with a near-miss subtitle (clip stage).
    #[arg(long)]
    text_hard_frac: Option<f64>,
    /// Fraction of clips with an off-cluster planted frame (clip stage).
    #[arg(long)]
    visual_hard_frac: Option<f64>,
    /// Events per movie (movie stage).
    #[arg(long)]
    events_per_movie: Option<usize>,
    /// Fraction of non-first events that carry a gold reason (movie stage).
    #[arg(long)]
    reason_frac: Option<f64>,
    /// Closest the planted cause may sit, in events (movie stage).
    #[arg(long)]
    cause_lag_min: Option<usize>,
    /// Farthest the planted cause may sit, in events (movie stage).
    #[arg(long)]
    cause_lag_max: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Corpus directory (as written by gen-corpus).
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Corpus directory (as written by gen-corpus).
    #[arg(long)]
    data: PathBuf,
    /// Which split part to run on.
    #[arg(long, default_value = "test", value_parser = ["train", "validation", "test"])]
    part: String,
    /// Clip-stage predictions whose texts replace the gold event
    /// descriptions (movie stage; enables end-to-end evaluation).
    #[arg(long)]
    descriptions: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// predictions.json produced by an infer command.
    #[arg(long)]
    predictions: PathBuf,
    /// gold.json references aligned by id.
    #[arg(long)]
    gold: PathBuf,
    /// Scoring protocol: `local` strips the interaction phrase and names
    /// before scoring against topic references; `global` scores as-is.
    #[arg(long, value_enum)]
    protocol: Stage,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    stage: Stage,
    /// Corpus directory (as written by gen-corpus).
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Model width of the miniature check model.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Timesteps in the synthetic clip.
    #[arg(long, default_value_t = 5)]
    timesteps: usize,
    /// Vocabulary size of the miniature models.
    #[arg(long, default_value_t = 50)]
    vocab: usize,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 3)]
    samples: usize,
    /// Central-difference step. The layer norms give both losses a steep
    /// third derivative, so the step must sit where ~eps^2 truncation
    /// error and ~1/eps round-off error are both far below the 1e-6 gate.
    #[arg(long, default_value_t = 3e-7)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parse `std::env::args` and run; returns the process exit code.
pub fn run() -> i32 {
    run_with_args(std::env::args_os())
}

/// Testable entry point taking explicit arguments.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus(args) => cmd_gen_corpus(&args),
        Command::TrainLocal(args) => cmd_train_local(&args),
        Command::TrainGlobal(args) => cmd_train_global(&args),
        Command::InferLocal(args) => cmd_infer_local(&args),
        Command::InferGlobal(args) => cmd_infer_global(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
    }
}

fn cmd_gen_corpus(args: &GenCorpusArgs) -> Result<()> {
    let corpus = match args.stage {
        Stage::Local => {
            let mut cfg = LocalCorpusCfg::default();
            if let Some(v) = args.clips {
                cfg.n_clips = v;
            }
            if let Some(v) = args.movies {
                cfg.n_movies = v;
            }
            if let Some(v) = args.timesteps {
                cfg.t = v;
            }
            if let Some(v) = args.clusters {
                cfg.n_clusters = v;
            }
            if let Some(v) = args.feature_dim {
                cfg.feature_dim = v;
            }
            if let Some(v) = args.noise_sigma {
                cfg.noise_sigma = v;
            }
            if let Some(v) = args.text_hard_frac {
                cfg.text_hard_frac = v;
            }
            if let Some(v) = args.visual_hard_frac {
                cfg.visual_hard_frac = v;
            }
            gen_local_corpus(&cfg, args.seed)?
        }
        Stage::Global => {
            let mut cfg = GlobalCorpusCfg::default();
            if let Some(v) = args.movies {
                cfg.n_movies = v;
            }
            if let Some(v) = args.events_per_movie {
                cfg.events_per_movie = v;
            }
            if let Some(v) = args.reason_frac {
                cfg.reason_frac = v;
            }
            if let Some(v) = args.feature_dim {
                cfg.feature_dim = v;
            }
            if let Some(v) = args.cause_lag_min {
                cfg.cause_lag.0 = v;
            }
            if let Some(v) = args.cause_lag_max {
                cfg.cause_lag.1 = v;
            }
            let corpus = gen_global_corpus(&cfg, args.seed)?;
            let audit = audit_global_corpus(&corpus)?;
            if audit.bridged_frac < 1.0 {
                log::warn!(
                    "enrichment bridge audit below guarantee: {:.1}% of {} pairs",
                    100.0 * audit.bridged_frac,
                    audit.pairs
                );
            } else {
                log::info!("enrichment bridge audit: all {} planted pairs bridged", audit.pairs);
            }
            corpus
        }
    };
    corpus.save(&args.out)?;
    let clips: usize = corpus.movies.iter().map(|m| m.clips.len()).sum();
    let vocab = corpus_vocabulary(&corpus);
    println!(
        "wrote {} movies / {} clips to {} (vocabulary {} tokens, seed {})",
        corpus.movies.len(),
        clips,
        args.out.display(),
        vocab.len(),
        args.seed
    );
    Ok(())
}

/// Report written after a training run.
#[derive(Debug, Serialize, Deserialize)]
struct TrainReport {
    command: String,
    seed: u64,
    steps: usize,
    train_movies: usize,
    parameters: usize,
    initial_loss: f64,
    final_loss: f64,
}

fn load_split(data: &Path, cfg: &RunConfig) -> Result<(Corpus, DatasetSplit)> {
    let corpus = Corpus::load(data)?;
    corpus.validate()?;
    let split = split_dataset(&corpus.movies, cfg.split, cfg.split_seed)?;
    Ok((corpus, split))
}

fn write_train_artifacts(
    dir: &Path,
    cfg: &RunConfig,
    report: &TrainReport,
    log: &TrainLog,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_losses_csv(&dir.join("losses.csv"), &log.losses)?;
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("report.json"), report)?;
    Ok(())
}

fn cmd_train_local(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    log::info!("clip-stage training with seed {}", cfg.seed);
    let (corpus, split) = load_split(&args.data, &cfg)?;
    let vocab = corpus_vocabulary(&corpus);
    let mut model = init_local_model(cfg.local_stage(), vocab, cfg.seed)?;
    let log = train_local(&mut model, &corpus, &split.train, &cfg.train_local_cfg())?;
    let report = TrainReport {
        command: "train-local".into(),
        seed: cfg.seed,
        steps: log.losses.len(),
        train_movies: split.train.len(),
        parameters: model.params.scalar_count(),
        initial_loss: log.losses.first().copied().unwrap_or(f64::NAN),
        final_loss: log.losses.last().copied().unwrap_or(f64::NAN),
    };
    let dir = args.out.run_dir("train-local");
    write_train_artifacts(&dir, &cfg, &report, &log)?;
    save_local_model(&dir.join("model.bin"), &model)?;
    println!(
        "trained {} steps on {} movies: loss {:.4} -> {:.4}; artifacts in {}",
        report.steps,
        report.train_movies,
        report.initial_loss,
        report.final_loss,
        dir.display()
    );
    Ok(())
}

fn cmd_train_global(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    log::info!("movie-stage training with seed {}", cfg.seed);
    let (corpus, split) = load_split(&args.data, &cfg)?;
    let vocab = corpus_vocabulary(&corpus);
    let mut model = init_global_model(cfg.global_stage(), vocab, cfg.seed)?;
    let log = train_global(&mut model, &corpus, &split.train, &cfg.train_global_cfg())?;
    let report = TrainReport {
        command: "train-global".into(),
        seed: cfg.seed,
        steps: log.losses.len(),
        train_movies: split.train.len(),
        parameters: model.params.scalar_count(),
        initial_loss: log.losses.first().copied().unwrap_or(f64::NAN),
        final_loss: log.losses.last().copied().unwrap_or(f64::NAN),
    };
    let dir = args.out.run_dir("train-global");
    write_train_artifacts(&dir, &cfg, &report, &log)?;
    save_global_model(&dir.join("model.bin"), &model)?;
    println!(
        "trained {} steps on {} movies: loss {:.4} -> {:.4}; artifacts in {}",
        report.steps,
        report.train_movies,
        report.initial_loss,
        report.final_loss,
        dir.display()
    );
    Ok(())
}

/// Clip-stage predictions reshaped for scoring, plus aligned references.
fn local_eval_rows(
    preds: &[LocalPrediction],
) -> (Vec<PredictionText>, Vec<GoldReference>) {
    let texts = preds
        .iter()
        .map(|p| PredictionText {
            id: p.event_id.clone(),
            text: p.prediction.clone(),
            phrase: Some(p.phrase.clone()),
            names: vec![p.subject.clone(), p.object.clone()],
        })
        .collect();
    let gold = preds
        .iter()
        .map(|p| GoldReference {
            id: p.event_id.clone(),
            text: p.topic.clone(),
        })
        .collect();
    (texts, gold)
}

fn global_eval_rows(
    preds: &[GlobalPrediction],
) -> (Vec<PredictionText>, Vec<GoldReference>) {
    let texts = preds
        .iter()
        .map(|p| PredictionText {
            id: p.event_id.clone(),
            text: p.prediction.clone(),
            phrase: None,
            names: Vec::new(),
        })
        .collect();
    let gold = preds
        .iter()
        .map(|p| GoldReference {
            id: p.event_id.clone(),
            text: p.gold.clone(),
        })
        .collect();
    (texts, gold)
}

/// Fraction of predictions whose top attention weight lands on the
/// planted answer, over the items that record one.
fn planted_hit_rate<T>(items: &[T], hit: impl Fn(&T) -> Option<bool>) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for item in items {
        if let Some(h) = hit(item) {
            total += 1;
            hits += h as usize;
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Report written after a clip-stage inference run.
#[derive(Debug, Serialize, Deserialize)]
struct InferReport {
    command: String,
    seed: u64,
    part: String,
    items: usize,
    /// Fraction of items whose fused attention peaks on the planted
    /// timestep (clip stage) or planted cause (movie stage).
    planted_hit_rate: Option<f64>,
}

fn cmd_infer_local(args: &InferArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    if args.descriptions.is_some() {
        return Err(Error::Config(
            "--descriptions only applies to infer-global".into(),
        ));
    }
    log::info!("clip-stage inference with seed {}", cfg.seed);
    let model = load_local_model(&args.model)?;
    let (corpus, split) = load_split(&args.data, &cfg)?;
    let movie_ids = split.part(&args.part)?;
    let preds = infer_local(&model, &corpus, movie_ids, &cfg.generate_options())?;
    let (texts, gold) = local_eval_rows(&preds);
    let report = InferReport {
        command: "infer-local".into(),
        seed: cfg.seed,
        part: args.part.clone(),
        items: preds.len(),
        planted_hit_rate: planted_hit_rate(&preds, |p| {
            p.planted_timestep
                .map(|t| crate::tensor::argmax(&p.fused_attention) == t)
        }),
    };
    let dir = args.out.run_dir("infer-local");
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("predictions.json"), &texts)?;
    write_json(&dir.join("gold.json"), &gold)?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("config.json"), &cfg)?;
    match report.planted_hit_rate {
        Some(rate) => println!(
            "generated {} descriptions ({} part); attention finds the planted timestep {:.1}% of the time; artifacts in {}",
            report.items,
            report.part,
            100.0 * rate,
            dir.display()
        ),
        None => println!(
            "generated {} descriptions ({} part); artifacts in {}",
            report.items,
            report.part,
            dir.display()
        ),
    }
    Ok(())
}

fn cmd_infer_global(args: &InferArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    log::info!("movie-stage inference with seed {}", cfg.seed);
    let model = load_global_model(&args.model)?;
    let (corpus, split) = load_split(&args.data, &cfg)?;
    let movie_ids = split.part(&args.part)?;
    let overrides = match &args.descriptions {
        Some(path) => {
            let rows: Vec<PredictionText> = read_json(path)?;
            Some(rows.into_iter().map(|r| (r.id, r.text)).collect::<BTreeMap<_, _>>())
        }
        None => None,
    };
    let preds = infer_global(
        &model,
        &corpus,
        movie_ids,
        &cfg.generate_options(),
        overrides.as_ref(),
    )?;
    let (texts, gold) = global_eval_rows(&preds);
    let report = InferReport {
        command: "infer-global".into(),
        seed: cfg.seed,
        part: args.part.clone(),
        items: preds.len(),
        planted_hit_rate: planted_hit_rate(&preds, |p| {
            match (p.planted_cause_index, p.predicted_cause_index) {
                (Some(planted), predicted) => Some(predicted == Some(planted)),
                (None, _) => None,
            }
        }),
    };
    let dir = args.out.run_dir("infer-global");
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("predictions.json"), &texts)?;
    write_json(&dir.join("gold.json"), &gold)?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("config.json"), &cfg)?;
    match report.planted_hit_rate {
        Some(rate) => println!(
            "generated {} reasons ({} part); attention finds the planted cause {:.1}% of the time; artifacts in {}",
            report.items,
            report.part,
            100.0 * rate,
            dir.display()
        ),
        None => println!(
            "generated {} reasons ({} part); artifacts in {}",
            report.items,
            report.part,
            dir.display()
        ),
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let predictions: Vec<PredictionText> = read_json(&args.predictions)?;
    let gold: Vec<GoldReference> = read_json(&args.gold)?;
    let protocol = match args.protocol {
        Stage::Local => EvalProtocol::Local,
        Stage::Global => EvalProtocol::Global,
    };
    let report = evaluate_run(&predictions, &gold, protocol)?;
    let dir = args.out.run_dir("eval");
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("report.json"), &report)?;
    #[derive(Serialize)]
    struct EvalConfig<'a> {
        command: &'a str,
        predictions: &'a Path,
        gold: &'a Path,
        protocol: &'a str,
    }
    write_json(
        &dir.join("config.json"),
        &EvalConfig {
            command: "eval",
            predictions: &args.predictions,
            gold: &args.gold,
            protocol: match args.protocol {
                Stage::Local => "local",
                Stage::Global => "global",
            },
        },
    )?;
    println!(
        "{} items: BLEU-1 {:.4} BLEU-2 {:.4} BLEU-3 {:.4} BLEU-4 {:.4} METEOR {:.4} ROUGE-L {:.4}",
        report.items.len(),
        report.bleu_1,
        report.bleu_2,
        report.bleu_3,
        report.bleu_4,
        report.meteor,
        report.rouge_l
    );
    println!("report in {}", dir.display());
    Ok(())
}

/// One scored ablation variant in the sweep summary.
#[derive(Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub bleu_4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub final_loss: f64,
}

/// Sweep summary written by `ablate` as the run-level report.
#[derive(Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub stage: String,
    pub variants: Vec<AblationRow>,
}

/// Train one clip-stage variant and score it on the test part.
fn run_local_variant(
    cfg: &RunConfig,
    corpus: &Corpus,
    split: &DatasetSplit,
    dir: &Path,
) -> Result<(MetricReport, TrainLog)> {
    let vocab = corpus_vocabulary(corpus);
    let mut model = init_local_model(cfg.local_stage(), vocab, cfg.seed)?;
    let log = train_local(&mut model, corpus, &split.train, &cfg.train_local_cfg())?;
    let preds = infer_local(&model, corpus, &split.test, &cfg.generate_options())?;
    let (texts, gold) = local_eval_rows(&preds);
    let report = evaluate_run(&texts, &gold, EvalProtocol::Local)?;
    fs::create_dir_all(dir)?;
    save_local_model(&dir.join("model.bin"), &model)?;
    write_losses_csv(&dir.join("losses.csv"), &log.losses)?;
    write_json(&dir.join("predictions.json"), &texts)?;
    write_json(&dir.join("gold.json"), &gold)?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("config.json"), cfg)?;
    Ok((report, log))
}

/// Train one movie-stage variant and score it on the test part.
fn run_global_variant(
    cfg: &RunConfig,
    corpus: &Corpus,
    split: &DatasetSplit,
    dir: &Path,
) -> Result<(MetricReport, TrainLog)> {
    let vocab = corpus_vocabulary(corpus);
    let mut model = init_global_model(cfg.global_stage(), vocab, cfg.seed)?;
    let log = train_global(&mut model, corpus, &split.train, &cfg.train_global_cfg())?;
    let preds = infer_global(&model, corpus, &split.test, &cfg.generate_options(), None)?;
    let (texts, gold) = global_eval_rows(&preds);
    let report = evaluate_run(&texts, &gold, EvalProtocol::Global)?;
    fs::create_dir_all(dir)?;
    save_global_model(&dir.join("model.bin"), &model)?;
    write_losses_csv(&dir.join("losses.csv"), &log.losses)?;
    write_json(&dir.join("predictions.json"), &texts)?;
    write_json(&dir.join("gold.json"), &gold)?;
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("config.json"), cfg)?;
    Ok((report, log))
}

/// The fixed variant lists the sweep walks, per stage: each variant
/// differs from the full pipeline by exactly the named signals.
fn ablation_variants(stage: Stage) -> Vec<(&'static str, fn(&mut RunConfig))> {
    match stage {
        Stage::Local => vec![
            ("full", |_: &mut RunConfig| {}),
            ("no-visual-attn", |c: &mut RunConfig| c.no_visual_attn = true),
            ("no-text-attn", |c: &mut RunConfig| c.no_text_attn = true),
            ("no-visual-no-text", |c: &mut RunConfig| {
                c.no_visual_attn = true;
                c.no_text_attn = true;
            }),
        ],
        Stage::Global => vec![
            ("full", |_: &mut RunConfig| {}),
            ("no-subtitle", |c: &mut RunConfig| c.no_subtitle = true),
            ("no-kg", |c: &mut RunConfig| c.no_kg = true),
            ("no-prev-events", |c: &mut RunConfig| c.no_prev_events = true),
            ("no-event-prefix", |c: &mut RunConfig| c.no_event_prefix = true),
        ],
    }
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let base = args.config.resolve()?;
    log::info!("ablation sweep with seed {}", base.seed);
    let (corpus, split) = load_split(&args.data, &base)?;
    let dir = args.out.run_dir("ablate");
    let mut rows = Vec::new();
    for (name, tweak) in ablation_variants(args.stage) {
        let mut cfg = base.clone();
        tweak(&mut cfg);
        let subdir = dir.join(name);
        let (report, log) = match args.stage {
            Stage::Local => run_local_variant(&cfg, &corpus, &split, &subdir)?,
            Stage::Global => run_global_variant(&cfg, &corpus, &split, &subdir)?,
        };
        println!(
            "variant {name}: BLEU-4 {:.4} METEOR {:.4} ROUGE-L {:.4}",
            report.bleu_4, report.meteor, report.rouge_l
        );
        rows.push(AblationRow {
            variant: name.to_string(),
            bleu_4: report.bleu_4,
            meteor: report.meteor,
            rouge_l: report.rouge_l,
            final_loss: log.losses.last().copied().unwrap_or(f64::NAN),
        });
    }
    let summary = AblationReport {
        stage: match args.stage {
            Stage::Local => "local".into(),
            Stage::Global => "global".into(),
        },
        variants: rows,
    };
    write_json(&dir.join("report.json"), &summary)?;
    write_json(&dir.join("config.json"), &base)?;
    println!("sweep summary in {}", dir.display());
    Ok(())
}

/// Token list for the miniature gradient-check models: the reserved
/// control tokens followed by invented words.
fn micro_vocab(size: usize) -> Result<Vocabulary> {
    let reserved = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];
    if size < reserved.len() + 2 {
        return Err(Error::Config(format!(
            "gradient-check vocabulary needs at least {} tokens, got {size}",
            reserved.len() + 2
        )));
    }
    let mut tokens: Vec<String> = reserved.iter().map(|s| s.to_string()).collect();
    for i in tokens.len()..size {
        tokens.push(format!("w{i:02}"));
    }
    Vocabulary::from_tokens(tokens)
}

fn random_ids(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(5..vocab)).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized data")
}

/// Miniature clip-stage model plus one synthetic instance exercising
/// every parameter in the loss.
fn micro_local(args: &GradcheckArgs) -> Result<(LocalModel, LocalInstance)> {
    let enc = EncoderConfig {
        d_model: args.dim,
        n_layers: 1,
        n_heads: 2,
        d_ff: 2 * args.dim,
        max_len: 16,
    };
    let cfg = LocalStageCfg {
        encoder: enc.clone(),
        decoder: enc,
        frame_dim: args.dim,
        fuse: FuseMode::Both,
        share_projections: true,
        tie_embeddings: true,
    };
    let model = init_local_model(cfg, micro_vocab(args.vocab)?, args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(1));
    let t = args.timesteps;
    let inst = LocalInstance {
        movie_id: "m0".into(),
        event_id: "m0_e0".into(),
        sub_ids: (0..t).map(|_| random_ids(&mut rng, 4, args.vocab)).collect(),
        phrase_ids: random_ids(&mut rng, 3, args.vocab),
        frames: random_matrix(&mut rng, t, args.dim),
        f_iv: random_matrix(&mut rng, 1, args.dim),
        target: random_ids(&mut rng, 6, args.vocab),
        planted: None,
        gold: String::new(),
        topic: String::new(),
        phrase: String::new(),
        subject: String::new(),
        object: String::new(),
        cached_cls: None,
        cached_phrase_cls: None,
    };
    Ok((model, inst))
}

/// Miniature movie-stage model plus one synthetic instance with history.
fn micro_global(args: &GradcheckArgs) -> Result<(GlobalModel, crate::global::GlobalInstance)> {
    let enc = EncoderConfig {
        d_model: args.dim,
        n_layers: 1,
        n_heads: 2,
        d_ff: 2 * args.dim,
        max_len: 16,
    };
    let cfg = GlobalStageCfg {
        encoder: enc.clone(),
        decoder: enc,
        prefilter_k: 10,
        tie_embeddings: true,
        use_kg: true,
        use_prev_events: true,
        use_subtitle: true,
        use_event_prefix: true,
    };
    let model = init_global_model(cfg, micro_vocab(args.vocab)?, args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(2));
    let inst = crate::global::GlobalInstance {
        movie_id: "m0".into(),
        event_id: "m0_e2".into(),
        event_index: 2,
        event_ids: random_ids(&mut rng, 8, args.vocab),
        prev_ids: (0..2).map(|_| random_ids(&mut rng, 8, args.vocab)).collect(),
        sub_ids: (0..2).map(|_| random_ids(&mut rng, 4, args.vocab)).collect(),
        target: random_ids(&mut rng, 5, args.vocab),
        gold: String::new(),
        planted_cause_index: None,
        cached_event_cls: None,
        cached_prev_cls: None,
        cached_sub_cls: None,
    };
    Ok((model, inst))
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let started = std::time::Instant::now();

    let (local_model, local_inst) = micro_local(args)?;
    let local_cfg = local_model.cfg.clone();
    let local_report = gradient_check(
        &local_model.params,
        |params, tape| {
            let mut leaves = LeafMap::new(params);
            local_instance_loss(tape, &mut leaves, &local_cfg, &local_inst)
        },
        args.epsilon,
        args.samples,
        args.seed,
    )?;
    println!(
        "clip-stage loss: max relative error {:.3e} over {} coordinates",
        local_report.max_rel_err, local_report.checked
    );

    let (global_model, global_inst) = micro_global(args)?;
    let global_cfg = global_model.cfg.clone();
    let global_report = gradient_check(
        &global_model.params,
        |params, tape| {
            let mut leaves = LeafMap::new(params);
            crate::global::instance_loss(tape, &mut leaves, &global_cfg, &global_inst)
        },
        args.epsilon,
        args.samples,
        args.seed,
    )?;
    println!(
        "movie-stage loss: max relative error {:.3e} over {} coordinates",
        global_report.max_rel_err, global_report.checked
    );

    let max = local_report.max_rel_err.max(global_report.max_rel_err);
    let worst = if local_report.max_rel_err >= global_report.max_rel_err {
        &local_report.worst_coord
    } else {
        &global_report.worst_coord
    };
    if let Some((name, idx)) = worst {
        println!("worst coordinate: {name}[{idx}]");
    }
    println!(
        "max relative error {max:.3e} ({} coordinates, {:.2}s)",
        local_report.checked + global_report.checked,
        started.elapsed().as_secs_f64()
    );
    if max >= 1e-6 {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {max:.3e} is not below 1e-6"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pass_validation_and_derive_both_stages() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.fuse(), FuseMode::Both);
        let local = cfg.local_stage();
        assert_eq!(local.encoder.d_model, 64);
        assert_eq!(local.decoder.n_layers, 2);
        assert!(local.tie_embeddings);
        let global = cfg.global_stage();
        assert!(global.use_kg && global.use_prev_events);
        assert_eq!(global.prefilter_k, 10);
        global.validate().unwrap();
        assert_eq!(cfg.train_local_cfg().lr, 1e-5);
        assert_eq!(cfg.train_local_cfg().batch_size, 4);
        assert_eq!(cfg.train_global_cfg().trainable_decoder_depth, 5);
        // greedy decoding ignores the configured k
        assert_eq!(cfg.generate_options().top_k, 1);
    }

    #[test]
    fn ablation_switches_map_onto_fuse_modes() {
        let mut cfg = RunConfig::default();
        cfg.no_visual_attn = true;
        assert_eq!(cfg.fuse(), FuseMode::TextOnly);
        cfg.no_visual_attn = false;
        cfg.no_text_attn = true;
        assert_eq!(cfg.fuse(), FuseMode::VisualOnly);
        cfg.no_visual_attn = true;
        assert_eq!(cfg.fuse(), FuseMode::Uniform);
    }

    #[test]
    fn context_switches_flow_into_the_movie_stage_config() {
        let mut cfg = RunConfig::default();
        cfg.no_kg = true;
        cfg.no_event_prefix = true;
        let stage = cfg.global_stage();
        assert!(!stage.use_kg);
        assert!(!stage.use_event_prefix);
        assert!(stage.use_prev_events && stage.use_subtitle);
    }

    #[test]
    fn invariants_reject_zero_knobs() {
        for tweak in [
            (|c: &mut RunConfig| c.top_k = 0) as fn(&mut RunConfig),
            |c| c.batch_size = 0,
            |c| c.trainable_decoder_depth = 0,
            |c| c.steps = 0,
            |c| c.n_heads = 3, // 64 % 3 != 0
        ] {
            let mut cfg = RunConfig::default();
            tweak(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn flags_override_config_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let mut file_cfg = RunConfig::default();
        file_cfg.lr = 0.5;
        file_cfg.steps = 77;
        file_cfg.no_kg = true;
        write_json(&path, &file_cfg).unwrap();

        let args = ConfigArgs {
            config: Some(path),
            lr: Some(0.25),
            seed: Some(9),
            ..ConfigArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.lr, 0.25); // flag wins
        assert_eq!(cfg.steps, 77); // file value survives
        assert_eq!(cfg.seed, 9);
        assert!(cfg.no_kg); // switch from the file survives
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, "{\"learning_rate\": 0.1}\n").unwrap();
        let args = ConfigArgs {
            config: Some(path),
            ..ConfigArgs::default()
        };
        match args.resolve() {
            Err(Error::Data(msg)) => assert!(msg.contains("learning_rate")),
            other => panic!("expected a data error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn partial_config_files_fill_from_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, "{\"d_model\": 16, \"n_heads\": 2}\n").unwrap();
        let args = ConfigArgs {
            config: Some(path),
            ..ConfigArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.d_model, 16);
        assert_eq!(cfg.lr, 1e-5);
        assert_eq!(cfg.split, (0.7, 0.1, 0.2));
    }

    #[test]
    fn run_dir_prefers_flag_over_environment() {
        let out = OutArgs {
            out_dir: Some(PathBuf::from("/tmp/custom")),
            run_id: Some("r1".into()),
        };
        assert_eq!(out.run_dir("train-local"), PathBuf::from("/tmp/custom/r1"));
        let fallback = OutArgs::default();
        // without the env var set, fall back to ./out/{command}
        if std::env::var_os("TSPE_OUT_DIR").is_none() {
            assert_eq!(fallback.run_dir("eval"), PathBuf::from("out/eval"));
        }
    }

    #[test]
    fn variant_lists_cover_the_published_axes() {
        let local: Vec<&str> = ablation_variants(Stage::Local).iter().map(|v| v.0).collect();
        assert_eq!(
            local,
            ["full", "no-visual-attn", "no-text-attn", "no-visual-no-text"]
        );
        let global: Vec<&str> = ablation_variants(Stage::Global).iter().map(|v| v.0).collect();
        assert_eq!(
            global,
            ["full", "no-subtitle", "no-kg", "no-prev-events", "no-event-prefix"]
        );
    }

    #[test]
    fn micro_models_build_and_compute_losses() {
        let args = GradcheckArgs {
            dim: 16,
            timesteps: 5,
            vocab: 50,
            samples: 1,
            epsilon: 3e-7,
            seed: 0,
        };
        let (lm, li) = micro_local(&args).unwrap();
        assert_eq!(lm.vocab.len(), 50);
        let mut tape = crate::tensor::Tape::new();
        let mut leaves = LeafMap::new(&lm.params);
        let loss = local_instance_loss(&mut tape, &mut leaves, &lm.cfg, &li).unwrap();
        assert!(tape.value(loss).scalar().is_finite());

        let (gm, gi) = micro_global(&args).unwrap();
        let mut tape = crate::tensor::Tape::new();
        let mut leaves = LeafMap::new(&gm.params);
        let loss = crate::global::instance_loss(&mut tape, &mut leaves, &gm.cfg, &gi).unwrap();
        assert!(tape.value(loss).scalar().is_finite());
    }

    #[test]
    fn help_and_bad_usage_exit_codes() {
        assert_eq!(run_with_args(["tspe", "--help"]), 0);
        assert_eq!(run_with_args(["tspe", "--version"]), 0);
        assert_eq!(run_with_args(["tspe"]), 1);
        assert_eq!(run_with_args(["tspe", "no-such-command"]), 1);
        assert_eq!(run_with_args(["tspe", "eval", "--protocol", "local"]), 1);
    }
}
