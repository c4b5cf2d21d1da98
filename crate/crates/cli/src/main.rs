//! `negprompt`: data synthesis, training, evaluation, sweeps, inference and serving.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use negprompt_core::dataengine::SynthConfig;
use negprompt_core::detector::{DetectorConfig, TrainConfig};
use negprompt_core::evalkit::EvalSettings;
use negprompt_core::scoring::{InferenceMode, ModePolicy};

use config::{RunConfig, ServeConfig};

#[derive(Parser)]
#[command(
    name = "negprompt",
    version,
    about = "Open-set detection with negative visual prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Evaluate along one axis of a grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint reused by beta, K and N_pos sweeps; trained from the config when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// beta, eta, K, N_pos or mode_policy.
        #[arg(long, default_value = "beta")]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,0.5,0.7,0.9")]
        grid: Vec<String>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Detect on one scene from box prompts.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene id in the dataset.
        #[arg(long)]
        scene: Option<u64>,
        /// Positive prompt `NAME:x,y,w,h`; repeatable.
        #[arg(long = "positive")]
        positives: Vec<String>,
        /// Negative prompt `x,y,w,h`; repeatable.
        #[arg(long = "negative")]
        negatives: Vec<String>,
        #[arg(long, default_value_t = negprompt_service::DEFAULT_SCORE_THRESHOLD)]
        score_threshold: f64,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Serve the HTTP inference API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "NEGPROMPT_DATA")]
        data: Option<PathBuf>,
        #[arg(long, env = "NEGPROMPT_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = "NEGPROMPT_BIND", default_value_t = ServeConfig::default().bind)]
        bind: String,
    },
}

#[derive(Args)]
struct Common {
    /// Run seed; data, init, batch, jitter and mode streams derive from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// TOML file with [data], [model], [train], [eval], ... sections; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, default_value_t = SynthConfig::default().num_scenes)]
    scenes: usize,
    #[arg(long, default_value_t = SynthConfig::default().num_categories)]
    categories: usize,
    /// Confusable pairs (0,1), (2,3), ...
    #[arg(long, default_value_t = SynthConfig::default().confusable_pairs.len() as u32)]
    pairs: u32,
    #[arg(long, default_value_t = SynthConfig::default().image_size)]
    image_size: usize,
    #[arg(long, default_value_t = SynthConfig::default().zipf_exponent)]
    zipf_exponent: f64,
    #[arg(long, default_value_t = SynthConfig::default().distractor_rate)]
    distractor_rate: f64,
    #[arg(long, default_value_t = SynthConfig::default().pair_color_delta)]
    pair_color_delta: f64,
    #[arg(long, default_value_t = SynthConfig::default().val_fraction)]
    val_fraction: f64,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = DetectorConfig::default().channels)]
    channels: usize,
    /// Embedding width.
    #[arg(long, default_value_t = DetectorConfig::default().dim)]
    dim: usize,
    #[arg(long, default_value_t = DetectorConfig::default().num_queries)]
    num_queries: usize,
    #[arg(long, default_value_t = DetectorConfig::default().decoder_layers)]
    decoder_layers: usize,
    /// Largest negative count the model supports.
    #[arg(long, default_value_t = DetectorConfig::default().k)]
    model_k: usize,
    #[arg(long, default_value_t = DetectorConfig::default().memory_level)]
    memory_level: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr_backbone)]
    lr_backbone: f64,
    #[arg(long, default_value_t = TrainConfig::default().lr_others)]
    lr_others: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    weight_decay: f64,
    /// fixed_0, fixed_1 or bernoulli(p).
    #[arg(long, default_value_t = TrainConfig::default().mode_policy)]
    mode_policy: ModePolicy,
    /// Suppression strength used while training.
    #[arg(long, default_value_t = TrainConfig::default().beta)]
    train_beta: f64,
    /// Negative-hinge weight.
    #[arg(long, default_value_t = TrainConfig::default().eta)]
    eta: f64,
    /// Negatives per category while training.
    #[arg(long, default_value_t = TrainConfig::default().k)]
    train_k: usize,
    #[arg(long, default_value_t = TrainConfig::default().grad_clip)]
    grad_clip: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value_t = EvalSettings::default().mode)]
    mode: InferenceMode,
    #[arg(long, default_value_t = EvalSettings::default().beta)]
    beta: f64,
    /// Negatives per category.
    #[arg(long, default_value_t = EvalSettings::default().k)]
    k: usize,
    /// Training images averaged into each positive prompt.
    #[arg(long, default_value_t = EvalSettings::default().n_pos)]
    n_pos: usize,
    #[arg(long, default_value_t = EvalSettings::default().count_threshold)]
    count_threshold: f64,
}

/// Sub-matches of the chosen subcommand, used to tell typed flags from defaults.
struct Given<'a>(&'a ArgMatches);

impl Given<'_> {
    fn has(&self, id: &str) -> bool {
        matches!(
            self.0.value_source(id),
            Some(ValueSource::CommandLine | ValueSource::EnvVariable)
        )
    }
}

macro_rules! overlay {
    ($given:expr, $( $id:literal => $dst:expr => $src:expr ),* $(,)?) => {
        $( if $given.has($id) { $dst = $src; } )*
    };
}

fn start(common: &Common, given: &Given, command: &str) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.command = command.to_string();
    overlay!(given, "seed" => cfg.seed => common.seed);
    cfg.propagate_seed();
    if given.has("out") || cfg.paths.out.as_os_str().is_empty() {
        cfg.paths.out = common.out.clone();
    }
    Ok(cfg)
}

fn paths(
    cfg: &mut RunConfig,
    given: &Given,
    data: &Option<PathBuf>,
    checkpoint: Option<&Option<PathBuf>>,
) {
    if given.has("data") {
        cfg.paths.data = data.clone();
    }
    if let Some(c) = checkpoint {
        if given.has("checkpoint") {
            cfg.paths.checkpoint = c.clone();
        }
    }
}

fn apply_model(cfg: &mut RunConfig, given: &Given, a: &ModelArgs) {
    let m = &mut cfg.model;
    overlay!(given,
        "channels" => m.channels => a.channels,
        "dim" => m.dim => a.dim,
        "num_queries" => m.num_queries => a.num_queries,
        "decoder_layers" => m.decoder_layers => a.decoder_layers,
        "model_k" => m.k => a.model_k,
        "memory_level" => m.memory_level => a.memory_level,
    );
}

fn apply_train(cfg: &mut RunConfig, given: &Given, a: &TrainArgs) {
    let t = &mut cfg.train;
    overlay!(given,
        "steps" => t.steps => a.steps,
        "batch_size" => t.batch_size => a.batch_size,
        "lr_backbone" => t.lr_backbone => a.lr_backbone,
        "lr_others" => t.lr_others => a.lr_others,
        "weight_decay" => t.weight_decay => a.weight_decay,
        "mode_policy" => t.mode_policy => a.mode_policy,
        "train_beta" => t.beta => a.train_beta,
        "eta" => t.eta => a.eta,
        "train_k" => t.k => a.train_k,
        "grad_clip" => t.grad_clip => a.grad_clip,
    );
}

fn apply_eval(cfg: &mut RunConfig, given: &Given, a: &EvalArgs) {
    let e = &mut cfg.eval;
    overlay!(given,
        "mode" => e.mode => a.mode,
        "beta" => e.beta => a.beta,
        "k" => e.k => a.k,
        "n_pos" => e.n_pos => a.n_pos,
        "count_threshold" => e.count_threshold => a.count_threshold,
    );
}

fn resolve(command: &Command, given: &Given) -> anyhow::Result<RunConfig> {
    Ok(match command {
        Command::GenData { common, data } => {
            let mut cfg = start(common, given, "gen-data")?;
            let d = &mut cfg.data;
            overlay!(given,
                "scenes" => d.num_scenes => data.scenes,
                "categories" => d.num_categories => data.categories,
                "pairs" => d.confusable_pairs => SynthConfig::consecutive_pairs(data.pairs),
                "image_size" => d.image_size => data.image_size,
                "zipf_exponent" => d.zipf_exponent => data.zipf_exponent,
                "distractor_rate" => d.distractor_rate => data.distractor_rate,
                "pair_color_delta" => d.pair_color_delta => data.pair_color_delta,
                "val_fraction" => d.val_fraction => data.val_fraction,
            );
            cfg
        }
        Command::Train {
            common,
            data,
            model,
            train,
        } => {
            let mut cfg = start(common, given, "train")?;
            paths(&mut cfg, given, data, None);
            apply_model(&mut cfg, given, model);
            apply_train(&mut cfg, given, train);
            cfg
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            eval,
        } => {
            let mut cfg = start(common, given, "eval")?;
            paths(&mut cfg, given, data, Some(checkpoint));
            apply_eval(&mut cfg, given, eval);
            cfg
        }
        Command::Sweep {
            common,
            data,
            checkpoint,
            axis,
            grid,
            model,
            train,
            eval,
        } => {
            let mut cfg = start(common, given, "sweep")?;
            paths(&mut cfg, given, data, Some(checkpoint));
            apply_model(&mut cfg, given, model);
            apply_train(&mut cfg, given, train);
            apply_eval(&mut cfg, given, eval);
            if given.has("axis") || cfg.sweep.axis.is_empty() {
                cfg.sweep.axis = axis.clone();
            }
            if given.has("grid") || cfg.sweep.grid.is_empty() {
                cfg.sweep.grid = grid.clone();
            }
            cfg
        }
        Command::Infer {
            common,
            data,
            checkpoint,
            scene,
            positives,
            negatives,
            score_threshold,
            eval,
        } => {
            let mut cfg = start(common, given, "infer")?;
            paths(&mut cfg, given, data, Some(checkpoint));
            apply_eval(&mut cfg, given, eval);
            let i = &mut cfg.infer;
            overlay!(given,
                "scene" => i.scene => *scene,
                "positives" => i.positives => positives.clone(),
                "negatives" => i.negatives => negatives.clone(),
                "score_threshold" => i.score_threshold => Some(*score_threshold),
            );
            cfg
        }
        Command::Serve {
            common,
            data,
            checkpoint,
            bind,
        } => {
            let mut cfg = start(common, given, "serve")?;
            paths(&mut cfg, given, data, Some(checkpoint));
            if given.has("bind") {
                cfg.serve.bind = bind.clone();
            }
            cfg
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let outcome = resolve(&cli.command, &Given(sub)).and_then(commands::run);
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
