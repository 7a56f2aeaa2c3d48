mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pointlang::par::Exec;

#[derive(Parser)]
#[command(name = "pointlang", version, about = "Point-cloud language model: data, staged training, evaluation")]
struct Cli {
    /// Run batch work on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// Run configuration (JSON); unset keys take the preset's values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset used when no config file is given: full, desk or tiny.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Override the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// Directory written by `gen-data`. Without it the corpus is generated
    /// in memory from the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic shape corpus as JSONL splits.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Write every cloud to clouds/*.spc1 instead of inline shape references.
        #[arg(long)]
        materialize: bool,
    },
    /// Run training stages, writing logs and checkpoints to a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// 1, 2, 3 or all.
        #[arg(long, default_value = "all", value_parser = commands::parse_stages)]
        stage: commands::Stages,
        #[arg(long, default_value = "runs/default")]
        run_dir: PathBuf,
        /// Start from this checkpoint (e.g. stage 2 from a stage 1 checkpoint).
        #[arg(long, conflicts_with = "resume")]
        ckpt: Option<PathBuf>,
        /// Continue from the run directory's latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Pause once the current stage reaches this many steps.
        #[arg(long)]
        stop_after: Option<u64>,
        /// Evaluate the final state on the test split.
        #[arg(long)]
        eval: bool,
    },
    /// Score greedy generations of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Evaluate only the first N samples.
        #[arg(long)]
        limit: Option<usize>,
        /// Also estimate the sampling policy's reward with this many draws per prompt.
        #[arg(long)]
        reward_samples: Option<usize>,
        /// Full per-sample report (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the discrete point-token indices of clouds as JSONL.
    Tokenize {
        #[arg(long)]
        ckpt: PathBuf,
        /// `.spc1` files or `shape:` references.
        #[arg(long, required = true, num_args = 1..)]
        cloud: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print one generated line for a cloud.
    Caption {
        /// `.spc1` file or `shape:` reference.
        #[arg(long)]
        cloud: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "caption this 3d model.")]
        instruction: String,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
    },
    /// Single-thread latency of tokenization and fixed-length decoding.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1024")]
        resolution: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        clouds: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 8)]
        gen_tokens: usize,
        /// CSV output; a JSON line per resolution goes to stdout regardless.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate and time one checkpoint at several input resolutions.
    SweepResolution {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to the config's `eval.resolutions`.
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<usize>>,
        #[arg(long)]
        limit: Option<usize>,
        /// Receives bench.csv, bench.svg and bench.json.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference check of the joint loss gradient.
    GradCheck {
        #[arg(long, default_value_t = 16)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train stages 1 and 2 once per value of one axis and evaluate each.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// codebook, tokens, pooling, layers or continuous.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "runs/ablate")]
        run_dir: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Print a preset configuration or the config JSON schema.
    InitConfig {
        #[arg(long, default_value = "full")]
        preset: String,
        #[arg(long)]
        schema: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel }.effective();
    match cli.cmd {
        Cmd::GenData { cfg, out, materialize } => commands::gen_data(&cfg, &out, materialize),
        Cmd::Train {
            cfg,
            data,
            stage,
            run_dir,
            ckpt,
            resume,
            stop_after,
            eval,
        } => commands::train(commands::TrainArgs {
            cfg: &cfg,
            data: &data,
            stages: &stage.0,
            run_dir: &run_dir,
            ckpt: ckpt.as_deref(),
            resume,
            stop_after,
            eval,
            exec,
        }),
        Cmd::Eval {
            cfg,
            data,
            ckpt,
            split,
            limit,
            reward_samples,
            out,
        } => commands::eval(&cfg, &data, &ckpt, &split, limit, reward_samples, out.as_deref(), exec),
        Cmd::Tokenize { ckpt, cloud, out } => commands::tokenize(&ckpt, &cloud, out.as_deref()),
        Cmd::Caption {
            cloud,
            ckpt,
            instruction,
            max_new,
        } => commands::caption(&cloud, &ckpt, &instruction, max_new),
        Cmd::Bench {
            cfg,
            data,
            ckpt,
            resolution,
            clouds,
            warmup,
            iters,
            gen_tokens,
            out,
        } => commands::bench(
            &cfg,
            &data,
            &ckpt,
            &resolution,
            commands::Timing {
                clouds,
                warmup,
                iters,
                gen_tokens,
            },
            out.as_deref(),
        ),
        Cmd::SweepResolution {
            cfg,
            data,
            ckpt,
            resolutions,
            limit,
            out_dir,
        } => commands::sweep(&cfg, &data, &ckpt, resolutions, limit, &out_dir, exec),
        Cmd::GradCheck { points, seed, tolerance } => commands::grad_check(points, seed, tolerance, exec),
        Cmd::Ablate {
            cfg,
            data,
            axis,
            values,
            run_dir,
            limit,
        } => commands::ablate(&cfg, &data, &axis, &values, &run_dir, limit, exec),
        Cmd::InitConfig { preset, schema, out } => commands::init_config(&preset, schema, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("POINTLANG_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<pointlang::Error>() {
                Some(pointlang::Error::Config { .. }) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
