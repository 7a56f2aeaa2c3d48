//! End-to-end orchestration shared by the command line and the test suites:
//! corpus, vocabulary, staged training and evaluation from one config.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{self, Corpus, Sample};
use crate::error::{Error, Result};
use crate::eval::{self, EvalItem, EvalOptions, MetricReport};
use crate::geometry::PointCloud;
use crate::lm::{LmConfig, Vocab};
use crate::model::{Example, Model, ModelConfig};
use crate::numerics::{grad_check, GradCheckReport, ParamStore, ParamView, Tape};
use crate::par::{self, Exec};
use crate::rewards::{BagOfEmbeddings, SentenceEncoder};
use crate::seed;
use crate::tokenizer::{Pooling, TokenizerConfig};
use crate::training::{run_stage, LogRow, StageContext, StageSummary, TrainState};

/// Every word the corpus templates can produce, plus the specials.
pub fn vocab() -> Vocab {
    Vocab::from_texts(data::all_template_texts().iter().map(|s| s.as_str()))
}

pub fn corpus(cfg: &RunConfig) -> Result<Corpus> {
    data::gen_corpus(&cfg.data, seed::derive(cfg.seed, "data"))
}

pub fn new_state(cfg: &RunConfig) -> Result<TrainState> {
    TrainState::new(cfg.model_config(), vocab(), cfg.seed)
}

pub fn encoder() -> BagOfEmbeddings {
    BagOfEmbeddings::default()
}

pub fn examples(model: &Model, samples: &[Sample], base: &Path, exec: Exec) -> Result<Vec<Example>> {
    par::map(exec, samples, |s| -> Result<Example> {
        let cloud = s.load_cloud(base)?;
        model.example(&cloud, &s.instruction, &s.response)
    })
    .into_iter()
    .collect()
}

/// Samples a stage trains on: its task filter, then its cap.
pub fn stage_samples<'a>(cfg: &RunConfig, stage: u8, train: &'a [Sample]) -> Result<Vec<&'a Sample>> {
    let sc = cfg.stage(stage)?;
    let mut picked: Vec<&Sample> = train.iter().filter(|s| sc.uses(s.task)).collect();
    if let Some(cap) = sc.max_samples {
        picked.truncate(cap);
    }
    if picked.is_empty() {
        return Err(Error::invalid(format!("stage {stage} selects no training samples")));
    }
    Ok(picked)
}

pub struct TrainOptions<'a> {
    pub exec: Exec,
    pub stop_after: Option<u64>,
    pub encoder: &'a dyn SentenceEncoder,
}

/// Run `stages` in order, skipping any already recorded as complete.
/// `after_stage` sees the state after each stage that finished here.
pub fn train(
    state: &mut TrainState,
    cfg: &RunConfig,
    train: &[Sample],
    base: &Path,
    stages: &[u8],
    opts: &TrainOptions<'_>,
    sink: &mut dyn FnMut(&LogRow) -> Result<()>,
    after_stage: &mut dyn FnMut(&TrainState, u8) -> Result<()>,
) -> Result<Vec<StageSummary>> {
    let mut out = Vec::new();
    let mut cached: Option<(Vec<Sample>, Vec<Example>)> = None;
    for &stage in stages {
        if state.completed_stages().contains(&stage) {
            ::log::info!("stage {stage} already complete, skipping");
            continue;
        }
        for prior in 1..stage {
            if stages.contains(&prior) || state.completed_stages().contains(&prior) {
                continue;
            }
            return Err(Error::invalid(format!(
                "stage {stage} needs a state that finished stage {prior}"
            )));
        }
        let sc = cfg.stage(stage)?;
        let picked = stage_samples(cfg, stage, train)?;
        let key: Vec<Sample> = picked.into_iter().cloned().collect();
        // consecutive stages often share prompts; reuse their geometry
        let ex = match cached.take() {
            Some((k, ex)) if k == key => ex,
            _ => examples(&state.model, &key, base, opts.exec)?,
        };
        ::log::info!("stage {stage}: {} samples, {} epochs", ex.len(), sc.epochs);
        let ctx = StageContext {
            optimizer: cfg.optimizer,
            reward: cfg.reward,
            encoder: opts.encoder,
            exec: opts.exec,
            stop_after: opts.stop_after,
        };
        let summary = run_stage(state, &ex, sc, &ctx, sink)?;
        let done = summary.completed;
        out.push(summary);
        cached = Some((key, ex));
        if !done {
            break;
        }
        after_stage(state, stage)?;
    }
    Ok(out)
}

pub fn eval_options(cfg: &RunConfig, exec: Exec) -> EvalOptions {
    EvalOptions {
        max_new: cfg.eval.max_new_tokens,
        reward: cfg.reward,
        exec,
    }
}

pub fn evaluate(state: &TrainState, cfg: &RunConfig, samples: &[Sample], base: &Path, exec: Exec) -> Result<MetricReport> {
    let items = eval::eval_items(&state.model, samples, base, exec)?;
    eval::evaluate(&state.model, &state.store, &items, &encoder(), &eval_options(cfg, exec))
}

pub fn eval_items(state: &TrainState, samples: &[Sample], base: &Path, exec: Exec) -> Result<Vec<EvalItem>> {
    eval::eval_items(&state.model, samples, base, exec)
}

/// Finite-difference check of the joint loss on a random cloud of
/// `n_points` points with a two-layer LM. Code assignments and
/// stop-gradient values are held at their initial values so the
/// straight-through gradient is the exact derivative being checked.
pub fn grad_check_joint(n_points: usize, seed: u64, exec: Exec) -> Result<GradCheckReport> {
    let config = ModelConfig {
        tokenizer: TokenizerConfig {
            n_samples: 4.min(n_points),
            k_neighbors: 4.min(n_points),
            codebook_size: 8,
            d_geo: 6,
            d_llm: 8,
            ..Default::default()
        },
        lm: LmConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_ctx: 24,
            d_mlp: 12,
        },
        lambda: 0.5,
    };
    let vocab = Vocab::from_texts(["what is this?", "a red cube"]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = Model::init(config, vocab, &mut store, &mut rng)?;
    let rows: Vec<Vec<f64>> = (0..n_points)
        .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ex = model.example(&PointCloud::from_rows(&rows)?, "what is this?", "a red cube")?;
    let anchor = {
        let mut tape = Tape::new();
        let out = model.loss(&mut tape, &ParamView::all(&store), &ex, None)?;
        out.tokens
            .anchor(&tape)
            .ok_or_else(|| Error::invalid("grad check needs a discrete tokenizer"))?
    };
    grad_check(&store, 1e-5, exec, |tape, s| {
        Ok(model.loss(tape, &ParamView::all(s), &ex, Some(&anchor))?.total)
    })
}

pub const ABLATION_AXES: [&str; 5] = ["codebook", "tokens", "pooling", "layers", "continuous"];

/// A copy of `cfg` with one ablation axis set to `value`.
pub fn ablate(cfg: &RunConfig, axis: &str, value: &str) -> Result<RunConfig> {
    let mut c = cfg.clone();
    let num = || {
        value
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("ablation value `{value}` for `{axis}` is not a count")))
    };
    match axis {
        "codebook" => c.tokenizer.codebook_size = num()?,
        "tokens" => {
            c.geometry.n_samples = num()?;
            c.lm.max_ctx = c.lm.max_ctx.max(c.geometry.n_samples + 32);
        }
        "pooling" => c.tokenizer.pooling = Pooling::from_str(value)?,
        "layers" => {
            let k = num()?;
            for s in &mut c.stages {
                if s.stage == 1 {
                    s.trainable_layers = k;
                }
            }
        }
        "continuous" => {
            c.tokenizer.continuous = value
                .parse::<bool>()
                .map_err(|_| Error::invalid(format!("ablation value `{value}` for `continuous` is not true/false")))?
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown ablation axis `{other}` (expected one of {})",
                ABLATION_AXES.join(", ")
            )))
        }
    }
    c.validate()?;
    Ok(c)
}
