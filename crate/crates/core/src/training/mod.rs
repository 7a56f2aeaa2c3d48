//! Three-stage training: tokenizer warm-up with a partially unfrozen LM,
//! full instruction tuning, and group-relative preference optimization.

pub mod checkpoint;
pub mod grpo;
pub mod log;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::lm::Vocab;
use crate::model::{Example, Model, ModelConfig};
use crate::numerics::{AdamW, AdamWConfig, CosineSchedule, Gradients, ParamStore, ParamView, Tape, TrainableSet};
use crate::par::{self, Exec};
use crate::rewards::{RewardConfig, SentenceEncoder};
use crate::seed;
use crate::tensor::Tensor;
use crate::tokenizer::codebook_utilization;

pub use grpo::{grpo_step, Bandit, GrpoOutcome, LmPolicy, Policy};
pub use log::{CsvLog, LogRow, CSV_HEADER};

fn default_layers() -> usize {
    4
}

fn default_temperature() -> f64 {
    1.0
}

fn default_max_new() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Leading transformer blocks trained in stage 1.
    #[serde(default = "default_layers")]
    pub trainable_layers: usize,
    /// Sample tasks used by the stage; empty means every task.
    #[serde(default)]
    pub tasks: Vec<Task>,
    /// Cap on training prompts (taken from the front of the split).
    #[serde(default)]
    pub max_samples: Option<usize>,
    /// Rollout temperature (stage 3).
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Rollout length cap (stage 3).
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    /// Supervised stages only: every this many steps during the first half
    /// of the stage, codes no token in the batch picked are moved onto
    /// randomly chosen pre-quantization features of that batch.
    #[serde(default)]
    pub dead_code_reset: Option<u64>,
}

impl StageConfig {
    /// Full-scale stage settings.
    pub fn full(stage: u8) -> Self {
        let (epochs, batch_size, lr, tasks) = match stage {
            1 => (3, 128, 4e-4, vec![Task::Caption]),
            2 => (3, 32, 2e-5, Vec::new()),
            _ => (1, 8, 1e-6, Vec::new()),
        };
        StageConfig {
            stage,
            epochs,
            batch_size,
            lr,
            trainable_layers: 4,
            tasks,
            max_samples: None,
            temperature: 1.0,
            max_new_tokens: 16,
            dead_code_reset: None,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::invalid(format!("stage must be 1, 2 or 3, got {}", self.stage)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.stage == 1 && self.trainable_layers > n_layers {
            return Err(Error::invalid(format!(
                "trainable_layers {} exceeds {} LM layers",
                self.trainable_layers, n_layers
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("rollout temperature must be positive"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::invalid("max_new_tokens must be positive"));
        }
        if self.dead_code_reset == Some(0) {
            return Err(Error::invalid("dead_code_reset period must be positive"));
        }
        Ok(())
    }

    pub fn uses(&self, task: Task) -> bool {
        self.tasks.is_empty() || self.tasks.contains(&task)
    }
}

/// Position inside a stage that has not finished yet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: u8,
    pub step: u64,
}

/// Provenance of one completed stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub steps: u64,
    pub epochs: usize,
    pub samples: usize,
    pub final_loss: Option<f64>,
    /// Mean rollout reward per epoch (stage 3).
    pub epoch_rewards: Vec<f64>,
}

/// Everything needed to continue training: the policy parameters, the
/// current stage's optimizer and position, and the master seed from which
/// every random stream is re-derived.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: Option<AdamW>,
    pub progress: Option<Progress>,
    pub global_step: u64,
    pub seed: u64,
    pub history: Vec<StageRecord>,
}

impl TrainState {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "init"));
        let model = Model::init(config, vocab, &mut store, &mut rng)?;
        Ok(TrainState {
            model,
            store,
            optimizer: None,
            progress: None,
            global_step: 0,
            seed,
            history: Vec::new(),
        })
    }

    pub fn completed_stages(&self) -> Vec<u8> {
        self.history.iter().map(|r| r.stage).collect()
    }
}

/// Shared knobs of a stage run.
pub struct StageContext<'a> {
    pub optimizer: AdamWConfig,
    pub reward: RewardConfig,
    pub encoder: &'a dyn SentenceEncoder,
    pub exec: Exec,
    /// Pause once the stage has run this many steps in total.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub stage: u8,
    pub steps_run: u64,
    pub completed: bool,
    pub last: Option<LogRow>,
}

pub type LogSink<'a> = dyn FnMut(&LogRow) -> Result<()> + 'a;

fn epoch_order(n: usize, master: u64, stage: u8, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let s = seed::derive_indexed(master, &format!("shuffle/stage{stage}"), epoch);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    order
}

/// Run (or resume) one stage over `data`.
pub fn run_stage(
    state: &mut TrainState,
    data: &[Example],
    cfg: &StageConfig,
    ctx: &StageContext<'_>,
    sink: &mut LogSink<'_>,
) -> Result<StageSummary> {
    cfg.validate(state.model.config.lm.n_layers)?;
    if data.is_empty() {
        return Err(Error::invalid(format!("stage {} has no training samples", cfg.stage)));
    }
    let trainable = match cfg.stage {
        1 => state.model.partial_trainable(&state.store, cfg.trainable_layers)?,
        _ => TrainableSet::all(&state.store),
    };
    let start = match &state.progress {
        Some(p) if p.stage == cfg.stage && state.optimizer.is_some() => p.step,
        _ => {
            state.optimizer = Some(AdamW::new(ctx.optimizer, &state.store));
            state.progress = Some(Progress {
                stage: cfg.stage,
                step: 0,
            });
            0
        }
    };
    let per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let schedule = CosineSchedule::new(cfg.lr, total, ctx.optimizer.warmup_ratio);
    let mut last = None;
    let mut epoch_rewards: Vec<f64> = Vec::new();
    let mut reward_acc = (0.0, 0usize);
    let mut step = start;
    let mut order = Vec::new();
    let mut order_epoch = u64::MAX;
    while step < total {
        if ctx.stop_after.is_some_and(|s| step >= s) {
            break;
        }
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(data.len(), state.seed, cfg.stage, epoch);
            order_epoch = epoch;
        }
        let b = (step % per_epoch) as usize;
        let batch: Vec<&Example> = order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(data.len())]
            .iter()
            .map(|&i| &data[i])
            .collect();
        let lr = schedule.lr_at(step);
        let row = match cfg.stage {
            3 => {
                let policy = LmPolicy {
                    model: &state.model,
                    encoder: ctx.encoder,
                    max_new: cfg.max_new_tokens,
                };
                let step_seed = seed::derive_indexed(state.seed, "grpo", step);
                let opt = state.optimizer.as_mut().expect("optimizer set above");
                let out = grpo_step(
                    &policy,
                    &mut state.store,
                    opt,
                    &trainable,
                    &batch,
                    &ctx.reward,
                    cfg.temperature,
                    lr,
                    step_seed,
                    ctx.exec,
                )?;
                let r = out.mean_reward();
                if !r.is_finite() {
                    return Err(Error::NonFiniteLoss { stage: 3, step });
                }
                reward_acc.0 += r * batch.len() as f64;
                reward_acc.1 += batch.len();
                LogRow {
                    step: state.global_step,
                    stage: 3,
                    lr,
                    mean_reward: Some(r),
                    mean_abs_advantage: Some(out.mean_abs_advantage()),
                    ..Default::default()
                }
            }
            s => {
                let reset = cfg.dead_code_reset.is_some_and(|p| step % p == 0 && 2 * step < total);
                supervised_step(state, &batch, &trainable, lr, s, step, reset, ctx.exec)?
            }
        };
        sink(&row)?;
        last = Some(row);
        step += 1;
        state.global_step += 1;
        state.progress = Some(Progress {
            stage: cfg.stage,
            step,
        });
        if cfg.stage == 3 && step % per_epoch == 0 {
            epoch_rewards.push(reward_acc.0 / reward_acc.1.max(1) as f64);
            ::log::info!("stage 3 epoch {}: mean reward {:.4}", step / per_epoch, epoch_rewards.last().unwrap());
            reward_acc = (0.0, 0);
        }
    }
    let completed = step >= total;
    if completed {
        state.history.push(StageRecord {
            stage: cfg.stage,
            steps: total,
            epochs: cfg.epochs,
            samples: data.len(),
            final_loss: last.as_ref().and_then(|r: &LogRow| r.total_loss),
            epoch_rewards,
        });
        state.progress = None;
        state.optimizer = None;
    }
    Ok(StageSummary {
        stage: cfg.stage,
        steps_run: step - start,
        completed,
        last,
    })
}

struct SampleOut {
    grads: Gradients,
    ntp: f64,
    vq: f64,
    total: f64,
    indices: Vec<usize>,
    h: Option<Tensor>,
}

/// Move every codebook row no index in `indices` points at onto a row of
/// `h` drawn without replacement (with replacement once rows run out).
fn reset_dead_codes(codebook: &mut Tensor, indices: &[usize], h: &Tensor, seed: u64) -> usize {
    let mut used = vec![false; codebook.rows()];
    for &i in indices {
        used[i] = true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..h.rows()).collect();
    pool.shuffle(&mut rng);
    let mut reset = 0;
    for (code, _) in used.iter().enumerate().filter(|(_, u)| !**u) {
        let src = pool.get(reset).copied().unwrap_or_else(|| rng.random_range(0..h.rows()));
        codebook.row_mut(code).copy_from_slice(h.row(src));
        reset += 1;
    }
    reset
}

fn supervised_step(
    state: &mut TrainState,
    batch: &[&Example],
    trainable: &TrainableSet,
    lr: f64,
    stage: u8,
    stage_step: u64,
    reset: bool,
    exec: Exec,
) -> Result<LogRow> {
    let reset = reset && !state.model.config.tokenizer.continuous;
    let model = &state.model;
    let store = &state.store;
    let one = |ex: &&Example| -> Result<SampleOut> {
        let mut tape = Tape::new();
        let view = ParamView::with(store, trainable);
        let out = model.loss(&mut tape, &view, ex, None)?;
        let total = tape.value(out.total).item();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { stage, step: stage_step });
        }
        Ok(SampleOut {
            grads: tape.backward(out.total, store)?,
            ntp: tape.value(out.ntp).item(),
            vq: tape.value(out.vq).item(),
            total,
            indices: out.tokens.indices,
            h: reset.then(|| tape.value(out.tokens.h).clone()),
        })
    };
    type Acc = (Option<Gradients>, f64, f64, f64, Vec<usize>, Vec<f64>);
    let (grads, ntp, vq, total, indices, h_rows) = par::map_fold(
        exec,
        batch,
        Ok((None, 0.0, 0.0, 0.0, Vec::new(), Vec::new())),
        one,
        |acc: Result<Acc>, r| {
            let (mut g, ntp, vq, tot, mut idx, mut hs) = acc?;
            let r = r?;
            match g.as_mut() {
                None => g = Some(r.grads),
                Some(a) => a.accumulate(&r.grads),
            }
            idx.extend(r.indices);
            if let Some(h) = r.h {
                hs.extend_from_slice(h.data());
            }
            Ok((g, ntp + r.ntp, vq + r.vq, tot + r.total, idx, hs))
        },
    )?;
    let mut grads = grads.expect("non-empty batch");
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    let opt = state.optimizer.as_mut().expect("optimizer initialized");
    opt.step(&mut state.store, &grads, lr, trainable)?;
    if reset {
        let d = state.model.config.tokenizer.d_llm;
        let h = Tensor::new(vec![h_rows.len() / d, d], h_rows)?;
        let id = state.model.tokenizer.codebook_id();
        let n = reset_dead_codes(
            state.store.get_mut(id),
            &indices,
            &h,
            seed::derive_indexed(state.seed, "dead-code", state.global_step),
        );
        ::log::debug!("step {}: reset {n} dead codes", state.global_step);
    }
    let model = &state.model;
    let utilization = if model.config.tokenizer.continuous {
        None
    } else {
        Some(codebook_utilization(indices, model.config.tokenizer.codebook_size)?)
    };
    Ok(LogRow {
        step: state.global_step,
        stage,
        lr,
        ntp_loss: Some(ntp / n),
        vq_loss: Some(vq / n),
        total_loss: Some(total / n),
        codebook_utilization: utilization,
        ..Default::default()
    })
}
