//! Group-relative policy optimization: sample a group of responses per
//! prompt, z-score their rewards within the group, and ascend
//! `(1/m) Σ A_i · log π(y_i)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::infer::sample_token;
use crate::lm::{Decoding, GenerateOptions};
use crate::model::{Example, Model};
use crate::numerics::{AdamW, Gradients, ParamId, ParamStore, ParamView, Tape, TrainableSet, Var};
use crate::par::{self, Exec};
use crate::rewards::{group_advantages, score_group, GroupScores, RewardConfig, SentenceEncoder};
use crate::seed;
use crate::tensor::Tensor;

/// Anything that can sample responses, score a group, and give differentiable
/// response log-probabilities.
pub trait Policy: Sync {
    type Prompt: Sync;
    type Response: Send + Sync;

    fn rollout(&self, store: &ParamStore, prompt: &Self::Prompt, temperature: f64, seed: u64) -> Result<Self::Response>;

    fn score(&self, prompt: &Self::Prompt, responses: &[Self::Response], cfg: &RewardConfig) -> Result<GroupScores>;

    fn log_probs<'p>(
        &self,
        tape: &mut Tape<'p>,
        view: &ParamView<'p>,
        prompt: &Self::Prompt,
        responses: &[&Self::Response],
    ) -> Result<Vec<Var>>;
}

/// `−(1/m) Σ A_i · log π_i`.
pub fn policy_loss(tape: &mut Tape<'_>, log_probs: &[Var], advantages: &[f64], m: usize) -> Result<Var> {
    if log_probs.len() != advantages.len() || log_probs.is_empty() {
        return Err(Error::invalid("policy loss needs one advantage per log-probability"));
    }
    let mut acc: Option<Var> = None;
    for (&lp, &a) in log_probs.iter().zip(advantages) {
        let term = tape.scale(lp, -a / m as f64);
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrpoOutcome {
    /// One entry per prompt, each with `m` scores.
    pub groups: Vec<GroupScores>,
    /// False when every advantage was zero and the step was skipped.
    pub updated: bool,
    pub grad_norm: f64,
}

impl GrpoOutcome {
    pub fn mean_reward(&self) -> f64 {
        self.groups.iter().map(|g| g.mean).sum::<f64>() / self.groups.len().max(1) as f64
    }

    pub fn mean_abs_advantage(&self) -> f64 {
        self.groups.iter().map(|g| g.mean_abs_advantage()).sum::<f64>() / self.groups.len().max(1) as f64
    }
}

struct PromptResult {
    scores: GroupScores,
    grads: Option<Gradients>,
}

/// One optimizer update over a batch of prompts. Rollouts for all prompts
/// read the same parameter snapshot; the update happens once at the end.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step<P: Policy>(
    policy: &P,
    store: &mut ParamStore,
    optimizer: &mut AdamW,
    trainable: &TrainableSet,
    prompts: &[&P::Prompt],
    cfg: &RewardConfig,
    temperature: f64,
    lr: f64,
    step_seed: u64,
    exec: Exec,
) -> Result<GrpoOutcome> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::invalid("grpo step needs at least one prompt"));
    }
    let m = cfg.group_size;
    let snapshot: &ParamStore = store;
    let indices: Vec<usize> = (0..prompts.len()).collect();
    let run = |&i: &usize| -> Result<PromptResult> {
        let prompt = prompts[i];
        let responses = (0..m)
            .map(|j| {
                let s = seed::derive_indexed(step_seed, "rollout", (i * m + j) as u64);
                policy.rollout(snapshot, prompt, temperature, s)
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = policy.score(prompt, &responses, cfg)?;
        if scores.advantages.len() != m {
            return Err(Error::invalid("policy returned a group of the wrong size"));
        }
        let active: Vec<usize> = (0..m).filter(|&j| scores.advantages[j] != 0.0).collect();
        if active.is_empty() {
            return Ok(PromptResult { scores, grads: None });
        }
        let mut tape = Tape::new();
        let view = ParamView::with(snapshot, trainable);
        let picked: Vec<&P::Response> = active.iter().map(|&j| &responses[j]).collect();
        let lps = policy.log_probs(&mut tape, &view, prompt, &picked)?;
        let adv: Vec<f64> = active.iter().map(|&j| scores.advantages[j]).collect();
        let loss = policy_loss(&mut tape, &lps, &adv, m)?;
        let grads = tape.backward(loss, snapshot)?;
        Ok(PromptResult {
            scores,
            grads: Some(grads),
        })
    };
    let (groups, grads) = par::map_fold(
        exec,
        &indices,
        Ok((Vec::new(), None::<Gradients>)),
        run,
        |acc: Result<(Vec<GroupScores>, Option<Gradients>)>, r| {
            let (mut groups, mut total) = acc?;
            let r = r?;
            groups.push(r.scores);
            if let Some(g) = r.grads {
                match total.as_mut() {
                    None => total = Some(g),
                    Some(t) => t.accumulate(&g),
                }
            }
            Ok((groups, total))
        },
    )?;
    let Some(mut grads) = grads.filter(|g| !g.is_all_zero()) else {
        ::log::debug!("grpo: all advantages zero, step skipped");
        return Ok(GrpoOutcome {
            groups,
            updated: false,
            grad_norm: 0.0,
        });
    };
    grads.scale(1.0 / prompts.len() as f64);
    let grad_norm = grads.global_norm();
    optimizer.step(store, &grads, lr, trainable)?;
    Ok(GrpoOutcome {
        groups,
        updated: true,
        grad_norm,
    })
}

/// The captioning model as a policy over response token ids.
pub struct LmPolicy<'a> {
    pub model: &'a Model,
    pub encoder: &'a dyn SentenceEncoder,
    pub max_new: usize,
}

impl Policy for LmPolicy<'_> {
    type Prompt = Example;
    type Response = Vec<usize>;

    fn rollout(&self, store: &ParamStore, prompt: &Example, temperature: f64, seed: u64) -> Result<Vec<usize>> {
        let opts = GenerateOptions {
            decoding: Decoding::Sample { temperature },
            max_new: self.max_new,
            seed,
        };
        self.model.generate(store, &prompt.groups, &prompt.instruction, &opts)
    }

    fn score(&self, prompt: &Example, responses: &[Vec<usize>], cfg: &RewardConfig) -> Result<GroupScores> {
        let texts: Vec<String> = responses.iter().map(|r| self.model.vocab.decode(r)).collect();
        score_group(&texts, &prompt.reference, self.encoder, cfg)
    }

    fn log_probs<'p>(
        &self,
        tape: &mut Tape<'p>,
        view: &ParamView<'p>,
        prompt: &Example,
        responses: &[&Vec<usize>],
    ) -> Result<Vec<Var>> {
        let slices: Vec<&[usize]> = responses.iter().map(|r| r.as_slice()).collect();
        self.model
            .response_log_probs(tape, view, &prompt.groups, &prompt.instruction, &slices)
    }
}

/// Softmax policy over a fixed set of arms with known rewards; a sanity
/// environment where the optimum is known.
pub struct Bandit {
    pub rewards: Vec<f64>,
    pub logits: ParamId,
}

pub const BANDIT_PARAM: &str = "bandit.logits";

impl Bandit {
    /// Register uniform logits for `rewards.len()` arms.
    pub fn init(rewards: Vec<f64>, store: &mut ParamStore) -> Result<Self> {
        if rewards.len() < 2 {
            return Err(Error::invalid("bandit needs at least two arms"));
        }
        let logits = store.insert(BANDIT_PARAM, Tensor::zeros(&[1, rewards.len()]));
        Ok(Bandit { rewards, logits })
    }

    pub fn probabilities(&self, store: &ParamStore) -> Vec<f64> {
        let row = store.get(self.logits).data();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }
}

impl Policy for Bandit {
    type Prompt = ();
    type Response = usize;

    fn rollout(&self, store: &ParamStore, _: &(), temperature: f64, seed: u64) -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(sample_token(store.get(self.logits).data(), temperature, &mut rng))
    }

    fn score(&self, _: &(), responses: &[usize], cfg: &RewardConfig) -> Result<GroupScores> {
        let s: Vec<f64> = responses.iter().map(|&a| self.rewards[a]).collect();
        let advantages = group_advantages(&s, cfg.epsilon)?;
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        Ok(GroupScores {
            s_sem: s.clone(),
            s_len: vec![1.0; s.len()],
            s,
            advantages,
            mean,
        })
    }

    fn log_probs<'p>(&self, tape: &mut Tape<'p>, view: &ParamView<'p>, _: &(), responses: &[&usize]) -> Result<Vec<Var>> {
        let logits = view.var(tape, self.logits);
        responses
            .iter()
            .map(|&&a| {
                let nll = tape.cross_entropy(logits, &[a], &[true], crate::numerics::Reduction::Sum)?;
                Ok(tape.scale(nll, -1.0))
            })
            .collect()
    }
}
