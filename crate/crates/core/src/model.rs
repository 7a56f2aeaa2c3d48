//! Tokenizer and language model wired together: mixed point/text sequences,
//! the joint objective, response log-probabilities and captioning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Groups, PointCloud};
use crate::lm::vocab::{EOS, P_END, P_START};
use crate::lm::{build_sequence, total_loss, GenerateOptions, Lm, LmConfig, Sequence, Vocab};
use crate::numerics::{ParamStore, ParamView, Tape, Trainable, TrainableSet, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{Anchor, Tokenizer, TokenizerConfig, TokenizerOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub lm: LmConfig,
    /// Weight λ of the VQ term in the joint loss.
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tokenizer: TokenizerConfig::default(),
            lm: LmConfig::default(),
            lambda: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.lm.validate()?;
        if self.tokenizer.d_llm != self.lm.d_model {
            return Err(Error::invalid(format!(
                "tokenizer d_llm {} differs from lm d_model {}",
                self.tokenizer.d_llm, self.lm.d_model
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be finite and non-negative"));
        }
        if self.tokenizer.n_samples + 4 > self.lm.max_ctx {
            return Err(Error::invalid(format!(
                "{} point tokens leave no room in a context of {}",
                self.tokenizer.n_samples, self.lm.max_ctx
            )));
        }
        Ok(())
    }
}

/// One training pair with its geometry precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub groups: Groups,
    pub instruction: Vec<usize>,
    /// Response ids ending in `<eos>`.
    pub response: Vec<usize>,
    pub reference: String,
}

/// Tape handles of the joint objective for one example.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ntp: Var,
    pub vq: Var,
    pub tokens: TokenizerOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub lm: Lm,
    pub vocab: Vocab,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, vocab: Vocab, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Tokenizer::init(config.tokenizer.clone(), store, rng)?;
        Lm::init(config.lm.clone(), vocab.len(), store, rng)?;
        Self::bind(config, vocab, store)
    }

    pub fn bind(config: ModelConfig, vocab: Vocab, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let tokenizer = Tokenizer::bind(config.tokenizer.clone(), store)?;
        let lm = Lm::bind(config.lm.clone(), vocab.len(), store)?;
        Ok(Model {
            config,
            tokenizer,
            lm,
            vocab,
        })
    }

    /// Same weights with a different number of point tokens.
    pub fn with_samples(&self, n_samples: usize) -> Result<Model> {
        let mut m = self.clone();
        m.config.tokenizer.n_samples = n_samples;
        m.config.validate()?;
        m.tokenizer.config.n_samples = n_samples;
        Ok(m)
    }

    pub fn n_points(&self) -> usize {
        self.config.tokenizer.n_samples
    }

    pub fn prepare(&self, cloud: &PointCloud) -> Result<Groups> {
        self.tokenizer.prepare(cloud)
    }

    pub fn example(&self, cloud: &PointCloud, instruction: &str, response: &str) -> Result<Example> {
        let groups = self.prepare(cloud)?;
        let instruction_ids = self.vocab.encode(instruction)?;
        let mut response_ids = self.vocab.encode(response)?;
        response_ids.push(EOS);
        // fail early on context overflow
        build_sequence(self.n_points(), &instruction_ids, &response_ids, self.config.lm.max_ctx)?;
        Ok(Example {
            groups,
            instruction: instruction_ids,
            response: response_ids,
            reference: response.to_string(),
        })
    }

    fn sequence(&self, instruction: &[usize], response: &[usize]) -> Result<Sequence> {
        build_sequence(self.n_points(), instruction, response, self.config.lm.max_ctx)
    }

    /// `ℒ_NTP + λ·ℒ_VQ` for one example.
    pub fn loss<'p>(&self, tape: &mut Tape<'p>, view: &ParamView<'p>, ex: &Example, anchor: Option<&Anchor>) -> Result<LossVars> {
        let tokens = self.tokenizer.forward(tape, view, &ex.groups, anchor)?;
        let seq = self.sequence(&ex.instruction, &ex.response)?;
        let inputs = self.lm.embed(tape, view, &seq, Some(tokens.tokens))?;
        let logits = self.lm.forward(tape, view, inputs)?;
        let ntp = self.lm.ntp_loss(tape, logits, &seq)?;
        let total = total_loss(tape, ntp, tokens.vq_loss, self.config.lambda)?;
        Ok(LossVars {
            total,
            ntp,
            vq: tokens.vq_loss,
            tokens,
        })
    }

    /// `log π(response | points, instruction)` for each response, sharing
    /// one tokenizer pass.
    pub fn response_log_probs<'p>(
        &self,
        tape: &mut Tape<'p>,
        view: &ParamView<'p>,
        groups: &Groups,
        instruction: &[usize],
        responses: &[&[usize]],
    ) -> Result<Vec<Var>> {
        let tokens = self.tokenizer.forward(tape, view, groups, None)?;
        responses
            .iter()
            .map(|resp| {
                if resp.is_empty() {
                    return Err(Error::invalid("cannot score an empty response"));
                }
                let seq = self.sequence(instruction, resp)?;
                let inputs = self.lm.embed(tape, view, &seq, Some(tokens.tokens))?;
                let logits = self.lm.forward(tape, view, inputs)?;
                self.lm.response_log_prob(tape, logits, &seq)
            })
            .collect()
    }

    /// Point tokens and code ids without building gradients.
    pub fn point_tokens(&self, store: &ParamStore, groups: &Groups) -> Result<(Tensor, Vec<usize>)> {
        self.tokenizer.encode(store, groups)
    }

    /// Room left for a response after the prompt.
    pub fn max_new_tokens(&self, instruction_len: usize) -> usize {
        self.config.lm.max_ctx.saturating_sub(self.n_points() + 3 + instruction_len)
    }

    pub fn generate(&self, store: &ParamStore, groups: &Groups, instruction: &[usize], opts: &GenerateOptions) -> Result<Vec<usize>> {
        let (tokens, _) = self.point_tokens(store, groups)?;
        let mut opts = *opts;
        opts.max_new = opts.max_new.min(self.max_new_tokens(instruction.len()));
        if opts.max_new == 0 {
            return Err(Error::invalid("prompt fills the whole context"));
        }
        self.lm.generate(store, &tokens, instruction, &opts)
    }

    /// Text answer to `instruction` about `cloud`.
    pub fn respond(&self, store: &ParamStore, cloud: &PointCloud, instruction: &str, opts: &GenerateOptions) -> Result<String> {
        let groups = self.prepare(cloud)?;
        let ids = self.vocab.encode(instruction)?;
        let out = self.generate(store, &groups, &ids, opts)?;
        Ok(self.vocab.decode(&out))
    }

    /// Tokenizer, the first `k` transformer blocks and the two point-span
    /// delimiter embeddings; everything else frozen.
    pub fn partial_trainable(&self, store: &ParamStore, k: usize) -> Result<TrainableSet> {
        if k > self.config.lm.n_layers {
            return Err(Error::invalid(format!(
                "cannot unfreeze {k} of {} layers",
                self.config.lm.n_layers
            )));
        }
        let mut set = TrainableSet::none(store);
        for id in Tokenizer::param_ids(store) {
            set.set(id, Trainable::Full);
        }
        for i in 0..k {
            for id in self.lm.layer_param_ids(i) {
                set.set(id, Trainable::Full);
            }
        }
        set.set(self.lm.token_embedding_id(), Trainable::Rows(vec![P_START, P_END]));
        Ok(set)
    }
}
