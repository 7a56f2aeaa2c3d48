//! Pre-norm decoder-only transformer with learned absolute positions and an
//! untied output head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::sequence::Sequence;
use crate::numerics::{ParamId, ParamStore, ParamView, Reduction, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_ctx: usize,
    pub d_mlp: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_ctx: 256,
            d_mlp: 512,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_ctx == 0 || self.d_mlp == 0 {
            return Err(Error::invalid("lm dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lm {
    pub config: LmConfig,
    pub vocab_size: usize,
    pub(crate) tok_emb: ParamId,
    pub(crate) pos_emb: ParamId,
    pub(crate) layers: Vec<LayerIds>,
    pub(crate) lnf_g: ParamId,
    pub(crate) lnf_b: ParamId,
    pub(crate) head_w: ParamId,
    pub(crate) head_b: ParamId,
}

pub const PREFIX: &str = "lm.";

fn layer_name(i: usize, part: &str) -> String {
    format!("lm.h{i}.{part}")
}

impl Lm {
    pub fn init<R: Rng + ?Sized>(config: LmConfig, vocab_size: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_mlp);
        let sd = 1.0 / (d as f64).sqrt();
        let resid = sd / (2.0 * config.n_layers as f64).sqrt();
        store.insert("lm.tok_emb", Tensor::randn(&[vocab_size, d], sd, rng));
        store.insert("lm.pos_emb", Tensor::randn(&[config.max_ctx, d], 0.1 * sd, rng));
        for i in 0..config.n_layers {
            let mut put = |part: &str, t: Tensor| {
                store.insert(layer_name(i, part), t);
            };
            put("ln1.g", Tensor::full(&[d], 1.0));
            put("ln1.b", Tensor::zeros(&[d]));
            // No key bias: it shifts every score in a row equally and cancels
            // in the softmax.
            for w in ["wq", "wk", "wv"] {
                put(w, Tensor::randn(&[d, d], sd, rng));
            }
            put("bq", Tensor::zeros(&[d]));
            put("bv", Tensor::zeros(&[d]));
            put("wo", Tensor::randn(&[d, d], resid, rng));
            put("bo", Tensor::zeros(&[d]));
            put("ln2.g", Tensor::full(&[d], 1.0));
            put("ln2.b", Tensor::zeros(&[d]));
            put("mlp.w1", Tensor::randn(&[d, f], (2.0 / d as f64).sqrt(), rng));
            put("mlp.b1", Tensor::zeros(&[f]));
            put("mlp.w2", Tensor::randn(&[f, d], 1.0 / (f as f64).sqrt() / (2.0 * config.n_layers as f64).sqrt(), rng));
            put("mlp.b2", Tensor::zeros(&[d]));
        }
        store.insert("lm.ln_f.g", Tensor::full(&[d], 1.0));
        store.insert("lm.ln_f.b", Tensor::zeros(&[d]));
        store.insert("lm.head.w", Tensor::randn(&[d, vocab_size], sd, rng));
        store.insert("lm.head.b", Tensor::zeros(&[vocab_size]));
        Self::bind(config, vocab_size, store)
    }

    pub fn bind(config: LmConfig, vocab_size: usize, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_mlp);
        let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store.id(name)?;
            if store.get(id).shape() != shape {
                return Err(Error::shape("lm parameter", store.get(id).shape(), shape));
            }
            Ok(id)
        };
        let layers = (0..config.n_layers)
            .map(|i| {
                let g = |part: &str, shape: &[usize]| get(&layer_name(i, part), shape);
                Ok(LayerIds {
                    ln1_g: g("ln1.g", &[d])?,
                    ln1_b: g("ln1.b", &[d])?,
                    wq: g("wq", &[d, d])?,
                    bq: g("bq", &[d])?,
                    wk: g("wk", &[d, d])?,
                    wv: g("wv", &[d, d])?,
                    bv: g("bv", &[d])?,
                    wo: g("wo", &[d, d])?,
                    bo: g("bo", &[d])?,
                    ln2_g: g("ln2.g", &[d])?,
                    ln2_b: g("ln2.b", &[d])?,
                    w1: g("mlp.w1", &[d, f])?,
                    b1: g("mlp.b1", &[f])?,
                    w2: g("mlp.w2", &[f, d])?,
                    b2: g("mlp.b2", &[d])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Lm {
            tok_emb: get("lm.tok_emb", &[vocab_size, d])?,
            pos_emb: get("lm.pos_emb", &[config.max_ctx, d])?,
            lnf_g: get("lm.ln_f.g", &[d])?,
            lnf_b: get("lm.ln_f.b", &[d])?,
            head_w: get("lm.head.w", &[d, vocab_size])?,
            head_b: get("lm.head.b", &[vocab_size])?,
            layers,
            config,
            vocab_size,
        })
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.tok_emb
    }

    /// Every parameter belonging to transformer block `i`.
    pub fn layer_param_ids(&self, i: usize) -> Vec<ParamId> {
        let l = &self.layers[i];
        vec![
            l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.wv, l.bv, l.wo, l.bo, l.ln2_g, l.ln2_b, l.w1, l.b1, l.w2, l.b2,
        ]
    }

    /// Input embeddings for `seq`: token rows for text, `points` rows for the
    /// point span, plus learned positions everywhere.
    pub fn embed<'p>(&self, tape: &mut Tape<'p>, view: &ParamView<'p>, seq: &Sequence, points: Option<Var>) -> Result<Var> {
        let table = view.var(tape, self.tok_emb);
        let prefix = tape.gather(table, seq.prefix_ids())?;
        let suffix = tape.gather(table, seq.suffix_ids())?;
        let x = match (seq.n_points, points) {
            (0, _) => tape.concat_rows(&[prefix, suffix])?,
            (m, Some(p)) => {
                let shape = tape.value(p).shape();
                if shape != [m, self.config.d_model] {
                    return Err(Error::shape("embed points", shape, &[m, self.config.d_model]));
                }
                tape.concat_rows(&[prefix, p, suffix])?
            }
            (m, None) => return Err(Error::invalid(format!("sequence expects {m} point tokens, none given"))),
        };
        let pos_table = view.var(tape, self.pos_emb);
        let positions: Vec<usize> = (0..seq.len()).collect();
        let pos = tape.gather(pos_table, &positions)?;
        tape.add(x, pos)
    }

    /// Logits `T×|V|` for embedded inputs `T×d`.
    pub fn forward<'p>(&self, tape: &mut Tape<'p>, view: &ParamView<'p>, inputs: Var) -> Result<Var> {
        let t = tape.value(inputs).rows();
        if t > self.config.max_ctx {
            return Err(Error::invalid(format!("{t} positions exceed max_ctx {}", self.config.max_ctx)));
        }
        let mut x = inputs;
        for l in &self.layers {
            let p = |tape: &mut Tape<'p>, id| view.var(tape, id);
            let (g1, b1) = (p(tape, l.ln1_g), p(tape, l.ln1_b));
            let a = tape.layer_norm(x, g1, b1)?;
            let (wq, bq) = (p(tape, l.wq), p(tape, l.bq));
            let wk = p(tape, l.wk);
            let (wv, bv) = (p(tape, l.wv), p(tape, l.bv));
            let q = tape.affine(a, wq, bq)?;
            let k = tape.matmul(a, wk)?;
            let v = tape.affine(a, wv, bv)?;
            let att = tape.causal_attention(q, k, v, self.config.n_heads)?;
            let (wo, bo) = (p(tape, l.wo), p(tape, l.bo));
            let o = tape.affine(att, wo, bo)?;
            x = tape.add(x, o)?;
            let (g2, b2) = (p(tape, l.ln2_g), p(tape, l.ln2_b));
            let m = tape.layer_norm(x, g2, b2)?;
            let (w1, c1) = (p(tape, l.w1), p(tape, l.b1));
            let hdn = tape.affine(m, w1, c1)?;
            let hdn = tape.relu(hdn);
            let (w2, c2) = (p(tape, l.w2), p(tape, l.b2));
            let o = tape.affine(hdn, w2, c2)?;
            x = tape.add(x, o)?;
        }
        let (gf, bf) = (view.var(tape, self.lnf_g), view.var(tape, self.lnf_b));
        let x = tape.layer_norm(x, gf, bf)?;
        let (hw, hb) = (view.var(tape, self.head_w), view.var(tape, self.head_b));
        tape.affine(x, hw, hb)
    }

    /// Mean cross-entropy over the response positions of `seq`.
    pub fn ntp_loss(&self, tape: &mut Tape<'_>, logits: Var, seq: &Sequence) -> Result<Var> {
        tape.cross_entropy(logits, &seq.targets, &seq.loss_mask, Reduction::Mean)
    }

    /// `log π(response | prompt)`: the summed log-probability of the response
    /// positions of `seq`.
    pub fn response_log_prob(&self, tape: &mut Tape<'_>, logits: Var, seq: &Sequence) -> Result<Var> {
        let nll = tape.cross_entropy(logits, &seq.targets, &seq.loss_mask, Reduction::Sum)?;
        Ok(tape.scale(nll, -1.0))
    }
}

/// `ℒ_total = ℒ_NTP + λ·ℒ_VQ`.
pub fn total_loss(tape: &mut Tape<'_>, ntp: Var, vq: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(vq, lambda);
    tape.add(ntp, weighted)
}
