//! Geometric point-cloud tokenizer: local aggregation over kNN groups,
//! projection into the LM width, and vector quantization against a learned
//! codebook with straight-through gradients.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, FpsStart, Groups, PointCloud};
use crate::numerics::{ParamId, ParamStore, ParamView, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Mean,
    Attention,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            "attention" => Ok(Pooling::Attention),
            other => Err(Error::invalid(format!(
                "unknown pooling `{other}` (expected max, mean or attention)"
            ))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
            Pooling::Attention => "attention",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Sampled centers N_s; one token per center.
    pub n_samples: usize,
    /// Neighbours per group K_g (center included).
    pub k_neighbors: usize,
    pub codebook_size: usize,
    pub d_geo: usize,
    pub d_llm: usize,
    /// Columns per input point (3 for xyz, 6 with rgb).
    pub in_dim: usize,
    pub beta: f64,
    pub pooling: Pooling,
    /// Skip quantization and hand H to the LM directly.
    pub continuous: bool,
    /// Let the next-token loss reach codebook rows through the token embeddings.
    pub codebook_from_ntp: bool,
    /// Seed for the first FPS pick; `None` starts from index 0.
    pub fps_seed: Option<u64>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            n_samples: 32,
            k_neighbors: 8,
            codebook_size: 256,
            d_geo: 64,
            d_llm: 128,
            in_dim: 6,
            beta: 0.25,
            pooling: Pooling::Max,
            continuous: false,
            codebook_from_ntp: false,
            fps_seed: None,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("n_samples", self.n_samples),
            ("k_neighbors", self.k_neighbors),
            ("codebook_size", self.codebook_size),
            ("d_geo", self.d_geo),
            ("d_llm", self.d_llm),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(Error::invalid(format!("tokenizer {name} must be positive")));
            }
        }
        if self.in_dim < 3 {
            return Err(Error::invalid("tokenizer in_dim must be ≥ 3"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("tokenizer beta must be a finite non-negative number"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub indices: Vec<usize>,
    /// `M×d_llm` rows gathered from the codebook.
    pub hq: Tensor,
}

/// Nearest code for every row of `h` by squared Euclidean distance; ties go
/// to the lowest index.
pub fn quantize(h: &Tensor, codebook: &Tensor) -> Result<Quantized> {
    if codebook.ndim() != 2 || codebook.rows() == 0 {
        return Err(Error::invalid("codebook must be a non-empty matrix"));
    }
    if h.ndim() != 2 || h.cols() != codebook.cols() {
        return Err(Error::shape("quantize", h.shape(), codebook.shape()));
    }
    let indices: Vec<usize> = (0..h.rows())
        .map(|i| {
            let row = h.row(i);
            let mut best = (f64::INFINITY, 0);
            for k in 0..codebook.rows() {
                let d: f64 = row.iter().zip(codebook.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect();
    let hq = codebook.gather_rows(&indices)?;
    Ok(Quantized { indices, hq })
}

/// `H = Z·W`.
pub fn project(z: &Tensor, w: &Tensor) -> Result<Tensor> {
    z.matmul(w)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqTerms {
    pub codebook: f64,
    pub commitment: f64,
    pub beta: f64,
}

impl VqTerms {
    pub fn total(&self) -> f64 {
        self.codebook + self.beta * self.commitment
    }
}

/// Forward values of the two VQ terms (means over elements). Both share the
/// same value; they differ only in where their gradients flow.
pub fn vq_loss(h: &Tensor, hq: &Tensor, beta: f64) -> Result<VqTerms> {
    if h.shape() != hq.shape() {
        return Err(Error::shape("vq_loss", h.shape(), hq.shape()));
    }
    let n = h.len().max(1) as f64;
    let mse = h.data().iter().zip(hq.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok(VqTerms {
        codebook: mse,
        commitment: mse,
        beta,
    })
}

/// Fraction of the codebook hit by an index stream.
pub fn codebook_utilization<I: IntoIterator<Item = usize>>(indices: I, codebook_size: usize) -> Result<f64> {
    let mut seen = vec![false; codebook_size];
    let mut any = false;
    for i in indices {
        any = true;
        if i >= codebook_size {
            return Err(Error::invalid(format!("code {i} out of range for codebook of {codebook_size}")));
        }
        seen[i] = true;
    }
    if !any {
        return Err(Error::invalid("codebook utilization of an empty index stream"));
    }
    Ok(seen.iter().filter(|&&s| s).count() as f64 / codebook_size as f64)
}

/// Values captured at a reference parameter point. Replaying a forward pass
/// against an anchor freezes the code assignment and every stop-gradient
/// input, so the loss becomes a smooth function whose finite differences
/// agree with the straight-through gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub h: Tensor,
    pub hq: Tensor,
    pub indices: Vec<usize>,
}

/// Tape handles produced by one tokenizer pass.
#[derive(Clone, Debug)]
pub struct TokenizerOutput {
    pub z: Var,
    pub h: Var,
    /// Point tokens handed to the LM (`M×d_llm`).
    pub tokens: Var,
    /// Code ids; empty in continuous mode.
    pub indices: Vec<usize>,
    pub hq: Option<Var>,
    pub codebook_loss: Option<Var>,
    pub commitment_loss: Option<Var>,
    /// `codebook + β·commitment`, a zero constant in continuous mode.
    pub vq_loss: Var,
}

impl TokenizerOutput {
    pub fn anchor(&self, tape: &Tape<'_>) -> Option<Anchor> {
        self.hq.map(|hq| Anchor {
            h: tape.value(self.h).clone(),
            hq: tape.value(hq).clone(),
            indices: self.indices.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
struct TokenizerIds {
    feat1_w: ParamId,
    feat1_b: ParamId,
    feat2_w: ParamId,
    feat2_b: ParamId,
    relpos_w: ParamId,
    relpos_b: ParamId,
    proj: ParamId,
    codebook: ParamId,
    attn: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    ids: TokenizerIds,
}

pub const PREFIX: &str = "tok.";

impl Tokenizer {
    /// Register freshly initialized tokenizer parameters in `store`.
    pub fn init<R: Rng + ?Sized>(config: TokenizerConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        store.insert("tok.feat1.w", Tensor::randn(&[c.in_dim, c.d_geo], he(c.in_dim), rng));
        store.insert("tok.feat1.b", Tensor::zeros(&[c.d_geo]));
        store.insert("tok.feat2.w", Tensor::randn(&[c.d_geo, c.d_geo], he(c.d_geo), rng));
        store.insert("tok.feat2.b", Tensor::zeros(&[c.d_geo]));
        store.insert("tok.relpos.w", Tensor::randn(&[3, c.d_geo], he(3), rng));
        store.insert("tok.relpos.b", Tensor::zeros(&[c.d_geo]));
        let proj_std = 1.0 / (c.d_geo as f64).sqrt();
        store.insert("tok.proj", Tensor::randn(&[c.d_geo, c.d_llm], proj_std, rng));
        let code_std = 1.0 / (c.d_llm as f64).sqrt();
        store.insert("tok.codebook", Tensor::randn(&[c.codebook_size, c.d_llm], code_std, rng));
        if c.pooling == Pooling::Attention {
            store.insert("tok.attn_pool", Tensor::randn(&[c.d_geo, 1], proj_std, rng));
        }
        Self::bind(config, store)
    }

    /// Attach to tokenizer parameters already in `store`, checking shapes.
    pub fn bind(config: TokenizerConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store.id(name)?;
            if store.get(id).shape() != shape {
                return Err(Error::shape("tokenizer parameter", store.get(id).shape(), shape));
            }
            Ok(id)
        };
        let ids = TokenizerIds {
            feat1_w: get("tok.feat1.w", &[c.in_dim, c.d_geo])?,
            feat1_b: get("tok.feat1.b", &[c.d_geo])?,
            feat2_w: get("tok.feat2.w", &[c.d_geo, c.d_geo])?,
            feat2_b: get("tok.feat2.b", &[c.d_geo])?,
            relpos_w: get("tok.relpos.w", &[3, c.d_geo])?,
            relpos_b: get("tok.relpos.b", &[c.d_geo])?,
            proj: get("tok.proj", &[c.d_geo, c.d_llm])?,
            codebook: get("tok.codebook", &[c.codebook_size, c.d_llm])?,
            attn: match c.pooling {
                Pooling::Attention => Some(get("tok.attn_pool", &[c.d_geo, 1])?),
                _ => None,
            },
        };
        Ok(Tokenizer { config, ids })
    }

    pub fn codebook_id(&self) -> ParamId {
        self.ids.codebook
    }

    pub fn projection_id(&self) -> ParamId {
        self.ids.proj
    }

    /// Normalize, sample centers and group neighbourhoods. Depends only on
    /// the cloud and config, so callers may cache it across epochs.
    pub fn prepare(&self, cloud: &PointCloud) -> Result<Groups> {
        if cloud.dim() != self.config.in_dim {
            return Err(Error::invalid(format!(
                "cloud has {} columns, tokenizer expects {}",
                cloud.dim(),
                self.config.in_dim
            )));
        }
        let cloud = geometry::normalize(cloud)?;
        let start = match self.config.fps_seed {
            Some(s) => FpsStart::Seeded(s),
            None => FpsStart::First,
        };
        let centers = geometry::fps(&cloud, self.config.n_samples, start)?;
        geometry::knn_group(&cloud, &centers, self.config.k_neighbors)
    }

    /// Pooled local features `Z` (`M×d_g`).
    pub fn aggregate<'p>(&self, tape: &mut Tape<'p>, view: &ParamView<'p>, groups: &Groups) -> Result<Var> {
        if groups.k != self.config.k_neighbors || groups.features.cols() != self.config.in_dim {
            return Err(Error::invalid(format!(
                "groups of {}×{} do not match tokenizer K_g={} D={}",
                groups.k,
                groups.features.cols(),
                self.config.k_neighbors,
                self.config.in_dim
            )));
        }
        let ids = &self.ids;
        let x = tape.constant(groups.features.clone());
        let rel = tape.constant(groups.rel_coords.clone());
        let (w1, b1) = (view.var(tape, ids.feat1_w), view.var(tape, ids.feat1_b));
        let (w2, b2) = (view.var(tape, ids.feat2_w), view.var(tape, ids.feat2_b));
        let (wr, br) = (view.var(tape, ids.relpos_w), view.var(tape, ids.relpos_b));
        let hidden = tape.affine(x, w1, b1)?;
        let hidden = tape.relu(hidden);
        let feat = tape.affine(hidden, w2, b2)?;
        let pos = tape.affine(rel, wr, br)?;
        let per_point = tape.add(feat, pos)?;
        let k = groups.k;
        match self.config.pooling {
            Pooling::Max => tape.max_pool(per_point, k),
            Pooling::Mean => tape.mean_pool(per_point, k),
            Pooling::Attention => {
                let a = view.var(tape, ids.attn.expect("attention pooling bound"));
                let scores = tape.matmul(per_point, a)?;
                let scores = tape.reshape(scores, &[groups.n_groups(), k])?;
                let weights = tape.softmax(scores);
                tape.weighted_pool(per_point, weights)
            }
        }
    }

    /// Full pass from grouped points to LM-ready point tokens and VQ loss.
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        view: &ParamView<'p>,
        groups: &Groups,
        anchor: Option<&Anchor>,
    ) -> Result<TokenizerOutput> {
        let z = self.aggregate(tape, view, groups)?;
        let w = view.var(tape, self.ids.proj);
        let h = tape.matmul(z, w)?;
        if self.config.continuous {
            let zero = tape.constant(Tensor::scalar(0.0));
            return Ok(TokenizerOutput {
                z,
                h,
                tokens: h,
                indices: Vec::new(),
                hq: None,
                codebook_loss: None,
                commitment_loss: None,
                vq_loss: zero,
            });
        }
        let codebook = view.var(tape, self.ids.codebook);
        let q = quantize_on_tape(tape, h, codebook, self.config.beta, self.config.codebook_from_ntp, anchor)?;
        Ok(TokenizerOutput {
            z,
            h,
            tokens: q.tokens,
            indices: q.indices,
            hq: Some(q.hq),
            codebook_loss: Some(q.codebook_loss),
            commitment_loss: Some(q.commitment_loss),
            vq_loss: q.vq_loss,
        })
    }

    /// Gradient-free tokenization: the point-token matrix and code ids.
    pub fn encode(&self, store: &ParamStore, groups: &Groups) -> Result<(Tensor, Vec<usize>)> {
        let mut tape = Tape::new();
        let view = ParamView::all(store);
        let out = self.forward(&mut tape, &view, groups, None)?;
        Ok((tape.value(out.tokens).clone(), out.indices))
    }

    /// Names of every tokenizer parameter in `store`.
    pub fn param_ids(store: &ParamStore) -> Vec<ParamId> {
        store.iter().filter(|(_, n, _)| n.starts_with(PREFIX)).map(|(id, _, _)| id).collect()
    }
}

pub(crate) struct QuantizeVars {
    pub tokens: Var,
    pub hq: Var,
    pub indices: Vec<usize>,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
    pub vq_loss: Var,
}

fn mse(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Quantize `h` against `codebook`, build both VQ terms behind stop-gradients
/// and the straight-through token output.
pub(crate) fn quantize_on_tape(
    tape: &mut Tape<'_>,
    h: Var,
    codebook: Var,
    beta: f64,
    to_code: bool,
    anchor: Option<&Anchor>,
) -> Result<QuantizeVars> {
    let indices = match anchor {
        Some(a) => a.indices.clone(),
        None => quantize(tape.value(h), tape.value(codebook))?.indices,
    };
    let hq = tape.gather(codebook, &indices)?;
    let (sg_h, sg_hq) = match anchor {
        Some(a) => (tape.constant(a.h.clone()), tape.constant(a.hq.clone())),
        None => (tape.stop_grad(h), tape.stop_grad(hq)),
    };
    let codebook_loss = mse(tape, sg_h, hq)?;
    let commitment_loss = mse(tape, h, sg_hq)?;
    let weighted = tape.scale(commitment_loss, beta);
    let vq_loss = tape.add(codebook_loss, weighted)?;
    let tokens = tape.straight_through(h, hq, to_code, anchor.map(|a| (&a.h, &a.hq)))?;
    Ok(QuantizeVars {
        tokens,
        hq,
        indices,
        codebook_loss,
        commitment_loss,
        vq_loss,
    })
}

/// One line of a token-stream dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRecord {
    pub cloud_id: String,
    pub indices: Vec<u32>,
}

pub fn write_token_dump<W: Write>(mut w: W, records: &[TokenRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_token_dump<R: BufRead>(r: R) -> Result<Vec<TokenRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: "<token dump>".into(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
