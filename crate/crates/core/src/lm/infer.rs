//! Gradient-free forward pass with a key/value cache for autoregressive decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::model::Lm;
use crate::lm::vocab::{BOS, EOS, P_END, P_START};
use crate::numerics::tape::{dot, normalize_rows, softmax_in_place};
use crate::numerics::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    pub decoding: Decoding,
    pub max_new: usize,
    pub seed: u64,
}

impl GenerateOptions {
    pub fn greedy(max_new: usize) -> Self {
        GenerateOptions {
            decoding: Decoding::Greedy,
            max_new,
            seed: 0,
        }
    }
}

/// Per-layer keys and values of every position fed so far.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = x.matmul(w)?;
    let n = b.len();
    for row in y.data_mut().chunks_mut(n) {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    Ok(y)
}

fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    let (rows, d) = (x.rows(), x.cols());
    let (mut xhat, _) = normalize_rows(x.data(), rows, d);
    for row in xhat.chunks_mut(d) {
        for ((v, gg), bb) in row.iter_mut().zip(g.data()).zip(b.data()) {
            *v = *v * gg + bb;
        }
    }
    Tensor::new(vec![rows, d], xhat).expect("shape preserved")
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draw from `softmax(logits / temperature)`.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let mut p: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    softmax_in_place(&mut p);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            last = i;
        }
        acc += pi;
        if u < acc {
            return i;
        }
    }
    last
}

impl Lm {
    pub fn new_cache(&self) -> KvCache {
        KvCache {
            keys: vec![Vec::new(); self.layers.len()],
            values: vec![Vec::new(); self.layers.len()],
            len: 0,
        }
    }

    /// Append `x` (`n×d` embeddings without positions) to the cache and
    /// return logits for the new positions.
    pub fn feed(&self, store: &ParamStore, cache: &mut KvCache, x: &Tensor) -> Result<Tensor> {
        let d = self.config.d_model;
        let (n, start) = (x.rows(), cache.len);
        if x.cols() != d {
            return Err(Error::shape("feed", x.shape(), &[n, d]));
        }
        if start + n > self.config.max_ctx {
            return Err(Error::invalid(format!(
                "{} positions exceed max_ctx {}",
                start + n,
                self.config.max_ctx
            )));
        }
        let pos = store.get(self.pos_emb);
        let mut h = x.clone();
        for (i, row) in h.data_mut().chunks_mut(d).enumerate() {
            for (v, p) in row.iter_mut().zip(pos.row(start + i)) {
                *v += p;
            }
        }
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for (li, l) in self.layers.iter().enumerate() {
            let a = layer_norm(&h, store.get(l.ln1_g), store.get(l.ln1_b));
            let q = affine(&a, store.get(l.wq), store.get(l.bq))?;
            let k = a.matmul(store.get(l.wk))?;
            let v = affine(&a, store.get(l.wv), store.get(l.bv))?;
            cache.keys[li].extend_from_slice(k.data());
            cache.values[li].extend_from_slice(v.data());
            let (keys, vals) = (&cache.keys[li], &cache.values[li]);
            let mut att = vec![0.0; n * d];
            let mut scores = Vec::with_capacity(start + n);
            for i in 0..n {
                let p = start + i;
                for hh in 0..heads {
                    let off = hh * dh;
                    let qrow = &q.row(i)[off..off + dh];
                    scores.clear();
                    scores.extend((0..=p).map(|j| scale * dot(qrow, &keys[j * d + off..j * d + off + dh])));
                    softmax_in_place(&mut scores);
                    let out = &mut att[i * d + off..i * d + off + dh];
                    for (j, &w) in scores.iter().enumerate() {
                        for (o, vv) in out.iter_mut().zip(&vals[j * d + off..j * d + off + dh]) {
                            *o += w * vv;
                        }
                    }
                }
            }
            let att = Tensor::new(vec![n, d], att)?;
            let o = affine(&att, store.get(l.wo), store.get(l.bo))?;
            h.add_assign(&o);
            let m = layer_norm(&h, store.get(l.ln2_g), store.get(l.ln2_b));
            let mut hid = affine(&m, store.get(l.w1), store.get(l.b1))?;
            hid.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            let o = affine(&hid, store.get(l.w2), store.get(l.b2))?;
            h.add_assign(&o);
        }
        cache.len += n;
        let h = layer_norm(&h, store.get(self.lnf_g), store.get(self.lnf_b));
        affine(&h, store.get(self.head_w), store.get(self.head_b))
    }

    /// Embeddings of `[<bos>, <p_start>, points, <p_end>, instruction]`.
    pub fn prompt_embeddings(&self, store: &ParamStore, points: &Tensor, instruction: &[usize]) -> Result<Tensor> {
        let table = store.get(self.tok_emb);
        let d = self.config.d_model;
        if points.rows() > 0 && points.cols() != d {
            return Err(Error::shape("prompt points", points.shape(), &[points.rows(), d]));
        }
        let mut data = Vec::with_capacity((points.rows() + instruction.len() + 3) * d);
        for &id in &[BOS, P_START] {
            data.extend_from_slice(table.row(id));
        }
        data.extend_from_slice(points.data());
        data.extend_from_slice(table.row(P_END));
        for &id in instruction {
            if id >= self.vocab_size {
                return Err(Error::invalid(format!("token {id} out of vocabulary")));
            }
            data.extend_from_slice(table.row(id));
        }
        let rows = data.len() / d;
        Tensor::new(vec![rows, d], data)
    }

    /// Autoregressive continuation of the prompt until `<eos>`, `max_new`
    /// tokens, or a full context. The returned ids include `<eos>` when emitted.
    pub fn generate(&self, store: &ParamStore, points: &Tensor, instruction: &[usize], opts: &GenerateOptions) -> Result<Vec<usize>> {
        if let Decoding::Sample { temperature } = opts.decoding {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::invalid("sampling temperature must be positive"));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut cache = self.new_cache();
        let prompt = self.prompt_embeddings(store, points, instruction)?;
        let logits = self.feed(store, &mut cache, &prompt)?;
        let mut last = logits.row(logits.rows() - 1).to_vec();
        let mut out = Vec::with_capacity(opts.max_new);
        let table = store.get(self.tok_emb);
        while out.len() < opts.max_new {
            let next = match opts.decoding {
                Decoding::Greedy => argmax(&last),
                Decoding::Sample { temperature } => sample_token(&last, temperature, &mut rng),
            };
            out.push(next);
            if next == EOS || cache.len() >= self.config.max_ctx {
                break;
            }
            let x = Tensor::new(vec![1, self.config.d_model], table.row(next).to_vec())?;
            last = self.feed(store, &mut cache, &x)?.into_data();
        }
        Ok(out)
    }
}
