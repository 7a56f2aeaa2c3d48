//! Caption metrics (BLEU-1, ROUGE-L, encoder similarity, class-word
//! accuracy), resolution sweeps, latency benchmarks and their CSV/SVG output.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, Sample, Shape};
use crate::error::{Error, Result};
use crate::geometry::{self, PointCloud};
use crate::lm::infer::argmax;
use crate::lm::{Decoding, GenerateOptions};
use crate::model::{Example, Model};
use crate::numerics::ParamStore;
use crate::par::{self, Exec};
use crate::rewards::{self, RewardConfig, SentenceEncoder};
use crate::seed;
use crate::tensor::Tensor;
use crate::text;

fn counts(words: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for w in words {
        *m.entry(w.as_str()).or_insert(0) += 1;
    }
    m
}

/// Clipped unigram precision times the brevity penalty.
pub fn bleu1(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (text::words(candidate), text::words(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let rc = counts(&r);
    let matched: usize = counts(&c)
        .iter()
        .map(|(w, &n)| n.min(rc.get(w).copied().unwrap_or(0)))
        .sum();
    let precision = matched as f64 / c.len() as f64;
    let bp = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    precision * bp
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS-based F-measure `(1+β²)·R·P / (R + β²·P)`.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (text::words(candidate), text::words(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&c, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * rec * p / (rec + b2 * p)
}

/// A generation names the class iff the label's shape word appears in it and
/// no other shape word does.
pub fn class_correct(generation: &str, label: Shape) -> bool {
    let named: Vec<Shape> = text::words(generation).iter().filter_map(|w| w.parse().ok()).collect();
    !named.is_empty() && named.iter().all(|&s| s == label)
}

pub fn class_accuracy(generations: &[String], labels: &[Shape]) -> Result<f64> {
    if generations.len() != labels.len() {
        return Err(Error::invalid("one label per generation required"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("class accuracy of an empty set"));
    }
    let hits = generations.iter().zip(labels).filter(|(g, &l)| class_correct(g, l)).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// An evaluation prompt with its class label when the reference names one.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub example: Example,
    pub label: Option<Shape>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub generation: String,
    pub reference: String,
    pub bleu1: f64,
    pub rouge_l: f64,
    pub encoder_similarity: f64,
    pub reward: f64,
    pub class_correct: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub bleu1: f64,
    pub rouge_l: f64,
    pub encoder_similarity: f64,
    /// Composite reward of the greedy generations.
    pub reward: f64,
    pub class_accuracy: Option<f64>,
    pub class_count: usize,
    pub per_sample: Vec<SampleMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub max_new: usize,
    pub reward: RewardConfig,
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            max_new: 16,
            reward: RewardConfig::default(),
            exec: Exec::Parallel,
        }
    }
}

fn composite_reward(generation: &str, reference: &str, encoder: &dyn SentenceEncoder, cfg: &RewardConfig) -> Result<(f64, f64)> {
    let sim = rewards::semantic_reward(generation, reference, encoder)?;
    let len = rewards::length_reward(
        text::words(generation).len() as f64,
        text::words(reference).len() as f64,
        cfg.sigma,
    );
    Ok((sim, rewards::composite(sim, len, cfg.alpha)))
}

/// Score one generation against its reference.
pub fn score_sample(generation: String, reference: &str, label: Option<Shape>, encoder: &dyn SentenceEncoder, cfg: &RewardConfig) -> Result<SampleMetrics> {
    let (sim, reward) = composite_reward(&generation, reference, encoder, cfg)?;
    Ok(SampleMetrics {
        bleu1: bleu1(&generation, reference),
        rouge_l: rouge_l(&generation, reference),
        encoder_similarity: sim,
        reward,
        class_correct: label.map(|l| class_correct(&generation, l)),
        reference: reference.to_string(),
        generation,
    })
}

pub fn summarize(per_sample: Vec<SampleMetrics>) -> Result<MetricReport> {
    if per_sample.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let n = per_sample.len() as f64;
    let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
    let labelled: Vec<bool> = per_sample.iter().filter_map(|s| s.class_correct).collect();
    Ok(MetricReport {
        count: per_sample.len(),
        bleu1: mean(|s| s.bleu1),
        rouge_l: mean(|s| s.rouge_l),
        encoder_similarity: mean(|s| s.encoder_similarity),
        reward: mean(|s| s.reward),
        class_accuracy: (!labelled.is_empty())
            .then(|| labelled.iter().filter(|&&c| c).count() as f64 / labelled.len() as f64),
        class_count: labelled.len(),
        per_sample,
    })
}

/// Greedy-decode every item and score it.
pub fn evaluate(model: &Model, store: &ParamStore, items: &[EvalItem], encoder: &dyn SentenceEncoder, opts: &EvalOptions) -> Result<MetricReport> {
    let per = par::map(opts.exec, items, |it| -> Result<SampleMetrics> {
        let ex = &it.example;
        let ids = model.generate(store, &ex.groups, &ex.instruction, &GenerateOptions::greedy(opts.max_new))?;
        score_sample(model.vocab.decode(&ids), &ex.reference, it.label, encoder, &opts.reward)
    });
    summarize(per.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Monte-Carlo estimate of the policy's expected composite reward: `samples`
/// temperature draws per prompt with seeds fixed by `seed`.
pub fn expected_reward(
    model: &Model,
    store: &ParamStore,
    items: &[EvalItem],
    encoder: &dyn SentenceEncoder,
    opts: &EvalOptions,
    temperature: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 || items.is_empty() {
        return Err(Error::invalid("expected reward needs prompts and samples"));
    }
    let idx: Vec<usize> = (0..items.len()).collect();
    let per = par::map(opts.exec, &idx, |&i| -> Result<f64> {
        let ex = &items[i].example;
        let mut acc = 0.0;
        for j in 0..samples {
            let gen = GenerateOptions {
                decoding: Decoding::Sample { temperature },
                max_new: opts.max_new,
                seed: seed::derive_indexed(seed, "expected-reward", (i * samples + j) as u64),
            };
            let ids = model.generate(store, &ex.groups, &ex.instruction, &gen)?;
            acc += composite_reward(&model.vocab.decode(&ids), &ex.reference, encoder, &opts.reward)?.1;
        }
        Ok(acc / samples as f64)
    });
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Build evaluation items from samples; labels come from the cloud spec when
/// the reference names the shape.
pub fn eval_items(model: &Model, samples: &[Sample], base: &Path, exec: Exec) -> Result<Vec<EvalItem>> {
    let items = par::map(exec, samples, |s| -> Result<EvalItem> {
        let cloud = s.load_cloud(base)?;
        item_for(model, s, &cloud)
    });
    items.into_iter().collect()
}

fn item_for(model: &Model, s: &Sample, cloud: &PointCloud) -> Result<EvalItem> {
    let words = data::extract_class_words(&s.response);
    let label = words.shape.map(|w| s.spec().map(|sp| sp.shape).unwrap_or(w));
    Ok(EvalItem {
        example: model.example(cloud, &s.instruction, &s.response)?,
        label,
    })
}

/// The sample's cloud at `n` points: procedural clouds are resampled from
/// their surface, stored clouds by FPS subsetting or duplication.
pub fn cloud_at_resolution(s: &Sample, base: &Path, n: usize) -> Result<PointCloud> {
    match s.spec() {
        Some(spec) => data::gen_shape(&data::ShapeSpec { n_points: n, ..spec }),
        None => {
            let cloud = s.load_cloud(base)?;
            geometry::resample(&cloud, n, seed::fnv1a(s.cloud.as_bytes()))
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_ms<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let out = f()?;
    Ok((out, t.elapsed().as_secs_f64() * 1e3))
}

/// Greedy continuation for exactly `steps` tokens, ignoring `<eos>`, so
/// timing does not depend on what the model says.
fn decode_fixed(model: &Model, store: &ParamStore, points: &Tensor, instruction: &[usize], steps: usize) -> Result<()> {
    let lm = &model.lm;
    let mut cache = lm.new_cache();
    let logits = lm.feed(store, &mut cache, &lm.prompt_embeddings(store, points, instruction)?)?;
    let mut last = logits.row(logits.rows() - 1).to_vec();
    let table = store.get(lm.token_embedding_id());
    for _ in 1..steps {
        let x = Tensor::new(vec![1, model.config.lm.d_model], table.row(argmax(&last)).to_vec())?;
        last = lm.feed(store, &mut cache, &x)?.into_data();
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n_points: usize,
    pub iters: usize,
    pub gen_tokens: usize,
    pub tokenize_ms: f64,
    pub generate_ms: f64,
    pub end_to_end_ms: f64,
    /// Samples per second, `1000 / end_to_end_ms`.
    pub throughput: f64,
}

/// Median wall-clock per phase over `iters` passes through `clouds`, after
/// `warmup` untimed passes. Runs on the calling thread only.
pub fn bench_latency(
    model: &Model,
    store: &ParamStore,
    clouds: &[PointCloud],
    instruction: &[usize],
    gen_tokens: usize,
    warmup: usize,
    iters: usize,
) -> Result<LatencyReport> {
    if iters == 0 || clouds.is_empty() || gen_tokens == 0 {
        return Err(Error::invalid("bench needs clouds, iters ≥ 1 and gen_tokens ≥ 1"));
    }
    if gen_tokens > model.max_new_tokens(instruction.len()) {
        return Err(Error::invalid("gen_tokens exceeds the context"));
    }
    let (mut tok, mut gen, mut e2e) = (Vec::new(), Vec::new(), Vec::new());
    for it in 0..warmup + iters {
        for cloud in clouds {
            let (points, t_tok) = time_ms(|| {
                let groups = model.prepare(cloud)?;
                Ok(model.point_tokens(store, &groups)?.0)
            })?;
            let (_, t_gen) = time_ms(|| decode_fixed(model, store, &points, instruction, gen_tokens))?;
            if it >= warmup {
                tok.push(t_tok);
                gen.push(t_gen);
                e2e.push(t_tok + t_gen);
            }
        }
    }
    let end_to_end_ms = median(e2e);
    Ok(LatencyReport {
        n_points: clouds[0].len(),
        iters,
        gen_tokens,
        tokenize_ms: median(tok),
        generate_ms: median(gen),
        end_to_end_ms,
        throughput: 1000.0 / end_to_end_ms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionRow {
    pub n_points: usize,
    /// Point tokens used (clamped to the resolution).
    pub n_samples: usize,
    pub tokenizer_ms: f64,
    pub end_to_end_ms: f64,
    pub tokenizer_throughput: f64,
    pub throughput: f64,
    pub class_accuracy: Option<f64>,
    pub bleu1: f64,
    pub rouge_l: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<ResolutionRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    pub eval: EvalOptions,
    /// Clouds per resolution used for timing.
    pub timing_clouds: usize,
    pub warmup: usize,
    pub iters: usize,
    pub gen_tokens: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            eval: EvalOptions::default(),
            timing_clouds: 8,
            warmup: 2,
            iters: 10,
            gen_tokens: 8,
        }
    }
}

/// Evaluate and time the same weights at each resolution. The tokenizer
/// consumes every resolution natively; only the number of centers is
/// clamped when a cloud has fewer points than that.
pub fn resolution_sweep(
    model: &Model,
    store: &ParamStore,
    samples: &[Sample],
    base: &Path,
    resolutions: &[usize],
    encoder: &dyn SentenceEncoder,
    opts: &SweepOptions,
) -> Result<BenchReport> {
    if samples.is_empty() || resolutions.is_empty() {
        return Err(Error::invalid("sweep needs samples and resolutions"));
    }
    let mut rows = Vec::with_capacity(resolutions.len());
    for &n in resolutions {
        let n_samples = model.n_points().min(n);
        if n_samples < model.n_points() {
            ::log::warn!("resolution {n} < {} centers; using {n_samples}", model.n_points());
        }
        let m = model.with_samples(n_samples)?;
        let clouds = par::map(opts.eval.exec, samples, |s| cloud_at_resolution(s, base, n))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let items = par::map(opts.eval.exec, &(0..samples.len()).collect::<Vec<_>>(), |&i| {
            item_for(&m, &samples[i], &clouds[i])
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let metrics = evaluate(&m, store, &items, encoder, &opts.eval)?;
        let timing = &clouds[..opts.timing_clouds.clamp(1, clouds.len())];
        let lat = bench_latency(&m, store, timing, &items[0].example.instruction, opts.gen_tokens, opts.warmup, opts.iters)?;
        rows.push(ResolutionRow {
            n_points: n,
            n_samples,
            tokenizer_ms: lat.tokenize_ms,
            end_to_end_ms: lat.end_to_end_ms,
            tokenizer_throughput: 1000.0 / lat.tokenize_ms,
            throughput: lat.throughput,
            class_accuracy: metrics.class_accuracy,
            bleu1: metrics.bleu1,
            rouge_l: metrics.rouge_l,
        });
    }
    Ok(BenchReport { rows })
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "n_points,n_samples,tokenizer_ms,end_to_end_ms,tokenizer_throughput,throughput,class_accuracy,bleu1,rouge_l\n",
        );
        for r in &self.rows {
            let acc = r.class_accuracy.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.n_points, r.n_samples, r.tokenizer_ms, r.end_to_end_ms, r.tokenizer_throughput, r.throughput, acc, r.bleu1, r.rouge_l
            );
        }
        s
    }

    /// Line chart of score (left axis, 0–1) and tokenizer throughput (right
    /// axis) against resolution.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 360.0, 60.0);
        let n = self.rows.len();
        let x = |i: usize| {
            if n <= 1 {
                w / 2.0
            } else {
                pad + (w - 2.0 * pad) * i as f64 / (n - 1) as f64
            }
        };
        let y = |v: f64| h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);
        let max_tp = self.rows.iter().map(|r| r.tokenizer_throughput).fold(0.0, f64::max).max(1e-12);
        let line = |vals: Vec<f64>, color: &str| {
            let pts: Vec<String> = vals.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v))).collect();
            let dots: String = vals
                .iter()
                .enumerate()
                .map(|(i, &v)| format!("<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", x(i), y(v)))
                .collect();
            format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>{dots}", pts.join(" "))
        };
        let score: Vec<f64> = self.rows.iter().map(|r| r.class_accuracy.unwrap_or(r.bleu1)).collect();
        let tp: Vec<f64> = self.rows.iter().map(|r| r.tokenizer_throughput / max_tp).collect();
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        );
        let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
        let _ = writeln!(
            s,
            "<line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{r}\" y1=\"{pad}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>",
            b = h - pad,
            r = w - pad
        );
        for (i, row) in self.rows.iter().enumerate() {
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", x(i), h - pad + 18.0, row.n_points);
        }
        for t in [0.0, 0.5, 1.0] {
            let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{t:.1}</text>", pad - 6.0, y(t) + 4.0);
            let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\">{:.0}</text>", w - pad + 6.0, y(t) + 4.0, t * max_tp);
        }
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">points per cloud</text>", w / 2.0, h - 15.0);
        let _ = writeln!(s, "<text x=\"{pad}\" y=\"30\" fill=\"#1f77b4\">score</text>");
        let _ = writeln!(s, "<text x=\"{}\" y=\"30\" text-anchor=\"end\" fill=\"#d62728\">tokenizer samples/s</text>", w - pad);
        let _ = writeln!(s, "{}", line(score, "#1f77b4"));
        let _ = writeln!(s, "{}", line(tp, "#d62728"));
        s.push_str("</svg>\n");
        s
    }
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "count,{}", self.count);
        let _ = writeln!(s, "bleu1,{}", self.bleu1);
        let _ = writeln!(s, "rouge_l,{}", self.rouge_l);
        let _ = writeln!(s, "encoder_similarity,{}", self.encoder_similarity);
        let _ = writeln!(s, "reward,{}", self.reward);
        let acc = self.class_accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(s, "class_accuracy,{acc}");
        let _ = writeln!(s, "class_count,{}", self.class_count);
        s
    }
}
