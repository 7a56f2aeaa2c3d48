//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs everything; trailing numeric
//! arguments (`-- 5 7`) restrict the run to those criteria. Failures are
//! reported but only change the exit status under `ACCEPTANCE_STRICT=1`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use pointlang::config::RunConfig;
use pointlang::data::{Corpus, Sample};
use pointlang::eval::{self, MetricReport, SweepOptions};
use pointlang::geometry::{self, FpsStart, PointCloud};
use pointlang::numerics::{AdamW, AdamWConfig, ParamStore, TrainableSet};
use pointlang::par::Exec;
use pointlang::pipeline::{self, TrainOptions};
use pointlang::rewards::{self, RewardConfig};
use pointlang::tensor::Tensor;
use pointlang::tokenizer;
use pointlang::training::{grpo_step, Bandit, LogRow, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- 1

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let r = pipeline::grad_check_joint(16, 0, Exec::Parallel).expect("grad check runs");
    let secs = t.elapsed().as_secs_f64();
    outcome(
        r.max_rel_error < 1e-4 && secs < 60.0,
        format!("max_rel_error={:.3e} over {} scalars, {secs:.1}s", r.max_rel_error, r.checked),
    )
}

// ---------------------------------------------------------------- 2

fn sq(a: &[f64], b: &[f64]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Exhaustive greedy FPS: at every step recompute each candidate's distance
/// to the whole selected set from scratch.
fn fps_oracle(pts: &[Vec<f64>], n_samples: usize) -> Vec<usize> {
    let n = pts.len();
    let mut sel = vec![0usize];
    while sel.len() < n_samples.min(n) {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..n {
            if sel.contains(&i) {
                continue;
            }
            let d = sel.iter().map(|&s| sq(&pts[i], &pts[s])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        sel.push(best.1);
    }
    let distinct = sel.len();
    (0..n_samples).map(|i| sel[i % distinct]).collect()
}

/// All-pairs sort of every point by (distance, index), center pulled to the front.
fn knn_oracle(pts: &[Vec<f64>], center: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..pts.len()).filter(|&i| i != center).map(|i| (sq(&pts[i], &pts[center]), i)).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out = vec![center];
    out.extend(all.iter().take(k - 1).map(|&(_, i)| i));
    out.resize(k, center);
    out
}

fn argmin_oracle(h: &Tensor, cb: &Tensor) -> Vec<usize> {
    (0..h.rows())
        .map(|i| {
            let mut best = (f64::INFINITY, 0);
            for k in 0..cb.rows() {
                let d: f64 = (0..h.cols()).map(|j| (h.row(i)[j] - cb.row(k)[j]).powi(2)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect()
}

/// Random cloud; every other one lives on a small integer grid so exact
/// distance ties and duplicate points occur.
fn oracle_cloud(r: &mut ChaCha8Rng, n: usize, grid: bool) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..6)
                .map(|_| if grid { r.random_range(0..4) as f64 } else { r.random_range(-1.0..1.0) })
                .collect()
        })
        .collect()
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng(2);
    let (mut fps_bad, mut knn_bad, mut q_bad) = (0, 0, 0);
    for c in 0..200 {
        let n = r.random_range(1..=64);
        let pts = oracle_cloud(&mut r, n, c % 2 == 1);
        let cloud = PointCloud::from_rows(&pts).unwrap();
        let ns = r.random_range(1..=n);
        let got = geometry::fps(&cloud, ns, FpsStart::First).unwrap().indices;
        fps_bad += (got != fps_oracle(&pts, ns)) as usize;
    }
    for c in 0..200 {
        let n = r.random_range(1..=256);
        let pts = oracle_cloud(&mut r, n, c % 2 == 1);
        let cloud = PointCloud::from_rows(&pts).unwrap();
        let ns = r.random_range(1..=n.min(16));
        let k = r.random_range(1..=n.min(32) + 2);
        let centers = geometry::fps(&cloud, ns, FpsStart::First).unwrap();
        let groups = geometry::knn_group(&cloud, &centers, k).unwrap();
        for (g, &ci) in centers.indices.iter().enumerate() {
            knn_bad += (groups.group(g) != knn_oracle(&pts, ci, k).as_slice()) as usize;
        }
    }
    for t in 0..50 {
        let c = [1, 2, 16, 256, 1024][t % 5];
        let d = r.random_range(1..=8);
        let cb = Tensor::randn(&[c, d], 1.0, &mut r);
        let mut h = Tensor::randn(&[64, d], 1.0, &mut r);
        let mut cb = cb;
        if c > 2 {
            // duplicated codes force exact ties
            let dup = cb.row(0).to_vec();
            cb.row_mut(c - 1).copy_from_slice(&dup);
        }
        for i in 0..4 {
            let src = cb.row(i % c).to_vec();
            h.row_mut(i).copy_from_slice(&src);
        }
        let q = tokenizer::quantize(&h, &cb).unwrap();
        q_bad += q.indices.iter().zip(argmin_oracle(&h, &cb)).filter(|(a, b)| **a != *b).count();
    }
    outcome(
        fps_bad + knn_bad + q_bad == 0,
        format!("mismatches: fps={fps_bad}/200 knn={knn_bad} quantize={q_bad}"),
    )
}

// ---------------------------------------------------------------- 3

fn reward_algebra() -> Outcome {
    let mut bad = Vec::new();
    let sigma = 10.0;
    for l_ref in [1.0, 7.0, 30.0] {
        if rewards::length_reward(l_ref, l_ref, sigma) != 1.0 {
            bad.push(format!("len reward at L_ref={l_ref}"));
        }
        for l in [l_ref - sigma, l_ref + sigma] {
            if (rewards::length_reward(l, l_ref, sigma) - (-0.5f64).exp()).abs() > 1e-12 {
                bad.push(format!("len reward at {l}"));
            }
        }
    }
    let mut r = rng(3);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for _ in 0..2000 {
        let m = r.random_range(2..=16);
        let spread = [1e-3, 0.1, 1.0, 100.0][r.random_range(0..4)];
        let scores: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0) * spread).collect();
        let a = rewards::group_advantages(&scores, 1e-9).unwrap();
        let mean = a.iter().sum::<f64>() / m as f64;
        worst_mean = worst_mean.max(mean.abs());
        let mu = scores.iter().sum::<f64>() / m as f64;
        let var = scores.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / m as f64;
        if var >= 1e-3 {
            let sd = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m as f64).sqrt();
            worst_std = worst_std.max((sd - 1.0).abs());
        }
    }
    for v in [0.0, 0.37, -5.0, 1e6] {
        for m in [2, 8, 13] {
            if rewards::group_advantages(&vec![v; m], 1e-9).unwrap().iter().any(|&x| x != 0.0) {
                bad.push(format!("equal scores {v}×{m}"));
            }
        }
    }
    let pass = bad.is_empty() && worst_mean <= 1e-9 && worst_std < 1e-3;
    outcome(
        pass,
        format!("max|mean A|={worst_mean:.2e} max|std-1|={worst_std:.2e} failures={bad:?}"),
    )
}

// ---------------------------------------------------------------- 4

fn grpo_bandit() -> Outcome {
    let t = Instant::now();
    let mut store = ParamStore::new();
    let bandit = Bandit::init(vec![0.2, 0.5, 0.9, 0.1], &mut store).unwrap();
    let trainable = TrainableSet::all(&store);
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
        &store,
    );
    let cfg = RewardConfig::default();
    for step in 0..200 {
        grpo_step(&bandit, &mut store, &mut opt, &trainable, &[&()], &cfg, 1.0, 0.05, step, Exec::Sequential).unwrap();
    }
    let p = bandit.probabilities(&store);
    let secs = t.elapsed().as_secs_f64();
    outcome(p[2] > 0.9 && secs < 5.0, format!("p(best arm)={:.4} in {secs:.2}s", p[2]))
}

// ---------------------------------------------------------------- 5, 6, 7

struct Desk {
    cfg: RunConfig,
    corpus: Corpus,
    stage2: TrainState,
    stage2_report: MetricReport,
    train_secs: f64,
}

fn train(state: &mut TrainState, cfg: &RunConfig, train: &[Sample], stages: &[u8]) -> Vec<LogRow> {
    let enc = pipeline::encoder();
    let opts = TrainOptions {
        exec: Exec::Parallel,
        stop_after: None,
        encoder: &enc,
    };
    let mut rows = Vec::new();
    pipeline::train(state, cfg, train, Path::new("."), stages, &opts, &mut |row| {
        if row.step % 100 == 0 {
            eprintln!("  stage {} step {} loss {:?} reward {:?}", row.stage, row.step, row.total_loss, row.mean_reward);
        }
        rows.push(row.clone());
        Ok(())
    }, &mut |_, _| Ok(()))
    .expect("training runs");
    rows
}

fn desk_run() -> Desk {
    let cfg = RunConfig::desk();
    let t = Instant::now();
    let corpus = pipeline::corpus(&cfg).unwrap();
    let mut state = pipeline::new_state(&cfg).unwrap();
    train(&mut state, &cfg, &corpus.train, &[1, 2]);
    let train_secs = t.elapsed().as_secs_f64();
    let report = pipeline::evaluate(&state, &cfg, &corpus.test, Path::new("."), Exec::Parallel).unwrap();
    Desk {
        cfg,
        corpus,
        stage2: state,
        stage2_report: report,
        train_secs,
    }
}

fn end_to_end(d: &Desk) -> Outcome {
    let acc = d.stage2_report.class_accuracy.unwrap_or(0.0);
    let c = &d.cfg;
    let setup_ok = c.data.train == 3000
        && c.data.n_points == 512
        && c.geometry.n_samples == 32
        && c.geometry.k_neighbors == 8
        && c.tokenizer.codebook_size == 256
        && c.tokenizer.d_llm == 128
        && c.lm.n_layers == 4;
    outcome(
        setup_ok && acc >= 0.9 && d.stage2_report.bleu1 >= 0.6 && d.train_secs < 1800.0,
        format!(
            "class_acc={acc:.4} ({} labelled) bleu1={:.4} train_time={:.0}s",
            d.stage2_report.class_count, d.stage2_report.bleu1, d.train_secs
        ),
    )
}

fn policy_reward(state: &TrainState, cfg: &RunConfig, test: &[Sample]) -> f64 {
    let items = pipeline::eval_items(state, test, Path::new("."), Exec::Parallel).unwrap();
    eval::expected_reward(
        &state.model,
        &state.store,
        &items,
        &pipeline::encoder(),
        &pipeline::eval_options(cfg, Exec::Parallel),
        1.0,
        cfg.eval.reward_samples,
        pointlang::seed::derive(cfg.seed, "held-out-reward"),
    )
    .unwrap()
}

fn preference_gain(d: &Desk) -> (Outcome, TrainState) {
    let cfg = &d.cfg;
    let s3 = cfg.stage(3).unwrap();
    let mut state = d.stage2.clone();
    train(&mut state, cfg, &d.corpus.train, &[3]);
    let test = &d.corpus.test;
    let before = policy_reward(&d.stage2, cfg, test);
    let after = policy_reward(&state, cfg, test);
    let report = pipeline::evaluate(&state, cfg, test, Path::new("."), Exec::Parallel).unwrap();
    let (b2, b3) = (d.stage2_report.bleu1, report.bleu1);
    let reward_gain = after / before - 1.0;
    let bleu_gain = b3 / b2 - 1.0;
    let settings_ok = s3.epochs == 1
        && cfg.reward.group_size == 8
        && cfg.reward.alpha == 0.95
        && cfg.reward.sigma == 10.0
        && s3.lr <= 1e-4;
    let pass = settings_ok && after >= before && (reward_gain >= 0.02 || bleu_gain >= 0.02);
    (
        outcome(
            pass,
            format!(
                "policy reward {before:.4} -> {after:.4} ({:+.2}%), greedy reward {:.4} -> {:.4}, bleu1 {b2:.4} -> {b3:.4} ({:+.2}%)",
                100.0 * reward_gain,
                d.stage2_report.reward,
                report.reward,
                100.0 * bleu_gain
            ),
        ),
        state,
    )
}

fn resolution_robustness(state: &TrainState, d: &Desk) -> Outcome {
    let res = [256, 1024, 4096];
    let opts = SweepOptions {
        eval: pipeline::eval_options(&d.cfg, Exec::Parallel),
        ..Default::default()
    };
    let report = eval::resolution_sweep(
        &state.model,
        &state.store,
        &d.corpus.test,
        Path::new("."),
        &res,
        &pipeline::encoder(),
        &opts,
    )
    .unwrap();
    let rows = &report.rows;
    let tp: Vec<f64> = rows.iter().map(|r| r.tokenizer_throughput).collect();
    let acc: Vec<f64> = rows.iter().map(|r| r.class_accuracy.unwrap_or(0.0)).collect();
    let monotone = tp[0] > tp[1] && tp[1] > tp[2];
    let gap = (acc[0] - acc[2]).abs();
    outcome(
        monotone && gap <= 0.10,
        format!(
            "tokenizer clouds/s at 256/1024/4096 = {:.1}/{:.1}/{:.1}; class_acc = {:.4}/{:.4}/{:.4}",
            tp[0], tp[1], tp[2], acc[0], acc[1], acc[2]
        ),
    )
}

// ---------------------------------------------------------------- 8

/// Mean total loss over the first and last tenth of a stage's steps.
fn loss_drop(rows: &[LogRow], stage: u8) -> (f64, f64) {
    let l: Vec<f64> = rows.iter().filter(|r| r.stage == stage).filter_map(|r| r.total_loss).collect();
    let w = (l.len() / 10).max(1);
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    (mean(&l[..w]), mean(&l[l.len() - w..]))
}

fn discrete_vs_continuous() -> Outcome {
    let mut reports = Vec::new();
    let mut learned = true;
    let mut losses = Vec::new();
    for continuous in [false, true] {
        let mut cfg = RunConfig::desk();
        cfg.data.train = 600;
        cfg.data.test = 120;
        cfg.stages[1].epochs = 4;
        cfg.tokenizer.continuous = continuous;
        let corpus = pipeline::corpus(&cfg).unwrap();
        let mut state = pipeline::new_state(&cfg).unwrap();
        let rows = train(&mut state, &cfg, &corpus.train, &[1, 2]);
        for stage in [1, 2] {
            let (first, last) = loss_drop(&rows, stage);
            learned &= last < first;
            losses.push(format!("{first:.2}->{last:.2}"));
        }
        reports.push(pipeline::evaluate(&state, &cfg, &corpus.test, Path::new("."), Exec::Parallel).unwrap());
    }
    let (a, b) = (&reports[0], &reports[1]);
    let finite = |r: &MetricReport| [r.bleu1, r.rouge_l, r.encoder_similarity, r.reward].iter().all(|v| v.is_finite());
    let keys = |r: &MetricReport| -> Vec<String> { serde_json::to_value(r).unwrap().as_object().unwrap().keys().cloned().collect() };
    let comparable = a.count == b.count && a.class_count == b.class_count && keys(a) == keys(b);
    outcome(
        learned && finite(a) && finite(b) && comparable,
        format!(
            "discrete: loss s1/s2 {}, {} bleu1={:.3} acc={:.3}; continuous: loss s1/s2 {}, {} bleu1={:.3} acc={:.3}; {} test samples each",
            losses[0], losses[1], a.bleu1, a.class_accuracy.unwrap_or(0.0),
            losses[2], losses[3], b.bleu1, b.class_accuracy.unwrap_or(0.0),
            a.count
        ),
    )
}

// ---------------------------------------------------------------- 9

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut ckpts = Vec::new();
    for name in ["a", "b"] {
        let rd = dir.path().join(name);
        let st = Command::new(env!("CARGO_BIN_EXE_pointlang"))
            .env("POINTLANG_LOG", "warn")
            .args(["train", "--stage", "all", "--preset", "tiny", "--seed", "1234", "--run-dir"])
            .arg(&rd)
            .status()
            .unwrap();
        assert!(st.success(), "train --stage all failed");
        let files: Vec<Vec<u8>> = ["stage1", "stage2", "stage3", "final"]
            .iter()
            .map(|c| std::fs::read(rd.join(format!("checkpoints/{c}.ckpt"))).unwrap())
            .collect();
        ckpts.push(files);
    }
    let same = ckpts[0] == ckpts[1];
    outcome(
        same,
        format!("{} checkpoints of {} bytes compared", ckpts[0].len(), ckpts[0][3].len()),
    )
}

// ----------------------------------------------------------------

const NAMES: [&str; 9] = [
    "gradient integrity",
    "oracle equivalence",
    "reward/advantage algebra",
    "GRPO bandit",
    "end-to-end learning",
    "preference-optimization gain",
    "resolution robustness",
    "discrete vs continuous",
    "determinism",
];

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |c: usize| wanted.is_empty() || wanted.contains(&c);
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut record = |c: usize, o: Outcome| {
        println!("criterion {c} ({}): {} | {}", NAMES[c - 1], if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((c, o));
    };
    let simple: [(usize, fn() -> Outcome); 4] = [
        (1, gradient_integrity),
        (2, oracle_equivalence),
        (3, reward_algebra),
        (4, grpo_bandit),
    ];
    for (c, f) in simple {
        if want(c) {
            record(c, f());
        }
    }
    if want(5) || want(6) || want(7) {
        eprintln!("training the desk configuration (stages 1+2)...");
        let desk = desk_run();
        if want(5) {
            record(5, end_to_end(&desk));
        }
        if want(6) || want(7) {
            eprintln!("stage 3...");
            let (o, final_state) = preference_gain(&desk);
            if want(6) {
                record(6, o);
            }
            if want(7) {
                record(7, resolution_robustness(&final_state, &desk));
            }
        }
    }
    if want(8) {
        record(8, discrete_vs_continuous());
    }
    if want(9) {
        record(9, determinism());
    }
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(c, _)| *c).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        if std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
