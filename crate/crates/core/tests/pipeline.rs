use std::path::Path;

use pointlang::config::RunConfig;
use pointlang::eval::{self, SweepOptions};
use pointlang::par::Exec;
use pointlang::pipeline::{self, TrainOptions};
use pointlang::training::{checkpoint, LogRow, TrainState};

fn trained(cfg: &RunConfig, stages: &[u8]) -> (TrainState, Vec<LogRow>) {
    let corpus = pipeline::corpus(cfg).unwrap();
    let mut state = pipeline::new_state(cfg).unwrap();
    let enc = pipeline::encoder();
    let opts = TrainOptions {
        exec: Exec::Parallel,
        stop_after: None,
        encoder: &enc,
    };
    let mut rows = Vec::new();
    pipeline::train(
        &mut state,
        cfg,
        &corpus.train,
        Path::new("."),
        stages,
        &opts,
        &mut |r| {
            rows.push(r.clone());
            Ok(())
        },
        &mut |_, _| Ok(()),
    )
    .unwrap();
    (state, rows)
}

#[test]
fn all_stages_log_their_own_columns() {
    let cfg = RunConfig::tiny();
    let (state, rows) = trained(&cfg, &[1, 2, 3]);
    assert_eq!(state.completed_stages(), vec![1, 2, 3]);
    for r in &rows {
        match r.stage {
            3 => assert!(r.mean_reward.is_some() && r.total_loss.is_none()),
            _ => assert!(r.total_loss.is_some() && r.codebook_utilization.is_some()),
        }
    }
    let steps: Vec<u64> = rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, (0..rows.len() as u64).collect::<Vec<_>>());
}

#[test]
fn later_stage_needs_earlier_ones() {
    let cfg = RunConfig::tiny();
    let corpus = pipeline::corpus(&cfg).unwrap();
    let mut state = pipeline::new_state(&cfg).unwrap();
    let enc = pipeline::encoder();
    let opts = TrainOptions {
        exec: Exec::Sequential,
        stop_after: None,
        encoder: &enc,
    };
    let err = pipeline::train(&mut state, &cfg, &corpus.train, Path::new("."), &[2], &opts, &mut |_| Ok(()), &mut |_, _| Ok(()));
    assert!(err.is_err());
}

#[test]
fn resolution_sweep_reports_every_resolution() {
    let cfg = RunConfig::tiny();
    let (state, _) = trained(&cfg, &[1]);
    let corpus = pipeline::corpus(&cfg).unwrap();
    let test = &corpus.test[..6];
    let opts = SweepOptions {
        eval: pipeline::eval_options(&cfg, Exec::Parallel),
        timing_clouds: 2,
        warmup: 0,
        iters: 1,
        gen_tokens: 2,
    };
    let res = [16, 64, 128];
    let report = eval::resolution_sweep(&state.model, &state.store, test, Path::new("."), &res, &pipeline::encoder(), &opts).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.rows.iter().map(|r| r.n_points).collect::<Vec<_>>(), res);
    assert!(report.rows.iter().all(|r| r.n_samples <= r.n_points));
    assert_eq!(report.to_csv().lines().count(), 4);
    assert!(report.to_svg().starts_with("<svg"));

    // the native resolution reproduces a plain evaluation
    let native = eval::resolution_sweep(
        &state.model,
        &state.store,
        test,
        Path::new("."),
        &[cfg.data.n_points],
        &pipeline::encoder(),
        &opts,
    )
    .unwrap();
    let plain = pipeline::evaluate(&state, &cfg, test, Path::new("."), Exec::Parallel).unwrap();
    assert_eq!(native.rows[0].bleu1, plain.bleu1);
    assert_eq!(native.rows[0].class_accuracy, plain.class_accuracy);
}

#[test]
fn latency_tracks_resolution_and_generation_length() {
    let cfg = RunConfig::desk();
    let state = pipeline::new_state(&cfg).unwrap();
    let m = &state.model;
    let instr = m.vocab.encode("caption this 3d model.").unwrap();
    let spec = |n: usize| pointlang::data::ShapeSpec {
        shape: pointlang::data::Shape::Torus,
        color: pointlang::data::Color::Blue,
        scale: 1.0,
        n_points: n,
        noise: 0.0,
        seed: 3,
    };
    let clouds = |n| vec![pointlang::data::gen_shape(&spec(n)).unwrap()];
    let small = eval::bench_latency(m, &state.store, &clouds(256), &instr, 4, 1, 5).unwrap();
    let large = eval::bench_latency(m, &state.store, &clouds(4096), &instr, 4, 1, 5).unwrap();
    assert!(small.tokenize_ms < large.tokenize_ms, "{small:?} {large:?}");
    assert!(small.end_to_end_ms < large.end_to_end_ms);

    let short = eval::bench_latency(m, &state.store, &clouds(256), &instr, 4, 1, 5).unwrap();
    let long = eval::bench_latency(m, &state.store, &clouds(256), &instr, 8, 1, 5).unwrap();
    assert!(long.generate_ms > short.generate_ms, "{short:?} {long:?}");
    for r in [&small, &large, &short, &long] {
        assert!((r.throughput * r.end_to_end_ms - 1000.0).abs() < 1e-6);
    }
}

#[test]
fn checkpoint_file_round_trips_a_trained_state() {
    let cfg = RunConfig::tiny();
    let (state, _) = trained(&cfg, &[1]);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.ckpt");
    checkpoint::save(&state, &p).unwrap();
    assert_eq!(checkpoint::load(&p).unwrap(), state);
    assert!(!dir.path().join("s.ckpt.tmp").exists());
}

#[test]
fn ablation_axes_change_only_their_setting() {
    let cfg = RunConfig::desk();
    let c = pipeline::ablate(&cfg, "codebook", "64").unwrap();
    assert_eq!(c.tokenizer.codebook_size, 64);
    assert_eq!(c.geometry, cfg.geometry);
    let c = pipeline::ablate(&cfg, "continuous", "true").unwrap();
    assert!(c.tokenizer.continuous);
    let c = pipeline::ablate(&cfg, "tokens", "48").unwrap();
    assert_eq!(c.geometry.n_samples, 48);
    assert!(c.lm.max_ctx >= 48 + 16);
    assert!(pipeline::ablate(&cfg, "pooling", "median").is_err());
    assert!(pipeline::ablate(&cfg, "depth", "2").is_err());
}
