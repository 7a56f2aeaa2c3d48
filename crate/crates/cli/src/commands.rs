use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use pointlang::config::RunConfig;
use pointlang::data::{self, Corpus, Sample, ShapeSpec};
use pointlang::eval::{self, SweepOptions};
use pointlang::geometry::{spc1, PointCloud};
use pointlang::lm::GenerateOptions;
use pointlang::par::Exec;
use pointlang::pipeline::{self, TrainOptions};
use pointlang::tokenizer::{write_token_dump, TokenRecord};
use pointlang::training::{checkpoint, CsvLog, TrainState};

use crate::rundir::{config_beside, RunDir};
use crate::{ConfigArgs, DataArgs};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stages(pub Vec<u8>);

pub fn parse_stages(s: &str) -> Result<Stages, String> {
    match s {
        "all" => Ok(Stages(vec![1, 2, 3])),
        "1" | "2" | "3" => Ok(Stages(vec![s.parse().unwrap()])),
        other => Err(format!("`{other}` is not a stage (use 1, 2, 3 or all)")),
    }
}

impl ConfigArgs {
    /// `--config`, else `fallback` (a run's snapshot), else `--preset`.
    fn resolve(&self, fallback: Option<PathBuf>) -> Result<RunConfig> {
        let mut cfg = match self.config.clone().or(fallback) {
            Some(p) => RunConfig::load(&p).with_context(|| format!("config {}", p.display()))?,
            None => RunConfig::preset(&self.preset)?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

/// The corpus and the directory its cloud paths are relative to.
fn load_data(cfg: &RunConfig, args: &DataArgs) -> Result<(Corpus, PathBuf)> {
    match &args.data {
        Some(dir) => {
            let split = |name: &str| -> Result<Vec<Sample>> {
                let p = dir.join(format!("{name}.jsonl"));
                data::load_jsonl(&p).with_context(|| format!("reading {}", p.display()))
            };
            let corpus = Corpus {
                train: split("train")?,
                val: split("val")?,
                test: split("test")?,
            };
            Ok((corpus, dir.clone()))
        }
        None => Ok((pipeline::corpus(cfg)?, PathBuf::from("."))),
    }
}

fn split<'a>(corpus: &'a Corpus, name: &str) -> Result<&'a [Sample]> {
    Ok(match name {
        "train" => &corpus.train,
        "val" => &corpus.val,
        "test" => &corpus.test,
        other => bail!("unknown split `{other}` (expected train, val or test)"),
    })
}

fn limited(samples: &[Sample], limit: Option<usize>) -> &[Sample] {
    &samples[..limit.unwrap_or(samples.len()).min(samples.len())]
}

fn read_cloud(arg: &str) -> Result<PointCloud> {
    if arg.starts_with("shape:") {
        Ok(data::gen_shape(&ShapeSpec::from_ref(arg)?)?)
    } else {
        spc1::read_file(arg).with_context(|| format!("reading cloud {arg}"))
    }
}

fn load_ckpt(path: &Path) -> Result<TrainState> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(cfg: &ConfigArgs, out: &Path, materialize: bool) -> Result<()> {
    let cfg = cfg.resolve(None)?;
    let mut corpus = pipeline::corpus(&cfg)?;
    fs::create_dir_all(out)?;
    for (name, samples) in [
        ("train", &mut corpus.train),
        ("val", &mut corpus.val),
        ("test", &mut corpus.test),
    ] {
        if materialize {
            data::materialize_clouds(out, name, samples)?;
        }
        data::save_jsonl(&out.join(format!("{name}.jsonl")), samples)?;
        log::info!("{name}: {} samples", samples.len());
    }
    Ok(())
}

pub struct TrainArgs<'a> {
    pub cfg: &'a ConfigArgs,
    pub data: &'a DataArgs,
    pub stages: &'a [u8],
    pub run_dir: &'a Path,
    pub ckpt: Option<&'a Path>,
    pub resume: bool,
    pub stop_after: Option<u64>,
    pub eval: bool,
    pub exec: Exec,
}

pub fn train(a: TrainArgs<'_>) -> Result<()> {
    let rd = RunDir::open(a.run_dir)?;
    let snapshot = (a.resume && a.cfg.config.is_none() && rd.config().is_file()).then(|| rd.config());
    let cfg = a.cfg.resolve(snapshot)?;
    let latest = rd.checkpoint("latest");
    let mut state = match (a.ckpt, a.resume) {
        (Some(p), _) => load_ckpt(p)?,
        (None, true) if latest.is_file() => load_ckpt(&latest)?,
        (None, true) => bail!("nothing to resume: {} does not exist", latest.display()),
        (None, false) => pipeline::new_state(&cfg)?,
    };
    ensure!(
        state.model.config == cfg.model_config(),
        "checkpoint model settings differ from the run configuration"
    );
    if a.ckpt.is_some() || a.resume {
        ensure!(state.seed == cfg.seed, "checkpoint seed {} differs from config seed {}", state.seed, cfg.seed);
    }
    fs::write(rd.config(), cfg.to_json() + "\n")?;
    let (corpus, base) = load_data(&cfg, a.data)?;

    let log_path = rd.log();
    let file = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    let fresh = file.metadata()?.len() == 0;
    let mut csv = if fresh {
        CsvLog::new(BufWriter::new(file))
    } else {
        CsvLog::append(BufWriter::new(file))
    };
    let encoder = pipeline::encoder();
    let opts = TrainOptions {
        exec: a.exec,
        stop_after: a.stop_after,
        encoder: &encoder,
    };
    let mut sink = |row: &pointlang::training::LogRow| {
        if row.step % 10 == 0 {
            log::info!(
                "stage {} step {}: loss {} reward {}",
                row.stage,
                row.step,
                row.total_loss.map_or("-".into(), |v| format!("{v:.4}")),
                row.mean_reward.map_or("-".into(), |v| format!("{v:.4}")),
            );
        }
        csv.write(row)
    };
    let mut after = |s: &TrainState, stage: u8| -> pointlang::Result<()> {
        checkpoint::save(s, &rd.checkpoint(&format!("stage{stage}")))?;
        checkpoint::save(s, &rd.checkpoint("latest"))
    };
    let summaries = pipeline::train(&mut state, &cfg, &corpus.train, &base, a.stages, &opts, &mut sink, &mut after)?;
    drop(sink);
    csv.into_inner().flush()?;
    if summaries.iter().any(|s| !s.completed) {
        checkpoint::save(&state, &latest)?;
        log::info!("paused; resume with --resume");
        return Ok(());
    }
    checkpoint::save(&state, &rd.checkpoint("final"))?;
    if a.eval {
        let report = pipeline::evaluate(&state, &cfg, &corpus.test, &base, a.exec)?;
        write_json(&rd.report("eval_test.json"), &report)?;
        print_summary(&report)?;
    }
    Ok(())
}

fn print_summary(report: &eval::MetricReport) -> Result<()> {
    let summary = serde_json::json!({
        "count": report.count,
        "class_accuracy": report.class_accuracy,
        "class_count": report.class_count,
        "bleu1": report.bleu1,
        "rouge_l": report.rouge_l,
        "encoder_similarity": report.encoder_similarity,
        "reward": report.reward,
    });
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    cfg: &ConfigArgs,
    data: &DataArgs,
    ckpt: &Path,
    split_name: &str,
    limit: Option<usize>,
    reward_samples: Option<usize>,
    out: Option<&Path>,
    exec: Exec,
) -> Result<()> {
    let state = load_ckpt(ckpt)?;
    let cfg = cfg.resolve(config_beside(ckpt))?;
    let (corpus, base) = load_data(&cfg, data)?;
    let samples = limited(split(&corpus, split_name)?, limit);
    let items = pipeline::eval_items(&state, samples, &base, exec)?;
    let opts = pipeline::eval_options(&cfg, exec);
    let report = eval::evaluate(&state.model, &state.store, &items, &pipeline::encoder(), &opts)?;
    if let Some(n) = reward_samples {
        let r = eval::expected_reward(
            &state.model,
            &state.store,
            &items,
            &pipeline::encoder(),
            &opts,
            1.0,
            n,
            cfg.seed,
        )?;
        println!("{}", serde_json::json!({ "expected_reward": r, "samples": n }));
    }
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    print_summary(&report)
}

pub fn tokenize(ckpt: &Path, clouds: &[String], out: Option<&Path>) -> Result<()> {
    let state = load_ckpt(ckpt)?;
    ensure!(
        !state.model.config.tokenizer.continuous,
        "this checkpoint uses continuous point features; there are no token indices"
    );
    let mut records = Vec::with_capacity(clouds.len());
    for c in clouds {
        let groups = state.model.prepare(&read_cloud(c)?)?;
        let (_, idx) = state.model.point_tokens(&state.store, &groups)?;
        records.push(TokenRecord {
            cloud_id: c.clone(),
            indices: idx.into_iter().map(|i| i as u32).collect(),
        });
    }
    match out {
        Some(p) => write_token_dump(BufWriter::new(fs::File::create(p)?), &records)?,
        None => write_token_dump(std::io::stdout().lock(), &records)?,
    }
    Ok(())
}

pub fn caption(cloud: &str, ckpt: &Path, instruction: &str, max_new: usize) -> Result<()> {
    let state = load_ckpt(ckpt)?;
    let cloud = read_cloud(cloud)?;
    let text = state
        .model
        .respond(&state.store, &cloud, instruction, &GenerateOptions::greedy(max_new))?;
    println!("{text}");
    Ok(())
}

pub struct Timing {
    pub clouds: usize,
    pub warmup: usize,
    pub iters: usize,
    pub gen_tokens: usize,
}

pub fn bench(cfg: &ConfigArgs, data: &DataArgs, ckpt: &Path, resolutions: &[usize], t: Timing, out: Option<&Path>) -> Result<()> {
    let state = load_ckpt(ckpt)?;
    let cfg = cfg.resolve(config_beside(ckpt))?;
    let (corpus, base) = load_data(&cfg, data)?;
    let samples = limited(&corpus.test, Some(t.clouds.max(1)));
    let instruction = state.model.vocab.encode(&samples[0].instruction)?;
    let mut csv = String::from("n_points,n_samples,tokenize_ms,generate_ms,end_to_end_ms,throughput\n");
    for &n in resolutions {
        let m = state.model.with_samples(state.model.n_points().min(n))?;
        let clouds = samples
            .iter()
            .map(|s| eval::cloud_at_resolution(s, &base, n))
            .collect::<pointlang::Result<Vec<_>>>()?;
        let r = eval::bench_latency(&m, &state.store, &clouds, &instruction, t.gen_tokens, t.warmup, t.iters)?;
        println!("{}", serde_json::to_string(&r)?);
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            n,
            m.n_points(),
            r.tokenize_ms,
            r.generate_ms,
            r.end_to_end_ms,
            r.throughput
        ));
    }
    if let Some(p) = out {
        fs::write(p, csv)?;
    }
    Ok(())
}

pub fn sweep(
    cfg: &ConfigArgs,
    data: &DataArgs,
    ckpt: &Path,
    resolutions: Option<Vec<usize>>,
    limit: Option<usize>,
    out_dir: &Path,
    exec: Exec,
) -> Result<()> {
    let state = load_ckpt(ckpt)?;
    let cfg = cfg.resolve(config_beside(ckpt))?;
    let (corpus, base) = load_data(&cfg, data)?;
    let samples = limited(&corpus.test, limit);
    let resolutions = resolutions.unwrap_or_else(|| cfg.eval.resolutions.clone());
    let opts = SweepOptions {
        eval: pipeline::eval_options(&cfg, exec),
        ..Default::default()
    };
    let report = eval::resolution_sweep(&state.model, &state.store, samples, &base, &resolutions, &pipeline::encoder(), &opts)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("bench.csv"), report.to_csv())?;
    fs::write(out_dir.join("bench.svg"), report.to_svg())?;
    write_json(&out_dir.join("bench.json"), &report)?;
    print!("{}", report.to_csv());
    Ok(())
}

pub fn grad_check(points: usize, seed: u64, tolerance: f64, exec: Exec) -> Result<()> {
    let r = pipeline::grad_check_joint(points, seed, exec)?;
    println!(
        "{}",
        serde_json::json!({
            "max_rel_error": r.max_rel_error,
            "checked": r.checked,
            "worst": r.worst.as_ref().map(|w| serde_json::json!({"param": w.0, "index": w.1, "analytic": w.2, "numeric": w.3})),
        })
    );
    ensure!(r.max_rel_error < tolerance, "max relative error {} ≥ {tolerance}", r.max_rel_error);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn ablate(
    cfg: &ConfigArgs,
    data: &DataArgs,
    axis: &str,
    values: &[String],
    run_dir: &Path,
    limit: Option<usize>,
    exec: Exec,
) -> Result<()> {
    let base_cfg = cfg.resolve(None)?;
    let variants = values
        .iter()
        .map(|v| Ok((v, pipeline::ablate(&base_cfg, axis, v)?)))
        .collect::<Result<Vec<_>>>()?;
    let (corpus, base) = load_data(&base_cfg, data)?;
    let test = limited(&corpus.test, limit);
    let encoder = pipeline::encoder();
    let mut summary = String::from("axis,value,class_accuracy,bleu1,rouge_l,reward,final_loss\n");
    for (value, vcfg) in variants {
        let rd = RunDir::open(&run_dir.join(format!("{axis}={value}")))?;
        fs::write(rd.config(), vcfg.to_json() + "\n")?;
        let mut state = pipeline::new_state(&vcfg)?;
        let file = BufWriter::new(fs::File::create(rd.log())?);
        let mut csv = CsvLog::new(file);
        let opts = TrainOptions {
            exec,
            stop_after: None,
            encoder: &encoder,
        };
        let mut sink = |row: &pointlang::training::LogRow| csv.write(row);
        let summaries = pipeline::train(&mut state, &vcfg, &corpus.train, &base, &[1, 2], &opts, &mut sink, &mut |_, _| Ok(()))?;
        drop(sink);
        csv.into_inner().flush()?;
        checkpoint::save(&state, &rd.checkpoint("final"))?;
        let report = pipeline::evaluate(&state, &vcfg, test, &base, exec)?;
        write_json(&rd.report("eval_test.json"), &report)?;
        let final_loss = summaries.last().and_then(|s| s.last.as_ref()).and_then(|r| r.total_loss);
        let line = format!(
            "{axis},{value},{},{},{},{},{}\n",
            report.class_accuracy.map_or(String::new(), |v| v.to_string()),
            report.bleu1,
            report.rouge_l,
            report.reward,
            final_loss.map_or(String::new(), |v| v.to_string()),
        );
        print!("{line}");
        summary.push_str(&line);
    }
    fs::write(run_dir.join(format!("ablation_{axis}.csv")), summary)?;
    Ok(())
}

pub fn init_config(preset: &str, schema: bool, out: Option<&Path>) -> Result<()> {
    let text = if schema {
        serde_json::to_string_pretty(&RunConfig::schema())?
    } else {
        RunConfig::preset(preset)?.to_json()
    };
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

impl FromStr for Stages {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        parse_stages(s)
    }
}
