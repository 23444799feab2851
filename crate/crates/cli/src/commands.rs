use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use capsroute_core::analysis::{
    activation_map, influence_report, ordered_activation_curve, routing_coeff_stat, write_grid_csv, MapAggregation,
};
use capsroute_core::capsule::CapsNet;
use capsroute_core::checkpoint::{list_checkpoints, Checkpoint};
use capsroute_core::config::{CheckpointAveraging, RunConfig};
use capsroute_core::data::{Dataset, Split, IDX_IMAGES_MAGIC};
use capsroute_core::gradcheck::run_suite;
use capsroute_core::training::{eval_checkpoints, evaluate, train};

use crate::{datasets, Aggregation, AnalyzeCommand, AnalyzeSource, Averaging, Cli, Command, ConfigArgs, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs, EXIT_FAILURE};

pub const CONFIG_FILE: &str = "config.cfg";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => cmd_train(&cli.data_dir, &cli.runs_dir, args),
        Command::Eval(args) => cmd_eval(&cli.data_dir, args),
        Command::Analyze(cmd) => cmd_analyze(&cli.data_dir, &cli.runs_dir, cmd),
        Command::SynthMultimnist(args) => cmd_synth(&cli.data_dir, &cli.runs_dir, args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

/// Config file first, then the named flags, then `--set` pairs.
pub fn build_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut pairs: Vec<(&str, String)> = Vec::new();
    let mut push = |key, value: Option<String>| {
        if let Some(v) = value {
            pairs.push((key, v));
        }
    };
    push("activation", args.activation.clone());
    push("pa_n", args.pa_n.map(|v| v.to_string()));
    push("ci_bar", args.ci_bar.map(|v| v.to_string()));
    push("prim_channels", args.prim_channels.clone());
    push("routing_iters", args.routing_iters.map(|v| v.to_string()));
    push("weight_decay", args.weight_decay.map(|v| v.to_string()));
    push("dropout_keep", args.dropout_keep.map(|v| v.to_string()));
    push("seed", args.seed.map(|v| v.to_string()));
    push("steps", args.steps.map(|v| v.to_string()));
    push("batch_size", args.batch_size.map(|v| v.to_string()));
    for (key, value) in pairs {
        cfg.set(key, &value).with_context(|| format!("--{}", key.replace('_', "-")))?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
        cfg.set(k.trim(), v.trim()).with_context(|| format!("--set {kv}"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `<root>/<config hash>-<timestamp>`, with the effective config written
/// into it.
pub fn create_run_dir(root: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let base = format!("{}-{}", cfg.hash(), chrono::Local::now().format("%Y%m%d-%H%M%S"));
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_kv_string())?;
    Ok(dir)
}

fn load_nets(paths: &[PathBuf]) -> Result<(Vec<CapsNet>, RunConfig)> {
    let mut nets = Vec::new();
    let mut config = None;
    for p in paths {
        let ckpt = Checkpoint::load(p)?;
        config = Some(ckpt.config()?);
        nets.push(ckpt.net);
    }
    Ok((nets, config.context("no checkpoints given")?))
}

fn averaging_name(mode: CheckpointAveraging) -> &'static str {
    match mode {
        CheckpointAveraging::Metric => "metric",
        CheckpointAveraging::Weights => "weights",
    }
}

#[derive(serde::Serialize)]
struct Summary {
    config_hash: String,
    steps: usize,
    final_eval_accuracy: Option<f64>,
    checkpoints_averaged: usize,
    averaging: &'static str,
    averaged_error_rate: Option<f64>,
}

fn cmd_train(data_dir: &Path, runs_dir: &Path, args: TrainArgs) -> Result<ExitCode> {
    let cfg = build_config(&args.config)?;
    let train_set = datasets::load(data_dir, cfg.dataset, Split::Train, cfg.train_subset, &cfg)?;
    let eval_set = match args.no_eval {
        true => None,
        false => Some(datasets::load(data_dir, cfg.dataset, Split::Test, cfg.test_subset, &cfg)?),
    };
    let dir = create_run_dir(runs_dir, &cfg)?;
    log::info!("run directory {}", dir.display());
    let outcome = train(&cfg, &train_set, eval_set.as_ref(), Some(&dir)).with_context(|| format!("training in {}", dir.display()))?;

    let k = cfg.eval_checkpoints.clamp(1, outcome.checkpoints.len().max(1));
    let averaged = match &eval_set {
        Some(test) if !outcome.checkpoints.is_empty() => {
            let (nets, _) = load_nets(&outcome.checkpoints[outcome.checkpoints.len() - k..])?;
            Some(eval_checkpoints(&nets, test, cfg.checkpoint_averaging)?)
        }
        _ => None,
    };
    let summary = Summary {
        config_hash: cfg.hash(),
        steps: outcome.steps,
        final_eval_accuracy: outcome.log.last().and_then(|r| r.eval_acc),
        checkpoints_averaged: if averaged.is_some() { k } else { 0 },
        averaging: averaging_name(cfg.checkpoint_averaging),
        averaged_error_rate: averaged,
    };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    if let Some(err) = averaged {
        log::info!("error rate over the last {k} checkpoints ({} averaging): {err:.4}", summary.averaging);
    }
    println!("{}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(data_dir: &Path, args: EvalArgs) -> Result<ExitCode> {
    let paths = match &args.run {
        Some(run) => {
            let all = list_checkpoints(run)?;
            let Some(latest) = all.last() else {
                bail!("no checkpoints in {}", run.display());
            };
            let k = match args.last {
                Some(k) => k,
                None => Checkpoint::load(latest)?.config()?.eval_checkpoints,
            };
            all[all.len() - k.clamp(1, all.len())..].to_vec()
        }
        None => args.checkpoint.clone(),
    };
    let (nets, cfg) = load_nets(&paths)?;
    let ds = datasets::load_spec(data_dir, args.dataset.as_deref(), args.subset, &cfg)?;
    let mode = match args.averaging {
        Some(Averaging::Metric) => CheckpointAveraging::Metric,
        Some(Averaging::Weights) => CheckpointAveraging::Weights,
        None => cfg.checkpoint_averaging,
    };
    let err = if nets.len() == 1 {
        evaluate(&nets[0], &ds)?.error_rate()
    } else {
        eval_checkpoints(&nets, &ds, mode)?
    };
    println!("checkpoints,averaging,images,error_rate,accuracy");
    println!("{},{},{},{err},{}", nets.len(), averaging_name(mode), ds.len(), 1.0 - err);
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(data_dir: &Path, runs_dir: &Path, cmd: AnalyzeCommand) -> Result<ExitCode> {
    let (source, kind) = match &cmd {
        AnalyzeCommand::Curve { source, .. } => (source, "curve"),
        AnalyzeCommand::Coeff { source, .. } => (source, "coeff"),
        AnalyzeCommand::Influence { source } => (source, "influence"),
        AnalyzeCommand::Actmap { source, .. } => (source, "actmap"),
    };
    let AnalyzeSource {
        checkpoint,
        dataset,
        subset,
        out,
    } = source;
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = ckpt.config()?;
    let ds = datasets::load_spec(data_dir, dataset.as_deref(), *subset, &cfg)?;
    let out = match out {
        Some(p) => p.clone(),
        None => create_run_dir(runs_dir, &cfg)?.join(format!("{kind}.csv")),
    };
    let file = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
    let net = &ckpt.net;
    match cmd {
        AnalyzeCommand::Curve { top, .. } => {
            let curve = ordered_activation_curve(net, &ds)?;
            let curve = if top > 0 { curve.truncated(top) } else { curve };
            curve.write_csv(file)?;
        }
        AnalyzeCommand::Coeff { top, threshold, .. } => {
            let stat = routing_coeff_stat(net, &ds, threshold)?;
            let top = if top > 0 { top } else { stat.ordered_max_coefficients.len() };
            stat.write_csv(file, top)?;
            eprintln!(
                "capsules above {threshold} on the averaged curve: {}; mean per image: {:.2}",
                stat.threshold_count(threshold),
                stat.mean_count_above
            );
        }
        AnalyzeCommand::Influence { .. } => {
            let report = influence_report(net, &ds)?;
            report.write_csv(file)?;
            eprintln!("pearson(influence, activation norm) = {:.4}", report.correlation);
        }
        AnalyzeCommand::Actmap { index, agg, .. } => {
            if index >= ds.len() {
                bail!("--index {index} out of range for {} images", ds.len());
            }
            let agg = match agg {
                Aggregation::Max => MapAggregation::Max,
                Aggregation::Mean => MapAggregation::Mean,
            };
            write_grid_csv(&activation_map(net, &ds.image(index), agg)?, file)?;
        }
    }
    println!("{}", out.display());
    Ok(ExitCode::SUCCESS)
}

const IDX_LABEL_PAIRS_MAGIC: u32 = 0x0000_0802;

fn write_multimnist_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let [_, h, w] = ds.image_shape();
    let mut out = BufWriter::new(File::create(images)?);
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        out.write_all(&v.to_be_bytes())?;
    }
    for i in 0..ds.len() {
        out.write_all(ds.raw_image(i))?;
    }
    out.flush()?;
    let mut out = BufWriter::new(File::create(labels)?);
    for v in [IDX_LABEL_PAIRS_MAGIC, ds.len() as u32, 2] {
        out.write_all(&v.to_be_bytes())?;
    }
    for l in ds.labels() {
        out.write_all(l.classes())?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_synth(data_dir: &Path, runs_dir: &Path, args: SynthArgs) -> Result<ExitCode> {
    let cfg = RunConfig::parse_str(&format!(
        "arch = multimnist\ndataset = multimnist\nmultimnist_per_image = {}\nseed = {}",
        args.per_image, args.seed
    ))?;
    let split = if args.split == "train" { Split::Train } else { Split::Test };
    let ds = datasets::load(data_dir, cfg.dataset, split, args.subset, &cfg)?;
    let dir = match args.out {
        Some(d) => {
            fs::create_dir_all(&d)?;
            d
        }
        None => create_run_dir(runs_dir, &cfg)?,
    };
    let prefix = format!("multimnist-{}", split.as_str());
    write_multimnist_idx(
        &ds,
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx2-ubyte")),
    )?;
    println!("{}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let results = run_suite(args.seed, args.cases)?;
    println!("{:<22} {:>6} {:>14} {:>10}  status", "primitive", "cases", "max_rel_error", "tolerance");
    for r in &results {
        println!(
            "{:<22} {:>6} {:>14.3e} {:>10.0e}  {}",
            r.name,
            r.cases,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(path) = args.json {
        fs::write(path, serde_json::to_string_pretty(&results)?)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        eprintln!("{failed} of {} checks failed", results.len());
        return Ok(ExitCode::from(EXIT_FAILURE));
    }
    Ok(ExitCode::SUCCESS)
}
