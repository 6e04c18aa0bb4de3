//! `mafbench`: world generation, runs, sweeps, selection, ablation, analysis
//! and reports. Every command writes into `--out` and seals its files with a
//! SHA-256 manifest (see [`output`]).
//!
//! Exit codes: 0 on success, 1 on a usage or configuration error, 2 when a
//! run fails or a manifest does not verify.

pub mod args;
pub mod output;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::Path;

use clap::Parser;
use maf_core::algorithms::{
    derive_run_seed, train_run, Algorithm, RunOutput, RunRecord, RunSpec, TrainSettings, DEFAULT_EVAL_CADENCE,
};
use maf_core::analysis::{analyze_bundle, collect_features};
use maf_core::protocols::{
    aggregate_report, ablation_mean, mark_selected, materialize, run_ablation, run_benchmark, trial_hparams, AblationRow,
    Protocol, SweepConfig,
};
use maf_core::synthworld::{generate_world, ModalityDataset, Split, SyntheticWorld, WorldConfig};
use maf_core::{Error, Result};
use serde_json::json;

use args::{AblateArgs, AnalyzeArgs, Cli, Command, GenWorldArgs, ReportArgs, RunArgs, SelectArgs, SweepArgs};
use output::{read_runs, verify_manifest, write_outputs, Artifacts, Manifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

pub const WORLD_FILE: &str = "world.json";

/// Reads a world configuration. Missing keys take their defaults; unknown
/// keys and mistyped values are rejected with the key's name.
pub fn load_config(path: &Path) -> Result<WorldConfig> {
    WorldConfig::load(path)
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenWorld(a) => gen_world(&a),
        Command::Run(a) => with_pool(a.exec.threads, || run(&a)),
        Command::Sweep(a) => with_pool(a.exec.threads, || sweep(&a)),
        Command::Select(a) => select(&a),
        Command::Ablate(a) => with_pool(a.exec.threads, || ablate(&a)),
        Command::Analyze(a) => with_pool(a.exec.threads, || analyze(&a)),
        Command::Report(a) => report(&a),
    }
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(f)
}

fn resolved<A: serde::Serialize>(args: &A, world: Option<&WorldConfig>) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(args)?;
    if let (Some(w), Some(obj)) = (world, v.as_object_mut()) {
        obj.insert("world_config".into(), serde_json::to_value(w)?);
    }
    Ok(v)
}

fn load_world(path: &Path) -> Result<(WorldConfig, SyntheticWorld)> {
    let cfg = load_config(path)?;
    let world = generate_world(&cfg)?;
    Ok((cfg, world))
}

fn held_out(world: &SyntheticWorld, requested: Option<usize>) -> Result<usize> {
    let k = world.num_modalities();
    let m = requested.unwrap_or(k - 1);
    if m >= k {
        return Err(Error::Config(format!("test modality {m} out of range (world has {k} modalities)")));
    }
    Ok(m)
}

fn gen_world(a: &GenWorldArgs) -> Result<i32> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => WorldConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    generate_world(&cfg)?;
    let mut out = Artifacts::create(&a.out, Manifest::new("gen-world", resolved(a, Some(&cfg))?, None))?;
    out.add(WORLD_FILE, cfg.to_json().as_bytes())?;
    out.finish()?;
    log::info!("wrote {}", a.out.join(WORLD_FILE).display());
    Ok(EXIT_OK)
}

struct Single<'a> {
    world: &'a SyntheticWorld,
    setting: args::Setting,
    protocol: Protocol,
    algorithm: Algorithm,
    test: usize,
    trial: usize,
    seed: usize,
    steps: usize,
    global_seed: u64,
}

/// One run, seeded exactly like the same run inside a sweep.
fn single_run(s: &Single) -> Result<(RunOutput, Vec<ModalityDataset>)> {
    let datasets = materialize(s.world, s.setting.mode(), s.test)?;
    let train: Vec<usize> = (0..s.world.num_modalities()).filter(|&m| m != s.test).collect();
    let spec = RunSpec {
        algorithm: s.algorithm,
        hparams: trial_hparams(s.algorithm, s.trial, s.global_seed)?,
        trial: s.trial,
        seed_index: s.seed,
        run_seed: derive_run_seed(s.global_seed, s.algorithm, s.trial, s.seed, s.test),
        linear_head: false,
    };
    let settings = TrainSettings {
        steps: s.steps,
        eval_cadence: DEFAULT_EVAL_CADENCE,
    };
    let out = train_run(&datasets, &train, s.test, s.protocol, &spec, settings)?;
    log::info!(
        "{} test AUC {:?} in {} ms",
        out.record.run_id,
        out.record.final_test_auc,
        out.wall_ms
    );
    Ok((out, datasets))
}

fn finish_records(mut records: Vec<RunRecord>) -> Result<Vec<RunRecord>> {
    mark_selected(&mut records)?;
    Ok(records)
}

fn run(a: &RunArgs) -> Result<i32> {
    let (cfg, world) = load_world(&a.world)?;
    let test = held_out(&world, a.test_modality)?;
    let (out, _) = single_run(&Single {
        world: &world,
        setting: a.setting,
        protocol: a.protocol.into(),
        algorithm: a.algorithm,
        test,
        trial: a.trial,
        seed: a.seed,
        steps: a.steps,
        global_seed: a.exec.global_seed,
    })?;
    let failure = out.record.failure.clone();
    let records = finish_records(vec![out.record])?;
    let mut ckpt = Vec::new();
    maf_core::detector::write_checkpoint(&out.model.detector, &mut ckpt)?;
    let mut files = Artifacts::create(
        &a.out,
        Manifest::new("run", resolved(a, Some(&cfg))?, Some(a.exec.global_seed)),
    )?;
    files.add_runs(&records)?;
    files.add(output::REPORT_FILE, aggregate_report(&records).to_csv().as_bytes())?;
    files.add("detector.ckpt", &ckpt)?;
    files.finish()?;
    match failure {
        Some(f) => {
            eprintln!("error: run failed: {f}");
            Ok(EXIT_FAILURE)
        }
        None => Ok(EXIT_OK),
    }
}

fn sweep(a: &SweepArgs) -> Result<i32> {
    let (cfg, world) = load_world(&a.world)?;
    let config = SweepConfig {
        algorithms: a.algorithms.0.clone(),
        trials: a.trials,
        seeds: a.seeds,
        protocol: a.protocol.into(),
        mode: a.setting.mode(),
        steps: a.steps,
        eval_cadence: DEFAULT_EVAL_CADENCE,
        global_seed: a.exec.global_seed,
    };
    let outputs = run_benchmark(&world, &config)?;
    let failed = outputs.iter().filter(|o| o.record.failure.is_some()).count();
    let total_ms: u64 = outputs.iter().map(|o| o.wall_ms).sum();
    log::info!("{} runs ({failed} failed) in {total_ms} ms of training", outputs.len());
    let records = finish_records(outputs.into_iter().map(|o| o.record).collect())?;
    let report = aggregate_report(&records);
    write_outputs(
        &records,
        &report,
        None,
        &a.out,
        Manifest::new("sweep", resolved(a, Some(&cfg))?, Some(a.exec.global_seed)),
    )?;
    Ok(EXIT_OK)
}

fn select(a: &SelectArgs) -> Result<i32> {
    let records = finish_records(read_runs(&a.runs)?)?;
    let report = aggregate_report(&records);
    write_outputs(&records, &report, None, &a.out, Manifest::new("select", resolved(a, None)?, None))?;
    Ok(EXIT_OK)
}

pub const ABLATION_HEADER: &str = "mode,seed,test_modality,train_modalities,test_auc";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let train: Vec<String> = r.train_modalities.iter().map(usize::to_string).collect();
        let auc = r.test_auc.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{auc}", r.mode, r.seed, r.test_modality, train.join(";"));
    }
    out
}

fn ablate(a: &AblateArgs) -> Result<i32> {
    if a.seeds == 0 {
        return Err(Error::Config("seeds must be at least 1".into()));
    }
    let (cfg, world) = load_world(&a.world)?;
    let settings = TrainSettings {
        steps: a.steps,
        eval_cadence: DEFAULT_EVAL_CADENCE,
    };
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &mode in &a.modes.0 {
        let r = run_ablation(&world, mode, a.seeds, settings, a.exec.global_seed)?;
        let mean = ablation_mean(&r);
        log::info!("{mode}: mean test AUC {mean:.4}");
        summary.push(json!({"mode": mode, "mean_auc": mean, "n_runs": r.len()}));
        rows.extend(r);
    }
    let mut files = Artifacts::create(
        &a.out,
        Manifest::new("ablate", resolved(a, Some(&cfg))?, Some(a.exec.global_seed)),
    )?;
    files.add("ablation.csv", ablation_csv(&rows).as_bytes())?;
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    files.add("ablation.json", text.as_bytes())?;
    files.finish()?;
    Ok(EXIT_OK)
}

fn analyze(a: &AnalyzeArgs) -> Result<i32> {
    if !(0.0..=1.0).contains(&a.shrinkage) {
        return Err(Error::Config(format!("shrinkage {} outside [0, 1]", a.shrinkage)));
    }
    let (cfg, world) = load_world(&a.world)?;
    let test = held_out(&world, a.test_modality)?;
    let (out, datasets) = single_run(&Single {
        world: &world,
        setting: a.setting,
        protocol: a.protocol.into(),
        algorithm: a.algorithm,
        test,
        trial: a.trial,
        seed: a.seed,
        steps: a.steps,
        global_seed: a.exec.global_seed,
    })?;
    if let Some(f) = &out.record.failure {
        eprintln!("error: run failed: {f}");
        return Ok(EXIT_FAILURE);
    }
    let bundle = collect_features(&out.model, &datasets, Split::Test)?;
    let analysis = analyze_bundle(&bundle, a.shrinkage, a.top_n)?;
    let records = finish_records(vec![out.record])?;
    write_outputs(
        &records,
        &aggregate_report(&records),
        Some(&analysis),
        &a.out,
        Manifest::new("analyze", resolved(a, Some(&cfg))?, Some(a.exec.global_seed)),
    )?;
    Ok(EXIT_OK)
}

fn report(a: &ReportArgs) -> Result<i32> {
    if let Some(dir) = &a.verify {
        let problems = verify_manifest(dir)?;
        if problems.is_empty() {
            println!("{}: all files match the manifest", dir.display());
            return Ok(EXIT_OK);
        }
        for p in &problems {
            eprintln!("mismatch: {p}");
        }
        return Ok(EXIT_FAILURE);
    }
    let (Some(runs), Some(out)) = (&a.runs, &a.out) else {
        return Err(Error::Config("report needs --runs and --out, or --verify".into()));
    };
    let records = read_runs(runs)?;
    let mut files = Artifacts::create(out, Manifest::new("report", resolved(a, None)?, None))?;
    files.add(output::REPORT_FILE, aggregate_report(&records).to_csv().as_bytes())?;
    files.finish()?;
    Ok(EXIT_OK)
}
