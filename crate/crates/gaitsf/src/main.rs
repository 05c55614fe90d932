//! Command-line front end: `generate`, `train`, `eval`, `report`.
//!
//! Exit codes: 0 success, 2 config error, 3 IO error, 4 missing prior-stage
//! checkpoint, 5 protocol error.

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use gaitsf::config::RunConfig;
use gaitsf::encoder::{
    discriminative_init, encode, load_params, pretrain, save_params, EncoderGeometry, EncoderParams,
};
use gaitsf::error::{Error, Result};
use gaitsf::eval::{rank_k, split_gallery_probe, write_reports, EvalItem};
use gaitsf::fusion::{train_view_classifier, ViewClassifier};
use gaitsf::pipeline::{
    run_baseline_from, run_selective_fusion_from, EpochRecord, StageState, TrainConfig, ViewFlags,
};
use gaitsf::silhouette::{
    generate_dataset, read_dataset, write_dataset, AugmentConfig, GaitSequence, SynthSpec,
};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "gaitsf", version, about = "Unsupervised gait recognition on synthetic silhouettes")]
struct Cli {
    /// Worker threads (default: GAITSF_THREADS env var, else 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and pretrain splits.
    Generate {
        /// Config file (`key = value` lines, `#` comments).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key (repeatable); wins over the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Master seed override (shorthand for --set seed=N).
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage; later stages require the earlier checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Dataset directory produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Training stage.
        #[arg(long, value_parser = ["pretrain", "baseline", "sf"])]
        stage: String,
        /// Run directory holding per-stage checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Resume the stage from its last mid-stage checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        /// Encoder checkpoint: a params file or a stage directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split directory (contains manifest.jsonl).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rank levels, comma separated.
        #[arg(long, default_value = "1,5")]
        ranks: String,
        /// Drop same-view gallery entries per probe.
        #[arg(long)]
        exclude_same_view: bool,
    },
    /// Summarize a history.jsonl file.
    Report {
        #[arg(long)]
        history: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let help = config_help();
    let matches = Cli::command().after_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var("GAITSF_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1)
        .max(1);
    if let Err(e) = run(cli.command, threads) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn config_help() -> String {
    let mut s = String::from("Config keys (defaults in parentheses):\n");
    for e in RunConfig::entries() {
        s.push_str(&format!("  {} ({})  {}\n", e.key, e.default, e.doc));
    }
    s
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Invalid { .. } | Error::Config { .. } => 2,
        Error::Io(_) | Error::Serde(_) => 3,
        Error::MissingCheckpoint(_) => 4,
        Error::Protocol(_) => 5,
        _ => 1,
    }
}

fn load_config(path: &Option<PathBuf>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::invalid("--set", format!("expected KEY=VALUE, got `{s}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Command, threads: usize) -> Result<()> {
    match cmd {
        Command::Generate { config, sets, seed, out } => {
            let mut cfg = load_config(&config, &sets)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cmd_generate(&cfg, &out)
        }
        Command::Train { config, sets, data, stage, out, resume } => {
            let cfg = load_config(&config, &sets)?;
            cmd_train(&cfg, &data, &stage, &out, resume, threads)
        }
        Command::Eval { checkpoint, data, out, ranks, exclude_same_view } => {
            cmd_eval(&checkpoint, &data, &out, &ranks, exclude_same_view, threads)
        }
        Command::Report { history } => cmd_report(&history),
    }
}

fn train_split_spec(cfg: &RunConfig) -> SynthSpec {
    SynthSpec::profile(
        cfg.n_subjects,
        0,
        cfg.conditions.clone(),
        cfg.views.clone(),
        cfg.seqs_per_cell,
        cfg.frames_per_seq,
        cfg.seed,
    )
}

fn pretrain_split_spec(cfg: &RunConfig) -> SynthSpec {
    // Same condition/view grid as the training split, disjoint subject range.
    SynthSpec::profile(
        cfg.pretrain_subjects,
        cfg.n_subjects,
        cfg.conditions.clone(),
        cfg.views.clone(),
        cfg.seqs_per_cell,
        cfg.frames_per_seq,
        cfg.seed,
    )
}

fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut total = 0usize;
    for (name, spec) in
        [("train", train_split_spec(cfg)), ("pretrain", pretrain_split_spec(cfg))]
    {
        let (seqs, entries) = generate_dataset(&spec)?;
        write_dataset(&out.join(name), &seqs, &entries)?;
        total += seqs.len();
        println!("{name}: {} sequences", seqs.len());
    }
    println!("total: {total} sequences");
    Ok(())
}

fn stage_train_config(cfg: &RunConfig, stage: &str, threads: usize) -> TrainConfig {
    let (epochs, iters, s_up) = match stage {
        "baseline" => (cfg.baseline_epochs, cfg.baseline_iters, cfg.s_up_baseline),
        _ => (cfg.sf_epochs, cfg.sf_iters, cfg.s_up_sf),
    };
    TrainConfig {
        epochs,
        iters_per_epoch: iters,
        batch_clusters: cfg.batch_clusters,
        batch_members: cfg.batch_members,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        milestones: cfg.milestones.clone(),
        knn: cfg.knn,
        s_up,
        tau: cfg.tau,
        momentum: cfg.momentum_for(iters),
        renormalize: cfg.renormalize,
        frames_per_pass: cfg.frames_per_pass,
        seed: cfg.seed,
        threads,
        support_size: cfg.support_size,
        c_low: cfg.c_low,
        s_o: cfg.s_o,
        lambda_base: cfg.lambda_base,
        s_c_floor: cfg.s_c_floor,
        augment: AugmentConfig::default(),
    }
}

fn require_params(path: &Path, stage: &'static str) -> Result<EncoderParams> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(stage));
    }
    load_params(path)
}

fn read_split(dir: &Path) -> Result<Vec<GaitSequence>> {
    read_dataset(dir).map(|(seqs, _)| seqs)
}

/// Append-per-epoch history writer plus periodic mid-stage checkpoints.
struct StageSink<'a> {
    dir: &'a Path,
    history: std::fs::File,
    checkpoint_every: usize,
}

impl<'a> StageSink<'a> {
    fn new(dir: &'a Path, checkpoint_every: usize, resume: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let history = std::fs::OpenOptions::new()
            .create(true)
            .append(resume)
            .write(true)
            .truncate(!resume)
            .open(dir.join("history.jsonl"))?;
        Ok(StageSink { dir, history, checkpoint_every })
    }

    fn record(
        &mut self,
        r: &EpochRecord,
        params: &EncoderParams,
        state: &StageState,
    ) -> Result<()> {
        writeln!(self.history, "{}", serde_json::to_string(r)?)?;
        if self.checkpoint_every > 0 && (r.epoch + 1) % self.checkpoint_every == 0 {
            save_params(params, &self.dir.join("encoder.params.partial"))?;
            std::fs::write(self.dir.join("state.json"), serde_json::to_vec_pretty(state)?)?;
        }
        Ok(())
    }

    fn finish(&self, params: &EncoderParams) -> Result<()> {
        save_params(params, &self.dir.join("encoder.params"))?;
        let _ = std::fs::remove_file(self.dir.join("encoder.params.partial"));
        let _ = std::fs::remove_file(self.dir.join("state.json"));
        Ok(())
    }
}

fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    stage: &str,
    out: &Path,
    resume: bool,
    threads: usize,
) -> Result<()> {
    match stage {
        "pretrain" => {
            let split = read_split(&data.join("pretrain"))?;
            let geom = EncoderGeometry::new(cfg.parts, cfg.dim)?;
            let params = discriminative_init(&split, geom)?;
            let lrs = vec![cfg.pretrain_lr; cfg.pretrain_epochs];
            let (params, report) = pretrain(
                &split,
                params,
                cfg.pretrain_epochs,
                &lrs,
                cfg.weight_decay,
                cfg.frames_per_pass,
                cfg.seed,
            )?;
            let dir = out.join("pretrain");
            std::fs::create_dir_all(&dir)?;
            save_params(&params, &dir.join("encoder.params"))?;
            let samples: Vec<(Vec<f64>, u16)> = split
                .iter()
                .map(|s| encode(s, &params).map(|e| (e.vector, s.view_deg)))
                .collect::<Result<_>>()?;
            let clf = train_view_classifier(&samples)?;
            std::fs::write(dir.join("view_classifier.json"), serde_json::to_vec_pretty(&clf)?)?;
            println!(
                "pretrain: final rank-1 {:.1}%, view probe accuracy {:.1}%",
                report.final_rank1 * 100.0,
                clf.holdout_accuracy * 100.0
            );
            Ok(())
        }
        "baseline" => {
            let params = require_params(&out.join("pretrain/encoder.params"), "pretrain")?;
            let split = read_split(&data.join("train"))?;
            let tc = stage_train_config(cfg, stage, threads);
            let dir = out.join("baseline");
            let mut state = load_or_fresh_state(&dir, &tc, resume)?;
            let start_params = if resume && dir.join("encoder.params.partial").exists() {
                load_params(&dir.join("encoder.params.partial"))?
            } else {
                params
            };
            let mut sink = StageSink::new(&dir, cfg.checkpoint_every, state.next_epoch > 0)?;
            let (final_params, records) =
                run_baseline_from(&split, start_params, &tc, &mut state, &mut |r, p, s| {
                    sink.record(r, p, s)
                })?;
            sink.finish(&final_params)?;
            println!("baseline: {} epochs trained", records.len());
            Ok(())
        }
        "sf" => {
            let params = require_params(&out.join("baseline/encoder.params"), "baseline")?;
            let split = read_split(&data.join("train"))?;
            let tc = stage_train_config(cfg, stage, threads);
            let flags = match cfg.view_flags.as_str() {
                "none" => ViewFlags::None,
                "oracle" => ViewFlags::Oracle,
                _ => {
                    let path = out.join("pretrain/view_classifier.json");
                    if !path.exists() {
                        return Err(Error::MissingCheckpoint("pretrain"));
                    }
                    let clf: ViewClassifier =
                        serde_json::from_slice(&std::fs::read(&path)?)?;
                    ViewFlags::Classifier(clf)
                }
            };
            let dir = out.join("sf");
            let mut state = load_or_fresh_state(&dir, &tc, resume)?;
            let start_params = if resume && dir.join("encoder.params.partial").exists() {
                load_params(&dir.join("encoder.params.partial"))?
            } else {
                params
            };
            let mut sink = StageSink::new(&dir, cfg.checkpoint_every, state.next_epoch > 0)?;
            let (final_params, records) = run_selective_fusion_from(
                &split,
                start_params,
                &tc,
                &flags,
                &mut state,
                &mut |r, p, s| sink.record(r, p, s),
            )?;
            sink.finish(&final_params)?;
            println!("sf: {} epochs trained", records.len());
            Ok(())
        }
        other => Err(Error::invalid("stage", format!("unknown stage `{other}`"))),
    }
}

fn load_or_fresh_state(dir: &Path, tc: &TrainConfig, resume: bool) -> Result<StageState> {
    let path = dir.join("state.json");
    if resume && path.exists() {
        Ok(serde_json::from_slice(&std::fs::read(&path)?)?)
    } else {
        Ok(StageState::fresh(tc))
    }
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    ranks: &str,
    exclude_same_view: bool,
    threads: usize,
) -> Result<()> {
    let params_path =
        if checkpoint.is_dir() { checkpoint.join("encoder.params") } else { checkpoint.to_path_buf() };
    if !params_path.exists() {
        return Err(Error::MissingCheckpoint("encoder"));
    }
    let params = load_params(&params_path)?;
    let split = read_split(data)?;
    let ranks: Vec<usize> = ranks
        .split(',')
        .map(|r| r.trim().parse().map_err(|_| Error::invalid("--ranks", format!("bad rank `{r}`"))))
        .collect::<Result<_>>()?;
    let items: Vec<EvalItem> = gaitsf::pipeline::par_map(&split, threads, |s| {
        encode(s, &params).map(|e| EvalItem {
            seq_id: s.seq_id.clone(),
            subject_id: s.subject_id,
            condition: s.condition,
            view_deg: s.view_deg,
            vector: e.vector,
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let (gallery, probe) = split_gallery_probe(&items);
    let table = rank_k(&gallery, &probe, &ranks, exclude_same_view)?;
    write_reports(&table, out)?;
    for (cond, row) in &table.per_condition {
        let cells: Vec<String> =
            row.iter().map(|(k, acc)| format!("rank-{k} {acc:.1}%")).collect();
        println!("{cond}: {}", cells.join(", "));
    }
    Ok(())
}

fn cmd_report(history: &Path) -> Result<()> {
    let text = std::fs::read_to_string(history)?;
    let records: Vec<EpochRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect::<Result<_>>()?;
    if records.is_empty() {
        println!("no epochs recorded");
        return Ok(());
    }
    let first = &records[0];
    let last = &records[records.len() - 1];
    println!("epochs: {}", records.len());
    println!(
        "loss: {:.4} -> {:.4} | clusters: {} -> {} | outliers: {} -> {}",
        first.mean_loss, last.mean_loss, first.n_clusters, last.n_clusters, first.n_outliers,
        last.n_outliers
    );
    println!("final s_c {:.4}, lambda {:.5}, fvc count {}", last.s_c, last.lambda, last.fvc_count);
    let total_ms: u64 = records.iter().map(|r| r.wall_ms).sum();
    println!("total wall time {:.1}s", total_ms as f64 / 1000.0);
    Ok(())
}

