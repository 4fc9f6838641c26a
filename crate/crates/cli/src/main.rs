mod config;
mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use misleading_core::data::{
    parse_manifest, subgroup_counts, write_predictions, DataError, DatasetManifest, DemographicKey, Split,
};
use misleading_core::metrics::{robustness_delta, subgroup_report, GroupBy, MetricsReport};
use misleading_core::perturb::Disturbance;
use misleading_core::synth::{generate_dataset, SynthError};
use misleading_core::trainer::{
    load_checkpoint, misleading_train, pretrain_dsub, run_inference_with, save_checkpoint, TrainError, TrainLog,
};

use crate::config::RunConfig;
use crate::plot::{plot_reports, NamedReport};

/// Failure class, reported through the exit code.
#[derive(Debug)]
enum Fail {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Fail {
    fn code(&self) -> u8 {
        match self {
            Fail::Config(_) => 2,
            Fail::Data(_) => 3,
            Fail::Numeric(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Fail::Config(e) | Fail::Data(e) | Fail::Numeric(e) => e,
        }
    }
}

fn data<E: Into<anyhow::Error>>(e: E) -> Fail {
    Fail::Data(e.into())
}

fn config<E: Into<anyhow::Error>>(e: E) -> Fail {
    Fail::Config(e.into())
}

impl From<TrainError> for Fail {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient(_) => Fail::Numeric(e.into()),
            TrainError::BadConfig(_) => Fail::Config(e.into()),
            other => Fail::Data(other.into()),
        }
    }
}

type CmdResult<T = ()> = Result<T, Fail>;

#[derive(Parser)]
#[command(name = "misleading", version, about = "Fair deepfake detection by misleading learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.0005` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum AblationFlag {
    /// Draw redundant partners uniformly over other subgroups
    NoBias,
    /// Drop the contrastive term
    NoContrastive,
    /// Replace attention fusion by plain fusion at the last stage
    NoScam,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (PNG files + manifest.csv)
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (defaults to paths.out_dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the discriminator, then run misleading training
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset manifest (defaults to paths.manifest)
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory for checkpoint.mlck and train_log.csv
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablation: Vec<AblationFlag>,
    },
    /// Score a split and write predictions plus a metrics report
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// train, val or test (defaults to report.split)
        #[arg(long)]
        split: Option<Split>,
        /// subgroup or method (defaults to report.group_by)
        #[arg(long)]
        group_by: Option<GroupBy>,
        /// Disturbance such as `GB:3` (kind:intensity, intensity 0-5)
        #[arg(long)]
        disturbance: Option<Disturbance>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge report JSON files into comparison CSVs
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Output directory
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Draw per-group bar charts and robustness deltas as SVG
    Plot {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> CmdResult<RunConfig> {
    config::load(args.config.as_deref(), &args.overrides).map_err(config)
}

fn manifest_path(cli: Option<PathBuf>, cfg: &RunConfig) -> CmdResult<PathBuf> {
    cli.or_else(|| cfg.paths.manifest.clone())
        .ok_or_else(|| config(anyhow!("no manifest given (use --manifest or paths.manifest)")))
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| data(anyhow!("cannot create {}: {e}", dir.display())))
}

fn cmd_synth(args: ConfigArgs, out: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(&args)?;
    let out = out.unwrap_or(cfg.paths.out_dir.clone());
    let manifest = generate_dataset(&cfg.synth, &out).map_err(|e| match e {
        SynthError::DegenerateConfig(_) | SynthError::NegativeStrength(_) => config(e),
        other => data(other),
    })?;
    print_counts(&manifest);
    println!("{}", out.join("manifest.csv").display());
    Ok(())
}

fn print_counts(manifest: &DatasetManifest) {
    println!("{:<6} {:>7} {:>7} {:>7}", "group", "train", "val", "test");
    let per: BTreeMap<Split, BTreeMap<DemographicKey, usize>> =
        Split::ALL.iter().map(|&s| (s, subgroup_counts(manifest, s))).collect();
    for key in DemographicKey::all() {
        let n: Vec<usize> = Split::ALL.iter().map(|s| per[s][&key]).collect();
        if n.iter().any(|&c| c > 0) {
            println!("{:<6} {:>7} {:>7} {:>7}", key.to_string(), n[0], n[1], n[2]);
        }
    }
}

fn cmd_train(args: ConfigArgs, manifest: Option<PathBuf>, out: Option<PathBuf>, ablation: Vec<AblationFlag>) -> CmdResult {
    let mut cfg = load_config(&args)?;
    for a in ablation {
        match a {
            AblationFlag::NoBias => cfg.train.ablation.use_bias_sampling = false,
            AblationFlag::NoContrastive => cfg.train.ablation.use_contrastive = false,
            AblationFlag::NoScam => cfg.train.ablation.use_scam = false,
        }
    }
    let mpath = manifest_path(manifest, &cfg)?;
    let out = out.unwrap_or(cfg.paths.out_dir.clone());
    let manifest = parse_manifest(&mpath).map_err(data)?;
    let train = manifest.load_split(Split::Train, cfg.train.input_size).map_err(data)?;
    create_dir(&out)?;
    log::info!("training on {} samples", train.len());
    let mut log = TrainLog::default();
    let result = pretrain_dsub(&cfg.train, &train, &mut log).and_then(|ck| misleading_train(ck, &train, &mut log));
    let log_path = out.join("train_log.csv");
    log.write_csv(&log_path)?;
    let ck = result?;
    let ck_path = out.join("checkpoint.mlck");
    save_checkpoint(&ck, &ck_path)?;
    ck.model
        .bank
        .export(&out.join("kernel_bank.bin"))
        .map_err(data)?;
    log::info!("{} pairs drawn, {} same-subgroup", log.pairs, log.same_subgroup_pairs);
    println!("{}", ck_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    args: ConfigArgs,
    checkpoint: PathBuf,
    manifest: Option<PathBuf>,
    split: Option<Split>,
    group_by: Option<GroupBy>,
    disturbance: Option<Disturbance>,
    threshold: Option<f64>,
    out: Option<PathBuf>,
) -> CmdResult {
    let cfg = load_config(&args)?;
    let split = split.unwrap_or(cfg.report.split);
    let group_by = group_by.unwrap_or(cfg.report.group_by);
    let threshold = threshold.unwrap_or(cfg.report.threshold);
    let mpath = manifest_path(manifest, &cfg)?;
    let out = out.unwrap_or(cfg.paths.out_dir.clone());
    let ck = load_checkpoint(&checkpoint)?;
    let manifest = parse_manifest(&mpath).map_err(data)?;
    let samples = manifest.load_split(split, ck.config.input_size).map_err(data)?;
    create_dir(&out)?;
    let records = run_inference_with(&ck, &samples, disturbance.map(|d| (d, cfg.report.disturbance_seed)))?;
    write_predictions(&records, &out.join("predictions.csv")).map_err(data)?;
    let mut report = subgroup_report(&records, threshold, group_by).map_err(data)?;
    report.meta.dataset_id = mpath
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned());
    report.meta.split = Some(split.to_string());
    report.meta.perturbation = disturbance.map(|d| d.to_string());
    report.meta.checkpoint = Some(checkpoint.display().to_string());
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| data(anyhow!("cannot write {}: {e}", p.display())))
    };
    write("report.json", report.to_json_string())?;
    write("report.csv", report.to_csv_string())?;
    println!(
        "auc={} f_fpr={} f_mag_auc={}",
        fmt_opt(report.overall.auc),
        fmt_opt(report.fairness.f_fpr),
        fmt_opt(report.fairness.f_mag_auc)
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn read_reports(paths: &[PathBuf]) -> CmdResult<Vec<NamedReport>> {
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(data)?;
            let report: MetricsReport = serde_json::from_str(&text)
                .with_context(|| format!("parsing report {}", p.display()))
                .map_err(data)?;
            let name = p
                .parent()
                .and_then(|d| d.file_name())
                .filter(|_| p.file_stem().is_some_and(|s| s == "report"))
                .or_else(|| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            Ok(NamedReport { name, report })
        })
        .collect()
}

fn cmd_report(paths: Vec<PathBuf>, out: PathBuf) -> CmdResult {
    let reports = read_reports(&paths)?;
    create_dir(&out)?;
    let csv_err = |e: csv::Error| data(anyhow!(e));

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["report", "perturbation", "auc", "acc", "f_fpr", "f_mag_auc", "f_mag_acc", "f_meo"])
        .map_err(csv_err)?;
    for r in &reports {
        let f = &r.report.fairness;
        w.write_record([
            r.name.clone(),
            r.report.meta.perturbation.clone().unwrap_or_default(),
            opt_cell(r.report.overall.auc),
            opt_cell(r.report.overall.acc),
            opt_cell(f.f_fpr),
            opt_cell(f.f_mag_auc),
            opt_cell(f.f_mag_acc),
            opt_cell(f.f_meo),
        ])
        .map_err(csv_err)?;
    }
    write_csv(w, &out.join("comparison.csv"))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["report", "group", "n_real", "n_fake", "auc", "acc", "fpr"]).map_err(csv_err)?;
    for r in &reports {
        for (g, m) in &r.report.per_group {
            w.write_record([
                r.name.clone(),
                g.clone(),
                m.n_real.to_string(),
                m.n_fake.to_string(),
                opt_cell(m.auc),
                opt_cell(m.acc),
                opt_cell(m.fpr),
            ])
            .map_err(csv_err)?;
        }
    }
    write_csv(w, &out.join("groups.csv"))?;

    let clean = reports.iter().find(|r| r.report.meta.perturbation.is_none());
    let perturbed: Vec<&NamedReport> = reports.iter().filter(|r| r.report.meta.perturbation.is_some()).collect();
    if let (Some(clean), false) = (clean, perturbed.is_empty()) {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["report", "perturbation", "delta_auc", "delta_f_fpr", "delta_f_mag"]).map_err(csv_err)?;
        for p in perturbed {
            let d = robustness_delta(&clean.report, &p.report).map_err(data)?;
            w.write_record([
                p.name.clone(),
                p.report.meta.perturbation.clone().unwrap_or_default(),
                opt_cell(d.delta_auc),
                opt_cell(d.delta_f_fpr),
                opt_cell(d.delta_f_mag),
            ])
            .map_err(csv_err)?;
        }
        write_csv(w, &out.join("robustness.csv"))?;
    }
    Ok(())
}

fn write_csv(w: csv::Writer<Vec<u8>>, path: &Path) -> CmdResult {
    let bytes = w.into_inner().map_err(|e| data(anyhow!("{e}")))?;
    fs::write(path, bytes).map_err(|e| data(anyhow!("cannot write {}: {e}", path.display())))?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_plot(paths: Vec<PathBuf>, out: PathBuf) -> CmdResult {
    let reports = read_reports(&paths)?;
    for p in plot_reports(&reports, &out).map_err(data)? {
        println!("{}", p.display());
    }
    Ok(())
}

/// Attaches the consumed config keys to each subcommand's help.
fn command_with_key_help() -> clap::Command {
    Cli::command()
        .mut_subcommand("synth", |c| c.after_help(config::key_listing(&["synth", "paths"])))
        .mut_subcommand("train", |c| c.after_help(config::key_listing(&["train", "paths"])))
        .mut_subcommand("eval", |c| c.after_help(config::key_listing(&["report", "paths"])))
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth { cfg, out } => cmd_synth(cfg, out),
        Command::Train {
            cfg,
            manifest,
            out,
            ablation,
        } => cmd_train(cfg, manifest, out, ablation),
        Command::Eval {
            cfg,
            checkpoint,
            manifest,
            split,
            group_by,
            disturbance,
            threshold,
            out,
        } => cmd_eval(cfg, checkpoint, manifest, split, group_by, disturbance, threshold, out),
        Command::Report { reports, out } => cmd_report(reports, out),
        Command::Plot { reports, out } => cmd_plot(reports, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = command_with_key_help().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            if let Some(DataError::ShapeMismatch { .. }) = f.error().downcast_ref::<DataError>() {
                eprintln!("hint: the checkpoint expects a different input_size");
            }
            ExitCode::from(f.code())
        }
    }
}
