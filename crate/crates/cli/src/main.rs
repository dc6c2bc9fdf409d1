//! Batch command-line surface over the fairaudit pipeline.
//!
//! Exit codes: 0 success, 1 validation/configuration error, 2 runtime
//! or numerical error, 3 artifact integrity/compatibility error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fairaudit_core::artifacts::{load_artifact, save_artifact};
use fairaudit_core::attacks::{
    AttackKind, AttackVariant, ModelSide, RunAttackConfig,
};
use fairaudit_core::config::ExperimentConfig;
use fairaudit_core::dataset::{ingest_csv, make_splits, CsvSchema};
use fairaudit_core::defenses::{dp_sgd_train, DpConfig, RestrictionPolicy};
use fairaudit_core::experiment::{run_experiment, RunOptions};
use fairaudit_core::fairness::train_fair;
use fairaudit_core::metrics::{auc, balanced_accuracy_at_threshold, tpr_at_fpr};
use fairaudit_core::nn::{init_mlp, train, ModelFile, TrainConfig};
use fairaudit_core::report::{emit_report, AuditReport, ReportFormat, SeedStatus};
use fairaudit_core::rng::derive_seed;
use fairaudit_core::{Error, LabeledDataset, MlpModel, Real, Result};

#[derive(Parser)]
#[command(
    name = "fairaudit",
    version,
    about = "Fairness-vs-privacy audit pipeline: train biased and fair targets, attack them, measure defenses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset and write it as CSV
    Generate(GenerateArgs),
    /// Train a plain target model on a CSV dataset
    Train(TrainArgs),
    /// Train a fairness-intervened target model on a CSV dataset
    FairTrain(TrainArgs),
    /// Run one attack against saved models
    Attack(AttackArgs),
    /// Train a model under DP-SGD and report the privacy budget
    Defend(DefendArgs),
    /// Re-emit report files from a saved report
    Report(ReportArgs),
    /// Run the full multi-seed experiment pipeline
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Experiment config supplying the dataset section
    #[arg(long)]
    config: PathBuf,
    /// Experiment seed the data stage derives from
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination CSV path
    #[arg(long)]
    out: PathBuf,
    /// Which portion to write: all, eval (members+nonmembers with a
    /// member column) or shadow
    #[arg(long, default_value = "all")]
    split: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config supplying target (and intervention) sections
    #[arg(long)]
    config: PathBuf,
    /// Training data CSV (columns: features, label, group)
    #[arg(long)]
    data: PathBuf,
    /// Destination model artifact path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AttackArgs {
    /// Saved target model artifact
    #[arg(long)]
    target: PathBuf,
    /// Saved fair model artifact; required for fd_* kinds
    #[arg(long)]
    fair: Option<PathBuf>,
    /// One of mia_score, mia_lira, aia_black, aia_white or the same
    /// with an fd_ prefix
    #[arg(long)]
    kind: String,
    /// Evaluation CSV with a 'member' column marking target training rows
    #[arg(long)]
    eval: PathBuf,
    /// Auxiliary CSV the attacker controls (shadow pool)
    #[arg(long)]
    shadow_pool: PathBuf,
    /// Experiment config; required by fd_mia_* kinds for the paired
    /// shadow intervention
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    k_shadows: usize,
    #[arg(long, default_value_t = 10)]
    shadow_epochs: usize,
    #[arg(long, default_value_t = 64)]
    shadow_batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    shadow_learning_rate: f64,
}

#[derive(Args)]
struct DefendArgs {
    /// Experiment config with a [defense.dp] section
    #[arg(long)]
    config: PathBuf,
    /// Training data CSV
    #[arg(long)]
    data: PathBuf,
    /// Destination model artifact path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding a saved report.json
    #[arg(long = "in")]
    in_dir: PathBuf,
    /// Comma-separated subset of json,csv
    #[arg(long, default_value = "json,csv")]
    format: String,
    /// Destination directory; defaults to the input directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config path
    #[arg(long)]
    config: PathBuf,
    /// Fewer shadows and seeds for a fast, non-acceptance-grade run
    #[arg(long)]
    quick: bool,
    /// Output directory; falls back to FAIRAUDIT_OUT, then the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the configured seed list with this single seed
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on worker threads
    #[arg(long)]
    jobs: Option<usize>,
    /// Comma-separated subset of json,csv
    #[arg(long, default_value = "json,csv")]
    format: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a, false),
        Command::FairTrain(a) => cmd_train(a, true),
        Command::Attack(a) => cmd_attack(a),
        Command::Defend(a) => cmd_defend(a),
        Command::Report(a) => cmd_report(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

/// Missing input files are configuration errors (exit 1), not I/O
/// failures.
fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("file not found: {}", path.display())))
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    require_file(path)?;
    ExperimentConfig::from_path(path)
}

fn load_model(path: &Path) -> Result<MlpModel> {
    require_file(path)?;
    let file: ModelFile = load_artifact(path)?;
    MlpModel::from_file(&file)
}

fn load_csv(path: &Path) -> Result<LabeledDataset> {
    require_file(path)?;
    ingest_csv(path, &CsvSchema::default())
}

fn write_csv(path: &Path, data: &LabeledDataset, member: Option<&[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let d = data.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    header.push("group".into());
    if member.is_some() {
        header.push("member".into());
    }
    let io_err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(&header).map_err(io_err)?;
    for i in 0..data.n() {
        let mut row: Vec<String> = (0..d).map(|j| format!("{:e}", data.features[[i, j]])).collect();
        row.push(data.labels[i].to_string());
        row.push(data.groups[i].to_string());
        if let Some(m) = member {
            row.push(m[i].to_string());
        }
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let params = cfg
        .dataset
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Config("generate needs a [dataset.synthetic] table".into()))?;
    let spec = params.to_spec(cfg.dataset.skew_ratio, derive_seed(a.seed, "data"))?;
    let data: LabeledDataset = fairaudit_core::dataset::generate_synthetic(&spec)?;
    match a.split.as_str() {
        "all" => write_csv(&a.out, &data, None)?,
        "eval" | "shadow" => {
            let splits = make_splits(&data, &cfg.split.to_spec(derive_seed(a.seed, "split")))?;
            if a.split == "shadow" {
                write_csv(&a.out, &splits.shadow, None)?;
            } else {
                let mut rows: Vec<usize> = Vec::new();
                rows.extend(&splits.member_indices);
                rows.extend(&splits.nonmember_indices);
                let eval = data.subset(&rows);
                let mut member = vec![1u8; splits.member_indices.len()];
                member.extend(std::iter::repeat(0u8).take(splits.nonmember_indices.len()));
                write_csv(&a.out, &eval, Some(&member))?;
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown split '{other}' (expected all, eval or shadow)"
            )))
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs, fair: bool) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let data = load_csv(&a.data)?;
    let init = init_mlp::<Real>(&cfg.target.layer_sizes, derive_seed(a.seed, "target.init"))?;
    let train_cfg = cfg.target.train.to_train_config(derive_seed(a.seed, "target.train"));
    let model = if fair {
        let iv = cfg.intervention.to_config(train_cfg);
        train_fair(&init, &data, &iv)?
    } else {
        train(&init, &data, &train_cfg)?
    };
    save_artifact(&a.out, &model.to_file())?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn parse_kind(name: &str) -> Result<(AttackKind, AttackVariant)> {
    let (variant, base) = match name.strip_prefix("fd_") {
        Some(rest) => (AttackVariant::Fd, rest),
        None => (AttackVariant::Naive, name),
    };
    let kind = match base {
        "mia_score" => AttackKind::MiaScore,
        "mia_lira" => AttackKind::MiaLira,
        "aia_black" => AttackKind::AiaBlack,
        "aia_white" => AttackKind::AiaWhite,
        other => {
            return Err(Error::Config(format!(
                "unknown attack kind '{other}' (expected mia_score, mia_lira, aia_black or aia_white, optionally fd_-prefixed)"
            )))
        }
    };
    Ok((kind, variant))
}

/// Splits an evaluation CSV into member and non-member rows by its
/// 'member' column.
fn load_eval(path: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    require_file(path)?;
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read CSV header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    let member_col = headers
        .iter()
        .position(|h| h == "member")
        .ok_or_else(|| Error::Schema("evaluation CSV needs a 'member' column".into()))?;
    let mut member_flags = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: row + 1,
            column: "member".into(),
            message: e.to_string(),
        })?;
        let raw = record.get(member_col).unwrap_or("");
        let flag: u8 = raw.parse().map_err(|_| Error::Parse {
            row: row + 1,
            column: "member".into(),
            message: format!("'{raw}' is not 0 or 1"),
        })?;
        if flag > 1 {
            return Err(Error::Parse {
                row: row + 1,
                column: "member".into(),
                message: format!("'{raw}' is not 0 or 1"),
            });
        }
        member_flags.push(flag);
    }
    let features: Vec<String> = headers
        .iter()
        .filter(|h| !matches!(h.as_str(), "label" | "group" | "member"))
        .cloned()
        .collect();
    let schema = CsvSchema {
        features: Some(features),
        ..CsvSchema::default()
    };
    let all = ingest_csv(path, &schema)?;
    let member_rows: Vec<usize> = (0..all.n()).filter(|&i| member_flags[i] == 1).collect();
    let nonmember_rows: Vec<usize> = (0..all.n()).filter(|&i| member_flags[i] == 0).collect();
    if member_rows.is_empty() || nonmember_rows.is_empty() {
        return Err(Error::Validation(
            "evaluation CSV needs both member and non-member rows".into(),
        ));
    }
    Ok((all.subset(&member_rows), all.subset(&nonmember_rows)))
}

fn cmd_attack(a: AttackArgs) -> Result<()> {
    let (kind, variant) = parse_kind(&a.kind)?;
    if variant == AttackVariant::Fd && a.fair.is_none() {
        return Err(Error::Config(format!(
            "attack kind '{}' consumes the biased/fair pair; pass the fair model with --fair",
            a.kind
        )));
    }
    let target = load_model(&a.target)?;
    let fair = a.fair.as_deref().map(load_model).transpose()?;
    let (members, nonmembers) = load_eval(&a.eval)?;
    let pool = load_csv(&a.shadow_pool)?;
    let intervention = match &a.config {
        Some(path) => {
            let cfg = load_config(path)?;
            Some(cfg.intervention.to_config(TrainConfig {
                epochs: a.shadow_epochs,
                batch_size: a.shadow_batch_size,
                learning_rate: a.shadow_learning_rate,
                weight_decay: 0.0,
                seed: 0,
                sample_weights: None,
            }))
        }
        None => None,
    };
    if variant == AttackVariant::Fd
        && matches!(kind, AttackKind::MiaScore | AttackKind::MiaLira)
        && intervention.is_none()
    {
        return Err(Error::Config(
            "fd MIA kinds train paired shadows; pass --config to supply the intervention".into(),
        ));
    }
    let cfg = RunAttackConfig {
        kind,
        variant,
        shadow_pool: &pool,
        shadows: None,
        k_shadows: a.k_shadows,
        layer_sizes: target.layer_sizes.clone(),
        shadow_train: TrainConfig {
            epochs: a.shadow_epochs,
            batch_size: a.shadow_batch_size,
            learning_rate: a.shadow_learning_rate,
            weight_decay: 0.0,
            seed: 0,
            sample_weights: None,
        },
        intervention,
        restriction: RestrictionPolicy::None,
        side: ModelSide::Biased,
        seed: a.seed,
    };
    let outcome = fairaudit_core::attacks::run_attack(
        &target,
        fair.as_ref(),
        &members,
        &nonmembers,
        &cfg,
    )?;
    let acc = balanced_accuracy_at_threshold(&outcome.scores, &outcome.truth, 0.5)?;
    let a_auc = auc(&outcome.scores, &outcome.truth)?;
    println!("attack {} acc_a {acc:.6} auc_a {a_auc:.6}", a.kind);
    let negatives = outcome.truth.iter().filter(|&&t| t == 0).count();
    if negatives >= 1000 {
        let t = tpr_at_fpr(&outcome.scores, &outcome.truth, 0.01)?;
        println!("tpr_at_1pct_fpr {t:.6}");
    }
    Ok(())
}

fn cmd_defend(a: DefendArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let dp = cfg
        .defense
        .as_ref()
        .and_then(|d| d.dp.as_ref())
        .ok_or_else(|| Error::Config("defend needs a [defense.dp] section".into()))?;
    let data = load_csv(&a.data)?;
    let init = init_mlp::<Real>(&cfg.target.layer_sizes, derive_seed(a.seed, "target.init"))?;
    let train_cfg = dp.train.to_train_config(derive_seed(a.seed, "defense.target.train"));
    let dp_cfg = DpConfig::for_training(dp.clip_norm, dp.noise_multiplier, dp.delta, data.n(), &train_cfg)?;
    let (model, epsilon) = dp_sgd_train(&init, &data, &train_cfg, &dp_cfg)?;
    save_artifact(&a.out, &model.to_file())?;
    println!("wrote {}", a.out.display());
    println!("epsilon {epsilon:.6} delta {:e}", dp.delta);
    Ok(())
}

fn parse_formats(text: &str) -> Result<Vec<ReportFormat>> {
    let mut formats = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "json" => formats.push(ReportFormat::Json),
            "csv" => formats.push(ReportFormat::Csv),
            other => {
                return Err(Error::Config(format!(
                    "unknown report format '{other}' (expected json and/or csv)"
                )))
            }
        }
    }
    if formats.is_empty() {
        return Err(Error::Config("no report formats requested".into()));
    }
    formats.dedup();
    Ok(formats)
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let source = a.in_dir.join("report.json");
    require_file(&source)?;
    let report: AuditReport = load_artifact(&source)?;
    let formats = parse_formats(&a.format)?;
    let out = a.out.unwrap_or(a.in_dir);
    emit_report(&report, &formats, &out)?;
    println!("emitted report to {}", out.display());
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let out = a
        .out
        .or_else(|| std::env::var_os("FAIRAUDIT_OUT").map(PathBuf::from));
    let opts = RunOptions {
        quick: a.quick,
        seed_override: a.seed,
        jobs: a.jobs,
        formats: parse_formats(&a.format)?,
        save_models: true,
        output_dir: out,
    };
    if a.quick {
        println!("quick mode: reduced shadow count and seed list; results are not acceptance grade");
    }
    let report = run_experiment(&cfg, &opts)?;
    for seed in &report.per_seed {
        match &seed.status {
            SeedStatus::Completed => println!("seed {}: completed, {} attacks", seed.seed, seed.attacks.len()),
            SeedStatus::Failed { stage, message } => {
                println!("seed {}: FAILED at stage {stage}: {message}", seed.seed)
            }
        }
    }
    println!(
        "medians over {} completed seed(s):",
        report.medians.completed_seeds
    );
    if let (Some(b), Some(f)) = (&report.medians.target_biased, &report.medians.target_fair) {
        println!(
            "  target acc biased {:.4} fair {:.4}; deo biased {:.4} fair {:.4}",
            b.acc_t, f.acc_t, b.deo, f.deo
        );
    }
    for att in &report.medians.attacks {
        println!(
            "  {} {} vs {}: acc_a {:.4} auc_a {:.4}",
            fairaudit_core::report::serde_plain_kind(att.kind),
            fairaudit_core::report::serde_plain_variant(att.variant),
            att.target.as_str(),
            att.acc_a,
            att.auc_a
        );
    }
    if let Some(def) = &report.medians.defense {
        if let Some(eps) = def.epsilon {
            println!("  defense epsilon {eps:.4}");
        }
        for att in &def.attacks {
            println!(
                "  defense {} {} vs {}: acc_a {:.4} auc_a {:.4}",
                fairaudit_core::report::serde_plain_kind(att.kind),
                fairaudit_core::report::serde_plain_variant(att.variant),
                att.target.as_str(),
                att.acc_a,
                att.auc_a
            );
        }
    }
    Ok(())
}
