//! End-to-end experiment pipeline: data, targets, attack matrix,
//! optional defense phase, artifact persistence and report assembly.
//!
//! Every stochastic stage derives its seed from the experiment seed and
//! a stage label, so adding a stage never shifts another stage's
//! randomness. A failing stage aborts only its seed; the report records
//! the stage and message and medians aggregate over completed seeds.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::artifacts::save_artifact;
use crate::attacks::{
    run_attack, train_shadows, train_shadows_with, AttackKind, AttackVariant, ModelSide,
    RunAttackConfig, ShadowSet, ShadowTrainers,
};
use crate::config::{DataSource, DpSection, ExperimentConfig};
use crate::dataset::{apply_skew, generate_synthetic, ingest_csv, make_splits, Splits};
use crate::defenses::{dp_sgd_train, DpConfig, RestrictionPolicy};
use crate::fairness::{capped_reweight_weights, evaluate_fairness, train_fair, FairnessReport};
use crate::metrics::{auc, balanced_accuracy_at_threshold, tpr_at_fpr};
use crate::nn::{forward, init_mlp, train, TrainConfig};
use crate::report::{
    aggregate_medians, emit_report, AttackMetrics, AttackTarget, AuditReport, DefenseReport,
    PredictionLog, PredictionLogEntry, Provenance, ReportFormat, SeedReport, SeedStatus,
    REPORT_FORMAT_VERSION,
};
use crate::rng::derive_seed;
use crate::{Error, LabeledDataset, MlpModel, Real, Result};

/// How per-stage seeds derive from each experiment seed; recorded in
/// report provenance.
pub const STAGE_SEED_SCHEME: &str =
    "first 8 little-endian bytes of sha256('fairaudit.seed.v1' || seed_le || stage label)";

/// Seeds kept when `--quick` trims the configured list.
const QUICK_SEED_COUNT: usize = 2;

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Fewer shadows and seeds; not acceptance grade.
    pub quick: bool,
    /// Replaces the configured seed list with a single seed.
    pub seed_override: Option<u64>,
    /// Caps rayon worker threads when set.
    pub jobs: Option<usize>,
    /// Report formats to write; empty skips emission entirely.
    pub formats: Vec<ReportFormat>,
    /// Persist models and prediction logs under the output directory.
    pub save_models: bool,
    /// Overrides the configured output directory.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            quick: false,
            seed_override: None,
            jobs: None,
            formats: vec![ReportFormat::Json, ReportFormat::Csv],
            save_models: true,
            output_dir: None,
        }
    }
}

struct StageError {
    stage: &'static str,
    error: Error,
}

/// Tags a stage result so per-seed failures carry their stage name.
fn st<T>(stage: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|error| StageError { stage, error })
}

fn effective_seeds(cfg: &ExperimentConfig, opts: &RunOptions) -> Vec<u64> {
    if let Some(s) = opts.seed_override {
        return vec![s];
    }
    if opts.quick {
        cfg.seeds.iter().take(QUICK_SEED_COUNT).copied().collect()
    } else {
        cfg.seeds.clone()
    }
}

fn timestamp_now() -> String {
    match SystemTime::now().duration_since(UNIX_EPOCH) {
        Ok(d) => format!("unix:{}.{:09}", d.as_secs(), d.subsec_nanos()),
        Err(_) => "unix:0.000000000".into(),
    }
}

/// Prepares one seed's skewed dataset.
fn build_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<LabeledDataset> {
    let data_seed = derive_seed(seed, "data");
    match cfg.dataset.source {
        DataSource::Synthetic => {
            let params = cfg
                .dataset
                .synthetic
                .as_ref()
                .ok_or_else(|| Error::Config("missing [dataset.synthetic]".into()))?;
            let spec = params.to_spec(cfg.dataset.skew_ratio, data_seed)?;
            generate_synthetic(&spec)
        }
        DataSource::Csv => {
            let path = cfg
                .dataset
                .csv_path
                .as_ref()
                .ok_or_else(|| Error::Config("missing dataset.csv_path".into()))?;
            let raw = ingest_csv(path, &cfg.dataset.csv_schema())?;
            apply_skew(
                &raw,
                cfg.dataset.skew_ratio,
                cfg.dataset.majority_group,
                data_seed,
            )
        }
    }
}

fn fairness_of(model: &MlpModel, eval: &LabeledDataset) -> Result<FairnessReport> {
    let record = forward(model, &eval.features)?;
    evaluate_fairness(&record.predicted_labels(), &eval.labels, &eval.groups)
}

/// AUC of the target's raw top-class probability against membership,
/// the unlearned baseline a trained score attack must track.
fn raw_top_prob_auc(
    model: &MlpModel,
    members: &LabeledDataset,
    nonmembers: &LabeledDataset,
    restriction: &RestrictionPolicy,
) -> Result<f64> {
    let mut scores = Vec::with_capacity(members.n() + nonmembers.n());
    for data in [members, nonmembers] {
        let rec = crate::defenses::restrict_predictions(&forward(model, &data.features)?, restriction)?;
        for i in 0..rec.probs.nrows() {
            scores.push(rec.probs[[i, 0]].max(rec.probs[[i, 1]]));
        }
    }
    let mut truth = vec![1u8; members.n()];
    truth.extend(std::iter::repeat(0u8).take(nonmembers.n()));
    auc(&scores, &truth)
}

/// Non-member counts below these resolve TPR at 1% / 0.1% FPR too
/// coarsely to report.
const TPR_1PCT_MIN_NEG: usize = 1000;
const TPR_01PCT_MIN_NEG: usize = 10_000;

struct AttackContext<'a> {
    shadow_pool: &'a LabeledDataset,
    shadows: &'a ShadowSet,
    layer_sizes: &'a [usize],
    shadow_train: TrainConfig,
    restriction: RestrictionPolicy,
    members: &'a LabeledDataset,
    nonmembers: &'a LabeledDataset,
    seed: u64,
    seed_label: &'a str,
}

#[allow(clippy::too_many_arguments)]
fn one_attack(
    ctx: &AttackContext,
    kind: AttackKind,
    variant: AttackVariant,
    target: AttackTarget,
    target_b: &MlpModel,
    target_f: Option<&MlpModel>,
    side: ModelSide,
    raw_auc_model: Option<&MlpModel>,
) -> Result<AttackMetrics> {
    let label = format!(
        "{}.attack.{}.{}.{}",
        ctx.seed_label,
        crate::report::serde_plain_kind(kind),
        crate::report::serde_plain_variant(variant),
        target.as_str()
    );
    let cfg = RunAttackConfig {
        kind,
        variant,
        shadow_pool: ctx.shadow_pool,
        shadows: Some(ctx.shadows),
        k_shadows: ctx.shadows.entries.len(),
        layer_sizes: ctx.layer_sizes.to_vec(),
        shadow_train: ctx.shadow_train.clone(),
        intervention: None,
        restriction: ctx.restriction,
        side,
        seed: derive_seed(ctx.seed, &label),
    };
    let outcome = run_attack(target_b, target_f, ctx.members, ctx.nonmembers, &cfg)?;
    // Balanced accuracy: AIA truth follows the 9:1 group skew, where
    // plain accuracy would reward constant predictions.
    let acc_a = balanced_accuracy_at_threshold(&outcome.scores, &outcome.truth, 0.5)?;
    let auc_a = auc(&outcome.scores, &outcome.truth)?;
    let negatives = outcome.truth.iter().filter(|&&t| t == 0).count();
    let tpr_at_1pct = if negatives >= TPR_1PCT_MIN_NEG {
        Some(tpr_at_fpr(&outcome.scores, &outcome.truth, 0.01)?)
    } else {
        None
    };
    let tpr_at_01pct = if negatives >= TPR_01PCT_MIN_NEG {
        Some(tpr_at_fpr(&outcome.scores, &outcome.truth, 0.001)?)
    } else {
        None
    };
    let raw_score_auc = raw_auc_model
        .map(|m| raw_top_prob_auc(m, ctx.members, ctx.nonmembers, &ctx.restriction))
        .transpose()?;
    Ok(AttackMetrics {
        kind,
        variant,
        target,
        acc_a,
        auc_a,
        tpr_at_1pct,
        tpr_at_01pct,
        raw_score_auc,
    })
}

/// Full attack matrix against one deployment: every configured kind
/// against the biased target, the fair target, and (when FD attacks
/// are configured) the pair. Under fair isolation only the fair model
/// is exposed, so only naive attacks against it run. Kinds that need
/// embeddings are skipped outright when the prediction interface
/// withholds them; there is no surface for them to attack.
fn attack_matrix(
    ctx: &AttackContext,
    kinds: &[AttackKind],
    fd: bool,
    biased: &MlpModel,
    fair: &MlpModel,
) -> Result<Vec<AttackMetrics>> {
    let isolated = ctx.restriction == RestrictionPolicy::FairIsolation;
    let mut out = Vec::new();
    for &kind in kinds {
        if kind == AttackKind::AiaWhite && !ctx.restriction.exposes_embeddings() {
            continue;
        }
        let raw_baseline = kind == AttackKind::MiaScore;
        if !isolated {
            out.push(one_attack(
                ctx,
                kind,
                AttackVariant::Naive,
                AttackTarget::Biased,
                biased,
                None,
                ModelSide::Biased,
                if raw_baseline { Some(biased) } else { None },
            )?);
        }
        out.push(one_attack(
            ctx,
            kind,
            AttackVariant::Naive,
            AttackTarget::Fair,
            fair,
            None,
            ModelSide::Fair,
            if raw_baseline { Some(fair) } else { None },
        )?);
        if fd && !isolated {
            out.push(one_attack(
                ctx,
                kind,
                AttackVariant::Fd,
                AttackTarget::Pair,
                biased,
                Some(fair),
                ModelSide::Biased,
                None,
            )?);
        }
    }
    Ok(out)
}

fn save_model(dir: &Path, name: &str, model: &MlpModel) -> Result<()> {
    save_artifact(&dir.join(name), &model.to_file())
}

fn prediction_log(
    seed: u64,
    biased: &MlpModel,
    fair: &MlpModel,
    eval: &LabeledDataset,
) -> Result<PredictionLog> {
    let mut entries = Vec::with_capacity(2 * eval.n());
    for (tag, model) in [("biased", biased), ("fair", fair)] {
        let rec = forward(model, &eval.features)?;
        for i in 0..eval.n() {
            entries.push(PredictionLogEntry {
                example_id: i,
                model_tag: tag.into(),
                probs: [rec.probs[[i, 0]], rec.probs[[i, 1]]],
                embedding: None,
            });
        }
    }
    Ok(PredictionLog { seed, entries })
}

/// Weight clip for group reweighting under DP-SGD. The noise scale is
/// proportional to the largest sample weight, so the full minority
/// weight (about 5 at a 9:1 skew) would quintuple the noise and sink
/// the defended model's accuracy; 1.5 keeps a mild rebalancing at one
/// and a half times the base sensitivity.
const DP_REWEIGHT_CAP: f64 = 1.5;

/// DP-SGD shadow trainer for one side; the fair side adds group
/// reweighting under the same clipped, noised updates.
fn dp_train_side(
    init: &MlpModel,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    dp_section: &DpSection,
    reweight: bool,
) -> Result<MlpModel> {
    let cfg = if reweight {
        TrainConfig {
            sample_weights: Some(capped_reweight_weights(&data.groups, DP_REWEIGHT_CAP)?),
            ..cfg.clone()
        }
    } else {
        cfg.clone()
    };
    let dp = DpConfig::for_training(
        dp_section.clip_norm,
        dp_section.noise_multiplier,
        dp_section.delta,
        data.n(),
        &cfg,
    )?;
    Ok(dp_sgd_train(init, data, &cfg, &dp)?.0)
}

struct SeedArtifacts {
    models: Vec<(String, MlpModel)>,
    log: Option<PredictionLog>,
}

/// Trains just the biased/fair target pair for one seed, exactly as the
/// full run would, without the attack matrix or the defense phase.
/// Useful for timing the fairness stage in isolation.
pub fn build_seed_models(cfg: &ExperimentConfig, seed: u64) -> Result<(MlpModel, MlpModel)> {
    cfg.validate()?;
    let data = build_dataset(cfg, seed)?;
    let splits: Splits<Real> = make_splits(&data, &cfg.split.to_spec(derive_seed(seed, "split")))?;
    let init = init_mlp::<Real>(&cfg.target.layer_sizes, derive_seed(seed, "target.init"))?;
    let train_cfg = cfg.target.train.to_train_config(derive_seed(seed, "target.train"));
    let biased = train(&init, &splits.members, &train_cfg)?;
    let intervention = cfg.intervention.to_config(train_cfg);
    let fair = train_fair(&init, &splits.members, &intervention)?;
    Ok((biased, fair))
}

fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    quick: bool,
) -> std::result::Result<(SeedReport, SeedArtifacts), StageError> {
    let data = st("data", build_dataset(cfg, seed))?;
    let splits: Splits<Real> = st(
        "split",
        make_splits(&data, &cfg.split.to_spec(derive_seed(seed, "split"))),
    )?;
    // Runtime leakage check: evaluation rows must never reach shadows.
    st("split", assert_no_leakage(&splits))?;

    let layer_sizes = &cfg.target.layer_sizes;
    let init = st(
        "target.init",
        init_mlp::<Real>(layer_sizes, derive_seed(seed, "target.init")),
    )?;
    let train_cfg = cfg.target.train.to_train_config(derive_seed(seed, "target.train"));
    let biased = st("target.train", train(&init, &splits.members, &train_cfg))?;
    let intervention = cfg.intervention.to_config(train_cfg.clone());
    let fair = st("fair.train", train_fair(&init, &splits.members, &intervention))?;

    let target_biased = st("target.eval", fairness_of(&biased, &splits.nonmembers))?;
    let target_fair = st("target.eval", fairness_of(&fair, &splits.nonmembers))?;

    let k = if quick {
        cfg.attacks.k_shadows_quick
    } else {
        cfg.attacks.k_shadows
    };
    let shadow_train = cfg.attacks.shadow_train.to_train_config(0);
    let shadows = st(
        "shadows",
        train_shadows(
            &splits.shadow,
            layer_sizes,
            k,
            true,
            Some(&intervention),
            &shadow_train,
            derive_seed(seed, "shadows"),
        ),
    )?;

    let ctx = AttackContext {
        shadow_pool: &splits.shadow,
        shadows: &shadows,
        layer_sizes,
        shadow_train: shadow_train.clone(),
        restriction: RestrictionPolicy::None,
        members: &splits.members,
        nonmembers: &splits.nonmembers,
        seed,
        seed_label: "main",
    };
    let attacks = st(
        "attacks",
        attack_matrix(&ctx, &cfg.attacks.kinds, cfg.attacks.fd, &biased, &fair),
    )?;

    let mut artifacts = SeedArtifacts {
        models: vec![
            (format!("seed{seed}.biased.json"), biased.clone()),
            (format!("seed{seed}.fair.json"), fair.clone()),
        ],
        log: None,
    };
    artifacts.log = Some(st(
        "logs",
        prediction_log(seed, &biased, &fair, &splits.nonmembers),
    )?);

    let defense = match cfg.defense.as_ref().filter(|d| d.enabled) {
        None => None,
        Some(def) => {
            let restriction = st("defense", cfg.restriction_policy())?;
            let (def_biased, def_fair, epsilon, def_shadows) = match &def.dp {
                Some(dp) => {
                    let dp_train = dp
                        .train
                        .to_train_config(derive_seed(seed, "defense.target.train"));
                    let dp_fair_train = TrainConfig {
                        seed: derive_seed(seed, "defense.fair.train"),
                        sample_weights: Some(st(
                            "defense.train",
                            capped_reweight_weights(&splits.members.groups, DP_REWEIGHT_CAP),
                        )?),
                        ..dp_train.clone()
                    };
                    let dp_cfg = st(
                        "defense.train",
                        DpConfig::for_training(
                            dp.clip_norm,
                            dp.noise_multiplier,
                            dp.delta,
                            splits.members.n(),
                            &dp_train,
                        ),
                    )?;
                    let (b, eps) = st(
                        "defense.train",
                        dp_sgd_train(&init, &splits.members, &dp_train, &dp_cfg),
                    )?;
                    let (f, _) = st(
                        "defense.train",
                        dp_sgd_train(&init, &splits.members, &dp_fair_train, &dp_cfg),
                    )?;
                    // Shadows match the deployment: both sides DP-trained.
                    let dp_shadow_train = dp.train.to_train_config(0);
                    let k_dp = if quick {
                        dp.k_shadows.min(cfg.attacks.k_shadows_quick)
                    } else {
                        dp.k_shadows
                    };
                    let shadows = st(
                        "defense.shadows",
                        train_shadows_with(
                            &splits.shadow,
                            layer_sizes,
                            k_dp,
                            true,
                            None,
                            &dp_shadow_train,
                            derive_seed(seed, "defense.shadows"),
                            &ShadowTrainers {
                                biased: &|i, d, c| dp_train_side(i, d, c, dp, false),
                                fair: Some(&|i, d, c| dp_train_side(i, d, c, dp, true)),
                            },
                        ),
                    )?;
                    (b, f, Some(eps), Some(shadows))
                }
                None => (biased.clone(), fair.clone(), None, None),
            };
            let def_ctx = AttackContext {
                shadows: def_shadows.as_ref().unwrap_or(&shadows),
                shadow_train: def
                    .dp
                    .as_ref()
                    .map(|dp| dp.train.to_train_config(0))
                    .unwrap_or(shadow_train),
                restriction,
                seed_label: "defense",
                ..ctx
            };
            let def_attacks = st(
                "defense.attacks",
                attack_matrix(
                    &def_ctx,
                    &cfg.attacks.kinds,
                    cfg.attacks.fd && restriction != RestrictionPolicy::FairIsolation,
                    &def_biased,
                    &def_fair,
                ),
            )?;
            let report = DefenseReport {
                epsilon,
                restriction,
                target_biased: Some(st("defense.eval", fairness_of(&def_biased, &splits.nonmembers))?),
                target_fair: Some(st("defense.eval", fairness_of(&def_fair, &splits.nonmembers))?),
                attacks: def_attacks,
            };
            if def.dp.is_some() {
                artifacts
                    .models
                    .push((format!("seed{seed}.defended.biased.json"), def_biased));
                artifacts
                    .models
                    .push((format!("seed{seed}.defended.fair.json"), def_fair));
            }
            Some(report)
        }
    };

    Ok((
        SeedReport {
            seed,
            status: SeedStatus::Completed,
            target_biased: Some(target_biased),
            target_fair: Some(target_fair),
            attacks,
            defense,
        },
        artifacts,
    ))
}

fn assert_no_leakage(splits: &Splits<Real>) -> Result<()> {
    let shadow: std::collections::BTreeSet<usize> = splits.shadow_indices.iter().copied().collect();
    for (name, idx) in [
        ("member", &splits.member_indices),
        ("nonmember", &splits.nonmember_indices),
    ] {
        if idx.iter().any(|i| shadow.contains(i)) {
            return Err(Error::Validation(format!(
                "data leakage: {name} evaluation rows intersect the shadow pool"
            )));
        }
    }
    Ok(())
}

/// Runs every configured seed, aggregates medians over completed seeds,
/// persists artifacts and emits the report.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<AuditReport> {
    cfg.validate()?;
    let seeds = effective_seeds(cfg, opts);
    let out_dir = opts.output_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());

    let run = || -> Result<AuditReport> {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            match run_seed(cfg, seed, opts.quick) {
                Ok((report, artifacts)) => {
                    if opts.save_models {
                        let models_dir = out_dir.join("models");
                        for (name, model) in &artifacts.models {
                            save_model(&models_dir, name, model)?;
                        }
                        if let Some(log) = &artifacts.log {
                            save_artifact(
                                &out_dir.join("logs").join(format!("seed{seed}.predictions.json")),
                                log,
                            )?;
                        }
                    }
                    per_seed.push(report);
                }
                Err(StageError { stage, error }) => per_seed.push(SeedReport {
                    seed,
                    status: SeedStatus::Failed {
                        stage: stage.into(),
                        message: error.to_string(),
                    },
                    target_biased: None,
                    target_fair: None,
                    attacks: Vec::new(),
                    defense: None,
                }),
            }
        }
        let medians = aggregate_medians(&per_seed);
        Ok(AuditReport {
            format_version: REPORT_FORMAT_VERSION,
            provenance: Provenance {
                config_hash: cfg.hash(),
                timestamp: timestamp_now(),
                seeds: seeds.clone(),
                quick: opts.quick,
                stage_seed_scheme: STAGE_SEED_SCHEME.into(),
            },
            per_seed,
            medians,
        })
    };

    let report = match opts.jobs {
        Some(jobs) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            pool.install(run)?
        }
        None => run()?,
    };
    if !opts.formats.is_empty() {
        emit_report(&report, &opts.formats, &out_dir)?;
    }
    Ok(report)
}
