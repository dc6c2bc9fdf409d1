//! Membership and attribute inference attacks against a single target
//! model or a paired (biased, fair) deployment.
//!
//! Score attacks train a small classifier on shadow-model outputs;
//! LiRA fits per-example Gaussians to logit-scaled shadow scores and
//! scores a likelihood ratio; attribute attacks recover the sensitive
//! attribute from predictions (black-box) or embeddings (white-box).
//! The `Fd` variants consume paired outputs from both models of a
//! deployment, which is the extra signal a fairness intervention leaks.

use ndarray::Array2;
use rayon::prelude::*;

use crate::defenses::{restrict_predictions, RestrictionPolicy};
use crate::fairness::{train_fair, InterventionConfig};
use crate::nn::{forward, init_mlp, train, TrainConfig};
use crate::rng::{derive_seed, rng_from_seed, sample_without_replacement};
use crate::{ForwardRecord, LabeledDataset, MlpModel, Real};
use crate::{Error, Result};

/// Attack families over the evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    MiaScore,
    MiaLira,
    AiaBlack,
    AiaWhite,
}

/// Whether the attack sees one model or the biased/fair pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackVariant {
    Naive,
    Fd,
}

/// Which model of a deployment single-model attacks mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSide {
    Biased,
    Fair,
}

/// Feature layout presented to an attack classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Probability pair of one model, sorted descending (width 2).
    ScoreSingle,
    /// Biased pair then fair pair, each sorted descending (width 4).
    ScorePair,
    /// Embedding of one model.
    EmbedSingle,
    /// Biased embedding then fair embedding.
    EmbedPair,
}

impl FeatureMode {
    pub fn is_pair(self) -> bool {
        matches!(self, FeatureMode::ScorePair | FeatureMode::EmbedPair)
    }

    pub fn uses_embeddings(self) -> bool {
        matches!(self, FeatureMode::EmbedSingle | FeatureMode::EmbedPair)
    }
}

/// Feature layout plus the prediction-interface policy in force.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackFeatureMode {
    pub mode: FeatureMode,
    pub restriction: RestrictionPolicy,
}

impl AttackFeatureMode {
    pub fn unrestricted(mode: FeatureMode) -> Self {
        AttackFeatureMode {
            mode,
            restriction: RestrictionPolicy::None,
        }
    }
}

/// One shadow model (optionally paired with its fair counterpart)
/// together with the pool rows it trained on.
#[derive(Debug, Clone)]
pub struct ShadowEntry {
    /// Row indices into the shadow pool.
    pub subset: Vec<usize>,
    pub biased: MlpModel,
    pub fair: Option<MlpModel>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ShadowSet {
    pub entries: Vec<ShadowEntry>,
    /// Number of pool rows the subsets index into.
    pub pool_size: usize,
}

/// Logit scaling of the probability assigned to the true label:
/// ln(p / (1 - p)) with p clamped to [1e-7, 1 - 1e-7].
pub fn logit_scale(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    Ok((p / (1.0 - p)).ln())
}

/// Hook for customizing how each shadow model trains (the defense
/// phase swaps in DP-SGD so shadows match the deployment).
pub type ShadowTrainer<'a> =
    dyn Fn(&MlpModel, &LabeledDataset, &TrainConfig) -> Result<MlpModel> + Sync + 'a;

/// Trainers for the two sides of a paired shadow. When `fair` is
/// absent, paired mode trains the counterpart with the supplied
/// intervention.
pub struct ShadowTrainers<'a> {
    pub biased: &'a ShadowTrainer<'a>,
    pub fair: Option<&'a ShadowTrainer<'a>>,
}

/// Trains `k` shadow models on independent seeded 50% subsets of the
/// pool. In paired mode each entry also trains the fair counterpart on
/// the identical subset from the identical initialization, differing
/// only by the intervention.
pub fn train_shadows(
    pool: &LabeledDataset,
    layer_sizes: &[usize],
    k: usize,
    paired: bool,
    intervention: Option<&InterventionConfig>,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<ShadowSet> {
    train_shadows_with(
        pool,
        layer_sizes,
        k,
        paired,
        intervention,
        train_cfg,
        seed,
        &ShadowTrainers {
            biased: &|init, data, cfg| train(init, data, cfg),
            fair: None,
        },
    )
}

#[allow(clippy::too_many_arguments)]
pub fn train_shadows_with(
    pool: &LabeledDataset,
    layer_sizes: &[usize],
    k: usize,
    paired: bool,
    intervention: Option<&InterventionConfig>,
    train_cfg: &TrainConfig,
    seed: u64,
    trainers: &ShadowTrainers,
) -> Result<ShadowSet> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 shadow models, got {k}")));
    }
    if pool.n() < 2 * train_cfg.batch_size {
        return Err(Error::Config(format!(
            "shadow pool of {} rows is smaller than 2 batches of {}",
            pool.n(),
            train_cfg.batch_size
        )));
    }
    if paired && intervention.is_none() && trainers.fair.is_none() {
        return Err(Error::Config("paired shadows require an intervention".into()));
    }
    let entries: Result<Vec<ShadowEntry>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let shadow_seed = derive_seed(seed, &format!("shadow.{i}"));
            let mut rng = rng_from_seed(shadow_seed);
            let mut subset = sample_without_replacement(pool.n(), pool.n() / 2, &mut rng);
            subset.sort_unstable();
            let data = pool.subset(&subset);
            let init = init_mlp::<Real>(layer_sizes, derive_seed(shadow_seed, "init"))?;
            let cfg = TrainConfig {
                seed: derive_seed(shadow_seed, "train"),
                ..train_cfg.clone()
            };
            let biased = (trainers.biased)(&init, &data, &cfg)?;
            let fair = if paired {
                Some(match trainers.fair {
                    Some(fair_trainer) => fair_trainer(&init, &data, &cfg)?,
                    None => {
                        let iv = InterventionConfig {
                            train: cfg,
                            ..intervention.unwrap().clone()
                        };
                        train_fair(&init, &data, &iv)?
                    }
                })
            } else {
                None
            };
            Ok(ShadowEntry {
                subset,
                biased,
                fair,
                seed: shadow_seed,
            })
        })
        .collect();
    Ok(ShadowSet {
        entries: entries?,
        pool_size: pool.n(),
    })
}

fn sorted_pair(p0: f64, p1: f64) -> (f64, f64) {
    if p0 >= p1 {
        (p0, p1)
    } else {
        (p1, p0)
    }
}

/// Builds the feature matrix an attack classifier consumes, applying
/// the active restriction policy to predictions first.
pub fn build_attack_features(
    records_b: &ForwardRecord,
    records_f: Option<&ForwardRecord>,
    mode: &AttackFeatureMode,
) -> Result<Array2<Real>> {
    if mode.mode.is_pair() {
        if mode.restriction == RestrictionPolicy::FairIsolation {
            return Err(Error::RestrictionViolation(
                "paired biased/fair features are unavailable under fair isolation".into(),
            ));
        }
        if records_f.is_none() {
            return Err(Error::Config("pair feature modes require fair-model records".into()));
        }
    }
    if mode.mode.uses_embeddings() && !mode.restriction.exposes_embeddings() {
        return Err(Error::RestrictionViolation(format!(
            "embeddings are withheld under {:?}",
            mode.restriction
        )));
    }
    let rb = restrict_predictions(records_b, &mode.restriction)?;
    let rf = records_f
        .map(|r| restrict_predictions(r, &mode.restriction))
        .transpose()?;
    let n = rb.probs.nrows();
    match mode.mode {
        FeatureMode::ScoreSingle => {
            let mut out = Array2::zeros((n, 2));
            for i in 0..n {
                let (hi, lo) = sorted_pair(rb.probs[[i, 0]], rb.probs[[i, 1]]);
                out[[i, 0]] = hi;
                out[[i, 1]] = lo;
            }
            Ok(out)
        }
        FeatureMode::ScorePair => {
            let rf = rf.unwrap();
            if rf.probs.nrows() != n {
                return Err(Error::Shape("biased/fair record row counts differ".into()));
            }
            let mut out = Array2::zeros((n, 4));
            for i in 0..n {
                let (bh, bl) = sorted_pair(rb.probs[[i, 0]], rb.probs[[i, 1]]);
                let (fh, fl) = sorted_pair(rf.probs[[i, 0]], rf.probs[[i, 1]]);
                out[[i, 0]] = bh;
                out[[i, 1]] = bl;
                out[[i, 2]] = fh;
                out[[i, 3]] = fl;
            }
            Ok(out)
        }
        FeatureMode::EmbedSingle => rb
            .embeddings
            .clone()
            .ok_or_else(|| Error::Config("record carries no embeddings".into())),
        FeatureMode::EmbedPair => {
            let eb = rb
                .embeddings
                .as_ref()
                .ok_or_else(|| Error::Config("record carries no embeddings".into()))?;
            let ef = rf
                .as_ref()
                .and_then(|r| r.embeddings.as_ref())
                .ok_or_else(|| Error::Config("fair record carries no embeddings".into()))?;
            if ef.nrows() != n || eb.nrows() != n {
                return Err(Error::Shape("biased/fair record row counts differ".into()));
            }
            let d = eb.ncols();
            let mut out = Array2::zeros((n, d + ef.ncols()));
            for i in 0..n {
                for j in 0..d {
                    out[[i, j]] = eb[[i, j]];
                }
                for j in 0..ef.ncols() {
                    out[[i, d + j]] = ef[[i, j]];
                }
            }
            Ok(out)
        }
    }
}

/// Trains the [width, 16, 2] attack classifier with balanced class
/// weighting on shadow-derived features.
pub fn train_attack_model(features: &Array2<Real>, targets: &[u8], seed: u64) -> Result<MlpModel> {
    train_attack_model_with(features, targets, seed, 16, 30)
}

/// Attack classifier trainer with an explicit capacity budget. The
/// membership attacks use the small default; attribute attacks get a
/// wider, longer-trained head because their signal lives in fine joint
/// structure of a few probability columns rather than a single
/// confidence axis.
pub fn train_attack_model_with(
    features: &Array2<Real>,
    targets: &[u8],
    seed: u64,
    hidden: usize,
    epochs: usize,
) -> Result<MlpModel> {
    if features.nrows() != targets.len() || targets.is_empty() {
        return Err(Error::Validation("feature/target length mismatch".into()));
    }
    let n1 = targets.iter().filter(|&&t| t == 1).count();
    let n0 = targets.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::Validation("attack training needs both target classes".into()));
    }
    let n = targets.len() as f64;
    let weights: Vec<f64> = targets
        .iter()
        .map(|&t| {
            if t == 0 {
                n / (2.0 * n0 as f64)
            } else {
                n / (2.0 * n1 as f64)
            }
        })
        .collect();
    let data = LabeledDataset::new(features.clone(), targets.to_vec(), targets.to_vec())?;
    let init = init_mlp::<Real>(
        &[features.ncols(), hidden, 2],
        derive_seed(seed, "attack.init"),
    )?;
    let cfg = TrainConfig {
        epochs,
        batch_size: 64.min(targets.len()),
        learning_rate: 0.1,
        weight_decay: 1e-4,
        seed: derive_seed(seed, "attack.train"),
        sample_weights: Some(weights),
    };
    train(&init, &data, &cfg)
}

/// Class-1 (member / s=1) probability per feature row.
pub fn attack_score(attack_model: &MlpModel, features: &Array2<Real>) -> Result<Vec<f64>> {
    let rec = forward(attack_model, features)?;
    Ok(rec.probs.column(1).to_vec())
}

/// Per-example logit-scaled shadow observations, split by whether the
/// shadow trained on the example.
#[derive(Debug, Clone, Default)]
pub struct TaggedObservations {
    pub ins: Vec<Vec<f64>>,
    pub outs: Vec<Vec<f64>>,
}

/// Per-example Gaussian fits of IN and OUT score distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub dim: usize,
    pub mu_in: Vec<f64>,
    pub mu_out: Vec<f64>,
    /// Length 1 (variance) or 4 (row-major 2x2 covariance).
    pub cov_in: Vec<f64>,
    pub cov_out: Vec<f64>,
    pub counts_in: usize,
    pub counts_out: usize,
}

const VARIANCE_FLOOR: f64 = 1e-6;
const COV_RIDGE: f64 = 1e-6;

fn moments(obs: &[&Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = obs.len() as f64;
    let mut mu = vec![0.0; dim];
    for o in obs {
        for j in 0..dim {
            mu[j] += o[j] / n;
        }
    }
    if dim == 1 {
        let mut var = 0.0;
        if obs.len() > 1 {
            for o in obs {
                var += (o[0] - mu[0]).powi(2) / (n - 1.0);
            }
        }
        (mu, vec![var.max(VARIANCE_FLOOR)])
    } else {
        let mut cov = vec![0.0; 4];
        if obs.len() > 1 {
            for o in obs {
                let d0 = o[0] - mu[0];
                let d1 = o[1] - mu[1];
                cov[0] += d0 * d0 / (n - 1.0);
                cov[1] += d0 * d1 / (n - 1.0);
                cov[2] += d1 * d0 / (n - 1.0);
                cov[3] += d1 * d1 / (n - 1.0);
            }
        }
        cov[0] += COV_RIDGE;
        cov[3] += COV_RIDGE;
        (mu, cov)
    }
}

/// Fits per-example IN/OUT Gaussians; examples with fewer than 2
/// observations of a tag fall back to the pooled global statistics of
/// that tag.
pub fn lira_fit(per_example: &[TaggedObservations], dim: usize) -> Result<Vec<GaussianFit>> {
    if dim != 1 && dim != 2 {
        return Err(Error::Validation(format!("lira dim must be 1 or 2, got {dim}")));
    }
    let global_ins: Vec<&Vec<f64>> = per_example.iter().flat_map(|t| &t.ins).collect();
    let global_outs: Vec<&Vec<f64>> = per_example.iter().flat_map(|t| &t.outs).collect();
    if global_outs.is_empty() {
        return Err(Error::Estimation("no OUT shadow observations available".into()));
    }
    if global_ins.is_empty() {
        return Err(Error::Estimation("no IN shadow observations available".into()));
    }
    for (i, t) in per_example.iter().enumerate() {
        for o in t.ins.iter().chain(&t.outs) {
            if o.len() != dim {
                return Err(Error::Shape(format!(
                    "observation for example {i} has width {}, expected {dim}",
                    o.len()
                )));
            }
        }
    }
    let (g_mu_in, g_cov_in) = moments(&global_ins, dim);
    let (g_mu_out, g_cov_out) = moments(&global_outs, dim);
    Ok(per_example
        .iter()
        .map(|t| {
            let (mu_in, cov_in, counts_in) = if t.ins.len() >= 2 {
                let refs: Vec<&Vec<f64>> = t.ins.iter().collect();
                let (m, c) = moments(&refs, dim);
                (m, c, t.ins.len())
            } else {
                (g_mu_in.clone(), g_cov_in.clone(), global_ins.len())
            };
            let (mu_out, cov_out, counts_out) = if t.outs.len() >= 2 {
                let refs: Vec<&Vec<f64>> = t.outs.iter().collect();
                let (m, c) = moments(&refs, dim);
                (m, c, t.outs.len())
            } else {
                (g_mu_out.clone(), g_cov_out.clone(), global_outs.len())
            };
            GaussianFit {
                dim,
                mu_in,
                mu_out,
                cov_in,
                cov_out,
                counts_in,
                counts_out,
            }
        })
        .collect())
}

fn log_density(x: &[f64], mu: &[f64], cov: &[f64], dim: usize) -> Result<f64> {
    const LN_2PI: f64 = 1.8378770664093453;
    if dim == 1 {
        let var = cov[0];
        if var <= 0.0 {
            return Err(Error::Numerical("non-positive variance".into()));
        }
        let d = x[0] - mu[0];
        Ok(-0.5 * (LN_2PI + var.ln()) - d * d / (2.0 * var))
    } else {
        let det = cov[0] * cov[3] - cov[1] * cov[2];
        if det <= 0.0 || cov[0] <= 0.0 {
            return Err(Error::Numerical(
                "covariance not positive definite after ridge".into(),
            ));
        }
        let d0 = x[0] - mu[0];
        let d1 = x[1] - mu[1];
        // inverse of [[a, b], [c, d]] scaled into the quadratic form
        let quad = (cov[3] * d0 * d0 - (cov[1] + cov[2]) * d0 * d1 + cov[0] * d1 * d1) / det;
        Ok(-LN_2PI - 0.5 * det.ln() - 0.5 * quad)
    }
}

/// Likelihood ratio N(phi; in) / N(phi; out) and the derived membership
/// score lambda / (1 + lambda), computed via log-densities.
pub fn lira_score(target_phi: &[f64], fit: &GaussianFit) -> Result<(f64, f64)> {
    if target_phi.len() != fit.dim {
        return Err(Error::Shape(format!(
            "target has dim {}, fit has dim {}",
            target_phi.len(),
            fit.dim
        )));
    }
    let log_in = log_density(target_phi, &fit.mu_in, &fit.cov_in, fit.dim)?;
    let log_out = log_density(target_phi, &fit.mu_out, &fit.cov_out, fit.dim)?;
    let log_lambda = log_in - log_out;
    let lambda = log_lambda.exp();
    // sigmoid of the log ratio, stable on both tails
    let score = if log_lambda >= 0.0 {
        1.0 / (1.0 + (-log_lambda).exp())
    } else {
        let e = log_lambda.exp();
        e / (1.0 + e)
    };
    Ok((lambda, score))
}

/// Everything `run_attack` needs beyond the targets and the evaluation
/// rows.
pub struct RunAttackConfig<'a> {
    pub kind: AttackKind,
    pub variant: AttackVariant,
    /// Auxiliary rows the attacker controls; never overlaps evaluation
    /// rows.
    pub shadow_pool: &'a LabeledDataset,
    /// Reused when supplied; otherwise MIA kinds train their own.
    pub shadows: Option<&'a ShadowSet>,
    pub k_shadows: usize,
    pub layer_sizes: Vec<usize>,
    pub shadow_train: TrainConfig,
    /// Required for FD variants when shadows are not supplied.
    pub intervention: Option<InterventionConfig>,
    pub restriction: RestrictionPolicy,
    /// Which model single-model attacks mirror with their shadows.
    pub side: ModelSide,
    pub seed: u64,
}

/// Scores aligned with ground truth: membership flags for MIA kinds,
/// the sensitive attribute for AIA kinds.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub scores: Vec<f64>,
    pub truth: Vec<u8>,
}

fn feature_mode(kind: AttackKind, variant: AttackVariant) -> FeatureMode {
    match (kind, variant) {
        (AttackKind::AiaWhite, AttackVariant::Naive) => FeatureMode::EmbedSingle,
        (AttackKind::AiaWhite, AttackVariant::Fd) => FeatureMode::EmbedPair,
        (_, AttackVariant::Naive) => FeatureMode::ScoreSingle,
        (_, AttackVariant::Fd) => FeatureMode::ScorePair,
    }
}

fn shadow_model<'a>(entry: &'a ShadowEntry, side: ModelSide) -> Result<&'a MlpModel> {
    match side {
        ModelSide::Biased => Ok(&entry.biased),
        ModelSide::Fair => entry
            .fair
            .as_ref()
            .ok_or_else(|| Error::Config("shadow set carries no fair models".into())),
    }
}

/// Runs one attack kind against a target (or biased/fair pair) and
/// returns per-example scores with ground truth.
pub fn run_attack(
    target_b: &MlpModel,
    target_f: Option<&MlpModel>,
    eval_members: &LabeledDataset,
    eval_nonmembers: &LabeledDataset,
    cfg: &RunAttackConfig,
) -> Result<AttackOutcome> {
    let fd = cfg.variant == AttackVariant::Fd;
    if fd && target_f.is_none() {
        return Err(Error::Config("fd attack variants require the fair model".into()));
    }
    if fd && cfg.restriction == RestrictionPolicy::FairIsolation {
        return Err(Error::RestrictionViolation(
            "fd attacks cannot run under fair isolation".into(),
        ));
    }
    let mode = AttackFeatureMode {
        mode: feature_mode(cfg.kind, cfg.variant),
        restriction: cfg.restriction,
    };
    match cfg.kind {
        AttackKind::MiaScore => run_mia_score(target_b, target_f, eval_members, eval_nonmembers, cfg, &mode),
        AttackKind::MiaLira => run_mia_lira(target_b, target_f, eval_members, eval_nonmembers, cfg),
        AttackKind::AiaBlack | AttackKind::AiaWhite => {
            run_aia(target_b, target_f, eval_members, eval_nonmembers, cfg, &mode)
        }
    }
}

fn obtain_shadows<'a>(
    cfg: &'a RunAttackConfig,
    need_pair: bool,
    owned: &'a mut Option<ShadowSet>,
) -> Result<&'a ShadowSet> {
    if let Some(s) = cfg.shadows {
        if need_pair && s.entries.iter().any(|e| e.fair.is_none()) {
            return Err(Error::Config("supplied shadow set lacks fair counterparts".into()));
        }
        return Ok(s);
    }
    *owned = Some(train_shadows(
        cfg.shadow_pool,
        &cfg.layer_sizes,
        cfg.k_shadows,
        need_pair,
        cfg.intervention.as_ref(),
        &cfg.shadow_train,
        derive_seed(cfg.seed, "shadows"),
    )?);
    Ok(owned.as_ref().unwrap())
}

/// Forward a model over a dataset's features.
fn record(model: &MlpModel, data: &LabeledDataset) -> Result<ForwardRecord> {
    forward(model, &data.features)
}

fn mia_truth(n_members: usize, n_nonmembers: usize) -> Vec<u8> {
    let mut t = vec![1u8; n_members];
    t.extend(std::iter::repeat(0u8).take(n_nonmembers));
    t
}

fn run_mia_score(
    target_b: &MlpModel,
    target_f: Option<&MlpModel>,
    eval_members: &LabeledDataset,
    eval_nonmembers: &LabeledDataset,
    cfg: &RunAttackConfig,
    mode: &AttackFeatureMode,
) -> Result<AttackOutcome> {
    let fd = cfg.variant == AttackVariant::Fd;
    let mut owned = None;
    let shadows = obtain_shadows(cfg, fd, &mut owned)?;

    // Attack training set: every shadow's outputs on the whole pool,
    // labeled by whether the row was in that shadow's subset.
    let pool = cfg.shadow_pool;
    let per_shadow: Result<Vec<(Array2<Real>, Vec<u8>)>> = shadows
        .entries
        .par_iter()
        .map(|entry| {
            let side_model = shadow_model(entry, if fd { ModelSide::Biased } else { cfg.side })?;
            let rb = record(side_model, pool)?;
            let rf = if fd {
                Some(record(shadow_model(entry, ModelSide::Fair)?, pool)?)
            } else {
                None
            };
            let feats = build_attack_features(&rb, rf.as_ref(), mode)?;
            let mut membership = vec![0u8; pool.n()];
            for &r in &entry.subset {
                membership[r] = 1;
            }
            Ok((feats, membership))
        })
        .collect();
    let per_shadow = per_shadow?;
    let width = per_shadow[0].0.ncols();
    let total: usize = per_shadow.iter().map(|(f, _)| f.nrows()).sum();
    let mut features = Array2::zeros((total, width));
    let mut targets = Vec::with_capacity(total);
    let mut row = 0;
    for (f, t) in &per_shadow {
        for i in 0..f.nrows() {
            for j in 0..width {
                features[[row, j]] = f[[i, j]];
            }
            row += 1;
        }
        targets.extend_from_slice(t);
    }
    let attack = train_attack_model(&features, &targets, derive_seed(cfg.seed, "mia.attack"))?;

    // Score the evaluation rows under the attacked deployment.
    let single = if fd { target_b } else { target_b };
    let mut scores = Vec::new();
    for data in [eval_members, eval_nonmembers] {
        let rb = record(single, data)?;
        let rf = if fd {
            Some(record(target_f.unwrap(), data)?)
        } else {
            None
        };
        let feats = build_attack_features(&rb, rf.as_ref(), mode)?;
        scores.extend(attack_score(&attack, &feats)?);
    }
    Ok(AttackOutcome {
        scores,
        truth: mia_truth(eval_members.n(), eval_nonmembers.n()),
    })
}

/// Logit-scaled true-label probability for every row of a record.
fn phi_values(rec: &ForwardRecord, labels: &[u8]) -> Result<Vec<f64>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| logit_scale(rec.probs[[i, y as usize]]))
        .collect()
}

fn run_mia_lira(
    target_b: &MlpModel,
    target_f: Option<&MlpModel>,
    eval_members: &LabeledDataset,
    eval_nonmembers: &LabeledDataset,
    cfg: &RunAttackConfig,
) -> Result<AttackOutcome> {
    let fd = cfg.variant == AttackVariant::Fd;
    if cfg.restriction == RestrictionPolicy::FairIsolation && fd {
        return Err(Error::RestrictionViolation(
            "fd attacks cannot run under fair isolation".into(),
        ));
    }
    let dim = if fd { 2 } else { 1 };
    let mut owned = None;
    let shadows = obtain_shadows(cfg, fd, &mut owned)?;
    let pool = cfg.shadow_pool;

    let n_eval = eval_members.n() + eval_nonmembers.n();
    let mut tagged: Vec<TaggedObservations> = vec![TaggedObservations::default(); n_eval];

    let phi_of = |model: &MlpModel, data: &LabeledDataset| -> Result<Vec<f64>> {
        let rec = restrict_predictions(&record(model, data)?, &cfg.restriction)?;
        phi_values(&rec, &data.labels)
    };

    // Evaluation rows are never in shadow subsets, so shadow scores on
    // them are all OUT observations; IN observations come from the
    // shadows' own training rows and pool globally via the fit's
    // fallback (fewer than 2 per-example IN observations).
    struct ShadowPhis {
        eval: Vec<Vec<f64>>,
        ins: Vec<Vec<f64>>,
    }
    let shadow_phis: Result<Vec<ShadowPhis>> = shadows
        .entries
        .par_iter()
        .map(|entry| {
            let side = if fd { ModelSide::Biased } else { cfg.side };
            let model_b = shadow_model(entry, side)?;
            let mut eval_phi_b = phi_of(model_b, eval_members)?;
            eval_phi_b.extend(phi_of(model_b, eval_nonmembers)?);
            let train_rows = pool.subset(&entry.subset);
            let in_phi_b = phi_of(model_b, &train_rows)?;
            if fd {
                let model_f = shadow_model(entry, ModelSide::Fair)?;
                let mut eval_phi_f = phi_of(model_f, eval_members)?;
                eval_phi_f.extend(phi_of(model_f, eval_nonmembers)?);
                let in_phi_f = phi_of(model_f, &train_rows)?;
                Ok(ShadowPhis {
                    eval: eval_phi_b
                        .into_iter()
                        .zip(eval_phi_f)
                        .map(|(a, b)| vec![a, b])
                        .collect(),
                    ins: in_phi_b
                        .into_iter()
                        .zip(in_phi_f)
                        .map(|(a, b)| vec![a, b])
                        .collect(),
                })
            } else {
                Ok(ShadowPhis {
                    eval: eval_phi_b.into_iter().map(|a| vec![a]).collect(),
                    ins: in_phi_b.into_iter().map(|a| vec![a]).collect(),
                })
            }
        })
        .collect();
    let mut global_ins = TaggedObservations::default();
    for sp in shadow_phis? {
        for (i, obs) in sp.eval.into_iter().enumerate() {
            tagged[i].outs.push(obs);
        }
        global_ins.ins.extend(sp.ins);
    }
    // Carrier for pooled IN statistics; contributes no OUT observations
    // and is not scored.
    tagged.push(global_ins);
    let fits = lira_fit(&tagged, dim)?;

    let mut target_phis: Vec<Vec<f64>> = Vec::with_capacity(n_eval);
    for data in [eval_members, eval_nonmembers] {
        let pb = phi_of(target_b, data)?;
        if fd {
            let pf = phi_of(target_f.unwrap(), data)?;
            target_phis.extend(pb.into_iter().zip(pf).map(|(a, b)| vec![a, b]));
        } else {
            target_phis.extend(pb.into_iter().map(|a| vec![a]));
        }
    }
    let scores: Result<Vec<f64>> = target_phis
        .iter()
        .zip(fits.iter().take(n_eval))
        .map(|(phi, fit)| lira_score(phi, fit).map(|(_, s)| s))
        .collect();
    Ok(AttackOutcome {
        scores: scores?,
        truth: mia_truth(eval_members.n(), eval_nonmembers.n()),
    })
}

fn run_aia(
    target_b: &MlpModel,
    target_f: Option<&MlpModel>,
    eval_members: &LabeledDataset,
    eval_nonmembers: &LabeledDataset,
    cfg: &RunAttackConfig,
    mode: &AttackFeatureMode,
) -> Result<AttackOutcome> {
    let fd = cfg.variant == AttackVariant::Fd;
    // The attacker queries the deployed model(s) with auxiliary rows of
    // known sensitive attribute and learns to read s back off the
    // outputs, then applies that reader to the evaluation rows.
    let pool = cfg.shadow_pool;
    let single = target_b;
    let rb = record(single, pool)?;
    let rf = if fd {
        Some(record(target_f.unwrap(), pool)?)
    } else {
        None
    };
    let features = build_attack_features(&rb, rf.as_ref(), mode)?;
    // Embedding columns come out of ReLU layers at wildly different
    // scales, so white-box features get per-column standardization
    // fitted on the training features; without it the wide paired
    // feature sets are limited by optimization rather than by
    // information. Score features are probabilities already on a
    // common [0, 1] scale and are fed raw.
    let stats = mode
        .mode
        .uses_embeddings()
        .then(|| ColumnStats::fit(&features));
    let scale = |x: &Array2<Real>| match &stats {
        Some(s) => s.apply(x),
        None => x.clone(),
    };
    let attack = train_attack_model_with(
        &scale(&features),
        &pool.groups,
        derive_seed(cfg.seed, "aia.attack"),
        64,
        250,
    )?;

    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for data in [eval_members, eval_nonmembers] {
        let rb = record(single, data)?;
        let rf = if fd {
            Some(record(target_f.unwrap(), data)?)
        } else {
            None
        };
        let feats = build_attack_features(&rb, rf.as_ref(), mode)?;
        scores.extend(attack_score(&attack, &scale(&feats))?);
        truth.extend_from_slice(&data.groups);
    }
    Ok(AttackOutcome { scores, truth })
}

/// Per-column mean/deviation fitted on attack training features and
/// reused verbatim on evaluation features.
struct ColumnStats {
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl ColumnStats {
    fn fit(x: &Array2<Real>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut stds = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let mean = col.sum() / n;
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            means.push(mean);
            stds.push(var.sqrt().max(1e-6));
        }
        Self { means, stds }
    }

    fn apply(&self, x: &Array2<Real>) -> Array2<Real> {
        let mut out = x.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.means[j]) / self.stds[j]);
        }
        out
    }
}
