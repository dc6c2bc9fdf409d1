//! Group fairness metrics (bias amplification, equalized-odds gap) and
//! in-processing interventions that turn a biased trainer into a fair
//! one: reweighting, balanced sampling, a soft equalized-odds penalty,
//! fair mixup, and adversarial debiasing with gradient reversal.

use ndarray::Array2;

use crate::dataset::LabeledDataset;
use crate::nn::{
    apply_sgd_step, backward, backward_from_embedding, cross_entropy_dlogits, forward_cached,
    gather_rows, init_mlp, input_gradient, train_loop, Gradients, MlpModel, TrainConfig,
};
use crate::rng::{derive_seed, rng_from_seed, shuffled_indices, SeededRng};
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Target-model quality and fairness summary.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FairnessReport {
    pub acc_t: f64,
    pub ba: f64,
    pub deo: f64,
    /// Per-group true/false positive rates, indexed by s.
    pub tpr: [f64; 2],
    pub fpr: [f64; 2],
    pub tp_counts: [u64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMethod {
    Reweight,
    BalancedSampling,
    EoPenalty,
    FairMixup,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InterventionConfig {
    pub method: InterventionMethod,
    /// Penalty / adversary weight.
    pub lambda: f64,
    /// Interpolation grid for fair mixup, values in [0, 1].
    pub mixup_grid: Vec<f64>,
    /// Hidden-layer widths of the adversary head.
    pub adversary_layers: Vec<usize>,
    pub train: TrainConfig,
}

impl InterventionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.method == InterventionMethod::FairMixup {
            if self.mixup_grid.len() < 2 {
                return Err(Error::Config(
                    "fair_mixup needs a mixup_grid with at least 2 points".into(),
                ));
            }
            if self.mixup_grid.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
                return Err(Error::Config("mixup_grid values must lie in [0, 1]".into()));
            }
        }
        if self.method == InterventionMethod::Adversarial
            && self.adversary_layers.iter().any(|&w| w == 0)
        {
            return Err(Error::Config("adversary layer widths must be positive".into()));
        }
        Ok(())
    }
}

fn confusion_rates(
    predictions: &[u8],
    labels: &[u8],
    groups: &[u8],
) -> Result<([u64; 2], [f64; 2], [f64; 2])> {
    let n = predictions.len();
    if n == 0 || labels.len() != n || groups.len() != n {
        return Err(Error::Validation("prediction/label/group length mismatch".into()));
    }
    // counts[s][y][y_hat]
    let mut counts = [[[0u64; 2]; 2]; 2];
    for i in 0..n {
        counts[groups[i] as usize][labels[i] as usize][predictions[i] as usize] += 1;
    }
    let mut tp = [0u64; 2];
    let mut tpr = [0.0f64; 2];
    let mut fpr = [0.0f64; 2];
    for s in 0..2 {
        let positives = counts[s][1][0] + counts[s][1][1];
        let negatives = counts[s][0][0] + counts[s][0][1];
        if positives == 0 || negatives == 0 {
            return Err(Error::UndefinedMetric(format!(
                "group {s} lacks a (label, group) cell: positives {positives}, negatives {negatives}"
            )));
        }
        tp[s] = counts[s][1][1];
        tpr[s] = counts[s][1][1] as f64 / positives as f64;
        fpr[s] = counts[s][0][1] as f64 / negatives as f64;
    }
    Ok((tp, tpr, fpr))
}

/// Bias amplification: half the absolute difference of per-group true
/// positive counts over their sum.
pub fn bias_amplification(predictions: &[u8], labels: &[u8], groups: &[u8]) -> Result<f64> {
    let n = predictions.len();
    if n == 0 || labels.len() != n || groups.len() != n {
        return Err(Error::Validation("prediction/label/group length mismatch".into()));
    }
    if !groups.contains(&0) || !groups.contains(&1) {
        return Err(Error::UndefinedMetric("both groups must be present".into()));
    }
    let mut tp = [0f64; 2];
    for i in 0..n {
        if labels[i] == 1 && predictions[i] == 1 {
            tp[groups[i] as usize] += 1.0;
        }
    }
    let total = tp[0] + tp[1];
    if total == 0.0 {
        return Err(Error::UndefinedMetric(
            "no true positives in either group".into(),
        ));
    }
    Ok(0.5 * (tp[0] - tp[1]).abs() / total)
}

/// Equalized-odds gap: mean of the per-group TPR gap and FPR gap.
pub fn equalized_odds_gap(predictions: &[u8], labels: &[u8], groups: &[u8]) -> Result<f64> {
    let (_, tpr, fpr) = confusion_rates(predictions, labels, groups)?;
    Ok(0.5 * ((tpr[0] - tpr[1]).abs() + (fpr[0] - fpr[1]).abs()))
}

/// Full target evaluation used by the audit report.
pub fn evaluate_fairness(predictions: &[u8], labels: &[u8], groups: &[u8]) -> Result<FairnessReport> {
    let (tp, tpr, fpr) = confusion_rates(predictions, labels, groups)?;
    let acc_t = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count() as f64
        / predictions.len() as f64;
    let ba = bias_amplification(predictions, labels, groups)?;
    let deo = 0.5 * ((tpr[0] - tpr[1]).abs() + (fpr[0] - fpr[1]).abs());
    Ok(FairnessReport {
        acc_t,
        ba,
        deo,
        tpr,
        fpr,
        tp_counts: tp,
    })
}

/// Differentiable equalized-odds surrogate: indicator rates replaced by
/// the mean predicted probability of class 1 per (label, group) cell.
/// Cells absent from the batch contribute nothing.
pub fn soft_deo<S: Scalar>(probs: &Array2<S>, labels: &[u8], groups: &[u8]) -> f64 {
    let mut sums = [[0.0f64; 2]; 2];
    let mut counts = [[0usize; 2]; 2];
    for i in 0..labels.len() {
        let (y, s) = (labels[i] as usize, groups[i] as usize);
        sums[y][s] += probs[[i, 1]].as_f64();
        counts[y][s] += 1;
    }
    let mut total = 0.0;
    for y in 0..2 {
        if counts[y][0] > 0 && counts[y][1] > 0 {
            let m0 = sums[y][0] / counts[y][0] as f64;
            let m1 = sums[y][1] / counts[y][1] as f64;
            total += 0.5 * (m0 - m1).abs();
        }
    }
    total
}

/// Gradient of [`soft_deo`] w.r.t. the model parameters for a batch.
fn soft_deo_grads<S: Scalar>(
    model: &MlpModel<S>,
    batch: &Array2<S>,
    labels: &[u8],
    groups: &[u8],
) -> Result<Gradients<S>> {
    let cache = forward_cached(model, batch)?;
    let probs = &cache.probs;
    let mut sums = [[0.0f64; 2]; 2];
    let mut counts = [[0usize; 2]; 2];
    for i in 0..labels.len() {
        let (y, s) = (labels[i] as usize, groups[i] as usize);
        sums[y][s] += probs[[i, 1]].as_f64();
        counts[y][s] += 1;
    }
    // d(soft_deo)/d p1_i per row.
    let mut dlogits = Array2::zeros(probs.dim());
    for i in 0..labels.len() {
        let (y, s) = (labels[i] as usize, groups[i] as usize);
        if counts[y][0] == 0 || counts[y][1] == 0 {
            continue;
        }
        let m0 = sums[y][0] / counts[y][0] as f64;
        let m1 = sums[y][1] / counts[y][1] as f64;
        let sign = (m0 - m1).signum();
        if sign == 0.0 {
            continue;
        }
        let coeff = 0.5 * if s == 0 { sign } else { -sign } / counts[y][s] as f64;
        // dp1/dlogits = p0*p1 * (dz1 - dz0)
        let pp = probs[[i, 0]] * probs[[i, 1]];
        dlogits[[i, 0]] = -S::from_f64(coeff) * pp;
        dlogits[[i, 1]] = S::from_f64(coeff) * pp;
    }
    Ok(backward(model, &cache, &dlogits))
}

/// Fair-mixup path-smoothness penalty over the group interpolation
/// curve: for each t in the grid, mixed inputs x_t = t*x0 + (1-t)*x1
/// over a seeded pairing; the penalty averages the finite-difference
/// slopes |m(t_{i+1}) - m(t_i)| / (t_{i+1} - t_i) of the mean class-1
/// probability m(t). Returns the penalty and its exact gradients.
pub fn fair_mixup_penalty<S: Scalar>(
    model: &MlpModel<S>,
    batch_s0: &Array2<S>,
    batch_s1: &Array2<S>,
    t_grid: &[f64],
    seed: u64,
) -> Result<(f64, Gradients<S>)> {
    let mut rng = rng_from_seed(seed);
    fair_mixup_penalty_with_rng(model, batch_s0, batch_s1, t_grid, &mut rng)
}

fn fair_mixup_penalty_with_rng<S: Scalar>(
    model: &MlpModel<S>,
    batch_s0: &Array2<S>,
    batch_s1: &Array2<S>,
    t_grid: &[f64],
    rng: &mut SeededRng,
) -> Result<(f64, Gradients<S>)> {
    if batch_s0.nrows() == 0 || batch_s1.nrows() == 0 {
        return Err(Error::Config("fair_mixup needs both group batches nonempty".into()));
    }
    if t_grid.len() < 2 {
        return Err(Error::Config("mixup t_grid needs at least 2 points".into()));
    }
    let mut grid = t_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if grid.windows(2).any(|w| w[1] - w[0] <= 0.0) {
        return Err(Error::Config("mixup t_grid points must be distinct".into()));
    }
    if grid.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::Config("mixup t_grid values must lie in [0, 1]".into()));
    }

    // Seeded pairing: shuffle both sides, pair up to the shorter length.
    let n = batch_s0.nrows().min(batch_s1.nrows());
    let idx0 = shuffled_indices(batch_s0.nrows(), rng);
    let idx1 = shuffled_indices(batch_s1.nrows(), rng);
    let d = batch_s0.ncols();

    let mut caches = Vec::with_capacity(grid.len());
    let mut means = Vec::with_capacity(grid.len());
    for &t in &grid {
        let tf = S::from_f64(t);
        let one_minus = S::from_f64(1.0 - t);
        let mut mixed = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                mixed[[i, j]] =
                    tf * batch_s0[[idx0[i], j]] + one_minus * batch_s1[[idx1[i], j]];
            }
        }
        let cache = forward_cached(model, &mixed)?;
        let m: f64 = cache.probs.column(1).iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        means.push(m);
        caches.push(cache);
    }

    let k = (grid.len() - 1) as f64;
    let mut penalty = 0.0;
    // Coefficient of each grid point's m(t) in the penalty.
    let mut coeffs = vec![0.0f64; grid.len()];
    for i in 0..grid.len() - 1 {
        let dt = grid[i + 1] - grid[i];
        let slope = (means[i + 1] - means[i]) / dt;
        penalty += slope.abs() / k;
        let sign = slope.signum();
        if sign != 0.0 {
            coeffs[i + 1] += sign / (dt * k);
            coeffs[i] -= sign / (dt * k);
        }
    }

    let mut grads = Gradients::zeros_like(model);
    for (cache, &c) in caches.iter().zip(&coeffs) {
        if c == 0.0 {
            continue;
        }
        let probs = &cache.probs;
        let mut dlogits = Array2::zeros(probs.dim());
        let scale = S::from_f64(c / n as f64);
        for i in 0..n {
            let pp = probs[[i, 0]] * probs[[i, 1]];
            dlogits[[i, 0]] = -scale * pp;
            dlogits[[i, 1]] = scale * pp;
        }
        grads.scaled_add(S::one(), &backward(model, cache, &dlogits));
    }
    Ok((penalty, grads))
}

/// Gradient triple for one adversarial-debiasing step.
pub struct AdversarialGrads<S: Scalar> {
    /// Task cross-entropy gradients for the full model.
    pub task: Gradients<S>,
    /// Combined model gradients: head takes the task gradient only, the
    /// extractor takes task minus beta times the adversary gradient
    /// routed through the embedding (gradient reversal).
    pub combined: Gradients<S>,
    /// Gradients that descend the adversary's own cross-entropy.
    pub adversary: Gradients<S>,
    pub adversary_loss: f64,
}

/// One step of adversarial debiasing: the adversary predicts s from the
/// embedding; the extractor is pushed against it with weight `beta`.
pub fn adversarial_debias_grads<S: Scalar>(
    model: &MlpModel<S>,
    adversary: &MlpModel<S>,
    batch: &Array2<S>,
    labels: &[u8],
    groups: &[u8],
    beta: f64,
) -> Result<AdversarialGrads<S>> {
    if adversary.input_dim() != model.embedding_dim() {
        return Err(Error::Shape(format!(
            "adversary input width {} does not match embedding dimension {}",
            adversary.input_dim(),
            model.embedding_dim()
        )));
    }
    let cache = forward_cached(model, batch)?;
    let (_, task_dlogits) = cross_entropy_dlogits(&cache.probs, labels, None)?;
    let task = backward(model, &cache, &task_dlogits);

    let embeddings = cache.embeddings().clone();
    let adv_cache = forward_cached(adversary, &embeddings)?;
    let (adv_loss, adv_dlogits) = cross_entropy_dlogits(&adv_cache.probs, groups, None)?;
    let adversary_grads = backward(adversary, &adv_cache, &adv_dlogits);
    let d_embedding = input_gradient(adversary, &adv_cache, &adv_dlogits);
    let reversal = backward_from_embedding(model, &cache, &d_embedding);

    let mut combined = task.clone();
    combined.scaled_add(S::from_f64(-beta), &reversal);
    Ok(AdversarialGrads {
        task,
        combined,
        adversary: adversary_grads,
        adversary_loss: adv_loss.as_f64(),
    })
}

/// Per-row weights n / (2 * n_{s(row)}) so each group carries equal
/// total weight.
pub fn reweight_weights(groups: &[u8]) -> Result<Vec<f64>> {
    let n = groups.len() as f64;
    let n1 = groups.iter().filter(|&&s| s == 1).count() as f64;
    let n0 = n - n1;
    if n0 == 0.0 || n1 == 0.0 {
        return Err(Error::Config("reweight needs both groups present".into()));
    }
    Ok(groups
        .iter()
        .map(|&s| if s == 0 { n / (2.0 * n0) } else { n / (2.0 * n1) })
        .collect())
}

/// Group-balancing weights clipped at `cap`. Intended for weighted
/// DP-SGD, where the noise scale grows with the largest weight: the
/// clip trades some rebalancing strength for a bounded sensitivity and
/// therefore a usable signal-to-noise ratio under heavy group skew.
pub fn capped_reweight_weights(groups: &[u8], cap: f64) -> Result<Vec<f64>> {
    if !(cap > 0.0) {
        return Err(Error::Config("weight cap must be positive".into()));
    }
    Ok(reweight_weights(groups)?.into_iter().map(|w| w.min(cap)).collect())
}

/// Trains a fair counterpart of the biased model via the configured
/// in-processing intervention, from the given initialization.
pub fn train_fair<S: Scalar>(
    model_init: &MlpModel<S>,
    data: &LabeledDataset<S>,
    config: &InterventionConfig,
) -> Result<MlpModel<S>> {
    config.validate()?;
    for y in 0..2u8 {
        for s in 0..2u8 {
            if !(0..data.n()).any(|i| data.labels[i] == y && data.groups[i] == s) {
                return Err(Error::Config(format!(
                    "intervention needs both groups in both classes; cell (y={y}, s={s}) empty"
                )));
            }
        }
    }
    match config.method {
        InterventionMethod::Reweight => {
            let mut cfg = config.train.clone();
            cfg.sample_weights = Some(reweight_weights(&data.groups)?);
            crate::nn::train(model_init, data, &cfg)
        }
        InterventionMethod::BalancedSampling => train_balanced_sampling(model_init, data, &config.train),
        InterventionMethod::EoPenalty => {
            let lambda = config.lambda;
            // The penalty stays off for most of training and ramps in
            // near the end. Two reasons: a full-strength penalty on a
            // near-uniform early model can drive it into the degenerate
            // all-negative optimum (both rates zero, so the penalty
            // vanishes), and an early penalty equalizes rates by
            // flattening confidence everywhere instead of moving the
            // decision boundary where the groups actually differ. A
            // late ramp lets the task loss shape a sharp model first
            // and spends the penalty on a targeted correction.
            train_loop(model_init, data, &config.train, |model, batch, rows, _, progress| {
                let ramp = ((progress - 0.6) / 0.2).clamp(0.0, 1.0);
                if ramp == 0.0 {
                    return Ok(None);
                }
                let labels: Vec<u8> = rows.iter().map(|&r| data.labels[r]).collect();
                let groups: Vec<u8> = rows.iter().map(|&r| data.groups[r]).collect();
                let mut g = soft_deo_grads(model, batch, &labels, &groups)?;
                g.scale(S::from_f64(lambda * ramp));
                Ok(Some(g))
            })
        }
        InterventionMethod::FairMixup => {
            let lambda = config.lambda;
            let grid = config.mixup_grid.clone();
            train_loop(model_init, data, &config.train, |model, batch, rows, rng, _| {
                let rows0: Vec<usize> = (0..rows.len())
                    .filter(|&i| data.groups[rows[i]] == 0)
                    .collect();
                let rows1: Vec<usize> = (0..rows.len())
                    .filter(|&i| data.groups[rows[i]] == 1)
                    .collect();
                if rows0.is_empty() || rows1.is_empty() {
                    return Ok(None);
                }
                let b0 = gather_rows(batch, &rows0);
                let b1 = gather_rows(batch, &rows1);
                let (_, mut g) = fair_mixup_penalty_with_rng(model, &b0, &b1, &grid, rng)?;
                g.scale(S::from_f64(lambda));
                Ok(Some(g))
            })
        }
        InterventionMethod::Adversarial => train_adversarial(model_init, data, config),
    }
}

/// Minibatches drawn with equal group counts, seeded, with replacement
/// from the minority once its pool for the epoch is exhausted.
fn train_balanced_sampling<S: Scalar>(
    model_init: &MlpModel<S>,
    data: &LabeledDataset<S>,
    cfg: &TrainConfig,
) -> Result<MlpModel<S>> {
    cfg.validate(data.n())?;
    let group_rows: [Vec<usize>; 2] = [
        (0..data.n()).filter(|&i| data.groups[i] == 0).collect(),
        (0..data.n()).filter(|&i| data.groups[i] == 1).collect(),
    ];
    let mut model = model_init.clone();
    model.seed = cfg.seed;
    let mut rng = rng_from_seed(cfg.seed);
    let steps_per_epoch = data.n().div_ceil(cfg.batch_size);
    let per_group = (cfg.batch_size / 2).max(1);
    for _ in 0..cfg.epochs {
        let mut pools: Vec<Vec<usize>> = (0..2)
            .map(|g| {
                let order = shuffled_indices(group_rows[g].len(), &mut rng);
                order.into_iter().map(|k| group_rows[g][k]).collect()
            })
            .collect();
        let mut cursors = [0usize; 2];
        for _ in 0..steps_per_epoch {
            let mut rows = Vec::with_capacity(2 * per_group);
            for g in 0..2 {
                for _ in 0..per_group {
                    if cursors[g] >= pools[g].len() {
                        let order = shuffled_indices(group_rows[g].len(), &mut rng);
                        pools[g] = order.into_iter().map(|k| group_rows[g][k]).collect();
                        cursors[g] = 0;
                    }
                    rows.push(pools[g][cursors[g]]);
                    cursors[g] += 1;
                }
            }
            let batch = gather_rows(&data.features, &rows);
            let labels: Vec<u8> = rows.iter().map(|&r| data.labels[r]).collect();
            let (_, grads) = crate::nn::loss_and_grads(&model, &batch, &labels, None)?;
            apply_sgd_step(&mut model, &grads, cfg.learning_rate, cfg.weight_decay)?;
        }
    }
    Ok(model)
}

/// Alternates one adversary step with one reversed task step per batch,
/// beta = lambda.
fn train_adversarial<S: Scalar>(
    model_init: &MlpModel<S>,
    data: &LabeledDataset<S>,
    config: &InterventionConfig,
) -> Result<MlpModel<S>> {
    let cfg = &config.train;
    cfg.validate(data.n())?;
    let mut arch = vec![model_init.embedding_dim()];
    arch.extend(if config.adversary_layers.is_empty() {
        vec![8]
    } else {
        config.adversary_layers.clone()
    });
    arch.push(2);
    let mut adversary: MlpModel<S> = init_mlp(&arch, derive_seed(cfg.seed, "adversary"))?;
    let mut model = model_init.clone();
    model.seed = cfg.seed;
    let mut rng = rng_from_seed(cfg.seed);
    for _ in 0..cfg.epochs {
        let order = shuffled_indices(data.n(), &mut rng);
        for rows in order.chunks(cfg.batch_size) {
            let batch = gather_rows(&data.features, rows);
            let labels: Vec<u8> = rows.iter().map(|&r| data.labels[r]).collect();
            let groups: Vec<u8> = rows.iter().map(|&r| data.groups[r]).collect();
            let step =
                adversarial_debias_grads(&model, &adversary, &batch, &labels, &groups, config.lambda)?;
            apply_sgd_step(&mut adversary, &step.adversary, cfg.learning_rate, cfg.weight_decay)?;
            apply_sgd_step(&mut model, &step.combined, cfg.learning_rate, cfg.weight_decay)?;
        }
    }
    Ok(model)
}
