//! Minimal feed-forward binary classifier with exact backpropagation.
//!
//! The model splits into a feature extractor (all layers up to and
//! including the penultimate ReLU activation) and a linear
//! classification head, so white-box attacks can consume embeddings.
//! Hidden activations are ReLU, the output layer is identity, training
//! is plain minibatch SGD over seeded shuffles.

use ndarray::{Array1, Array2, Axis};

use crate::rng::{rng_from_seed, shuffled_indices, SeededRng};
use crate::scalar::Scalar;
use crate::{dataset::LabeledDataset, Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Layered parameter container. Weights are stored `[fan_in, fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<S: Scalar> {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Array2<S>>,
    pub biases: Vec<Array1<S>>,
    /// Seed of the most recent init/train stage, kept for provenance.
    pub seed: u64,
}

/// Per-row outputs of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord<S: Scalar> {
    pub logits: Array2<S>,
    pub probs: Array2<S>,
    /// Penultimate activation per row; equals the input when the model
    /// has no hidden layer. `None` once stripped by a restriction policy.
    pub embeddings: Option<Array2<S>>,
}

/// Activations retained for backpropagation. `activations[0]` is the
/// input batch, followed by each hidden layer's post-ReLU output.
pub struct ForwardCache<S: Scalar> {
    pub activations: Vec<Array2<S>>,
    pub probs: Array2<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S: Scalar> {
    pub weights: Vec<Array2<S>>,
    pub biases: Vec<Array1<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(model: &MlpModel<S>) -> Self {
        Self {
            weights: model.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: model.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn scaled_add(&mut self, factor: S, other: &Gradients<S>) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.scaled_add(factor, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.scaled_add(factor, b);
        }
    }

    pub fn l2_norm(&self) -> S {
        let mut acc = S::zero();
        for w in &self.weights {
            acc = acc + w.iter().map(|&v| v * v).sum();
        }
        for b in &self.biases {
            acc = acc + b.iter().map(|&v| v * v).sum();
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, factor: S) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * factor);
        }
    }
}

/// Training hyperparameters for plain SGD.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Optional non-negative per-row loss weights, length n.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_weights: Option<Vec<f64>>,
}

impl TrainConfig {
    pub fn validate(&self, n_rows: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Validation("learning_rate must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Validation("weight_decay must be >= 0".into()));
        }
        if let Some(w) = &self.sample_weights {
            if w.len() != n_rows {
                return Err(Error::Validation(format!(
                    "sample_weights length {} does not match n = {n_rows}",
                    w.len()
                )));
            }
            if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::Validation(
                    "sample_weights must be finite and non-negative".into(),
                ));
            }
        }
        Ok(())
    }
}

impl<S: Scalar> MlpModel<S> {
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn embedding_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Flattened parameters: per layer, weights row-major then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().map(|&v| v.as_f64()));
            out.extend(b.iter().map(|&v| v.as_f64()));
        }
        out
    }
}

/// Self-describing serialization container; round-trips bit-exactly
/// through JSON because parameters stay `f64`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl<S: Scalar> MlpModel<S> {
    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            layer_sizes: self.layer_sizes.clone(),
            seed: self.seed,
            params: self.flat_params(),
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Incompatible {
                found: file.format_version,
                supported: MODEL_FORMAT_VERSION,
            });
        }
        let mut model = init_mlp::<S>(&file.layer_sizes, file.seed)?;
        if file.params.len() != model.num_params() {
            return Err(Error::Shape(format!(
                "parameter count {} does not match layer sizes (expected {})",
                file.params.len(),
                model.num_params()
            )));
        }
        let mut it = file.params.iter();
        for (w, b) in model.weights.iter_mut().zip(model.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = S::from_f64(*it.next().unwrap());
            }
            for v in b.iter_mut() {
                *v = S::from_f64(*it.next().unwrap());
            }
        }
        Ok(model)
    }
}

/// Glorot-uniform initialization: weights ~ U(-sqrt(6/(fan_in+fan_out)),
/// +sqrt(6/(fan_in+fan_out))), biases zero.
pub fn init_mlp<S: Scalar>(layer_sizes: &[usize], seed: u64) -> Result<MlpModel<S>> {
    if layer_sizes.len() < 2 {
        return Err(Error::Shape("need at least input and output layer".into()));
    }
    if *layer_sizes.last().unwrap() != 2 {
        return Err(Error::Shape(format!(
            "last layer width must be 2 (binary logits), got {}",
            layer_sizes.last().unwrap()
        )));
    }
    if layer_sizes.iter().any(|&w| w == 0) {
        return Err(Error::Shape("layer widths must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let limit = S::from_f64((6.0 / (fan_in + fan_out) as f64).sqrt());
        let mut w = Array2::zeros((fan_in, fan_out));
        for v in w.iter_mut() {
            *v = S::sample_uniform(&mut rng, -limit, limit);
        }
        weights.push(w);
        biases.push(Array1::zeros(fan_out));
    }
    Ok(MlpModel {
        layer_sizes: layer_sizes.to_vec(),
        weights,
        biases,
        seed,
    })
}

fn stable_softmax<S: Scalar>(logits: &Array2<S>) -> Array2<S> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    probs
}

/// Forward pass retaining per-layer activations for backprop.
pub fn forward_cached<S: Scalar>(
    model: &MlpModel<S>,
    features: &Array2<S>,
) -> Result<ForwardCache<S>> {
    if features.ncols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "feature width {} does not match model input {}",
            features.ncols(),
            model.input_dim()
        )));
    }
    let n_layers = model.weights.len();
    let mut activations = Vec::with_capacity(n_layers);
    activations.push(features.clone());
    let mut a = features.clone();
    for l in 0..n_layers - 1 {
        let mut z = a.dot(&model.weights[l]);
        z += &model.biases[l];
        z.mapv_inplace(|v| v.max(S::zero()));
        activations.push(z.clone());
        a = z;
    }
    let mut logits = a.dot(&model.weights[n_layers - 1]);
    logits += &model.biases[n_layers - 1];
    let probs = stable_softmax(&logits);
    // logits row replaces the probs clone below when callers need them.
    activations.push(logits);
    Ok(ForwardCache {
        activations,
        probs,
    })
}

impl<S: Scalar> ForwardCache<S> {
    pub fn logits(&self) -> &Array2<S> {
        self.activations.last().unwrap()
    }

    /// Penultimate activation (the embedding h(x)).
    pub fn embeddings(&self) -> &Array2<S> {
        &self.activations[self.activations.len() - 2]
    }

    pub fn record(&self) -> ForwardRecord<S> {
        ForwardRecord {
            logits: self.logits().clone(),
            probs: self.probs.clone(),
            embeddings: Some(self.embeddings().clone()),
        }
    }
}

/// Computes logits = g(h(x)), stable softmax probabilities and the
/// embedding h(x) per row.
pub fn forward<S: Scalar>(model: &MlpModel<S>, features: &Array2<S>) -> Result<ForwardRecord<S>> {
    Ok(forward_cached(model, features)?.record())
}

impl<S: Scalar> ForwardRecord<S> {
    pub fn n(&self) -> usize {
        self.probs.nrows()
    }

    /// Argmax labels, ties broken toward class 0.
    pub fn predicted_labels(&self) -> Vec<u8> {
        self.probs
            .rows()
            .into_iter()
            .map(|r| u8::from(r[1] > r[0]))
            .collect()
    }
}

/// Weighted-mean cross-entropy and its gradient w.r.t. the logits.
/// Weights are normalized so the loss is a weighted mean.
pub fn cross_entropy_dlogits<S: Scalar>(
    probs: &Array2<S>,
    labels: &[u8],
    weights: Option<&[f64]>,
) -> Result<(S, Array2<S>)> {
    let n = probs.nrows();
    if labels.len() != n {
        return Err(Error::Shape("labels length mismatch".into()));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Shape("sample weight length mismatch".into()));
        }
        if w.iter().any(|&v| v < 0.0) {
            return Err(Error::Validation("negative sample weight".into()));
        }
    }
    let total: f64 = match weights {
        Some(w) => w.iter().sum(),
        None => n as f64,
    };
    if total <= 0.0 {
        return Err(Error::Validation("sample weights sum to zero".into()));
    }
    let floor = S::from_f64(1e-300);
    let mut loss = S::zero();
    let mut dlogits = probs.clone();
    for i in 0..n {
        let y = labels[i] as usize;
        let w = S::from_f64(weights.map_or(1.0, |w| w[i]) / total);
        loss = loss - w * probs[[i, y]].max(floor).ln();
        dlogits[[i, y]] -= S::one();
        for j in 0..2 {
            dlogits[[i, j]] = dlogits[[i, j]] * w;
        }
    }
    Ok((loss, dlogits))
}

/// Backpropagates `dlogits` through the whole network.
pub fn backward<S: Scalar>(
    model: &MlpModel<S>,
    cache: &ForwardCache<S>,
    dlogits: &Array2<S>,
) -> Gradients<S> {
    let n_layers = model.weights.len();
    let mut grads = Gradients::zeros_like(model);
    let mut delta = dlogits.clone();
    for l in (0..n_layers).rev() {
        let a_prev = &cache.activations[l];
        grads.weights[l] = a_prev.t().dot(&delta);
        grads.biases[l] = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut d_prev = delta.dot(&model.weights[l].t());
            // ReLU mask from the stored post-activation.
            for (dv, &av) in d_prev.iter_mut().zip(a_prev.iter()) {
                if av <= S::zero() {
                    *dv = S::zero();
                }
            }
            delta = d_prev;
        }
    }
    grads
}

/// Backpropagates a gradient w.r.t. the embedding h(x) through the
/// extractor layers only; head entries stay zero.
pub fn backward_from_embedding<S: Scalar>(
    model: &MlpModel<S>,
    cache: &ForwardCache<S>,
    dembedding: &Array2<S>,
) -> Gradients<S> {
    let n_layers = model.weights.len();
    let mut grads = Gradients::zeros_like(model);
    if n_layers == 1 {
        // No hidden layers: the embedding is the input, nothing to update.
        return grads;
    }
    let mut delta = dembedding.clone();
    // Embedding is the post-ReLU output of layer n_layers-2.
    for l in (0..n_layers - 1).rev() {
        let a_out = &cache.activations[l + 1];
        for (dv, &av) in delta.iter_mut().zip(a_out.iter()) {
            if av <= S::zero() {
                *dv = S::zero();
            }
        }
        let a_prev = &cache.activations[l];
        grads.weights[l] = a_prev.t().dot(&delta);
        grads.biases[l] = delta.sum_axis(Axis(0));
        if l > 0 {
            delta = delta.dot(&model.weights[l].t());
        }
    }
    grads
}

/// Propagates `dlogits` all the way down to the input batch, returning
/// the loss gradient w.r.t. the inputs (used to push an adversary's
/// loss through the embedding it consumes).
pub fn input_gradient<S: Scalar>(
    model: &MlpModel<S>,
    cache: &ForwardCache<S>,
    dlogits: &Array2<S>,
) -> Array2<S> {
    let n_layers = model.weights.len();
    let mut delta = dlogits.clone();
    for l in (0..n_layers).rev() {
        delta = delta.dot(&model.weights[l].t());
        if l > 0 {
            let a_prev = &cache.activations[l];
            for (dv, &av) in delta.iter_mut().zip(a_prev.iter()) {
                if av <= S::zero() {
                    *dv = S::zero();
                }
            }
        }
    }
    delta
}

/// Weighted mean cross-entropy loss and exact gradients for a batch.
pub fn loss_and_grads<S: Scalar>(
    model: &MlpModel<S>,
    batch: &Array2<S>,
    labels: &[u8],
    sample_weights: Option<&[f64]>,
) -> Result<(S, Gradients<S>)> {
    if batch.nrows() == 0 {
        return Err(Error::Validation("batch must be nonempty".into()));
    }
    let cache = forward_cached(model, batch)?;
    let (loss, dlogits) = cross_entropy_dlogits(&cache.probs, labels, sample_weights)?;
    Ok((loss, backward(model, &cache, &dlogits)))
}

/// w' = w - lr * (g + weight_decay * w), per parameter.
pub fn sgd_step<S: Scalar>(
    model: &MlpModel<S>,
    grads: &Gradients<S>,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<MlpModel<S>> {
    let mut next = model.clone();
    apply_sgd_step(&mut next, grads, learning_rate, weight_decay)?;
    Ok(next)
}

pub fn apply_sgd_step<S: Scalar>(
    model: &mut MlpModel<S>,
    grads: &Gradients<S>,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.weights.len() != model.weights.len() {
        return Err(Error::Shape("gradient layer count mismatch".into()));
    }
    let lr = S::from_f64(learning_rate);
    let wd = S::from_f64(weight_decay);
    for (w, g) in model.weights.iter_mut().zip(&grads.weights) {
        if w.dim() != g.dim() {
            return Err(Error::Shape("gradient shape mismatch".into()));
        }
        azip_update(w, g, lr, wd);
    }
    for (b, g) in model.biases.iter_mut().zip(&grads.biases) {
        if b.len() != g.len() {
            return Err(Error::Shape("gradient shape mismatch".into()));
        }
        for (bv, &gv) in b.iter_mut().zip(g.iter()) {
            *bv = *bv - lr * (gv + wd * *bv);
        }
    }
    Ok(())
}

fn azip_update<S: Scalar>(w: &mut Array2<S>, g: &Array2<S>, lr: S, wd: S) {
    for (wv, &gv) in w.iter_mut().zip(g.iter()) {
        *wv = *wv - lr * (gv + wd * *wv);
    }
}

pub(crate) fn gather_rows<S: Scalar>(features: &Array2<S>, rows: &[usize]) -> Array2<S> {
    let mut out = Array2::zeros((rows.len(), features.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&features.row(r));
    }
    out
}

/// Shared minibatch loop: epochs x ceil(n/batch) SGD steps over seeded
/// shuffles. `augment` may return extra gradients added to the
/// cross-entropy gradients of the batch (used by fairness penalties).
pub(crate) fn train_loop<S: Scalar>(
    model_init: &MlpModel<S>,
    data: &LabeledDataset<S>,
    config: &TrainConfig,
    mut augment: impl FnMut(
        &MlpModel<S>,
        &Array2<S>,
        &[usize],
        &mut SeededRng,
        f64,
    ) -> Result<Option<Gradients<S>>>,
) -> Result<MlpModel<S>> {
    if data.n() == 0 {
        return Err(Error::Validation("training data must be nonempty".into()));
    }
    config.validate(data.n())?;
    if data.dim() != model_init.input_dim() {
        return Err(Error::Shape(format!(
            "data width {} does not match model input {}",
            data.dim(),
            model_init.input_dim()
        )));
    }
    let mut model = model_init.clone();
    model.seed = config.seed;
    let mut rng = rng_from_seed(config.seed);
    for epoch in 0..config.epochs {
        // Fraction of training completed, handed to the augmentation so
        // schedules (such as penalty ramps) can depend on progress.
        let progress = epoch as f64 / config.epochs.max(1) as f64;
        let order = shuffled_indices(data.n(), &mut rng);
        for rows in order.chunks(config.batch_size) {
            let batch = gather_rows(&data.features, rows);
            let labels: Vec<u8> = rows.iter().map(|&r| data.labels[r]).collect();
            let weights: Option<Vec<f64>> = config
                .sample_weights
                .as_ref()
                .map(|w| rows.iter().map(|&r| w[r]).collect());
            let (_, mut grads) = loss_and_grads(&model, &batch, &labels, weights.as_deref())?;
            if let Some(extra) = augment(&model, &batch, rows, &mut rng, progress)? {
                grads.scaled_add(S::one(), &extra);
            }
            apply_sgd_step(&mut model, &grads, config.learning_rate, config.weight_decay)?;
        }
    }
    Ok(model)
}

/// Plain cross-entropy SGD training, deterministic per
/// (model_init, data, config).
pub fn train<S: Scalar>(
    model_init: &MlpModel<S>,
    data: &LabeledDataset<S>,
    config: &TrainConfig,
) -> Result<MlpModel<S>> {
    train_loop(model_init, data, config, |_, _, _, _, _| Ok(None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabeledDataset;
    use ndarray::array;

    fn toy_dataset() -> LabeledDataset<f64> {
        let features = array![
            [1.0, 0.2],
            [0.8, -0.1],
            [-1.0, 0.1],
            [-0.9, -0.3],
            [1.2, 0.0],
            [-1.1, 0.2]
        ];
        LabeledDataset::new(features, vec![1, 1, 0, 0, 1, 0], vec![0, 1, 0, 1, 0, 1]).unwrap()
    }

    #[test]
    fn init_parameter_count_and_determinism() {
        let m: MlpModel<f64> = init_mlp(&[4, 8, 2], 1).unwrap();
        assert_eq!(m.num_params(), 4 * 8 + 8 + 8 * 2 + 2);
        let m2: MlpModel<f64> = init_mlp(&[4, 8, 2], 1).unwrap();
        assert_eq!(m, m2);
        assert!(m.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_rejects_bad_shapes() {
        assert!(matches!(init_mlp::<f64>(&[4, 8, 3], 1), Err(Error::Shape(_))));
        assert!(matches!(init_mlp::<f64>(&[4], 1), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_model_embedding_is_input() {
        let m: MlpModel<f64> = init_mlp(&[4, 2], 1).unwrap();
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let rec = forward(&m, &x).unwrap();
        assert_eq!(rec.embeddings.as_ref().unwrap(), &x);
    }

    #[test]
    fn zero_parameters_give_uniform_probs() {
        let mut m: MlpModel<f64> = init_mlp(&[3, 4, 2], 1).unwrap();
        for w in &mut m.weights {
            w.fill(0.0);
        }
        let x = Array2::from_elem((2, 3), 0.7);
        let rec = forward(&m, &x).unwrap();
        assert_eq!(rec.logits, Array2::<f64>::zeros((2, 2)));
        assert_eq!(rec.probs, Array2::from_elem((2, 2), 0.5));
        let (loss, _) = loss_and_grads(&m, &x, &[0, 1], None).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_single_hidden_unit() {
        // [1,1,2] fixture with hand-set weights: h = relu(2x + 1),
        // logits = (0.5h - 0.25, -h + 0.5).
        let mut m: MlpModel<f64> = init_mlp(&[1, 1, 2], 1).unwrap();
        m.weights[0] = array![[2.0]];
        m.biases[0] = array![1.0];
        m.weights[1] = array![[0.5, -1.0]];
        m.biases[1] = array![-0.25, 0.5];
        let x = array![[1.5]];
        let rec = forward(&m, &x).unwrap();
        let h = 2.0 * 1.5 + 1.0;
        assert!((rec.logits[[0, 0]] - (0.5 * h - 0.25)).abs() < 1e-12);
        assert!((rec.logits[[0, 1]] - (-h + 0.5)).abs() < 1e-12);
        assert!((rec.embeddings.as_ref().unwrap()[[0, 0]] - h).abs() < 1e-12);
    }

    #[test]
    fn probs_sum_to_one_and_head_consistency() {
        let m: MlpModel<f64> = init_mlp(&[2, 5, 2], 42).unwrap();
        let x = Array2::from_shape_fn((8, 2), |(i, j)| ((i + j) as f64).sin());
        let rec = forward(&m, &x).unwrap();
        for row in rec.probs.rows() {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
        }
        // logits == head applied to embedding
        let emb = rec.embeddings.as_ref().unwrap();
        let relogits = emb.dot(&m.weights[1]) + &m.biases[1];
        for (a, b) in rec.logits.iter().zip(relogits.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Central finite-difference oracle over every parameter coordinate.
    pub(crate) fn finite_diff_check(
        model: &MlpModel<f64>,
        batch: &Array2<f64>,
        labels: &[u8],
        weights: Option<&[f64]>,
        rel_tol: f64,
    ) {
        let (_, grads) = loss_and_grads(model, batch, labels, weights).unwrap();
        let h = 1e-4;
        let eval = |m: &MlpModel<f64>| -> f64 {
            let cache = forward_cached(m, batch).unwrap();
            cross_entropy_dlogits(&cache.probs, labels, weights).unwrap().0
        };
        for l in 0..model.weights.len() {
            for idx in 0..model.weights[l].len() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                plus.weights[l].as_slice_mut().unwrap()[idx] += h;
                minus.weights[l].as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads.weights[l].as_slice().unwrap()[idx];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom <= rel_tol,
                    "layer {l} weight {idx}: analytic {an} vs fd {fd}"
                );
            }
            for idx in 0..model.biases[l].len() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                plus.biases[l][idx] += h;
                minus.biases[l][idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads.biases[l][idx];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom <= rel_tol,
                    "layer {l} bias {idx}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model: MlpModel<f64> = init_mlp(&[3, 5, 4, 2], 7).unwrap();
        let batch = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let labels = [0, 1, 1, 0, 1, 0];
        finite_diff_check(&model, &batch, &labels, None, 1e-4);
        let weights = [0.5, 2.0, 1.0, 0.0, 3.0, 1.5];
        finite_diff_check(&model, &batch, &labels, Some(&weights), 1e-4);
    }

    #[test]
    fn doubling_a_weight_equals_duplicating_the_row() {
        let model: MlpModel<f64> = init_mlp(&[2, 3, 2], 5).unwrap();
        let two = array![[0.5, -1.0], [1.5, 0.25]];
        let (l_w, g_w) = loss_and_grads(&model, &two, &[0, 1], Some(&[2.0, 1.0])).unwrap();
        let three = array![[0.5, -1.0], [0.5, -1.0], [1.5, 0.25]];
        let (l_d, g_d) = loss_and_grads(&model, &three, &[0, 0, 1], None).unwrap();
        assert!((l_w - l_d).abs() < 1e-12);
        for (a, b) in g_w.weights.iter().zip(&g_d.weights) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn negative_sample_weight_rejected() {
        let model: MlpModel<f64> = init_mlp(&[2, 2], 5).unwrap();
        let batch = array![[0.5, -1.0]];
        assert!(matches!(
            loss_and_grads(&model, &batch, &[0], Some(&[-1.0])),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut model: MlpModel<f64> = init_mlp(&[1, 2], 1).unwrap();
        model.weights[0] = array![[1.0, 1.0]];
        let mut grads = Gradients::zeros_like(&model);
        grads.weights[0] = array![[0.5, 0.0]];
        let next = sgd_step(&model, &grads, 0.1, 0.0).unwrap();
        assert!((next.weights[0][[0, 0]] - 0.95).abs() < 1e-15);
        let next = sgd_step(&model, &Gradients::zeros_like(&model), 0.1, 0.1).unwrap();
        assert!((next.weights[0][[0, 0]] - 0.99).abs() < 1e-15);
        // lr = 0 is identity
        let same = sgd_step(&model, &grads, 0.0, 0.5).unwrap();
        assert_eq!(same.weights, model.weights);
        assert_eq!(same.biases, model.biases);
    }

    #[test]
    fn train_zero_epochs_is_identity_and_training_is_deterministic() {
        let data = toy_dataset();
        let model: MlpModel<f64> = init_mlp(&[2, 4, 2], 3).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 2,
            learning_rate: 0.1,
            weight_decay: 0.0,
            seed: 3,
            sample_weights: None,
        };
        let trained = train(&model, &data, &cfg).unwrap();
        assert_eq!(trained.weights, model.weights);
        let cfg = TrainConfig { epochs: 5, ..cfg };
        let a = train(&model, &data, &cfg).unwrap();
        let b = train(&model, &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_converges_on_separable_toy_set() {
        let data = toy_dataset();
        let model: MlpModel<f64> = init_mlp(&[2, 8, 2], 3).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 3,
            learning_rate: 0.2,
            weight_decay: 0.0,
            seed: 3,
            sample_weights: None,
        };
        let trained = train(&model, &data, &cfg).unwrap();
        let cache = forward_cached(&trained, &data.features).unwrap();
        let (loss, _) = cross_entropy_dlogits(&cache.probs, &data.labels, None).unwrap();
        assert!(loss < 0.1, "final training loss {loss}");
    }

    #[test]
    fn model_file_round_trip_is_bit_exact() {
        let data = toy_dataset();
        let model: MlpModel<f64> = init_mlp(&[2, 4, 2], 3).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            learning_rate: 0.1,
            weight_decay: 0.01,
            seed: 3,
            sample_weights: None,
        };
        let trained = train(&model, &data, &cfg).unwrap();
        let json = serde_json::to_string(&trained.to_file()).unwrap();
        let parsed: ModelFile = serde_json::from_str(&json).unwrap();
        let restored: MlpModel<f64> = MlpModel::from_file(&parsed).unwrap();
        assert_eq!(restored, trained);
        assert_eq!(serde_json::to_string(&restored.to_file()).unwrap(), json);
    }

    #[test]
    fn model_file_version_guard() {
        let model: MlpModel<f64> = init_mlp(&[2, 2], 3).unwrap();
        let mut file = model.to_file();
        file.format_version = 99;
        match MlpModel::<f64>::from_file(&file) {
            Err(Error::Incompatible { found, supported }) => {
                assert_eq!(found, 99);
                assert_eq!(supported, MODEL_FORMAT_VERSION);
            }
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }
}
