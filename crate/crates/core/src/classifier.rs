//! Feedforward collision/clamping classifier on the observer estimate.
//!
//! tanh hidden layers, two-way softmax output, cross-entropy with an L2 penalty
//! on the weights, trained with Adam on mini-batches. Inputs are z-scored with
//! constants stored in the model.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contact::ContactKind;
use crate::error::{Error, Result};

/// Number of input features: `(F_x, F_y, M_z)` of the observer estimate.
pub const INPUT_DIM: usize = 3;
const CLASSES: usize = 2;
/// Version of the model text format.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Argmax class and its softmax probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: ContactKind,
    /// Largest softmax output, `>= 0.5`.
    pub p: f64,
}

impl Prediction {
    /// Ties go to collision.
    pub fn from_probabilities(probs: [f64; 2]) -> Self {
        if probs[1] > probs[0] {
            Self { class: ContactKind::Clamping, p: probs[1] }
        } else {
            Self { class: ContactKind::Collision, p: probs[0] }
        }
    }
}

/// Anything that turns an observer estimate into class probabilities.
pub trait ContactClassifier: Send + Sync {
    /// `[p_collision, p_clamping]`.
    fn probabilities(&self, features: &Vector3<f64>) -> Result<[f64; 2]>;

    fn predict(&self, features: &Vector3<f64>) -> Result<Prediction> {
        self.probabilities(features).map(Prediction::from_probabilities)
    }
}

/// Returns a fixed class with a fixed confidence, e.g. the ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleClassifier {
    pub class: ContactKind,
    pub confidence: f64,
}

impl ContactClassifier for OracleClassifier {
    fn probabilities(&self, _: &Vector3<f64>) -> Result<[f64; 2]> {
        let mut p = [1.0 - self.confidence; 2];
        p[self.class.index()] = self.confidence;
        Ok(p)
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Labeled feature rows with the episode each row came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub features: Vec<[f64; INPUT_DIM]>,
    pub labels: Vec<ContactKind>,
    /// Episode id per row; splits never separate rows of one episode.
    pub groups: Vec<u64>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, features: [f64; INPUT_DIM], label: ContactKind, group: u64) {
        self.features.push(features);
        self.labels.push(label);
        self.groups.push(group);
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            features: rows.iter().map(|&i| self.features[i]).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            groups: rows.iter().map(|&i| self.groups[i]).collect(),
        }
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for l in &self.labels {
            c[l.index()] += 1;
        }
        c
    }

    fn require_both_classes(&self) -> Result<()> {
        let c = self.class_counts();
        if c[0] == 0 || c[1] == 0 {
            return Err(Error::DegenerateDataset(format!(
                "need both classes, got {} collision and {} clamping rows",
                c[0], c[1]
            )));
        }
        Ok(())
    }

    /// Features as an `INPUT_DIM x n` matrix (one column per row).
    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(INPUT_DIM, self.len(), |i, j| self.features[j][i])
    }

    /// One-hot targets as a `2 x n` matrix.
    fn targets(&self) -> DMatrix<f64> {
        DMatrix::from_fn(CLASSES, self.len(), |c, j| f64::from(u8::from(self.labels[j].index() == c)))
    }
}

/// Multilayer perceptron with its input normalisation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MlpModel {
    /// Layer widths from input to output, e.g. `[3, 16, 2]`.
    pub layers: Vec<usize>,
    /// `weights[l]` is `layers[l + 1] x layers[l]`.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Parameter gradients, laid out like the model.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpModel {
    /// Xavier-uniform weights, zero biases, identity normalisation.
    pub fn random(layers: &[usize], rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(layers);
        for w in &mut m.weights {
            let a = (6.0 / (w.nrows() + w.ncols()) as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.random_range(-a..a);
            }
        }
        m
    }

    pub fn zeros(layers: &[usize]) -> Self {
        let weights = layers.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect();
        let biases = layers[1..].iter().map(|&n| DVector::zeros(n)).collect();
        Self {
            layers: layers.to_vec(),
            weights,
            biases,
            mean: vec![0.0; layers[0]],
            std: vec![1.0; layers[0]],
        }
    }

    pub fn is_trained(&self) -> bool {
        !self.weights.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        self.weights.iter().map(|w| w.norm_squared()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parse(format!("invalid model: {m}")));
        if self.layers.len() < 2 || self.layers.iter().any(|&n| n == 0) {
            return bad("need at least an input and an output layer, all non-empty");
        }
        if *self.layers.last().unwrap() != CLASSES {
            return bad("output layer must have two units");
        }
        if self.weights.len() != self.layers.len() - 1 || self.biases.len() != self.weights.len() {
            return bad("layer count does not match parameters");
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.shape() != (self.layers[l + 1], self.layers[l]) || b.len() != self.layers[l + 1] {
                return bad("parameter shapes do not chain");
            }
            if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                return bad("non-finite parameter");
            }
        }
        if self.mean.len() != self.layers[0] || self.std.len() != self.layers[0] {
            return bad("normalisation constants do not match the input width");
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return bad("normalisation scale must be > 0");
        }
        Ok(())
    }

    fn normalize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x.clone();
        for (i, mut row) in z.row_iter_mut().enumerate() {
            row.apply(|v| *v = (*v - self.mean[i]) / self.std[i]);
        }
        z
    }

    /// Activations of every layer for normalised inputs (columns are samples);
    /// the last entry holds the logits.
    fn activations(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(x.clone());
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < last {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    fn softmax_columns(logits: &DMatrix<f64>) -> DMatrix<f64> {
        let mut p = logits.clone();
        for mut col in p.column_iter_mut() {
            let s = softmax(col.as_slice());
            col.copy_from_slice(&s);
        }
        p
    }

    /// Logits for one raw feature vector.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        if !self.is_trained() {
            return Err(Error::NotTrained);
        }
        let x = DMatrix::from_column_slice(features.len(), 1, features);
        Ok(self.activations(&self.normalize(&x)).pop().unwrap().as_slice().to_vec())
    }

    /// Softmax outputs for every row of `set` as a `2 x n` matrix.
    pub fn predict_matrix(&self, set: &LabeledSet) -> Result<DMatrix<f64>> {
        if !self.is_trained() {
            return Err(Error::NotTrained);
        }
        let acts = self.activations(&self.normalize(&set.matrix()));
        Ok(Self::softmax_columns(acts.last().unwrap()))
    }

    /// Mean cross-entropy plus `lambda * sum W^2`, and its accuracy.
    pub fn loss(&self, set: &LabeledSet, lambda: f64) -> Result<(f64, f64)> {
        let p = self.predict_matrix(set)?;
        Ok(loss_and_accuracy(&p, set, lambda * self.weight_norm_sq()))
    }

    /// Loss and analytic gradients on normalised inputs `x` with one-hot targets `y`.
    pub fn gradients(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> (f64, Gradients) {
        let (loss, _, g) = self.batch_step(x, y, lambda);
        (loss, g)
    }

    /// Loss, number of correct predictions and gradients of one batch.
    fn batch_step(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> (f64, f64, Gradients) {
        let n = x.ncols() as f64;
        let acts = self.activations(x);
        let p = Self::softmax_columns(acts.last().unwrap());
        let hits = p
            .column_iter()
            .zip(y.column_iter())
            .filter(|(pc, yc)| (pc[1] > pc[0]) == (yc[1] > 0.5))
            .count() as f64;
        let ce = -p.zip_map(y, |pi, yi| if yi > 0.0 { yi * pi.max(1e-300).ln() } else { 0.0 }).sum() / n;
        let loss = ce + lambda * self.weight_norm_sq();

        let depth = self.weights.len();
        let mut gw = vec![DMatrix::zeros(0, 0); depth];
        let mut gb = vec![DVector::zeros(0); depth];
        let mut delta = (p - y) / n;
        for l in (0..depth).rev() {
            gw[l] = &delta * acts[l].transpose() + 2.0 * lambda * &self.weights[l];
            gb[l] = delta.column_sum();
            if l > 0 {
                let back = self.weights[l].transpose() * &delta;
                delta = back.zip_map(&acts[l], |d, a| d * (1.0 - a * a));
            }
        }
        (loss, hits, Gradients { weights: gw, biases: gb })
    }

    /// Text form: header lines then row-major parameters.
    pub fn to_text(&self, meta: &ModelMeta) -> String {
        let mut s = String::new();
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "# rrr-contact classifier");
        let _ = writeln!(s, "format_version {MODEL_FORMAT_VERSION}");
        let _ = writeln!(s, "config_hash {}", meta.config_hash);
        let _ = writeln!(s, "train_configs {}", join(&mut meta.train_configs.iter().map(|c| c.to_string())));
        let _ = writeln!(s, "lambda {:?}", meta.lambda);
        let _ = writeln!(s, "layers {}", join(&mut self.layers.iter().map(|c| c.to_string())));
        let _ = writeln!(s, "mean {}", join(&mut self.mean.iter().map(|v| format!("{v:?}"))));
        let _ = writeln!(s, "std {}", join(&mut self.std.iter().map(|v| format!("{v:?}"))));
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let _ = writeln!(s, "weights {l}");
            for r in 0..w.nrows() {
                let _ = writeln!(s, "{}", join(&mut w.row(r).iter().map(|v| format!("{v:?}"))));
            }
            let _ = writeln!(s, "bias {l}");
            let _ = writeln!(s, "{}", join(&mut b.iter().map(|v| format!("{v:?}"))));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<(Self, ModelMeta)> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let mut next = |key: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| Error::Parse(format!("model file ends before `{key}`")))?;
            let mut it = line.split_whitespace();
            if !key.is_empty() && it.next() != Some(key) {
                return Err(Error::Parse(format!("expected `{key}`, found `{line}`")));
            }
            Ok(it.map(String::from).collect())
        };
        fn nums<T: std::str::FromStr>(v: &[String]) -> Result<Vec<T>> {
            v.iter()
                .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad number `{s}`"))))
                .collect()
        }
        let version: Vec<u32> = nums(&next("format_version")?)?;
        if version != [MODEL_FORMAT_VERSION] {
            return Err(Error::Parse(format!("unsupported model format {version:?}")));
        }
        let hash = next("config_hash")?;
        let train_configs = nums(&next("train_configs")?)?;
        let lambda = nums::<f64>(&next("lambda")?)?.first().copied().unwrap_or(0.0);
        let layers: Vec<usize> = nums(&next("layers")?)?;
        if layers.len() < 2 {
            return Err(Error::Parse("model needs at least two layers".into()));
        }
        let mut m = Self::zeros(&layers);
        m.mean = nums(&next("mean")?)?;
        m.std = nums(&next("std")?)?;
        for l in 0..layers.len() - 1 {
            next("weights")?;
            for r in 0..layers[l + 1] {
                let row: Vec<f64> = nums(&next("")?)?;
                if row.len() != layers[l] {
                    return Err(Error::Parse(format!("weight row {r} of layer {l} has {} entries", row.len())));
                }
                m.weights[l].row_mut(r).copy_from_slice(&row);
            }
            next("bias")?;
            let b: Vec<f64> = nums(&next("")?)?;
            if b.len() != layers[l + 1] {
                return Err(Error::Parse(format!("bias of layer {l} has {} entries", b.len())));
            }
            m.biases[l] = DVector::from_vec(b);
        }
        m.validate()?;
        let meta = ModelMeta { config_hash: hash.first().cloned().unwrap_or_default(), train_configs, lambda };
        Ok((m, meta))
    }
}

impl ContactClassifier for MlpModel {
    fn probabilities(&self, features: &Vector3<f64>) -> Result<[f64; 2]> {
        let p = softmax(&self.logits(features.as_slice())?);
        Ok([p[0], p[1]])
    }
}

/// Provenance stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelMeta {
    pub config_hash: String,
    /// Joint configurations whose episodes were used for training.
    pub train_configs: Vec<usize>,
    pub lambda: f64,
}

fn loss_and_accuracy(p: &DMatrix<f64>, set: &LabeledSet, penalty: f64) -> (f64, f64) {
    let n = set.len().max(1) as f64;
    let mut ce = 0.0;
    let mut correct = 0usize;
    for (j, l) in set.labels.iter().enumerate() {
        ce -= p[(l.index(), j)].max(1e-300).ln();
        let pred = Prediction::from_probabilities([p[(0, j)], p[(1, j)]]);
        correct += usize::from(pred.class == *l);
    }
    (ce / n + penalty, correct as f64 / n)
}

/// Optimiser and model-selection settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without improvement of the monitored loss before stopping.
    pub patience: usize,
    /// Hidden-layer counts searched.
    pub hidden_layers: Vec<usize>,
    /// Hidden-layer widths searched.
    pub widths: Vec<usize>,
    /// L2 weights searched.
    pub lambdas: Vec<f64>,
    /// Share of episodes held out for validation during the search.
    pub validation_fraction: f64,
    /// Row cap for the training part of each grid cell (0 = no cap).
    pub grid_max_rows: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 256,
            epochs: 200,
            patience: 20,
            hidden_layers: vec![1, 2],
            widths: vec![8, 16, 32, 64],
            lambdas: vec![1e-4, 1e-3, 1e-2],
            validation_fraction: 0.2,
            grid_max_rows: 5_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.step_size, self.beta1, self.beta2, self.epsilon];
        if pos.iter().any(|v| !(*v > 0.0)) || self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("Adam parameters must be > 0 and betas < 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch size, epochs and patience must be > 0".into()));
        }
        if self.hidden_layers.is_empty() || self.widths.is_empty() || self.lambdas.is_empty() {
            return Err(Error::Config("the search grid must not be empty".into()));
        }
        if self.widths.contains(&0) || self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("widths must be > 0 and lambdas >= 0".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Grid cells in search order: layer count, then width, then lambda.
    pub fn grid(&self) -> Vec<GridCell> {
        let mut cells = Vec::new();
        for &depth in &self.hidden_layers {
            for &width in &self.widths {
                for (lambda_index, &lambda) in self.lambdas.iter().enumerate() {
                    cells.push(GridCell { hidden: vec![width; depth], lambda, lambda_index });
                }
            }
        }
        cells
    }
}

/// One architecture and regularisation setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub hidden: Vec<usize>,
    pub lambda: f64,
    pub lambda_index: usize,
}

impl GridCell {
    pub fn layers(&self) -> Vec<usize> {
        let mut l = vec![INPUT_DIM];
        l.extend(&self.hidden);
        l.push(CLASSES);
        l
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Per-epoch record; epoch 0 is the initial model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Per-feature mean and standard deviation (unit scale for constant features).
pub fn normalization(set: &LabeledSet) -> (Vec<f64>, Vec<f64>) {
    let n = set.len().max(1) as f64;
    let mut mean = vec![0.0; INPUT_DIM];
    let mut std = vec![0.0; INPUT_DIM];
    for f in &set.features {
        for i in 0..INPUT_DIM {
            mean[i] += f[i] / n;
        }
    }
    for f in &set.features {
        for i in 0..INPUT_DIM {
            std[i] += (f[i] - mean[i]).powi(2) / n;
        }
    }
    for s in &mut std {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    (mean, std)
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    fn new(model: &MlpModel) -> Self {
        let zero = Gradients {
            weights: model.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: model.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        };
        Self { m: zero.clone(), v: zero, t: 0 }
    }

    fn step(&mut self, model: &mut MlpModel, g: &Gradients, c: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                p[i] -= c.step_size * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.epsilon);
            }
        };
        for l in 0..model.weights.len() {
            update(
                model.weights[l].as_mut_slice(),
                g.weights[l].as_slice(),
                self.m.weights[l].as_mut_slice(),
                self.v.weights[l].as_mut_slice(),
            );
            update(
                model.biases[l].as_mut_slice(),
                g.biases[l].as_slice(),
                self.m.biases[l].as_mut_slice(),
                self.v.biases[l].as_mut_slice(),
            );
        }
    }
}

/// Trains one grid cell. With a validation set the validation loss is
/// monitored for early stopping, otherwise the training loss. The parameters
/// of the best monitored epoch are returned.
pub fn train(
    set: &LabeledSet,
    config: &TrainConfig,
    cell: &GridCell,
    validation: Option<&LabeledSet>,
) -> Result<(MlpModel, TrainingLog)> {
    set.require_both_classes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = MlpModel::random(&cell.layers(), &mut rng);
    let (mean, std) = normalization(set);
    model.mean = mean;
    model.std = std;

    let x = model.normalize(&set.matrix());
    let y = set.targets();
    let mut adam = Adam::new(&model);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut log = TrainingLog::default();

    let validate = |m: &MlpModel| -> Result<(Option<f64>, Option<f64>)> {
        Ok(match validation {
            Some(v) => {
                let (l, a) = m.loss(v, cell.lambda)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        })
    };
    let monitored = |e: &EpochLog| e.val_loss.unwrap_or(e.loss);

    let (loss, accuracy) = model.loss(set, cell.lambda)?;
    let (val_loss, val_accuracy) = validate(&model)?;
    let first = EpochLog { epoch: 0, loss, accuracy, val_loss, val_accuracy };
    let mut best = (monitored(&first), 0, model.clone());
    log.epochs.push(first);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        // training loss and accuracy are averaged over the epoch's batches
        let (mut loss, mut correct) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let xb = x.select_columns(batch);
            let yb = y.select_columns(batch);
            let (l, hits, g) = model.batch_step(&xb, &yb, cell.lambda);
            loss += l * batch.len() as f64;
            correct += hits;
            adam.step(&mut model, &g, config);
        }
        let n = set.len() as f64;
        let (val_loss, val_accuracy) = validate(&model)?;
        let e = EpochLog { epoch, loss: loss / n, accuracy: correct / n, val_loss, val_accuracy };
        let score = monitored(&e);
        log.epochs.push(e);
        if !score.is_finite() {
            break;
        }
        if score < best.0 {
            best = (score, epoch, model.clone());
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }
    log.best_epoch = best.1;
    Ok((best.2, log))
}

/// Validation result of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub cell: GridCell,
    pub parameters: usize,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// One row per cell in grid order.
    pub scores: Vec<CellScore>,
    /// Index into `scores` of the selected cell.
    pub best: usize,
}

impl GridResult {
    pub fn best_cell(&self) -> &CellScore {
        &self.scores[self.best]
    }
}

/// Episode-grouped split: returns (train rows, validation rows).
pub fn group_split(set: &LabeledSet, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: Vec<u64> = set.groups.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let n_val = ((groups.len() as f64 * fraction).round() as usize).clamp(1, groups.len().saturating_sub(1).max(1));
    let val: BTreeSet<u64> = groups[..n_val].iter().copied().collect();
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, g) in set.groups.iter().enumerate() {
        if val.contains(g) {
            va.push(i);
        } else {
            tr.push(i);
        }
    }
    (tr, va)
}

fn cap_rows(rows: Vec<usize>, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if cap == 0 || rows.len() <= cap {
        return rows;
    }
    let mut picked: Vec<usize> = rows.choose_multiple(rng, cap).copied().collect();
    picked.sort_unstable();
    picked
}

/// Picks the best cell: highest validation accuracy, then fewer parameters,
/// then lower lambda index, then grid order.
pub fn select_best(scores: &[CellScore]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        let b = &scores[best];
        let better = s.val_accuracy > b.val_accuracy
            || (s.val_accuracy == b.val_accuracy
                && (s.parameters < b.parameters
                    || (s.parameters == b.parameters && s.cell.lambda_index < b.cell.lambda_index)));
        if better {
            best = i;
        }
    }
    best
}

/// Trains every grid cell on an episode-grouped split and scores it on the validation part.
pub fn grid_search(set: &LabeledSet, config: &TrainConfig) -> Result<GridResult> {
    config.validate()?;
    set.require_both_classes()?;
    let (tr, va) = group_split(set, config.validation_fraction, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let tr = cap_rows(tr, config.grid_max_rows, &mut rng);
    let va = cap_rows(va, config.grid_max_rows, &mut rng);
    let (train_set, val_set) = (set.subset(&tr), set.subset(&va));
    train_set.require_both_classes()?;
    let scores = config
        .grid()
        .into_par_iter()
        .map(|cell| {
            let (model, log) = train(&train_set, config, &cell, Some(&val_set))?;
            let (val_loss, val_accuracy) = model.loss(&val_set, cell.lambda)?;
            Ok(CellScore { parameters: cell.parameter_count(), cell, val_accuracy, val_loss, best_epoch: log.best_epoch })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = select_best(&scores);
    Ok(GridResult { scores, best })
}

/// Grid search, then a refit of the selected cell on all rows for the number of
/// epochs that was best on validation.
pub fn fit(set: &LabeledSet, config: &TrainConfig) -> Result<(MlpModel, GridResult, TrainingLog)> {
    let grid = grid_search(set, config)?;
    let best = grid.best_cell();
    let refit = TrainConfig { epochs: best.best_epoch.max(1), patience: usize::MAX, ..config.clone() };
    let (model, log) = train(set, &refit, &best.cell, None)?;
    Ok((model, grid, log))
}

/// Largest relative difference between analytic and central-difference gradients,
/// each entry relative to `max(|analytic|, |numeric|, 1e-3)`.
pub fn gradient_check(model: &MlpModel, set: &LabeledSet, lambda: f64, step: f64) -> f64 {
    let x = model.normalize(&set.matrix());
    let y = set.targets();
    let (_, g) = model.gradients(&x, &y, lambda);
    let loss_of = |m: &MlpModel| m.gradients(&x, &y, lambda).0;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for l in 0..model.weights.len() {
        for i in 0..model.weights[l].len() {
            let v = model.weights[l].as_slice()[i];
            probe.weights[l].as_mut_slice()[i] = v + step;
            let up = loss_of(&probe);
            probe.weights[l].as_mut_slice()[i] = v - step;
            let down = loss_of(&probe);
            probe.weights[l].as_mut_slice()[i] = v;
            worst = worst.max(rel(g.weights[l].as_slice()[i], (up - down) / (2.0 * step)));
        }
        for i in 0..model.biases[l].len() {
            let v = model.biases[l][i];
            probe.biases[l][i] = v + step;
            let up = loss_of(&probe);
            probe.biases[l][i] = v - step;
            let down = loss_of(&probe);
            probe.biases[l][i] = v;
            worst = worst.max(rel(g.biases[l][i], (up - down) / (2.0 * step)));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, Normal};

    /// Two Gaussian blobs with centres `6 sigma` apart along x.
    fn blobs(n: usize, seed: u64) -> LabeledSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut s = LabeledSet::default();
        for i in 0..n {
            let kind = if i % 2 == 0 { ContactKind::Collision } else { ContactKind::Clamping };
            let cx = if kind == ContactKind::Collision { -3.0 } else { 3.0 };
            let f = [cx + noise.sample(&mut rng), noise.sample(&mut rng), 0.1 * noise.sample(&mut rng)];
            s.push(f, kind, i as u64);
        }
        s
    }

    /// Four blobs in an XOR layout: not separable by a single tanh unit.
    fn xor(n: usize, seed: u64) -> LabeledSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut s = LabeledSet::default();
        for i in 0..n {
            let (a, b) = ((i % 2) as f64 * 2.0 - 1.0, ((i / 2) % 2) as f64 * 2.0 - 1.0);
            let kind = if a * b > 0.0 { ContactKind::Collision } else { ContactKind::Clamping };
            s.push([2.0 * a + noise.sample(&mut rng), 2.0 * b + noise.sample(&mut rng), 0.0], kind, (i / 8) as u64);
        }
        s
    }

    fn quick() -> TrainConfig {
        TrainConfig { step_size: 1e-2, epochs: 60, patience: 10, batch_size: 64, ..TrainConfig::default() }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MlpModel::random(&[3, 8, 2], &mut rng);
        for _ in 0..200 {
            let f = Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-5.0..5.0));
            let p = m.probabilities(&f).unwrap();
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            assert!(m.predict(&f).unwrap().p >= 0.5);
        }
        let p = softmax(&[1000.0, -1000.0]);
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn equal_logits_give_one_half() {
        assert_eq!(softmax(&[0.3, 0.3]), vec![0.5, 0.5]);
        let p = Prediction::from_probabilities([0.5, 0.5]);
        assert_eq!(p.p, 0.5);
    }

    #[test]
    fn hand_computed_single_layer() {
        // no hidden layer: logits = W x + b
        let mut m = MlpModel::zeros(&[3, 2]);
        m.weights[0] = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        m.biases[0] = DVector::from_vec(vec![0.0, 0.5]);
        // x = (1, 0, 0): logits (1, -0.5) -> p0 = 1 / (1 + e^-1.5)
        let p = m.probabilities(&Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(p[0], 1.0 / (1.0 + (-1.5f64).exp()), epsilon = 1e-15);
        // x = (-1, 0, 0): logits (-1, 1.5) -> p1 = 1 / (1 + e^-2.5)
        let pr = m.predict(&Vector3::new(-1.0, 0.0, 0.0)).unwrap();
        assert_eq!(pr.class, ContactKind::Clamping);
        assert_relative_eq!(pr.p, 1.0 / (1.0 + (-2.5f64).exp()), epsilon = 1e-15);
    }

    #[test]
    fn untrained_model_is_rejected() {
        assert!(matches!(MlpModel::default().predict(&Vector3::zeros()), Err(Error::NotTrained)));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = blobs(40, 2);
        for layers in [vec![3, 2], vec![3, 5, 2], vec![3, 4, 3, 2]] {
            let mut m = MlpModel::random(&layers, &mut rng);
            let (mean, std) = normalization(&data);
            m.mean = mean;
            m.std = std;
            for b in &mut m.biases {
                b.apply(|v| *v = rng.random_range(-0.5..0.5));
            }
            let err = gradient_check(&m, &data, 1e-2, 1e-6);
            assert!(err < 1e-6, "{layers:?}: {err}");
        }
    }

    #[test]
    fn bias_gradient_closed_form_at_zero_weights() {
        // zero weights: p = (1/2, 1/2) everywhere, dL/db_c = 1/2 - share of class c
        let mut data = blobs(10, 3);
        data.labels = [0, 1, 1, 1, 0, 1, 1, 1, 0, 1].map(|i| ContactKind::from_index(i).unwrap()).to_vec();
        let m = MlpModel::zeros(&[3, 4, 2]);
        let (_, g) = m.gradients(&m.normalize(&data.matrix()), &data.targets(), 0.0);
        assert_relative_eq!(g.biases[1][0], 0.5 - 0.3, epsilon = 1e-15);
        assert_relative_eq!(g.biases[1][1], 0.5 - 0.7, epsilon = 1e-15);
        assert!(g.biases[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn finite_difference_error_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = blobs(20, 4);
        let m = MlpModel::random(&[3, 4, 2], &mut rng);
        let coarse = gradient_check(&m, &data, 0.0, 1e-2);
        let fine = gradient_check(&m, &data, 0.0, 1e-3);
        let ratio = coarse / fine;
        assert!((30.0..300.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn separable_blobs_reach_99_percent() {
        let train_set = blobs(2000, 10);
        let test_set = blobs(1000, 11);
        let cell = GridCell { hidden: vec![8], lambda: 1e-4, lambda_index: 0 };
        let (m, log) = train(&train_set, &quick(), &cell, None).unwrap();
        let (_, acc) = m.loss(&test_set, 0.0).unwrap();
        assert!(acc >= 0.99, "accuracy {acc}");
        assert!(log.epochs[log.best_epoch].loss <= log.epochs[0].loss);
        assert!(m.weights.iter().all(|w| w.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn retraining_is_bit_identical() {
        let data = blobs(500, 12);
        let cell = GridCell { hidden: vec![4, 4], lambda: 1e-3, lambda_index: 1 };
        let a = train(&data, &quick(), &cell, None).unwrap().0;
        let b = train(&data, &quick(), &cell, None).unwrap().0;
        let meta = ModelMeta::default();
        assert_eq!(a.to_text(&meta), b.to_text(&meta));
    }

    #[test]
    fn larger_penalty_shrinks_weights() {
        let data = blobs(500, 13);
        let norms: Vec<f64> = [1e-4, 1e-2, 1.0, 1e3]
            .iter()
            .map(|&lambda| {
                let cell = GridCell { hidden: vec![4], lambda, lambda_index: 0 };
                train(&data, &quick(), &cell, None).unwrap().0.weight_norm_sq()
            })
            .collect();
        assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
    }

    #[test]
    fn single_class_is_rejected() {
        let mut data = blobs(20, 14);
        data.labels.iter_mut().for_each(|l| *l = ContactKind::Collision);
        let cell = GridCell { hidden: vec![4], lambda: 0.0, lambda_index: 0 };
        assert!(matches!(train(&data, &quick(), &cell, None), Err(Error::DegenerateDataset(_))));
    }

    #[test]
    fn one_cell_grid_returns_that_cell() {
        let cfg = TrainConfig { hidden_layers: vec![1], widths: vec![6], lambdas: vec![1e-3], ..quick() };
        let g = grid_search(&blobs(400, 15), &cfg).unwrap();
        assert_eq!(g.scores.len(), 1);
        assert_eq!(g.best, 0);
        assert_eq!(g.best_cell().cell.hidden, vec![6]);
    }

    #[test]
    fn grid_prefers_capable_cell_and_covers_every_cell() {
        let cfg = TrainConfig { hidden_layers: vec![1], widths: vec![1, 8], lambdas: vec![1e-4, 1e-3], epochs: 150, patience: 30, ..quick() };
        let g = grid_search(&xor(1600, 16), &cfg).unwrap();
        assert_eq!(g.scores.len(), 4);
        assert_eq!(g.best_cell().cell.hidden, vec![8], "{:#?}", g.scores);
    }

    #[test]
    fn tie_break_prefers_small_then_low_lambda() {
        let s = |hidden: usize, li: usize, acc: f64| CellScore {
            cell: GridCell { hidden: vec![hidden], lambda: 0.0, lambda_index: li },
            parameters: GridCell { hidden: vec![hidden], lambda: 0.0, lambda_index: li }.parameter_count(),
            val_accuracy: acc,
            val_loss: 0.0,
            best_epoch: 1,
        };
        assert_eq!(select_best(&[s(16, 0, 0.9), s(8, 1, 0.9), s(8, 0, 0.9), s(4, 0, 0.8)]), 2);
        assert_eq!(select_best(&[s(16, 0, 0.9), s(8, 1, 0.95)]), 1);
    }

    #[test]
    fn group_split_keeps_episodes_together() {
        let data = xor(400, 17);
        let (tr, va) = group_split(&data, 0.25, 3);
        assert_eq!(tr.len() + va.len(), data.len());
        let gv: BTreeSet<u64> = va.iter().map(|&i| data.groups[i]).collect();
        assert!(tr.iter().all(|&i| !gv.contains(&data.groups[i])));
        assert!(!va.is_empty() && !tr.is_empty());
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut m = MlpModel::random(&[3, 5, 4, 2], &mut rng);
        m.mean = vec![0.1, -2.0, 1e-3];
        m.std = vec![3.0, 0.25, 7.5];
        let meta = ModelMeta { config_hash: "abc".into(), train_configs: vec![0, 2], lambda: 1e-3 };
        let (back, meta2) = MlpModel::from_text(&m.to_text(&meta)).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
        assert!(MlpModel::from_text("format_version 9\n").is_err());
    }
}
