//! Soft/hard contact classification from processed frame sequences.
//!
//! Ten evenly spaced frames are sampled per sequence; each contributes the
//! force magnitude, the mean black-marker displacement, and the contact
//! area from the height map. The pooled feature vector feeds a logistic
//! model trained by deterministic full-batch gradient descent on the
//! cross-entropy loss (class 0 soft, class 1 hard).

use crate::config::{PipelineConfig, Pooling};
use crate::pipeline::{FrameOutput, FrameProcessor, ProcessOptions, ProcessorParts};
use crate::sim::{render_sequence, ContactScenario, HardnessClass, IndenterShape, SensorModel, SimError};
use crate::wrench::Wrench;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SELECTED_FRAMES: usize = 10;
pub const FEATURES: usize = 3;

#[derive(Debug, Error)]
pub enum HardnessError {
    #[error("sequence has {0} frames; need at least {SELECTED_FRAMES}")]
    TooShort(usize),
    #[error("frame {frame}: missing modality {modality}")]
    MissingModality { frame: usize, modality: &'static str },
    #[error("training set must contain both classes")]
    SingleClass,
    #[error("non-finite feature encountered")]
    NonFinite,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("pipeline failure in sequence {sequence}: {message}")]
    Pipeline { sequence: usize, message: String },
}

/// Indices of the ten evenly chosen frames: `round(i·(n-1)/9)`.
pub fn select_indices(n_frames: usize) -> Result<[usize; SELECTED_FRAMES], HardnessError> {
    if n_frames < SELECTED_FRAMES {
        return Err(HardnessError::TooShort(n_frames));
    }
    let mut out = [0usize; SELECTED_FRAMES];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = ((i as f64) * (n_frames as f64 - 1.0) / 9.0).round() as usize;
    }
    Ok(out)
}

/// Per-frame modality values feeding feature extraction.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrameSample {
    pub force_n: Option<f64>,
    pub mean_displacement_px: Option<f64>,
    pub contact_area_px2: Option<f64>,
}

impl FrameSample {
    pub fn from_output(out: &FrameOutput, area_threshold_mm: f64) -> Self {
        Self {
            force_n: out.wrench.map(|w| w.force.norm()),
            mean_displacement_px: Some(out.mean_cumulative_displacement_px),
            contact_area_px2: out.height.as_ref().map(|h| h.contact_area_px2(area_threshold_mm)),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeatureRow {
    pub force_n: f64,
    pub mean_displacement_px: f64,
    pub contact_area_px2: f64,
}

impl FeatureRow {
    fn as_array(&self) -> [f64; FEATURES] {
        [self.force_n, self.mean_displacement_px, self.contact_area_px2]
    }
}

/// Exactly ten feature rows per sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceFeatures {
    pub rows: [FeatureRow; SELECTED_FRAMES],
}

impl SequenceFeatures {
    pub fn pooled(&self, pooling: Pooling) -> [f64; FEATURES] {
        let rows: &[FeatureRow] = match pooling {
            Pooling::Mean => &self.rows,
            Pooling::Last5 => &self.rows[SELECTED_FRAMES - 5..],
        };
        let mut acc = [0.0; FEATURES];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.as_array()) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a /= rows.len() as f64;
        }
        acc
    }
}

/// Select ten frames evenly and gather their modalities. A missing modality
/// on any selected frame is an error naming the frame.
pub fn extract_features(samples: &[FrameSample]) -> Result<SequenceFeatures, HardnessError> {
    let indices = select_indices(samples.len())?;
    let mut rows = [FeatureRow { force_n: 0.0, mean_displacement_px: 0.0, contact_area_px2: 0.0 }; SELECTED_FRAMES];
    for (slot, &frame) in rows.iter_mut().zip(indices.iter()) {
        let s = &samples[frame];
        let force = s.force_n.ok_or(HardnessError::MissingModality { frame, modality: "wrench" })?;
        let disp = s
            .mean_displacement_px
            .ok_or(HardnessError::MissingModality { frame, modality: "flow" })?;
        let area = s
            .contact_area_px2
            .ok_or(HardnessError::MissingModality { frame, modality: "shape" })?;
        if !(force.is_finite() && disp.is_finite() && area.is_finite()) {
            return Err(HardnessError::NonFinite);
        }
        *slot = FeatureRow { force_n: force, mean_displacement_px: disp, contact_area_px2: area };
    }
    Ok(SequenceFeatures { rows })
}

/// Logistic classifier over pooled, standardized sequence features.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardnessModel {
    pub weights: [f64; FEATURES],
    pub bias: f64,
    /// Standardization constants learned from the training set.
    pub feature_mean: [f64; FEATURES],
    pub feature_std: [f64; FEATURES],
    pub pooling: Pooling,
    pub epochs: usize,
    pub learning_rate: f64,
    pub final_loss: f64,
    pub seed: u64,
}

impl HardnessModel {
    fn standardize(&self, x: &[f64; FEATURES]) -> [f64; FEATURES] {
        let mut out = [0.0; FEATURES];
        for i in 0..FEATURES {
            out[i] = (x[i] - self.feature_mean[i]) / self.feature_std[i];
        }
        out
    }

    pub fn score(&self, feats: &SequenceFeatures) -> f64 {
        let x = self.standardize(&feats.pooled(self.pooling));
        let mut z = self.bias;
        for i in 0..FEATURES {
            z += self.weights[i] * x[i];
        }
        z
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub pooling: Pooling,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { learning_rate: 0.001, epochs: 3000, seed: 7, pooling: Pooling::Mean }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn label_value(class: HardnessClass) -> f64 {
    match class {
        HardnessClass::Soft => 0.0,
        HardnessClass::Hard => 1.0,
    }
}

/// Mean binary cross-entropy and its gradient in `[w0, w1, w2, bias]` over
/// standardized inputs.
pub fn loss_and_gradient(
    params: &[f64; FEATURES + 1],
    xs: &[[f64; FEATURES]],
    ys: &[f64],
) -> (f64, [f64; FEATURES + 1]) {
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut grad = [0.0; FEATURES + 1];
    for (x, &y) in xs.iter().zip(ys) {
        let mut z = params[FEATURES];
        for i in 0..FEATURES {
            z += params[i] * x[i];
        }
        let p = sigmoid(z);
        let eps = 1e-12;
        loss -= y * (p + eps).ln() + (1.0 - y) * (1.0 - p + eps).ln();
        let err = p - y;
        for i in 0..FEATURES {
            grad[i] += err * x[i];
        }
        grad[FEATURES] += err;
    }
    loss /= n;
    for g in grad.iter_mut() {
        *g /= n;
    }
    (loss, grad)
}

/// Deterministic full-batch gradient descent on the cross-entropy loss.
pub fn train(
    dataset: &[(SequenceFeatures, HardnessClass)],
    opts: &TrainOptions,
) -> Result<HardnessModel, HardnessError> {
    let has_soft = dataset.iter().any(|(_, c)| *c == HardnessClass::Soft);
    let has_hard = dataset.iter().any(|(_, c)| *c == HardnessClass::Hard);
    if !has_soft || !has_hard {
        return Err(HardnessError::SingleClass);
    }

    // Pool and standardize.
    let pooled: Vec<[f64; FEATURES]> = dataset.iter().map(|(f, _)| f.pooled(opts.pooling)).collect();
    let ys: Vec<f64> = dataset.iter().map(|(_, c)| label_value(*c)).collect();
    let n = pooled.len() as f64;
    let mut mean = [0.0; FEATURES];
    for x in &pooled {
        for i in 0..FEATURES {
            mean[i] += x[i];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut std = [0.0; FEATURES];
    for x in &pooled {
        for i in 0..FEATURES {
            std[i] += (x[i] - mean[i]).powi(2);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n).sqrt().max(1e-9);
    }
    let xs: Vec<[f64; FEATURES]> = pooled
        .iter()
        .map(|x| {
            let mut out = [0.0; FEATURES];
            for i in 0..FEATURES {
                out[i] = (x[i] - mean[i]) / std[i];
            }
            out
        })
        .collect();

    // Small seeded init keeps lr=0 observable and runs reproducible.
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let mut params = [0.0; FEATURES + 1];
    for p in params.iter_mut() {
        p.clone_from(&(rng.random_range(-0.01..0.01)));
    }

    let mut loss = f64::NAN;
    for _ in 0..opts.epochs {
        let (l, grad) = loss_and_gradient(&params, &xs, &ys);
        loss = l;
        for (p, g) in params.iter_mut().zip(grad) {
            *p -= opts.learning_rate * g;
        }
    }
    if loss.is_nan() {
        loss = loss_and_gradient(&params, &xs, &ys).0;
    }

    Ok(HardnessModel {
        weights: [params[0], params[1], params[2]],
        bias: params[FEATURES],
        feature_mean: mean,
        feature_std: std,
        pooling: opts.pooling,
        epochs: opts.epochs,
        learning_rate: opts.learning_rate,
        final_loss: loss,
        seed: opts.seed,
    })
}

/// Class and probability-of-hard by the 0.5 threshold.
pub fn classify(model: &HardnessModel, feats: &SequenceFeatures) -> (HardnessClass, f64) {
    let p = sigmoid(model.score(feats));
    let class = if p >= 0.5 { HardnessClass::Hard } else { HardnessClass::Soft };
    (class, p)
}

/// Accuracy, precision and recall for the hard class, plus the confusion
/// counts `[actual][predicted]` with soft = 0, hard = 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: [[usize; 2]; 2],
    pub mean_loss: f64,
    pub samples: usize,
}

pub fn evaluate(model: &HardnessModel, dataset: &[(SequenceFeatures, HardnessClass)]) -> Metrics {
    let mut confusion = [[0usize; 2]; 2];
    let mut loss = 0.0;
    for (f, c) in dataset {
        let (pred, p) = classify(model, f);
        let (a, b) = (label_value(*c) as usize, label_value(pred) as usize);
        confusion[a][b] += 1;
        let y = label_value(*c);
        let eps = 1e-12;
        loss -= y * (p + eps).ln() + (1.0 - y) * (1.0 - p + eps).ln();
    }
    let n = dataset.len().max(1);
    let correct = confusion[0][0] + confusion[1][1];
    let predicted_hard = confusion[0][1] + confusion[1][1];
    let actual_hard = confusion[1][0] + confusion[1][1];
    Metrics {
        accuracy: correct as f64 / n as f64,
        precision: if predicted_hard == 0 { 0.0 } else { confusion[1][1] as f64 / predicted_hard as f64 },
        recall: if actual_hard == 0 { 0.0 } else { confusion[1][1] as f64 / actual_hard as f64 },
        confusion,
        mean_loss: loss / n as f64,
        samples: n,
    }
}

/// Randomized scenario for one dataset sequence. Force amplitude and
/// geometry are independent of the class so hardness must be read from the
/// contact signature, not the load.
pub fn random_scenario(rng: &mut ChaCha12Rng, frames: usize, class: HardnessClass) -> ContactScenario {
    let fz = rng.random_range(2.0..9.0);
    let fx = rng.random_range(-0.8..0.8);
    let fy = rng.random_range(-0.8..0.8);
    let torque = Vector3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-4.0..4.0));
    let depth = rng.random_range(0.5..1.1);
    let radius = rng.random_range(3.5..6.0);
    let tilt = rng.random_range(0.0..0.2f64);
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let dir = Vector3::new(tilt.sin() * az.cos(), tilt.sin() * az.sin(), -tilt.cos());
    let compliance = match class {
        HardnessClass::Hard => rng.random_range(0.02..0.10),
        HardnessClass::Soft => rng.random_range(0.45..0.75),
    };
    ContactScenario::ramp(
        frames,
        Wrench::new(Vector3::new(fx, fy, fz), torque),
        depth,
        IndenterShape::Sphere { radius_mm: radius },
        dir,
        class,
        compliance,
    )
}

/// Render and process one sequence into features. Shape runs only on the
/// ten selected frames.
pub fn sequence_features(
    model: &SensorModel,
    cfg: &PipelineConfig,
    scenario: &ContactScenario,
    sequence_id: usize,
) -> Result<SequenceFeatures, HardnessError> {
    let (frames, _) = render_sequence(model, scenario)?;
    let selected = select_indices(frames.len())?;
    let parts = ProcessorParts::matching_model(model, cfg);
    let mut proc = FrameProcessor::new(parts);
    let mut samples = Vec::with_capacity(frames.len());
    for (k, frame) in frames.iter().enumerate() {
        let opts = ProcessOptions { shape: selected.contains(&k), ..Default::default() };
        let out = proc
            .process(frame, &opts)
            .map_err(|e| HardnessError::Pipeline { sequence: sequence_id, message: e.to_string() })?;
        samples.push(FrameSample::from_output(&out, cfg.shape.area_threshold_mm));
    }
    extract_features(&samples)
}

/// Outcome of the full desk-scale experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub model: HardnessModel,
    pub train_metrics: Metrics,
    pub test_metrics: Metrics,
    pub sequences: usize,
    pub frames_per_sequence: usize,
}

/// Simulate a labeled dataset (alternating classes), train on the leading
/// fraction, evaluate on the held-out remainder.
pub fn run_experiment(
    model: &SensorModel,
    cfg: &PipelineConfig,
    sequences: usize,
    frames_per_sequence: usize,
    seed: u64,
) -> Result<ExperimentReport, HardnessError> {
    use rayon::prelude::*;
    let scenarios: Vec<(ContactScenario, HardnessClass)> = {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..sequences)
            .map(|i| {
                let class = if i % 2 == 0 { HardnessClass::Soft } else { HardnessClass::Hard };
                (random_scenario(&mut rng, frames_per_sequence, class), class)
            })
            .collect()
    };
    let dataset: Vec<(SequenceFeatures, HardnessClass)> = scenarios
        .par_iter()
        .enumerate()
        .map(|(i, (sc, class))| sequence_features(model, cfg, sc, i).map(|f| (f, *class)))
        .collect::<Result<Vec<_>, _>>()?;

    let n_train = ((sequences as f64) * cfg.hardness.train_fraction).round() as usize;
    let (train_set, test_set) = dataset.split_at(n_train.clamp(1, sequences - 1));
    let opts = TrainOptions {
        learning_rate: cfg.hardness.learning_rate,
        epochs: cfg.hardness.epochs,
        seed: cfg.hardness.seed,
        pooling: cfg.hardness.pooling,
    };
    let trained = train(train_set, &opts)?;
    Ok(ExperimentReport {
        train_metrics: evaluate(&trained, train_set),
        test_metrics: evaluate(&trained, test_set),
        model: trained,
        sequences,
        frames_per_sequence,
    })
}
