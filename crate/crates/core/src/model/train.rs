//! BCE/Adam training loop for one member.
//!
//! The loop is single-threaded and fully seeded: epoch shuffles and dropout
//! masks come from one generator seeded by the training config, flip draws
//! and crop offsets from the augmentation seed. Two runs with identical
//! inputs produce identical parameters and records.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::net::{backward, forward, hwc_to_chw};
use super::{
    build_model, EpochStats, MemberConfig, ModelError, ModelParameters, TrainingConfig,
    TrainingRecord,
};
use crate::data::{augment_crop, augment_flip, AugmentationConfig, AugmentationSampler, Label};
use crate::imageops::{resize_bilinear, Image};
use crate::metrics;

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before any logarithm.
const CLAMP: f64 = 1e-7;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross entropy for one prediction: `-[y ln p + (1-y) ln(1-p)]`
/// with the probability clamped away from 0 and 1. Batch loss is the mean.
pub fn bce_loss(p: f64, y: bool) -> f64 {
    let p = p.clamp(CLAMP, 1.0 - CLAMP);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Adam with the standard bias-corrected moment rule. Moments are kept in
/// `f64`; parameters stay `f32`.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: &TrainingConfig, parameter_count: usize) -> Self {
        Adam {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            m: vec![0.0; parameter_count],
            v: vec![0.0; parameter_count],
            t: 0,
        }
    }

    /// One update step on the flat parameter vector.
    pub fn step(&mut self, params: &mut [f32], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let update = self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            params[i] = (f64::from(params[i]) - update) as f32;
        }
    }
}

/// One training example: a region view's pixels at the member's input
/// resolution, plus its label.
#[derive(Debug, Clone)]
pub struct LabeledView {
    pub pixels: Image,
    pub label: Label,
}

fn has_both_classes(views: &[LabeledView]) -> bool {
    views.iter().any(|v| v.label == Label::Bonafide)
        && views.iter().any(|v| v.label == Label::Attack)
}

fn apply_augmentation(
    view: &Image,
    augmentation: &AugmentationConfig,
    sampler: &mut AugmentationSampler,
    input_resolution: (usize, usize),
) -> Result<Image, ModelError> {
    let flipped = augment_flip(view, augmentation, sampler.flip_draw())?;
    let (h, w, _) = crate::imageops::dims(&flipped);
    let offsets = sampler.crop_offsets(augmentation, h, w);
    let cropped = augment_crop(&flipped, augmentation, offsets)?;
    let (ch, cw, _) = crate::imageops::dims(&cropped);
    Ok(if (ch, cw) == input_resolution {
        cropped
    } else {
        resize_bilinear(&cropped, input_resolution.0, input_resolution.1)
    })
}

/// Train one member on pre-extracted region views.
///
/// Each epoch runs seeded-shuffled mini-batches of flip/crop-augmented
/// views; each batch takes one Adam step on the mean BCE gradient. Dropout
/// is active only here — inference never drops units. Validation loss and
/// ACER (decision threshold 0.5) are recorded per epoch.
pub fn train_member(
    member: &MemberConfig,
    tconfig: &TrainingConfig,
    train: &[LabeledView],
    val: &[LabeledView],
    augmentation: &AugmentationConfig,
) -> Result<(ModelParameters<f32>, TrainingRecord), ModelError> {
    tconfig.validate()?;
    augmentation.validate()?;
    if train.is_empty() || !has_both_classes(train) {
        return Err(ModelError::SingleClassTrainingSet);
    }
    if val.is_empty() || !has_both_classes(val) {
        return Err(ModelError::SingleClassValidation);
    }

    let mut params = build_model(member, tconfig.seed)?;
    let count = member.backbone.parameter_count();
    let mut optimizer = Adam::new(tconfig, count);
    let mut loop_rng = ChaCha8Rng::seed_from_u64(tconfig.seed);
    let mut sampler = AugmentationSampler::new(augmentation.seed);
    let dropout_rate = member.backbone.dropout_rate;
    let units = member.backbone.dense_units;
    let resolution = member.backbone.input_resolution;

    let mut record = TrainingRecord::default();
    let mut indices: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..tconfig.epochs {
        indices.shuffle(&mut loop_rng);
        let mut epoch_loss = 0.0f64;

        for batch in indices.chunks(tconfig.batch_size) {
            let mut grad_sum = vec![0.0f64; count];
            let mut batch_loss = 0.0f64;
            for &idx in batch {
                let view = &train[idx];
                let augmented =
                    apply_augmentation(&view.pixels, augmentation, &mut sampler, resolution)?;
                let mask = if dropout_rate > 0.0 {
                    Some(Array1::from_shape_simple_fn(units, || {
                        if loop_rng.gen::<f64>() < dropout_rate {
                            0.0f32
                        } else {
                            1.0
                        }
                    }))
                } else {
                    None
                };
                let cache = forward(&params, &hwc_to_chw(&augmented), mask.as_ref())?;
                let p = sigmoid(f64::from(cache.logit));
                let y = view.label.is_bonafide();
                batch_loss += bce_loss(p, y);
                // d(BCE)/d(logit) = p - y when the clamp is inactive, zero
                // when the probability sits on a clamp boundary.
                let clamped = p.clamp(CLAMP, 1.0 - CLAMP);
                let d_logit = if (clamped - p).abs() > 0.0 {
                    0.0
                } else {
                    p - if y { 1.0 } else { 0.0 }
                };
                let out = backward(&params, &cache, (d_logit / batch.len() as f64) as f32);
                for (g, d) in grad_sum.iter_mut().zip(out.param_grad) {
                    *g += f64::from(d);
                }
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch });
            }
            epoch_loss += batch_loss * batch.len() as f64;
            let mut flat = params.flatten();
            optimizer.step(&mut flat, &grad_sum);
            params.assign_flat(&flat);
        }

        let train_loss = epoch_loss / train.len() as f64;
        let mut val_loss = 0.0f64;
        let mut scored = Vec::with_capacity(val.len());
        for view in val {
            let cache = forward(&params, &hwc_to_chw(&view.pixels), None)?;
            let p = sigmoid(f64::from(cache.logit));
            val_loss += bce_loss(p, view.label.is_bonafide());
            scored.push((p, view.label));
        }
        val_loss /= val.len() as f64;
        if !val_loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch });
        }
        let counts = metrics::confusion_from_scores(&scored, 0.5)
            .expect("validation scores are non-empty");
        let val_acer = metrics::acer(
            metrics::apcer(&counts).expect("validation has attacks"),
            metrics::bpcer(&counts).expect("validation has bonafide"),
        );
        record.epochs.push(EpochStats {
            train_loss,
            val_loss,
            val_acer,
        });
    }

    Ok((params, record))
}
