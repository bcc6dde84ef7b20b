//! One ensemble member: a small CNN with a dropout-regularized dense head
//! and a single sigmoid logit, trained with binary cross entropy and Adam.
//!
//! Parameters are `f32` end to end — the checkpoint format stores the exact
//! training-time values, so save/load round-trips are bit-identical. The
//! forward and backward passes are generic over the float type; oracles
//! (gradient checks, Grad-CAM finite differences) run the same code in
//! `f64` from an exact cast of the `f32` parameters.

mod checkpoint;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{
    backward, forward, hwc_to_chw, score_from_activation, BackwardOutput, ForwardCache,
};
pub use train::{bce_loss, sigmoid, train_member, Adam, LabeledView};

use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::RegionKind;

/// Channels of every model input; region views are RGB.
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("conv strides collapse the spatial dims below 1x1 (block {block})")]
    SpatialCollapse { block: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("training set contains a single class")]
    SingleClassTrainingSet,
    #[error("validation set contains a single class")]
    SingleClassValidation,
    #[error("non-finite loss at epoch {epoch}; training aborted")]
    NonFiniteLoss { epoch: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint/config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// One convolution block: `out_channels` filters of `kernel_size`^2 at the
/// given stride, followed by ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

/// Architecture of a member backbone. The default keeps the network light:
/// three strided 3x3 blocks, global average pooling, one dense layer with
/// dropout, one output logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_resolution: (usize, usize),
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub dense_units: usize,
    pub dropout_rate: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_resolution: (128, 128),
            conv_blocks: vec![
                ConvBlockSpec { out_channels: 16, kernel_size: 3, stride: 2 },
                ConvBlockSpec { out_channels: 32, kernel_size: 3, stride: 2 },
                ConvBlockSpec { out_channels: 64, kernel_size: 3, stride: 2 },
            ],
            dense_units: 64,
            dropout_rate: 0.5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.conv_blocks.is_empty() {
            return Err(ModelError::InvalidConfig("need at least one conv block".into()));
        }
        if self.dense_units == 0 {
            return Err(ModelError::InvalidConfig("dense_units must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig("dropout_rate must be in [0, 1)".into()));
        }
        for (i, block) in self.conv_blocks.iter().enumerate() {
            if block.out_channels == 0 || block.kernel_size == 0 || block.stride == 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "conv block {i} has a zero field"
                )));
            }
        }
        self.feature_dims(self.conv_blocks.len() - 1)?;
        Ok(())
    }

    /// Spatial dims of the feature map after block `index` (valid padding).
    pub fn feature_dims(&self, index: usize) -> Result<(usize, usize), ModelError> {
        let (mut h, mut w) = self.input_resolution;
        for (i, block) in self.conv_blocks.iter().enumerate().take(index + 1) {
            if h < block.kernel_size || w < block.kernel_size {
                return Err(ModelError::SpatialCollapse { block: i });
            }
            h = (h - block.kernel_size) / block.stride + 1;
            w = (w - block.kernel_size) / block.stride + 1;
            if h == 0 || w == 0 {
                return Err(ModelError::SpatialCollapse { block: i });
            }
        }
        Ok((h, w))
    }

    /// Total trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let mut count = 0;
        let mut in_ch = INPUT_CHANNELS;
        for block in &self.conv_blocks {
            count += block.out_channels * in_ch * block.kernel_size * block.kernel_size
                + block.out_channels;
            in_ch = block.out_channels;
        }
        count += self.dense_units * in_ch + self.dense_units;
        count += self.dense_units + 1;
        count
    }
}

/// One member: a region binding, a backbone, and a unique id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberConfig {
    pub member_id: String,
    pub region: RegionKind,
    pub backbone: BackboneConfig,
}

/// Optimizer and loop settings. Adam defaults follow the usual
/// lr 1e-3, beta1 0.9, beta2 0.999, epsilon 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            epochs: 6,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.batch_size >= 1
            && self.epochs >= 1;
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(
                "training config out of range (lr > 0, betas in [0,1), epsilon > 0, batch_size >= 1, epochs >= 1)"
                    .into(),
            ))
        }
    }
}

/// Per-epoch training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acer: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub epochs: Vec<EpochStats>,
}

/// A member's bonafide probability for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberScore {
    pub member_id: String,
    pub p_bonafide: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<F> {
    /// `(out_channels, in_channels, k, k)`
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<F> {
    /// `(out, in)`
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

/// All trainable tensors of one member, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<F = f32> {
    pub backbone: BackboneConfig,
    pub conv: Vec<ConvLayer<F>>,
    pub hidden: DenseLayer<F>,
    pub output: DenseLayer<F>,
}

/// He-uniform initialization from an explicit seed: weights uniform in
/// `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`, biases zero. The draw order is
/// fixed, so identical config and seed give bit-identical parameters.
pub fn build_model(config: &MemberConfig, seed: u64) -> Result<ModelParameters<f32>, ModelError> {
    config.backbone.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |fan_in: usize| {
        let limit = (6.0 / fan_in as f64).sqrt();
        move |rng: &mut ChaCha8Rng| rng.gen_range(-limit..limit) as f32
    };

    let mut conv = Vec::with_capacity(config.backbone.conv_blocks.len());
    let mut in_ch = INPUT_CHANNELS;
    for block in &config.backbone.conv_blocks {
        let k = block.kernel_size;
        let fan_in = in_ch * k * k;
        let sample = draw(fan_in);
        let weight =
            Array4::from_shape_simple_fn((block.out_channels, in_ch, k, k), || sample(&mut rng));
        conv.push(ConvLayer {
            weight,
            bias: Array1::zeros(block.out_channels),
            stride: block.stride,
        });
        in_ch = block.out_channels;
    }

    let sample = draw(in_ch);
    let hidden_weight =
        Array2::from_shape_simple_fn((config.backbone.dense_units, in_ch), || sample(&mut rng));
    let sample = draw(config.backbone.dense_units);
    let output_weight =
        Array2::from_shape_simple_fn((1, config.backbone.dense_units), || sample(&mut rng));

    Ok(ModelParameters {
        backbone: config.backbone.clone(),
        conv,
        hidden: DenseLayer {
            weight: hidden_weight,
            bias: Array1::zeros(config.backbone.dense_units),
        },
        output: DenseLayer {
            weight: output_weight,
            bias: Array1::zeros(1),
        },
    })
}

impl<F: ndarray::NdFloat> ModelParameters<F> {
    /// All parameters in declaration order: each conv block's weight then
    /// bias, then the hidden and output dense layers.
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.backbone.parameter_count());
        for layer in &self.conv {
            out.extend(layer.weight.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out.extend(self.hidden.weight.iter().copied());
        out.extend(self.hidden.bias.iter().copied());
        out.extend(self.output.weight.iter().copied());
        out.extend(self.output.bias.iter().copied());
        out
    }

    /// Overwrite all parameters from a flat slice in declaration order.
    pub fn assign_flat(&mut self, flat: &[F]) {
        let mut cursor = 0;
        let mut take = |arr: &mut [F]| {
            arr.copy_from_slice(&flat[cursor..cursor + arr.len()]);
            cursor += arr.len();
        };
        for layer in &mut self.conv {
            take(layer.weight.as_slice_mut().expect("standard layout"));
            take(layer.bias.as_slice_mut().expect("standard layout"));
        }
        take(self.hidden.weight.as_slice_mut().expect("standard layout"));
        take(self.hidden.bias.as_slice_mut().expect("standard layout"));
        take(self.output.weight.as_slice_mut().expect("standard layout"));
        take(self.output.bias.as_slice_mut().expect("standard layout"));
        assert_eq!(cursor, flat.len(), "flat parameter length mismatch");
    }
}

impl ModelParameters<f32> {
    /// Exact cast used by the f64 oracle paths.
    pub fn to_f64(&self) -> ModelParameters<f64> {
        ModelParameters {
            backbone: self.backbone.clone(),
            conv: self
                .conv
                .iter()
                .map(|l| ConvLayer {
                    weight: l.weight.mapv(f64::from),
                    bias: l.bias.mapv(f64::from),
                    stride: l.stride,
                })
                .collect(),
            hidden: DenseLayer {
                weight: self.hidden.weight.mapv(f64::from),
                bias: self.hidden.bias.mapv(f64::from),
            },
            output: DenseLayer {
                weight: self.output.weight.mapv(f64::from),
                bias: self.output.bias.mapv(f64::from),
            },
        }
    }
}

/// Run a region view through a member in inference mode (dropout off).
pub fn predict_member(
    params: &ModelParameters<f32>,
    view: &crate::frame::RegionView,
    member_id: &str,
) -> Result<MemberScore, ModelError> {
    let input = hwc_to_chw(&view.pixels);
    let cache = forward(params, &input, None)?;
    Ok(MemberScore {
        member_id: member_id.to_string(),
        p_bonafide: sigmoid(f64::from(cache.logit)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> MemberConfig {
        MemberConfig {
            member_id: "tiny".into(),
            region: RegionKind::FullFrame,
            backbone: BackboneConfig {
                input_resolution: (8, 8),
                conv_blocks: vec![ConvBlockSpec { out_channels: 2, kernel_size: 3, stride: 2 }],
                dense_units: 4,
                dropout_rate: 0.0,
            },
        }
    }

    #[test]
    fn build_is_deterministic() {
        let config = tiny_config();
        let a = build_model(&config, 11).unwrap();
        let b = build_model(&config, 11).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = build_model(&config, 12).unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn spatial_collapse_detected() {
        let mut config = tiny_config();
        config.backbone.input_resolution = (128, 128);
        config.backbone.conv_blocks = (0..7)
            .map(|_| ConvBlockSpec { out_channels: 2, kernel_size: 3, stride: 2 })
            .collect();
        assert!(matches!(
            build_model(&config, 0).unwrap_err(),
            ModelError::SpatialCollapse { .. }
        ));
    }

    #[test]
    fn parameter_count_matches_flatten() {
        let config = tiny_config();
        let params = build_model(&config, 3).unwrap();
        assert_eq!(params.flatten().len(), config.backbone.parameter_count());
        // 2*3*3*3 + 2 conv, 4*2 + 4 hidden, 4 + 1 output
        assert_eq!(config.backbone.parameter_count(), 56 + 12 + 5);
    }

    #[test]
    fn flatten_assign_round_trip() {
        let config = tiny_config();
        let params = build_model(&config, 5).unwrap();
        let flat = params.flatten();
        let mut other = build_model(&config, 6).unwrap();
        other.assign_flat(&flat);
        assert_eq!(other.flatten(), flat);
    }

    #[test]
    fn default_backbone_validates() {
        BackboneConfig::default().validate().unwrap();
        assert_eq!(BackboneConfig::default().feature_dims(2).unwrap(), (15, 15));
    }
}
