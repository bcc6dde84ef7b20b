//! Grad-CAM saliency over a member's convolutional feature maps.
//!
//! The class score is the logit for the bonafide target and the negated
//! logit for the attack target (the model has a single output neuron, so
//! attack evidence is negative logit evidence). Channel weights are the
//! spatial means of the score gradient over the tapped feature maps; the
//! map is `ReLU(sum_k alpha_k A_k)`, bilinearly upsampled to the input
//! resolution and max-normalized, with all-zero maps left as zeros.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::RegionView;
use crate::imageops::{dims, resize_bilinear, Image};
use crate::model::{
    backward, forward, hwc_to_chw, score_from_activation, ModelError, ModelParameters,
};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("alpha must be in [0, 1]")]
    BadAlpha,
    #[error("model too large for finite differences: {entries} activation entries (limit {limit})")]
    ModelTooLarge { entries: usize, limit: usize },
    #[error("conv block {layer} does not exist (model has {blocks})")]
    NoSuchLayer { layer: usize, blocks: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which scalar score the map explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradCamTarget {
    BonafideScore,
    AttackScore,
}

impl GradCamTarget {
    /// d(score)/d(logit): +1 for bonafide, -1 for attack.
    fn logit_sign(self) -> f64 {
        match self {
            GradCamTarget::BonafideScore => 1.0,
            GradCamTarget::AttackScore => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCamConfig {
    pub target: GradCamTarget,
    /// Conv block to tap; `None` means the final block.
    pub layer: Option<usize>,
}

impl Default for GradCamConfig {
    fn default() -> Self {
        GradCamConfig {
            target: GradCamTarget::AttackScore,
            layer: None,
        }
    }
}

/// A normalized saliency map at the member's input resolution.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub values: Array2<f32>,
    pub raw_max: f64,
    pub member_id: String,
    pub target: GradCamTarget,
}

fn resolve_layer(params: &ModelParameters<f32>, layer: Option<usize>) -> Result<usize, ExplainError> {
    let blocks = params.conv.len();
    let layer = layer.unwrap_or(blocks - 1);
    if layer >= blocks {
        return Err(ExplainError::NoSuchLayer { layer, blocks });
    }
    Ok(layer)
}

fn upsample_normalize(map: Array2<f32>, out_h: usize, out_w: usize) -> (Array2<f32>, f64) {
    let (fh, fw) = map.dim();
    let as_image = Array3::from_shape_fn((fh, fw, 1), |(r, c, _)| map[(r, c)]);
    let upsampled = resize_bilinear(&as_image, out_h, out_w);
    let mut values = Array2::from_shape_fn((out_h, out_w), |(r, c)| upsampled[(r, c, 0)]);
    let raw_max = values.iter().fold(0.0f32, |m, &v| m.max(v));
    if raw_max > 0.0 {
        values.mapv_inplace(|v| v / raw_max);
    }
    (values, f64::from(raw_max))
}

/// Compute the Grad-CAM map for one region view.
pub fn grad_cam(
    params: &ModelParameters<f32>,
    view: &RegionView,
    config: &GradCamConfig,
    member_id: &str,
) -> Result<SaliencyMap, ExplainError> {
    let layer = resolve_layer(params, config.layer)?;
    let input = hwc_to_chw(&view.pixels);
    let cache = forward(params, &input, None)?;
    let grads = backward(params, &cache, config.target.logit_sign() as f32);

    let activations = &cache.conv_post[layer];
    let activation_grads = &grads.activation_grads[layer];
    let (channels, fh, fw) = activations.dim();
    let spatial = (fh * fw) as f32;

    let mut map = Array2::<f32>::zeros((fh, fw));
    for ch in 0..channels {
        let alpha = activation_grads
            .index_axis(ndarray::Axis(0), ch)
            .sum()
            / spatial;
        for r in 0..fh {
            for c in 0..fw {
                map[(r, c)] += alpha * activations[(ch, r, c)];
            }
        }
    }
    map.mapv_inplace(|v| v.max(0.0));

    let (h, w) = params.backbone.input_resolution;
    let (values, raw_max) = upsample_normalize(map, h, w);
    Ok(SaliencyMap {
        values,
        raw_max,
        member_id: member_id.to_string(),
        target: config.target,
    })
}

/// Analytic gradient of the target score with respect to the post-ReLU
/// activations of `layer`, computed in f64. This is the quantity the
/// finite-difference oracle checks.
pub fn activation_gradients(
    params: &ModelParameters<f32>,
    view: &RegionView,
    target: GradCamTarget,
    layer: Option<usize>,
) -> Result<Array3<f64>, ExplainError> {
    let layer = resolve_layer(params, layer)?;
    let params64 = params.to_f64();
    let input = hwc_to_chw(&view.pixels).mapv(f64::from);
    let cache = forward(&params64, &input, None)?;
    let grads = backward(&params64, &cache, target.logit_sign());
    Ok(grads.activation_grads[layer].clone())
}

/// Central differences of the target score over the final-conv (or chosen)
/// activations: `(f(a + h) - f(a - h)) / 2h`, entry by entry, in f64.
/// Guarded to small models; this is a validation oracle, not a runtime
/// path.
pub fn finite_difference_gradient(
    params: &ModelParameters<f32>,
    view: &RegionView,
    target: GradCamTarget,
    step: f64,
    layer: Option<usize>,
) -> Result<Array3<f64>, ExplainError> {
    const LIMIT: usize = 10_000;
    assert!(step > 0.0, "step must be positive");
    let layer = resolve_layer(params, layer)?;
    let params64 = params.to_f64();
    let input = hwc_to_chw(&view.pixels).mapv(f64::from);
    let cache = forward(&params64, &input, None)?;
    let activations = cache.conv_post[layer].clone();
    let entries = activations.len();
    if entries > LIMIT {
        return Err(ExplainError::ModelTooLarge {
            entries,
            limit: LIMIT,
        });
    }

    let sign = target.logit_sign();
    let mut grad = Array3::zeros(activations.dim());
    let mut probe = activations.clone();
    for idx in 0..entries {
        let flat = probe.as_slice_mut().expect("standard layout");
        let original = flat[idx];
        flat[idx] = original + step;
        let up = sign * score_from_activation(&params64, layer, &probe);
        let flat = probe.as_slice_mut().expect("standard layout");
        flat[idx] = original - step;
        let down = sign * score_from_activation(&params64, layer, &probe);
        let flat = probe.as_slice_mut().expect("standard layout");
        flat[idx] = original;
        grad.as_slice_mut().expect("standard layout")[idx] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Blend a saliency map over a frame: per pixel,
/// `(1 - alpha * m) * frame + alpha * m * colormap(m)` with a fixed
/// blue-to-red colormap. The map is resized to the frame if needed.
pub fn overlay_heatmap(
    frame: &Image,
    map: &SaliencyMap,
    alpha: f64,
) -> Result<Image, ExplainError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ExplainError::BadAlpha);
    }
    let (h, w, c) = dims(frame);
    let values = if map.values.dim() == (h, w) {
        map.values.clone()
    } else {
        let (mh, mw) = map.values.dim();
        let as_image = Array3::from_shape_fn((mh, mw, 1), |(r, col, _)| map.values[(r, col)]);
        let resized = resize_bilinear(&as_image, h, w);
        Array2::from_shape_fn((h, w), |(r, col)| resized[(r, col, 0)])
    };
    let alpha = alpha as f32;
    let mut out = frame.clone();
    for r in 0..h {
        for col in 0..w {
            let m = values[(r, col)];
            let heat = [m, 0.0, 1.0 - m]; // blue (cold) to red (hot)
            for ch in 0..c {
                let hv = heat[ch.min(2)];
                out[(r, col, ch)] = (1.0 - alpha * m) * frame[(r, col, ch)] + alpha * m * hv;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{FaceBox, RegionKind};
    use crate::model::{build_model, BackboneConfig, ConvBlockSpec, MemberConfig};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_member(blocks: Vec<ConvBlockSpec>, units: usize, res: usize) -> MemberConfig {
        MemberConfig {
            member_id: "probe".into(),
            region: RegionKind::FullFrame,
            backbone: BackboneConfig {
                input_resolution: (res, res),
                conv_blocks: blocks,
                dense_units: units,
                dropout_rate: 0.0,
            },
        }
    }

    fn random_view(res: usize, seed: u64) -> RegionView {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RegionView {
            kind: RegionKind::FullFrame,
            pixels: Array3::from_shape_simple_fn((res, res, 3), || rng.gen_range(0.0f32..1.0)),
            provenance: FaceBox {
                row0: 0,
                col0: 0,
                row1: res,
                col1: res,
                confidence: 1.0,
            },
        }
    }

    #[test]
    fn single_channel_mean_score_reproduces_feature_map() {
        // Head wired so the score is exactly the spatial mean of A_0: the
        // map must be proportional to A_0, i.e. equal after normalization.
        let config = tiny_member(
            vec![ConvBlockSpec { out_channels: 1, kernel_size: 3, stride: 1 }],
            2,
            8,
        );
        let mut params = build_model(&config, 1).unwrap();
        // Positive kernel keeps the single feature map active and varied.
        params.conv[0].weight.mapv_inplace(|v| v.abs());
        params.hidden.weight.fill(0.0);
        params.hidden.weight[(0, 0)] = 1.0;
        params.hidden.bias.fill(0.0);
        params.output.weight.fill(0.0);
        params.output.weight[(0, 0)] = 1.0;
        params.output.bias[0] = 0.0;

        let view = random_view(8, 2);
        let map = grad_cam(
            &params,
            &view,
            &GradCamConfig { target: GradCamTarget::BonafideScore, layer: None },
            "probe",
        )
        .unwrap();

        // The map must equal A_0 itself, upsampled and max-normalized: the
        // gradient picks channel 0 with a positive weight and nothing else.
        let cache = forward(&params, &hwc_to_chw(&view.pixels), None).unwrap();
        let feature = cache.conv_post[0].index_axis(ndarray::Axis(0), 0).to_owned();
        assert!(feature.iter().any(|&v| v > 0.0));
        let as_image = Array3::from_shape_fn((6, 6, 1), |(r, c, _)| feature[(r, c)]);
        let upsampled = resize_bilinear(&as_image, 8, 8);
        let upmax = upsampled.iter().fold(0.0f32, |m, &v| m.max(v));
        for r in 0..8 {
            for c in 0..8 {
                let expected = upsampled[(r, c, 0)] / upmax;
                assert!(
                    (map.values[(r, c)] - expected).abs() < 1e-5,
                    "({r},{c}): {} vs {expected}",
                    map.values[(r, c)]
                );
            }
        }
    }

    #[test]
    fn zero_head_yields_zero_map() {
        let config = tiny_member(
            vec![ConvBlockSpec { out_channels: 2, kernel_size: 3, stride: 2 }],
            3,
            9,
        );
        let mut params = build_model(&config, 3).unwrap();
        params.output.weight.fill(0.0);
        let map = grad_cam(&params, &random_view(9, 4), &GradCamConfig::default(), "probe").unwrap();
        assert_eq!(map.raw_max, 0.0);
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn map_values_normalized_with_max_one() {
        let config = tiny_member(
            vec![ConvBlockSpec { out_channels: 4, kernel_size: 3, stride: 2 }],
            4,
            12,
        );
        let params = build_model(&config, 5).unwrap();
        for seed in 0..4 {
            let map =
                grad_cam(&params, &random_view(12, seed), &GradCamConfig::default(), "probe")
                    .unwrap();
            assert!(map.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            if map.raw_max > 0.0 {
                let max = map.values.iter().fold(0.0f32, |m, &v| m.max(v));
                assert_eq!(max, 1.0);
            }
        }
    }

    #[test]
    fn finite_differences_match_analytic_gradients() {
        let config = tiny_member(
            vec![
                ConvBlockSpec { out_channels: 2, kernel_size: 3, stride: 2 },
                ConvBlockSpec { out_channels: 3, kernel_size: 3, stride: 1 },
            ],
            4,
            11,
        );
        assert!(config.backbone.parameter_count() <= 500);
        let params = build_model(&config, 6).unwrap();
        for target in [GradCamTarget::BonafideScore, GradCamTarget::AttackScore] {
            for seed in 0..3u64 {
                let view = random_view(11, 100 + seed);
                let analytic = activation_gradients(&params, &view, target, None).unwrap();
                let numeric =
                    finite_difference_gradient(&params, &view, target, 1e-4, None).unwrap();
                let mut worst = 0.0f64;
                for (a, n) in analytic.iter().zip(numeric.iter()) {
                    let denom = a.abs().max(n.abs()).max(1e-6);
                    worst = worst.max((a - n).abs() / denom);
                }
                assert!(worst <= 1e-3, "target {target:?} seed {seed}: {worst}");
            }
        }
    }

    #[test]
    fn finite_differences_on_intermediate_layer() {
        let config = tiny_member(
            vec![
                ConvBlockSpec { out_channels: 2, kernel_size: 3, stride: 2 },
                ConvBlockSpec { out_channels: 2, kernel_size: 3, stride: 1 },
            ],
            3,
            11,
        );
        let params = build_model(&config, 9).unwrap();
        let view = random_view(11, 7);
        let analytic =
            activation_gradients(&params, &view, GradCamTarget::BonafideScore, Some(0)).unwrap();
        let numeric = finite_difference_gradient(
            &params,
            &view,
            GradCamTarget::BonafideScore,
            1e-4,
            Some(0),
        )
        .unwrap();
        let mut worst = 0.0f64;
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            worst = worst.max((a - n).abs() / denom);
        }
        assert!(worst <= 1e-3, "{worst}");
    }

    #[test]
    fn linear_score_finite_difference_is_exact() {
        // Nonnegative hidden weights and a positive bias keep every ReLU
        // active, so the score is linear in the activations and central
        // differences are exact up to rounding.
        let config = tiny_member(
            vec![ConvBlockSpec { out_channels: 2, kernel_size: 3, stride: 2 }],
            3,
            9,
        );
        let mut params = build_model(&config, 10).unwrap();
        params.hidden.weight.mapv_inplace(|v| v.abs());
        params.hidden.bias.fill(0.1);
        let view = random_view(9, 11);
        let analytic =
            activation_gradients(&params, &view, GradCamTarget::BonafideScore, None).unwrap();
        let numeric = finite_difference_gradient(
            &params,
            &view,
            GradCamTarget::BonafideScore,
            1e-4,
            None,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-12);
            assert!((a - n).abs() / denom <= 1e-9, "{a} vs {n}");
        }
    }

    #[test]
    fn zero_weight_head_zero_finite_difference() {
        let config = tiny_member(
            vec![ConvBlockSpec { out_channels: 2, kernel_size: 3, stride: 2 }],
            3,
            9,
        );
        let mut params = build_model(&config, 12).unwrap();
        params.output.weight.fill(0.0);
        let numeric = finite_difference_gradient(
            &params,
            &random_view(9, 13),
            GradCamTarget::BonafideScore,
            1e-4,
            None,
        )
        .unwrap();
        assert!(numeric.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn model_too_large_guard() {
        let config = tiny_member(
            vec![ConvBlockSpec { out_channels: 64, kernel_size: 3, stride: 1 }],
            4,
            32,
        );
        let params = build_model(&config, 14).unwrap();
        // 64 channels x 30 x 30 = 57600 entries > 10^4.
        assert!(matches!(
            finite_difference_gradient(
                &params,
                &random_view(32, 15),
                GradCamTarget::BonafideScore,
                1e-4,
                None,
            )
            .unwrap_err(),
            ExplainError::ModelTooLarge { .. }
        ));
    }

    #[test]
    fn head_scaling_leaves_normalized_map_unchanged() {
        let config = tiny_member(
            vec![ConvBlockSpec { out_channels: 3, kernel_size: 3, stride: 2 }],
            4,
            12,
        );
        let params = build_model(&config, 16).unwrap();
        let view = random_view(12, 17);
        let base = grad_cam(&params, &view, &GradCamConfig::default(), "probe").unwrap();
        let mut scaled = params.clone();
        let c = 3.5f32;
        scaled.output.weight.mapv_inplace(|v| v * c);
        scaled.output.bias.mapv_inplace(|v| v * c);
        let scaled_map = grad_cam(&scaled, &view, &GradCamConfig::default(), "probe").unwrap();
        assert!(base.raw_max > 0.0);
        assert!(
            (scaled_map.raw_max / base.raw_max - f64::from(c)).abs() < 1e-3,
            "raw max should scale by {c}"
        );
        for (a, b) in base.values.iter().zip(scaled_map.values.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn flip_symmetrized_model_is_flip_equivariant() {
        let config = tiny_member(
            vec![
                ConvBlockSpec { out_channels: 2, kernel_size: 3, stride: 1 },
                ConvBlockSpec { out_channels: 3, kernel_size: 3, stride: 1 },
            ],
            4,
            10,
        );
        let mut params = build_model(&config, 18).unwrap();
        for layer in &mut params.conv {
            let (o, i, kh, kw) = layer.weight.dim();
            let original = layer.weight.clone();
            for oo in 0..o {
                for ii in 0..i {
                    for r in 0..kh {
                        for c in 0..kw {
                            layer.weight[(oo, ii, r, c)] = (original[(oo, ii, r, c)]
                                + original[(oo, ii, r, kw - 1 - c)])
                                / 2.0;
                        }
                    }
                }
            }
        }
        let view = random_view(10, 19);
        let mut flipped_pixels = view.pixels.clone();
        flipped_pixels.invert_axis(ndarray::Axis(1));
        let flipped_view = RegionView {
            pixels: flipped_pixels,
            ..view.clone()
        };
        let map = grad_cam(&params, &view, &GradCamConfig::default(), "probe").unwrap();
        let flipped_map =
            grad_cam(&params, &flipped_view, &GradCamConfig::default(), "probe").unwrap();
        let (h, w) = map.values.dim();
        for r in 0..h {
            for c in 0..w {
                let a = map.values[(r, c)];
                let b = flipped_map.values[(r, w - 1 - c)];
                assert!((a - b).abs() < 1e-5, "({r},{c}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn overlay_alpha_zero_is_identity() {
        let frame = Array3::from_elem((6, 6, 3), 0.4f32);
        let map = SaliencyMap {
            values: Array2::from_elem((6, 6), 0.7f32),
            raw_max: 1.0,
            member_id: "m".into(),
            target: GradCamTarget::AttackScore,
        };
        assert_eq!(overlay_heatmap(&frame, &map, 0.0).unwrap(), frame);
    }

    #[test]
    fn overlay_zero_map_is_identity() {
        let frame = Array3::from_elem((5, 5, 3), 0.6f32);
        let map = SaliencyMap {
            values: Array2::zeros((5, 5)),
            raw_max: 0.0,
            member_id: "m".into(),
            target: GradCamTarget::AttackScore,
        };
        for alpha in [0.0, 0.5, 1.0] {
            assert_eq!(overlay_heatmap(&frame, &map, alpha).unwrap(), frame);
        }
    }

    #[test]
    fn overlay_hot_pixel_hits_red_endpoint() {
        let frame = Array3::from_elem((4, 4, 3), 0.5f32);
        let mut values = Array2::zeros((4, 4));
        values[(2, 1)] = 1.0f32;
        let map = SaliencyMap {
            values,
            raw_max: 1.0,
            member_id: "m".into(),
            target: GradCamTarget::AttackScore,
        };
        let out = overlay_heatmap(&frame, &map, 1.0).unwrap();
        // Pixel-scan oracle: the hot pixel is pure red, the rest untouched.
        for r in 0..4 {
            for c in 0..4 {
                if (r, c) == (2, 1) {
                    assert_eq!(
                        (out[(r, c, 0)], out[(r, c, 1)], out[(r, c, 2)]),
                        (1.0, 0.0, 0.0)
                    );
                } else {
                    for ch in 0..3 {
                        assert_eq!(out[(r, c, ch)], 0.5);
                    }
                }
            }
        }
    }

    #[test]
    fn overlay_bad_alpha_rejected() {
        let frame = Array3::from_elem((3, 3, 3), 0.5f32);
        let map = SaliencyMap {
            values: Array2::zeros((3, 3)),
            raw_max: 0.0,
            member_id: "m".into(),
            target: GradCamTarget::AttackScore,
        };
        assert!(matches!(
            overlay_heatmap(&frame, &map, 1.5).unwrap_err(),
            ExplainError::BadAlpha
        ));
    }
}
