//! Forward and backward passes, generic over the float type.
//!
//! Convolutions run as im2col + GEMM. The backward pass returns both the
//! flat parameter gradient (declaration order, matching
//! `ModelParameters::flatten`) and the gradient of the scalar output with
//! respect to every conv block's post-ReLU activations — the latter is
//! what Grad-CAM consumes.

use ndarray::{Array1, Array2, Array3, NdFloat};

use super::{ModelError, ModelParameters, INPUT_CHANNELS};
use crate::imageops::Image;

/// Convert an `H x W x C` image into the `C x H x W` layout the network
/// expects.
pub fn hwc_to_chw(image: &Image) -> Array3<f32> {
    let (h, w, c) = crate::imageops::dims(image);
    Array3::from_shape_fn((c, h, w), |(ch, r, col)| image[(r, col, ch)])
}

/// Everything the backward pass needs, kept from one forward run.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    pub input: Array3<F>,
    /// Per conv block: im2col matrix of that block's input.
    pub columns: Vec<Array2<F>>,
    /// Per conv block: pre-activation `z`.
    pub conv_pre: Vec<Array3<F>>,
    /// Per conv block: post-ReLU activations.
    pub conv_post: Vec<Array3<F>>,
    pub pooled: Array1<F>,
    pub hidden_pre: Array1<F>,
    pub hidden_post: Array1<F>,
    pub hidden_dropped: Array1<F>,
    /// Keep/drop indicators; present only in training mode.
    pub dropout_mask: Option<Array1<F>>,
    pub dropout_scale: F,
    pub logit: F,
}

/// Gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct BackwardOutput<F> {
    /// Flat parameter gradient in declaration order.
    pub param_grad: Vec<F>,
    /// d(output) / d(conv_post[i]) for every conv block `i`.
    pub activation_grads: Vec<Array3<F>>,
}

fn conv_output_dims(h: usize, w: usize, k: usize, stride: usize) -> (usize, usize) {
    ((h - k) / stride + 1, (w - k) / stride + 1)
}

fn im2col<F: NdFloat>(input: &Array3<F>, k: usize, stride: usize) -> Array2<F> {
    let (c, h, w) = input.dim();
    let (oh, ow) = conv_output_dims(h, w, k, stride);
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    for ch in 0..c {
        for kr in 0..k {
            for kc in 0..k {
                let row = ch * k * k + kr * k + kc;
                for or in 0..oh {
                    let ir = or * stride + kr;
                    for oc in 0..ow {
                        cols[(row, or * ow + oc)] = input[(ch, ir, oc * stride + kc)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: NdFloat>(
    d_cols: &Array2<F>,
    shape: (usize, usize, usize),
    k: usize,
    stride: usize,
) -> Array3<F> {
    let (c, h, w) = shape;
    let (oh, ow) = conv_output_dims(h, w, k, stride);
    let mut out = Array3::zeros(shape);
    for ch in 0..c {
        for kr in 0..k {
            for kc in 0..k {
                let row = ch * k * k + kr * k + kc;
                for or in 0..oh {
                    let ir = or * stride + kr;
                    for oc in 0..ow {
                        out[(ch, ir, oc * stride + kc)] += d_cols[(row, or * ow + oc)];
                    }
                }
            }
        }
    }
    out
}

/// Run the network. `dropout_mask` enables training mode: the hidden
/// activations are multiplied by the 0/1 mask and rescaled by
/// `1 / (1 - dropout_rate)` (inverted dropout). Inference passes `None`.
pub fn forward<F: NdFloat>(
    params: &ModelParameters<F>,
    input: &Array3<F>,
    dropout_mask: Option<&Array1<F>>,
) -> Result<ForwardCache<F>, ModelError> {
    let (h, w) = params.backbone.input_resolution;
    if input.dim() != (INPUT_CHANNELS, h, w) {
        return Err(ModelError::ShapeMismatch {
            expected: format!("({INPUT_CHANNELS}, {h}, {w})"),
            got: format!("{:?}", input.dim()),
        });
    }

    let blocks = params.conv.len();
    let mut columns = Vec::with_capacity(blocks);
    let mut conv_pre = Vec::with_capacity(blocks);
    let mut conv_post = Vec::with_capacity(blocks);
    let mut current = input.clone();
    for layer in &params.conv {
        let (out_ch, in_ch, k, _) = layer.weight.dim();
        let (_, ih, iw) = current.dim();
        let (oh, ow) = conv_output_dims(ih, iw, k, layer.stride);
        let cols = im2col(&current, k, layer.stride);
        let w2 = layer
            .weight
            .view()
            .into_shape_with_order((out_ch, in_ch * k * k))
            .expect("conv weight is standard layout");
        let mut z2 = w2.dot(&cols);
        for (mut row, &b) in z2.rows_mut().into_iter().zip(layer.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let z = z2
            .into_shape_with_order((out_ch, oh, ow))
            .expect("gemm output is standard layout");
        let post = z.mapv(|v| if v > F::zero() { v } else { F::zero() });
        columns.push(cols);
        conv_pre.push(z);
        conv_post.push(post.clone());
        current = post;
    }

    let (c_last, fh, fw) = current.dim();
    let spatial = F::from(fh * fw).expect("spatial size fits in float");
    let pooled = Array1::from_shape_fn(c_last, |ch| {
        current.index_axis(ndarray::Axis(0), ch).sum() / spatial
    });

    let hidden_pre = params.hidden.weight.dot(&pooled) + &params.hidden.bias;
    let hidden_post = hidden_pre.mapv(|v| if v > F::zero() { v } else { F::zero() });
    let dropout_rate = params.backbone.dropout_rate;
    let (hidden_dropped, dropout_scale, dropout_mask) = match dropout_mask {
        Some(mask) => {
            let scale = F::from(1.0 / (1.0 - dropout_rate)).expect("dropout scale");
            ((&hidden_post * mask) * scale, scale, Some(mask.clone()))
        }
        None => (hidden_post.clone(), F::one(), None),
    };
    let logit = params.output.weight.row(0).dot(&hidden_dropped) + params.output.bias[0];

    Ok(ForwardCache {
        input: input.clone(),
        columns,
        conv_pre,
        conv_post,
        pooled,
        hidden_pre,
        hidden_post,
        hidden_dropped,
        dropout_mask,
        dropout_scale,
        logit,
    })
}

/// Backpropagate `d_logit` (the gradient of some scalar objective with
/// respect to the logit) through the cached forward pass.
pub fn backward<F: NdFloat>(
    params: &ModelParameters<F>,
    cache: &ForwardCache<F>,
    d_logit: F,
) -> BackwardOutput<F> {
    let blocks = params.conv.len();

    // Output layer.
    let d_output_w = cache.hidden_dropped.mapv(|v| v * d_logit);
    let d_output_b = d_logit;
    let mut d_hidden = params.output.weight.row(0).mapv(|v| v * d_logit);

    // Dropout and hidden ReLU.
    if let Some(mask) = &cache.dropout_mask {
        d_hidden = (&d_hidden * mask) * cache.dropout_scale;
    }
    let d_hidden_pre = Array1::from_shape_fn(d_hidden.len(), |i| {
        if cache.hidden_pre[i] > F::zero() {
            d_hidden[i]
        } else {
            F::zero()
        }
    });
    let d_hidden_w = {
        let mut m = Array2::zeros(params.hidden.weight.dim());
        for (i, &g) in d_hidden_pre.iter().enumerate() {
            for (j, &p) in cache.pooled.iter().enumerate() {
                m[(i, j)] = g * p;
            }
        }
        m
    };
    let d_pooled = params.hidden.weight.t().dot(&d_hidden_pre);

    // Global average pool spreads each channel gradient uniformly.
    let (c_last, fh, fw) = cache.conv_post[blocks - 1].dim();
    let spatial = F::from(fh * fw).expect("spatial size fits in float");
    let mut d_post = Array3::from_shape_fn((c_last, fh, fw), |(ch, _, _)| d_pooled[ch] / spatial);

    let mut activation_grads: Vec<Array3<F>> = vec![Array3::zeros((0, 0, 0)); blocks];
    let mut conv_grads: Vec<(Array2<F>, Array1<F>, usize, usize, usize)> =
        Vec::with_capacity(blocks);

    for i in (0..blocks).rev() {
        activation_grads[i] = d_post.clone();
        let layer = &params.conv[i];
        let (out_ch, in_ch, k, _) = layer.weight.dim();
        let (_, oh, ow) = cache.conv_pre[i].dim();
        let mut d_z = d_post;
        for (g, &pre) in d_z.iter_mut().zip(cache.conv_pre[i].iter()) {
            if pre <= F::zero() {
                *g = F::zero();
            }
        }
        let d_z2 = d_z
            .into_shape_with_order((out_ch, oh * ow))
            .expect("standard layout");
        let d_w2 = d_z2.dot(&cache.columns[i].t());
        let d_b = d_z2.sum_axis(ndarray::Axis(1));
        conv_grads.push((d_w2, d_b, out_ch, in_ch, k));

        let input_shape = if i == 0 {
            cache.input.dim()
        } else {
            cache.conv_post[i - 1].dim()
        };
        let w2 = layer
            .weight
            .view()
            .into_shape_with_order((out_ch, in_ch * k * k))
            .expect("standard layout");
        let d_cols = w2.t().dot(&d_z2);
        d_post = col2im(&d_cols, input_shape, k, layer.stride);
        // d_post now holds the gradient w.r.t. this block's input, which is
        // the previous block's post-activation (or the image for block 0).
    }

    conv_grads.reverse();
    let mut param_grad = Vec::with_capacity(params.backbone.parameter_count());
    for (d_w2, d_b, _, _, _) in &conv_grads {
        param_grad.extend(d_w2.iter().copied());
        param_grad.extend(d_b.iter().copied());
    }
    param_grad.extend(d_hidden_w.iter().copied());
    param_grad.extend(d_hidden_pre.iter().copied());
    param_grad.extend(d_output_w.iter().copied());
    param_grad.push(d_output_b);

    BackwardOutput {
        param_grad,
        activation_grads,
    }
}

/// Evaluate the logit as a function of the post-ReLU activations of conv
/// block `layer`: run the remaining conv blocks, pool, and apply the dense
/// head with dropout disabled. This is the function the finite-difference
/// oracle perturbs.
pub fn score_from_activation<F: NdFloat>(
    params: &ModelParameters<F>,
    layer: usize,
    activation: &Array3<F>,
) -> F {
    let mut current = activation.clone();
    for conv in params.conv.iter().skip(layer + 1) {
        let (out_ch, in_ch, k, _) = conv.weight.dim();
        let (_, ih, iw) = current.dim();
        let (oh, ow) = conv_output_dims(ih, iw, k, conv.stride);
        let cols = im2col(&current, k, conv.stride);
        let w2 = conv
            .weight
            .view()
            .into_shape_with_order((out_ch, in_ch * k * k))
            .expect("standard layout");
        let mut z2 = w2.dot(&cols);
        for (mut row, &b) in z2.rows_mut().into_iter().zip(conv.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        current = z2
            .into_shape_with_order((out_ch, oh, ow))
            .expect("standard layout")
            .mapv(|v| if v > F::zero() { v } else { F::zero() });
    }
    let (c_last, fh, fw) = current.dim();
    let spatial = F::from(fh * fw).expect("spatial size fits in float");
    let pooled = Array1::from_shape_fn(c_last, |ch| {
        current.index_axis(ndarray::Axis(0), ch).sum() / spatial
    });
    let hidden_pre = params.hidden.weight.dot(&pooled) + &params.hidden.bias;
    let hidden_post = hidden_pre.mapv(|v| if v > F::zero() { v } else { F::zero() });
    params.output.weight.row(0).dot(&hidden_post) + params.output.bias[0]
}
