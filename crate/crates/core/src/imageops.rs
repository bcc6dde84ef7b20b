//! Pixel-array primitives shared by the rest of the crate.
//!
//! Images are `H x W x C` arrays of `f32` in `[0, 1]`. Files on disk are
//! 8-bit RGB; the conversion to the unit interval happens once, at load.
//! Resampling is bilinear with corner-aligned sampling so that resizing an
//! image to its own dimensions is the identity, bit for bit.

use std::path::Path;

use image::ImageReader;
use ndarray::{Array2, Array3};
use thiserror::Error;

/// An `H x W x C` pixel array with values in `[0, 1]`.
pub type Image = Array3<f32>;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("failed to decode image {path}: {source}")]
    Decode {
        path: String,
        source: image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Encode {
        path: String,
        source: image::ImageError,
    },
}

/// Load a PNG or JPEG file as an RGB image normalized to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image, ImageIoError> {
    if !path.is_file() {
        return Err(ImageIoError::MissingFile(path.display().to_string()));
    }
    let decoded = ImageReader::open(path)
        .map_err(|_| ImageIoError::MissingFile(path.display().to_string()))?
        .decode()
        .map_err(|source| ImageIoError::Decode {
            path: path.display().to_string(),
            source,
        })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] = f32::from(px[c]) / 255.0;
        }
    }
    Ok(out)
}

/// Write an image as 8-bit RGB PNG. Values are clamped to `[0, 1]` and
/// rounded to the nearest of the 256 levels.
pub fn save_image(image: &Image, path: &Path) -> Result<(), ImageIoError> {
    let (h, w, c) = dims(image);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for col in 0..w {
            let px = |ch: usize| {
                let v = image[(r, col, ch.min(c - 1))];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            buf.put_pixel(col as u32, r as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path).map_err(|source| ImageIoError::Encode {
        path: path.display().to_string(),
        source,
    })
}

/// `(height, width, channels)` of an image.
pub fn dims(image: &Image) -> (usize, usize, usize) {
    let d = image.dim();
    (d.0, d.1, d.2)
}

/// Per-pixel luminance. Rec.601 weights for 3-channel images, the single
/// channel for grayscale, the channel mean otherwise.
pub fn luminance(image: &Image) -> Array2<f32> {
    let (h, w, c) = dims(image);
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for col in 0..w {
            out[(r, col)] = match c {
                1 => image[(r, col, 0)],
                3 => {
                    0.299 * image[(r, col, 0)]
                        + 0.587 * image[(r, col, 1)]
                        + 0.114 * image[(r, col, 2)]
                }
                _ => (0..c).map(|ch| image[(r, col, ch)]).sum::<f32>() / c as f32,
            };
        }
    }
    out
}

/// Mean luminance over the whole image.
pub fn mean_luminance(image: &Image) -> f64 {
    let luma = luminance(image);
    let n = luma.len().max(1);
    luma.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64
}

fn src_coord(out_idx: usize, out_len: usize, in_len: usize) -> f32 {
    // Corner-aligned: first and last output samples hit the first and last
    // input samples exactly.
    if out_len <= 1 || in_len <= 1 {
        0.0
    } else {
        out_idx as f32 * (in_len - 1) as f32 / (out_len - 1) as f32
    }
}

/// Bilinear resize with corner-aligned sampling.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w, c) = dims(image);
    assert!(out_h >= 1 && out_w >= 1, "output dims must be positive");
    if out_h == h && out_w == w {
        return image.clone();
    }
    let mut out = Array3::zeros((out_h, out_w, c));
    for r in 0..out_h {
        let sy = src_coord(r, out_h, h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f32;
        for col in 0..out_w {
            let sx = src_coord(col, out_w, w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f32;
            for ch in 0..c {
                let v00 = image[(y0, x0, ch)];
                let v01 = image[(y0, x1, ch)];
                let v10 = image[(y1, x0, ch)];
                let v11 = image[(y1, x1, ch)];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[(r, col, ch)] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Separable Gaussian blur with clamp-to-edge borders. `sigma == 0` is the
/// identity.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    if sigma == 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / denom).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / norm) as f32).collect();

    let (h, w, c) = dims(image);
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;

    let mut horiz = Array3::zeros((h, w, c));
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let x = clamp(col as i64 + ki as i64 - radius, w);
                    acc += kv * image[(r, x, ch)];
                }
                horiz[(r, col, ch)] = acc;
            }
        }
    }
    let mut out = Array3::zeros((h, w, c));
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let y = clamp(r as i64 + ki as i64 - radius, h);
                    acc += kv * horiz[(y, col, ch)];
                }
                out[(r, col, ch)] = acc;
            }
        }
    }
    out
}

/// Variance of the 4-neighbour Laplacian of the luminance channel, the
/// sharpness measure used by frame selection. Images smaller than 3x3 score
/// zero. The response is flip-invariant by symmetry of the kernel.
pub fn laplacian_variance(image: &Image) -> f64 {
    let luma = luminance(image);
    let (h, w) = luma.dim();
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut responses = Vec::with_capacity((h - 2) * (w - 2));
    for r in 1..h - 1 {
        for col in 1..w - 1 {
            let v = f64::from(luma[(r - 1, col)])
                + f64::from(luma[(r + 1, col)])
                + f64::from(luma[(r, col - 1)])
                + f64::from(luma[(r, col + 1)])
                - 4.0 * f64::from(luma[(r, col)]);
            responses.push(v);
        }
    }
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    responses.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn gray(h: usize, w: usize, v: f32) -> Image {
        Array3::from_elem((h, w, 1), v)
    }

    #[test]
    fn resize_to_same_dims_is_identity() {
        let img = Array3::from_shape_fn((5, 7, 3), |(r, c, ch)| (r * 31 + c * 7 + ch) as f32 / 130.0);
        let out = resize_bilinear(&img, 5, 7);
        assert_eq!(img, out);
    }

    #[test]
    fn resize_corner_alignment() {
        let img = Array3::from_shape_fn((2, 2, 1), |(r, c, _)| (2 * r + c) as f32);
        let out = resize_bilinear(&img, 3, 3);
        assert_eq!(out[(0, 0, 0)], 0.0);
        assert_eq!(out[(0, 2, 0)], 1.0);
        assert_eq!(out[(2, 0, 0)], 2.0);
        assert_eq!(out[(2, 2, 0)], 3.0);
        assert!((out[(1, 1, 0)] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let out = resize_bilinear(&gray(4, 4, 0.5), 9, 3);
        assert!(out.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn blur_zero_sigma_is_identity() {
        let img = Array3::from_shape_fn((4, 4, 3), |(r, c, ch)| (r + c + ch) as f32 / 10.0);
        assert_eq!(gaussian_blur(&img, 0.0), img);
    }

    #[test]
    fn blur_preserves_constant_image() {
        let out = gaussian_blur(&gray(6, 6, 0.3), 1.5);
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-5));
    }

    #[test]
    fn laplacian_variance_zero_on_constant() {
        assert_eq!(laplacian_variance(&gray(8, 8, 0.5)), 0.0);
    }

    #[test]
    fn laplacian_variance_drops_under_blur() {
        let img = Array3::from_shape_fn(
            (16, 16, 1),
            |(r, c, _)| if (r + c) % 2 == 0 { 1.0 } else { 0.0 },
        );
        let blurred = gaussian_blur(&img, 2.0);
        assert!(laplacian_variance(&img) > laplacian_variance(&blurred));
    }

    #[test]
    fn laplacian_variance_flip_invariant() {
        let img = Array3::from_shape_fn((9, 11, 1), |(r, c, _)| {
            ((r * 13 + c * 5) % 7) as f32 / 7.0
        });
        let mut flipped = img.clone();
        flipped.invert_axis(ndarray::Axis(1));
        let a = laplacian_variance(&img);
        let b = laplacian_variance(&flipped);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn image_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.png");
        let img = Array3::from_shape_fn((5, 6, 3), |(r, c, ch)| {
            ((r * 41 + c * 17 + ch * 5) % 256) as f32 / 255.0
        });
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn load_missing_file_errors() {
        let err = load_image(Path::new("/nonexistent/nope.png")).unwrap_err();
        assert!(matches!(err, ImageIoError::MissingFile(_)));
    }
}
