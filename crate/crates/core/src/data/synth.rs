//! Deterministic synthetic data: procedural face-like images and the four
//! attack renderings derived from them.
//!
//! Each attack kind plants the visual cue its detector is expected to key
//! on: printed photos get a white paper border with a slight perspective
//! warp, digital photos a dark device bezel, replays a Gaussian blur plus a
//! periodic luminance pattern, and card masks a flat occluding patch with
//! hard edges over the upper image region. Identical config and source
//! always produce bit-identical output.

use std::fs;
use std::path::Path;

use nalgebra::{SMatrix, SVector};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    split_by_subject, AttackType, DataError, DatasetManifest, Label, Sample, Split,
};
use crate::imageops::{dims, gaussian_blur, resize_bilinear, save_image, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAttackConfig {
    pub kind: AttackType,
    pub seed: u64,
    /// White paper margin (printed photo) or bezel width (digital photo) as
    /// a fraction of each dimension.
    pub border_fraction: f64,
    /// Gaussian blur sigma for replay attacks.
    pub blur_sigma: f64,
    /// Fraction of the upper image replaced by the card-mask patch.
    pub occlusion_fraction: f64,
    /// Perspective corner jitter as a fraction of each dimension.
    pub warp_magnitude: f64,
    /// Amplitude of the replay moire-proxy luminance pattern.
    pub pattern_amplitude: f64,
}

impl SyntheticAttackConfig {
    pub fn new(kind: AttackType, seed: u64) -> Self {
        SyntheticAttackConfig {
            kind,
            seed,
            border_fraction: 0.1,
            blur_sigma: 1.8,
            occlusion_fraction: 0.28,
            warp_magnitude: 0.015,
            pattern_amplitude: 0.08,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=0.4).contains(&self.border_fraction) {
            return Err(DataError::InvalidConfig(
                "border_fraction must be in [0, 0.4]".into(),
            ));
        }
        if self.blur_sigma < 0.0 {
            return Err(DataError::InvalidConfig("blur_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction) {
            return Err(DataError::InvalidConfig(
                "occlusion_fraction must be in [0, 1]".into(),
            ));
        }
        if self.warp_magnitude < 0.0 {
            return Err(DataError::InvalidConfig(
                "warp_magnitude must be >= 0".into(),
            ));
        }
        if self.pattern_amplitude < 0.0 {
            return Err(DataError::InvalidConfig(
                "pattern_amplitude must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Output of [`synthesize_attack`]: the rendered image plus the label
/// metadata it must carry. The label is always `attack`.
#[derive(Debug, Clone)]
pub struct SynthesizedAttack {
    pub image: Image,
    pub label: Label,
    pub attack_type: AttackType,
}

/// Render a presentation attack from a bonafide source image.
pub fn synthesize_attack(
    source: &Image,
    config: &SyntheticAttackConfig,
) -> Result<SynthesizedAttack, DataError> {
    if source.is_empty() {
        return Err(DataError::EmptyImage);
    }
    config.validate()?;
    let image = match config.kind {
        AttackType::PrintedPhoto => render_printed_photo(source, config),
        AttackType::DigitalPhoto => render_digital_photo(source, config),
        AttackType::Replay => render_replay(source, config),
        AttackType::CardMask => render_card_mask(source, config),
    };
    Ok(SynthesizedAttack {
        image,
        label: Label::Attack,
        attack_type: config.kind,
    })
}

/// Homography mapping canvas (x, y) to source (u, v), solved from four
/// point correspondences by direct linear transform with `h33 = 1`.
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> [f64; 9] {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = from[i];
        let (u, v) = to[i];
        a[(2 * i, 0)] = x;
        a[(2 * i, 1)] = y;
        a[(2 * i, 2)] = 1.0;
        a[(2 * i, 6)] = -u * x;
        a[(2 * i, 7)] = -u * y;
        b[2 * i] = u;
        a[(2 * i + 1, 3)] = x;
        a[(2 * i + 1, 4)] = y;
        a[(2 * i + 1, 5)] = 1.0;
        a[(2 * i + 1, 6)] = -v * x;
        a[(2 * i + 1, 7)] = -v * y;
        b[2 * i + 1] = v;
    }
    let h = a.lu().solve(&b).expect("homography corners are in general position");
    [h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0]
}

fn sample_bilinear(image: &Image, y: f64, x: f64, ch: usize) -> f32 {
    let (h, w, _) = dims(image);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = (yc - y0 as f64) as f32;
    let fx = (xc - x0 as f64) as f32;
    let top = image[(y0, x0, ch)] + (image[(y0, x1, ch)] - image[(y0, x0, ch)]) * fx;
    let bot = image[(y1, x0, ch)] + (image[(y1, x1, ch)] - image[(y1, x0, ch)]) * fx;
    top + (bot - top) * fy
}

fn render_printed_photo(source: &Image, config: &SyntheticAttackConfig) -> Image {
    let (h, w, c) = dims(source);
    let bh = (config.border_fraction * h as f64).round() as usize;
    let bw = (config.border_fraction * w as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Inner rectangle corners on the canvas, jittered for the perspective
    // warp. The jitter is capped by the margin so the quad stays inside the
    // canvas.
    let cap = bh.min(bw) as f64;
    let mut jitter = |dim: usize| -> f64 {
        let amp = (config.warp_magnitude * dim as f64).min(cap);
        if amp > 0.0 {
            rng.gen_range(-amp..=amp)
        } else {
            0.0
        }
    };
    let x0 = bw as f64;
    let x1 = (w - 1 - bw) as f64;
    let y0 = bh as f64;
    let y1 = (h - 1 - bh) as f64;
    let quad = [
        (x0 + jitter(w), y0 + jitter(h)),
        (x1 + jitter(w), y0 + jitter(h)),
        (x1 + jitter(w), y1 + jitter(h)),
        (x0 + jitter(w), y1 + jitter(h)),
    ];
    let src_corners = [
        (0.0, 0.0),
        ((w - 1) as f64, 0.0),
        ((w - 1) as f64, (h - 1) as f64),
        (0.0, (h - 1) as f64),
    ];
    let hm = homography(&quad, &src_corners);

    let mut out = Array3::from_elem((h, w, c), 1.0f32); // white paper
    for r in 0..h {
        for col in 0..w {
            let (x, y) = (col as f64, r as f64);
            let denom = hm[6] * x + hm[7] * y + hm[8];
            let u = (hm[0] * x + hm[1] * y + hm[2]) / denom;
            let v = (hm[3] * x + hm[4] * y + hm[5]) / denom;
            if u >= 0.0 && u <= (w - 1) as f64 && v >= 0.0 && v <= (h - 1) as f64 {
                for ch in 0..c {
                    out[(r, col, ch)] = sample_bilinear(source, v, u, ch);
                }
            }
        }
    }
    out
}

fn render_digital_photo(source: &Image, config: &SyntheticAttackConfig) -> Image {
    let (h, w, c) = dims(source);
    let bh = ((config.border_fraction * h as f64).round() as usize).min(h / 2 - 1);
    let bw = ((config.border_fraction * w as f64).round() as usize).min(w / 2 - 1);
    const BEZEL: f32 = 0.06;
    const GLOW: f32 = 0.04;
    let inner = resize_bilinear(source, h - 2 * bh, w - 2 * bw);
    let mut out = Array3::from_elem((h, w, c), BEZEL);
    for r in 0..h - 2 * bh {
        for col in 0..w - 2 * bw {
            for ch in 0..c {
                // Screen glow: a mild uniform brightness lift.
                out[(r + bh, col + bw, ch)] = (inner[(r, col, ch)] + GLOW).min(1.0);
            }
        }
    }
    out
}

fn render_replay(source: &Image, config: &SyntheticAttackConfig) -> Image {
    let mut out = gaussian_blur(source, config.blur_sigma);
    if config.pattern_amplitude > 0.0 {
        let (h, w, c) = dims(&out);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let frequency = rng.gen_range(0.08..0.2); // cycles per pixel
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let fr = frequency * angle.sin();
        let fc = frequency * angle.cos();
        let amp = config.pattern_amplitude as f32;
        for r in 0..h {
            for col in 0..w {
                let s = (std::f64::consts::TAU * (fr * r as f64 + fc * col as f64) + phase)
                    .sin() as f32;
                for ch in 0..c {
                    out[(r, col, ch)] = (out[(r, col, ch)] + amp * s).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

fn render_card_mask(source: &Image, config: &SyntheticAttackConfig) -> Image {
    let (h, w, c) = dims(source);
    let occluded_rows = (config.occlusion_fraction * h as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let patch: f32 = rng.gen_range(0.15..0.85);
    let mut out = source.clone();
    for r in 0..occluded_rows.min(h) {
        for col in 0..w {
            for ch in 0..c {
                out[(r, col, ch)] = patch;
            }
        }
    }
    out
}

/// Appearance of one rendered subject: colors, head geometry, and the seed
/// for the per-pixel texture noise.
#[derive(Debug, Clone)]
pub struct FaceStyle {
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub background_top: [f32; 3],
    pub background_bottom: [f32; 3],
    /// Head center as a fraction of (height, width).
    pub center: (f64, f64),
    /// Head radii as a fraction of (height, width).
    pub radii: (f64, f64),
    pub noise_amplitude: f32,
    pub noise_seed: u64,
}

impl FaceStyle {
    /// Draw a subject identity: base colors and geometry.
    pub fn subject(rng: &mut ChaCha8Rng) -> FaceStyle {
        let skin_base = rng.gen_range(0.35..0.85);
        let hair_base = rng.gen_range(0.05..0.35);
        let bg = rng.gen_range(0.3..0.9);
        let bg2 = rng.gen_range(0.2..0.8);
        FaceStyle {
            skin: [
                skin_base,
                skin_base * rng.gen_range(0.72..0.85),
                skin_base * rng.gen_range(0.55..0.7),
            ],
            hair: [
                hair_base,
                hair_base * rng.gen_range(0.7..1.0),
                hair_base * rng.gen_range(0.5..0.9),
            ],
            background_top: [
                bg * rng.gen_range(0.8..1.0),
                bg * rng.gen_range(0.8..1.0),
                bg * rng.gen_range(0.8..1.0),
            ],
            background_bottom: [
                bg2 * rng.gen_range(0.8..1.0),
                bg2 * rng.gen_range(0.8..1.0),
                bg2 * rng.gen_range(0.8..1.0),
            ],
            center: (rng.gen_range(0.46..0.56), rng.gen_range(0.44..0.56)),
            radii: (rng.gen_range(0.26..0.34), rng.gen_range(0.18..0.26)),
            noise_amplitude: rng.gen_range(0.008..0.02),
            noise_seed: rng.gen(),
        }
    }

    /// Per-image variation of the same subject: small pose and lighting
    /// jitter plus a fresh noise seed.
    pub fn vary(&self, rng: &mut ChaCha8Rng) -> FaceStyle {
        let mut v = self.clone();
        v.center.0 = (v.center.0 + rng.gen_range(-0.03..0.03)).clamp(0.35, 0.65);
        v.center.1 = (v.center.1 + rng.gen_range(-0.03..0.03)).clamp(0.35, 0.65);
        let light = rng.gen_range(0.92..1.08f32);
        for c in 0..3 {
            v.skin[c] = (v.skin[c] * light).clamp(0.0, 1.0);
            v.background_top[c] = (v.background_top[c] * light).clamp(0.0, 1.0);
            v.background_bottom[c] = (v.background_bottom[c] * light).clamp(0.0, 1.0);
        }
        v.noise_seed = rng.gen();
        v
    }
}

/// Render a face-like bonafide image: gradient background, elliptical head
/// with a hair cap, eyes, a mouth line, and low-amplitude texture noise.
pub fn render_synthetic_face(style: &FaceStyle, h: usize, w: usize) -> Image {
    let mut out = Array3::zeros((h, w, 3));
    let (cy, cx) = (style.center.0 * h as f64, style.center.1 * w as f64);
    let (ry, rx) = (style.radii.0 * h as f64, style.radii.1 * w as f64);
    let hairline = cy - 0.45 * ry;
    let eye_y = cy - 0.05 * ry;
    let eye_dx = 0.45 * rx;
    let eye_r = (0.12 * rx).max(1.0);
    let mouth_y = cy + 0.55 * ry;

    let mut noise = ChaCha8Rng::seed_from_u64(style.noise_seed);
    for r in 0..h {
        let t = r as f32 / (h.max(2) - 1) as f32;
        for col in 0..w {
            let dy = (r as f64 - cy) / ry;
            let dx = (col as f64 - cx) / rx;
            let inside_head = dy * dy + dx * dx <= 1.0;
            let mut px = [0.0f32; 3];
            if inside_head {
                let base = if (r as f64) < hairline { style.hair } else { style.skin };
                // Vertical face shading.
                let shade = 1.0 - 0.12 * dy.abs() as f32;
                for c in 0..3 {
                    px[c] = base[c] * shade;
                }
                let in_eye = |ex: f64| {
                    let ddy = r as f64 - eye_y;
                    let ddx = col as f64 - ex;
                    ddy * ddy + ddx * ddx <= eye_r * eye_r
                };
                if in_eye(cx - eye_dx) || in_eye(cx + eye_dx) {
                    px = [0.08, 0.08, 0.1];
                }
                if (r as f64 - mouth_y).abs() < 1.0 && (col as f64 - cx).abs() < 0.4 * rx {
                    px = [0.45, 0.2, 0.2];
                }
            } else {
                for c in 0..3 {
                    px[c] = style.background_top[c]
                        + (style.background_bottom[c] - style.background_top[c]) * t;
                }
            }
            let n = (noise.gen::<f32>() - 0.5) * 2.0 * style.noise_amplitude;
            for c in 0..3 {
                out[(r, col, c)] = (px[c] + n).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Shape of a generated desk-scale dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthDatasetConfig {
    pub subjects: usize,
    pub bonafide_per_subject: usize,
    /// Attacks per subject for printed_photo, digital_photo, replay,
    /// card_mask in that order.
    pub attacks_per_kind: [usize; 4],
    pub image_height: usize,
    pub image_width: usize,
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        SynthDatasetConfig {
            subjects: 30,
            bonafide_per_subject: 6,
            attacks_per_kind: [4, 2, 2, 2],
            image_height: 96,
            image_width: 96,
            fractions: (0.6, 0.2, 0.2),
            seed: 0,
        }
    }
}

const BONAFIDE_SCENARIOS: [&str; 4] = [
    "indoor-mixed-lighting",
    "indoor-natural-light",
    "outdoor-background",
    "indoor-spectacles",
];

/// Generate a full synthetic dataset on disk: bonafide renders, attack
/// renders for all four kinds, PNG files under `dir/images`, and a
/// subject-disjoint manifest at `dir/manifest.jsonl`.
pub fn generate_dataset(dir: &Path, config: &SynthDatasetConfig) -> Result<DatasetManifest, DataError> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| DataError::Io {
        path: image_dir.display().to_string(),
        source: e,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = Vec::new();
    let (h, w) = (config.image_height, config.image_width);

    for subject_idx in 0..config.subjects {
        let subject_id = format!("s{subject_idx:03}");
        let style = FaceStyle::subject(&mut rng);

        for j in 0..config.bonafide_per_subject {
            let face = render_synthetic_face(&style.vary(&mut rng), h, w);
            let rel = format!("images/{subject_id}_bonafide_{j:02}.png");
            save_image(&face, &dir.join(&rel))?;
            samples.push(Sample {
                path: rel,
                label: Label::Bonafide,
                attack_type: None,
                subject_id: subject_id.clone(),
                scenario_id: BONAFIDE_SCENARIOS[j % BONAFIDE_SCENARIOS.len()].to_string(),
                split: Split::Train,
            });
        }

        for (kind_idx, kind) in AttackType::ALL.into_iter().enumerate() {
            for j in 0..config.attacks_per_kind[kind_idx] {
                let source = render_synthetic_face(&style.vary(&mut rng), h, w);
                let attack_config = SyntheticAttackConfig {
                    kind,
                    seed: rng.gen(),
                    border_fraction: rng.gen_range(0.08..0.16),
                    blur_sigma: rng.gen_range(1.4..2.6),
                    occlusion_fraction: rng.gen_range(0.2..0.35),
                    warp_magnitude: rng.gen_range(0.0..0.02),
                    pattern_amplitude: rng.gen_range(0.05..0.1),
                };
                let attack = synthesize_attack(&source, &attack_config)?;
                let rel = format!("images/{subject_id}_{kind}_{j:02}.png");
                save_image(&attack.image, &dir.join(&rel))?;
                samples.push(Sample {
                    path: rel,
                    label: attack.label,
                    attack_type: Some(attack.attack_type),
                    subject_id: subject_id.clone(),
                    scenario_id: kind.as_str().to_string(),
                    split: Split::Train,
                });
            }
        }
    }

    let split = split_by_subject(&samples, config.fractions, config.seed)?;
    let manifest = DatasetManifest::new(dir.to_path_buf(), split.samples)?;
    manifest.save(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
