//! Frame quality selection and region-view extraction.
//!
//! A selfie video is a directory of frames; the best frame is the argmax of
//! a weighted quality score (sharpness, exposure centering, face presence).
//! The chosen frame is cut into the four region views that feed the
//! ensemble members. Face location is a pluggable interface with a
//! deterministic center-box default so the core stays dependency-free.

use std::fmt;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageops::{
    self, dims, laplacian_variance, mean_luminance, resize_bilinear, Image,
};

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("video has no frames")]
    EmptyVideo,
    #[error("frames disagree on dimensions: {0}")]
    DimensionMismatch(String),
    #[error("quality weights must be nonnegative and sum to 1")]
    BadWeights,
    #[error("no face found in frame")]
    NoFaceFound,
    #[error("invalid face box [{row0}, {row1}) x [{col0}, {col1}) for {height}x{width} frame")]
    InvalidFaceBox {
        row0: usize,
        row1: usize,
        col0: usize,
        col1: usize,
        height: usize,
        width: usize,
    },
    #[error("face box exceeds frame bounds")]
    BoxOutOfBounds,
    #[error("band_fraction must be in (0, 0.5]")]
    BadBandFraction,
    #[error("frame is empty")]
    EmptyFrame,
    #[error(transparent)]
    ImageIo(#[from] imageops::ImageIoError),
}

/// An ordered stack of same-sized frames from one source video.
#[derive(Debug, Clone)]
pub struct VideoFrames {
    pub frames: Vec<Image>,
    pub source_id: String,
}

impl VideoFrames {
    pub fn new(frames: Vec<Image>, source_id: impl Into<String>) -> Result<Self, FrameError> {
        if frames.is_empty() {
            return Err(FrameError::EmptyVideo);
        }
        let first = frames[0].dim();
        for (i, frame) in frames.iter().enumerate() {
            if frame.dim() != first {
                return Err(FrameError::DimensionMismatch(format!(
                    "frame 0 is {first:?}, frame {i} is {:?}",
                    frame.dim()
                )));
            }
        }
        Ok(VideoFrames {
            frames,
            source_id: source_id.into(),
        })
    }

    /// Load a video from a directory of image files (`frame_000000.png`
    /// ascending); lexicographic file order defines the frame index.
    pub fn from_directory(dir: &Path) -> Result<Self, FrameError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|_| FrameError::EmptyVideo)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png") | Some("jpg") | Some("jpeg")
                )
            })
            .collect();
        paths.sort();
        let frames = paths
            .iter()
            .map(|p| imageops::load_image(p))
            .collect::<Result<Vec<_>, _>>()?;
        VideoFrames::new(frames, dir.display().to_string())
    }
}

/// Half-open pixel bounds of a detected face, plus detector confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
    pub confidence: f64,
}

impl FaceBox {
    /// Validate bounds against the frame; adapter output passes through
    /// here so invariant violations are rejected at the boundary.
    pub fn checked(
        row0: usize,
        col0: usize,
        row1: usize,
        col1: usize,
        confidence: f64,
        height: usize,
        width: usize,
    ) -> Result<Self, FrameError> {
        if row0 < row1 && row1 <= height && col0 < col1 && col1 <= width && (0.0..=1.0).contains(&confidence)
        {
            Ok(FaceBox {
                row0,
                col0,
                row1,
                col1,
                confidence,
            })
        } else {
            Err(FrameError::InvalidFaceBox {
                row0,
                row1,
                col0,
                col1,
                height,
                width,
            })
        }
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }
}

/// Adapter contract for face detectors: one frame in, a validated box out.
pub trait FaceLocator {
    fn locate(&self, frame: &Image) -> Result<FaceBox, FrameError>;
}

/// Deterministic default locator: the centered box spanning the middle 50%
/// of each dimension, confidence 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct CenterBoxLocator;

impl FaceLocator for CenterBoxLocator {
    fn locate(&self, frame: &Image) -> Result<FaceBox, FrameError> {
        let (h, w, _) = dims(frame);
        if h == 0 || w == 0 {
            return Err(FrameError::EmptyFrame);
        }
        let row0 = h / 4;
        let col0 = w / 4;
        let row1 = (3 * h / 4).max(row0 + 1).min(h);
        let col1 = (3 * w / 4).max(col0 + 1).min(w);
        FaceBox::checked(row0, col0, row1, col1, 1.0, h, w)
    }
}

/// Convenience entry point for the default locator.
pub fn locate_face(frame: &Image) -> Result<FaceBox, FrameError> {
    CenterBoxLocator.locate(frame)
}

/// Nonnegative quality weights summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityWeights {
    pub sharpness: f64,
    pub exposure: f64,
    pub face_presence: f64,
}

impl Default for QualityWeights {
    fn default() -> Self {
        QualityWeights {
            sharpness: 0.5,
            exposure: 0.25,
            face_presence: 0.25,
        }
    }
}

impl QualityWeights {
    pub fn validate(&self) -> Result<(), FrameError> {
        let ok = self.sharpness >= 0.0
            && self.exposure >= 0.0
            && self.face_presence >= 0.0
            && (self.sharpness + self.exposure + self.face_presence - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(FrameError::BadWeights)
        }
    }
}

/// Per-frame quality breakdown. `total` mixes the squashed sharpness
/// (`s / (1 + s)`, so the unbounded Laplacian variance becomes comparable
/// with the unit-interval terms), exposure centering, and face presence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameQualityScore {
    pub sharpness: f64,
    pub exposure: f64,
    pub face_presence: f64,
    pub total: f64,
}

impl fmt::Display for FrameQualityScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "sharpness={:.6} exposure={:.6} face_presence={:.6} total={:.6}",
            self.sharpness, self.exposure, self.face_presence, self.total
        )
    }
}

/// Score one frame: Laplacian-variance sharpness, exposure centering
/// (`1 - |mean luma - 0.5| / 0.5`), and the locator's confidence.
pub fn score_frame_quality(
    frame: &Image,
    locator: &dyn FaceLocator,
    weights: &QualityWeights,
) -> Result<FrameQualityScore, FrameError> {
    if frame.is_empty() {
        return Err(FrameError::EmptyFrame);
    }
    weights.validate()?;
    let sharpness = laplacian_variance(frame);
    let exposure = 1.0 - (mean_luminance(frame) - 0.5).abs() / 0.5;
    let face_presence = match locator.locate(frame) {
        Ok(face) => face.confidence,
        Err(FrameError::NoFaceFound) => 0.0,
        Err(e) => return Err(e),
    };
    let sharpness_norm = sharpness / (1.0 + sharpness);
    let total = weights.sharpness * sharpness_norm
        + weights.exposure * exposure
        + weights.face_presence * face_presence;
    Ok(FrameQualityScore {
        sharpness,
        exposure,
        face_presence,
        total,
    })
}

/// Argmax of the per-frame quality total; ties break to the lowest index.
pub fn select_best_frame(
    video: &VideoFrames,
    locator: &dyn FaceLocator,
    weights: &QualityWeights,
) -> Result<(usize, FrameQualityScore), FrameError> {
    if video.frames.is_empty() {
        return Err(FrameError::EmptyVideo);
    }
    let mut best: Option<(usize, FrameQualityScore)> = None;
    for (i, frame) in video.frames.iter().enumerate() {
        let score = score_frame_quality(frame, locator, weights)?;
        let better = match &best {
            None => true,
            Some((_, b)) => score.total > b.total,
        };
        if better {
            best = Some((i, score));
        }
    }
    Ok(best.expect("non-empty video"))
}

/// The four region views, one per ensemble member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    FullFrame,
    Face,
    Background,
    FaceBand,
}

impl RegionKind {
    pub const ALL: [RegionKind; 4] = [
        RegionKind::FullFrame,
        RegionKind::Face,
        RegionKind::Background,
        RegionKind::FaceBand,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegionKind::FullFrame => "full_frame",
            RegionKind::Face => "face",
            RegionKind::Background => "background",
            RegionKind::FaceBand => "face_band",
        }
    }
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A region crop resized to a member's input resolution, with the face box
/// it was derived from.
#[derive(Debug, Clone)]
pub struct RegionView {
    pub kind: RegionKind,
    pub pixels: Image,
    pub provenance: FaceBox,
}

/// Pixel value used to blank out neutralized regions: mid-gray carries no
/// information under the `[0, 1]` normalization.
pub const NEUTRAL_FILL: f32 = 0.5;

/// Cut one region view out of a frame and resize it to `out_resolution`.
///
/// `full_frame` resizes the whole frame; `face` resizes the box crop;
/// `background` neutralizes the box and resizes the frame; `face_band`
/// crops the box dilated outward by `band_fraction` of its size with the
/// inner box neutralized, then resizes.
pub fn extract_region(
    frame: &Image,
    face: &FaceBox,
    kind: RegionKind,
    out_resolution: (usize, usize),
    band_fraction: f64,
) -> Result<RegionView, FrameError> {
    let (h, w, _) = dims(frame);
    if frame.is_empty() {
        return Err(FrameError::EmptyFrame);
    }
    if face.row1 > h || face.col1 > w || face.row0 >= face.row1 || face.col0 >= face.col1 {
        return Err(FrameError::BoxOutOfBounds);
    }
    if !(band_fraction > 0.0 && band_fraction <= 0.5) {
        return Err(FrameError::BadBandFraction);
    }
    let (out_h, out_w) = out_resolution;
    let pixels = match kind {
        RegionKind::FullFrame => resize_bilinear(frame, out_h, out_w),
        RegionKind::Face => {
            let crop = crop(frame, face.row0, face.col0, face.row1, face.col1);
            resize_bilinear(&crop, out_h, out_w)
        }
        RegionKind::Background => {
            let mut masked = frame.clone();
            neutralize(&mut masked, face.row0, face.col0, face.row1, face.col1);
            resize_bilinear(&masked, out_h, out_w)
        }
        RegionKind::FaceBand => {
            let dr = (band_fraction * face.height() as f64).round() as usize;
            let dc = (band_fraction * face.width() as f64).round() as usize;
            let r0 = face.row0.saturating_sub(dr);
            let c0 = face.col0.saturating_sub(dc);
            let r1 = (face.row1 + dr).min(h);
            let c1 = (face.col1 + dc).min(w);
            let mut band = crop(frame, r0, c0, r1, c1);
            neutralize(
                &mut band,
                face.row0 - r0,
                face.col0 - c0,
                face.row1 - r0,
                face.col1 - c0,
            );
            resize_bilinear(&band, out_h, out_w)
        }
    };
    Ok(RegionView {
        kind,
        pixels,
        provenance: *face,
    })
}

fn crop(frame: &Image, r0: usize, c0: usize, r1: usize, c1: usize) -> Image {
    let (_, _, channels) = dims(frame);
    let mut out = Array3::zeros((r1 - r0, c1 - c0, channels));
    for r in r0..r1 {
        for c in c0..c1 {
            for ch in 0..channels {
                out[(r - r0, c - c0, ch)] = frame[(r, c, ch)];
            }
        }
    }
    out
}

fn neutralize(frame: &mut Image, r0: usize, c0: usize, r1: usize, c1: usize) {
    let (_, _, channels) = dims(frame);
    for r in r0..r1 {
        for c in c0..c1 {
            for ch in 0..channels {
                frame[(r, c, ch)] = NEUTRAL_FILL;
            }
        }
    }
}
