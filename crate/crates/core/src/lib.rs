//! Face presentation-attack detection toolkit.
//!
//! The pipeline: select the best frame from a selfie video, cut it into
//! region views (full frame, face, background, face band), score each view
//! with a small CNN binary classifier, aggregate the member scores into a
//! bonafide/attack verdict, evaluate with APCER/BPCER/ACER and ROC/PR
//! curves, and explain member decisions with Grad-CAM saliency maps.
//!
//! All randomness is explicitly seeded and every operation is deterministic
//! given its inputs, so runs are reproducible bit for bit.

pub mod data;
pub mod ensemble;
pub mod explain;
pub mod frame;
pub mod imageops;
pub mod metrics;
pub mod model;

pub use data::{AttackType, DatasetManifest, Label, Sample, Split};
pub use ensemble::{AggregationRule, EnsembleConfig, EnsembleDecision};
pub use frame::{FaceBox, FrameQualityScore, RegionKind, RegionView};
pub use imageops::Image;
pub use metrics::{ConfusionCounts, CurvePoint, MetricsReport};
pub use model::{BackboneConfig, MemberConfig, MemberScore, TrainingConfig};
