//! Member binding, score aggregation, threshold calibration, and the full
//! frame -> regions -> members -> verdict inference pipeline.
//!
//! A trained ensemble lives on disk as a bundle directory: `ensemble.json`
//! (config including the aggregation rule and its threshold) plus one
//! checkpoint subdirectory per member id.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AugmentationConfig, DataError, DatasetManifest, Label, Sample, Split};
use crate::frame::{
    extract_region, select_best_frame, FaceBox, FaceLocator, FrameError, FrameQualityScore,
    QualityWeights, RegionView, VideoFrames,
};
use crate::imageops::{load_image, Image};
use crate::metrics::{self, MetricsError};
use crate::model::{
    load_checkpoint, predict_member, save_checkpoint, train_member, LabeledView, MemberConfig,
    MemberScore, ModelError, ModelParameters, TrainingConfig, TrainingRecord,
};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("no member scores to aggregate")]
    EmptyScores,
    #[error("majority vote needs an odd member count")]
    EvenMajority,
    #[error("validation scores contain a single class")]
    SingleClassValidation,
    #[error("invalid ensemble config: {0}")]
    InvalidConfig(String),
    #[error("malformed bundle: {0}")]
    MalformedBundle(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EnsembleError + '_ {
    move |source| EnsembleError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// How member scores become one verdict. `threshold` is the bonafide
/// acceptance cut on the aggregate; `veto_floor` lets any single member
/// force an attack verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregationRule {
    MeanProbability { threshold: f64 },
    MajorityVote { threshold: f64 },
    AttackVeto { threshold: f64, veto_floor: f64 },
}

impl AggregationRule {
    pub fn threshold(&self) -> f64 {
        match *self {
            AggregationRule::MeanProbability { threshold }
            | AggregationRule::MajorityVote { threshold }
            | AggregationRule::AttackVeto { threshold, .. } => threshold,
        }
    }

    pub fn with_threshold(self, threshold: f64) -> Self {
        match self {
            AggregationRule::MeanProbability { .. } => {
                AggregationRule::MeanProbability { threshold }
            }
            AggregationRule::MajorityVote { .. } => AggregationRule::MajorityVote { threshold },
            AggregationRule::AttackVeto { veto_floor, .. } => {
                AggregationRule::AttackVeto { threshold, veto_floor }
            }
        }
    }

    pub fn validate(&self, member_count: usize) -> Result<(), EnsembleError> {
        let t = self.threshold();
        if !(0.0..=1.0).contains(&t) {
            return Err(EnsembleError::InvalidConfig(
                "threshold must be in [0, 1]".into(),
            ));
        }
        if let AggregationRule::AttackVeto { veto_floor, .. } = *self {
            if !(0.0 < veto_floor && veto_floor < 1.0) {
                return Err(EnsembleError::InvalidConfig(
                    "veto_floor must be in (0, 1)".into(),
                ));
            }
        }
        if matches!(self, AggregationRule::MajorityVote { .. }) && member_count % 2 == 0 {
            return Err(EnsembleError::EvenMajority);
        }
        Ok(())
    }
}

impl Default for AggregationRule {
    fn default() -> Self {
        AggregationRule::MeanProbability { threshold: 0.5 }
    }
}

/// Members (one per region) plus the aggregation rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub members: Vec<MemberConfig>,
    pub rule: AggregationRule,
}

impl EnsembleConfig {
    /// The default four-member ensemble: one member per region kind, all
    /// sharing one backbone, ids named after their regions.
    pub fn default_four_member(backbone: crate::model::BackboneConfig) -> Self {
        let members = crate::frame::RegionKind::ALL
            .into_iter()
            .map(|region| MemberConfig {
                member_id: region.as_str().to_string(),
                region,
                backbone: backbone.clone(),
            })
            .collect();
        EnsembleConfig {
            members,
            rule: AggregationRule::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.members.len() < 2 {
            return Err(EnsembleError::InvalidConfig(
                "an ensemble needs at least two members".into(),
            ));
        }
        let ids: BTreeSet<&str> = self.members.iter().map(|m| m.member_id.as_str()).collect();
        if ids.len() != self.members.len() {
            return Err(EnsembleError::InvalidConfig(
                "member ids must be distinct".into(),
            ));
        }
        let regions: BTreeSet<_> = self.members.iter().map(|m| m.region).collect();
        if regions.len() != self.members.len() {
            return Err(EnsembleError::InvalidConfig(
                "each member must bind a distinct region".into(),
            ));
        }
        for member in &self.members {
            member.backbone.validate()?;
        }
        self.rule.validate(self.members.len())
    }
}

/// The aggregated outcome for one presentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub member_scores: Vec<MemberScore>,
    pub aggregate: f64,
    pub verdict: Label,
    pub rule_used: AggregationRule,
}

/// Combine member scores under the rule.
///
/// Mean: aggregate is the arithmetic mean, bonafide iff it reaches the
/// threshold. Majority: members vote at the threshold, the aggregate is
/// the bonafide-vote fraction. Attack veto: any member below `veto_floor`
/// forces an attack verdict, otherwise the mean rule applies.
pub fn aggregate(
    scores: &[MemberScore],
    rule: AggregationRule,
) -> Result<EnsembleDecision, EnsembleError> {
    if scores.is_empty() {
        return Err(EnsembleError::EmptyScores);
    }
    rule.validate(scores.len())?;
    let mean = scores.iter().map(|s| s.p_bonafide).sum::<f64>() / scores.len() as f64;
    let (aggregate, verdict) = match rule {
        AggregationRule::MeanProbability { threshold } => {
            let verdict = if mean >= threshold { Label::Bonafide } else { Label::Attack };
            (mean, verdict)
        }
        AggregationRule::MajorityVote { threshold } => {
            let bonafide_votes = scores.iter().filter(|s| s.p_bonafide >= threshold).count();
            let fraction = bonafide_votes as f64 / scores.len() as f64;
            let verdict = if 2 * bonafide_votes > scores.len() {
                Label::Bonafide
            } else {
                Label::Attack
            };
            (fraction, verdict)
        }
        AggregationRule::AttackVeto { threshold, veto_floor } => {
            let vetoed = scores.iter().any(|s| s.p_bonafide < veto_floor);
            let verdict = if vetoed || mean < threshold {
                Label::Attack
            } else {
                Label::Bonafide
            };
            (mean, verdict)
        }
    };
    Ok(EnsembleDecision {
        member_scores: scores.to_vec(),
        aggregate,
        verdict,
        rule_used: rule,
    })
}

/// What to optimize when calibrating the decision threshold on validation
/// aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationTarget {
    /// Minimize ACER.
    MinAcer,
    /// Minimize BPCER subject to APCER <= alpha.
    MaxBpcerAtApcer(f64),
}

/// Sweep all midpoints between adjacent sorted aggregates plus {0, 1} and
/// return the threshold optimizing the target; ties go to the smallest
/// threshold.
pub fn calibrate_threshold(
    scores: &[(f64, Label)],
    target: CalibrationTarget,
) -> Result<f64, EnsembleError> {
    let bonafide = scores.iter().filter(|(_, l)| l.is_bonafide()).count();
    if bonafide == 0 || bonafide == scores.len() {
        return Err(EnsembleError::SingleClassValidation);
    }

    let mut sorted: Vec<f64> = scores.iter().map(|&(p, _)| p).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite aggregates"));
    sorted.dedup();
    let mut candidates = vec![0.0];
    candidates.extend(sorted.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(1.0);
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite candidates"));
    candidates.dedup();

    let evaluate = |threshold: f64| -> (f64, f64) {
        let counts = metrics::confusion_from_scores(scores, threshold).expect("non-empty");
        let a = metrics::apcer(&counts).expect("attacks present");
        let b = metrics::bpcer(&counts).expect("bonafide present");
        (a, b)
    };

    let mut best: Option<(f64, f64, f64)> = None; // (primary, secondary, threshold)
    for &threshold in &candidates {
        let (apcer_value, bpcer_value) = evaluate(threshold);
        let key = match target {
            CalibrationTarget::MinAcer => (metrics::acer(apcer_value, bpcer_value), 0.0),
            CalibrationTarget::MaxBpcerAtApcer(alpha) => {
                if apcer_value <= alpha {
                    (bpcer_value, 0.0)
                } else {
                    // Infeasible candidates rank after every feasible one.
                    (1.0 + apcer_value, bpcer_value)
                }
            }
        };
        let better = match best {
            None => true,
            Some((p, s, _)) => key.0 < p || (key.0 == p && key.1 < s),
        };
        if better {
            best = Some((key.0, key.1, threshold));
        }
    }
    Ok(best.expect("candidate list is non-empty").2)
}

/// A member with its trained parameters.
#[derive(Debug, Clone)]
pub struct LoadedMember {
    pub config: MemberConfig,
    pub params: ModelParameters<f32>,
}

/// An ensemble ready for inference.
#[derive(Debug, Clone)]
pub struct LoadedEnsemble {
    pub config: EnsembleConfig,
    pub members: Vec<LoadedMember>,
}

impl LoadedEnsemble {
    pub fn member(&self, member_id: &str) -> Option<&LoadedMember> {
        self.members.iter().find(|m| m.config.member_id == member_id)
    }

    pub fn member_ids(&self) -> Vec<&str> {
        self.members.iter().map(|m| m.config.member_id.as_str()).collect()
    }
}

/// Write `ensemble.json` and one checkpoint directory per member.
pub fn save_bundle(ensemble: &LoadedEnsemble, dir: &Path) -> Result<(), EnsembleError> {
    ensemble.config.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = serde_json::to_string_pretty(&ensemble.config).expect("config serializes");
    let config_path = dir.join("ensemble.json");
    fs::write(&config_path, json).map_err(io_err(&config_path))?;
    for member in &ensemble.members {
        save_checkpoint(&member.params, &member.config, &dir.join(&member.config.member_id))?;
    }
    Ok(())
}

/// Load a bundle, verifying each checkpoint against the ensemble config.
pub fn load_bundle(dir: &Path) -> Result<LoadedEnsemble, EnsembleError> {
    let config_path = dir.join("ensemble.json");
    let text = fs::read_to_string(&config_path).map_err(io_err(&config_path))?;
    let config: EnsembleConfig = serde_json::from_str(&text)
        .map_err(|e| EnsembleError::MalformedBundle(format!("ensemble.json: {e}")))?;
    config.validate()?;
    let mut members = Vec::with_capacity(config.members.len());
    for member_config in &config.members {
        let (params, stored) = load_checkpoint(&dir.join(&member_config.member_id))?;
        if &stored != member_config {
            return Err(EnsembleError::Model(ModelError::ConfigMismatch(format!(
                "checkpoint '{}' does not match the ensemble slot (stored region {}, expected {})",
                member_config.member_id, stored.region, member_config.region
            ))));
        }
        members.push(LoadedMember {
            config: member_config.clone(),
            params,
        });
    }
    Ok(LoadedEnsemble { config, members })
}

/// Provenance-carrying outcome of one inference.
#[derive(Debug, Clone)]
pub struct InferenceOutcome {
    pub decision: EnsembleDecision,
    pub frame_index: usize,
    pub quality: FrameQualityScore,
    pub face: FaceBox,
}

/// Score every member on its region view of one frame and aggregate.
pub fn infer_frame(
    ensemble: &LoadedEnsemble,
    frame: &Image,
    locator: &dyn FaceLocator,
    band_fraction: f64,
) -> Result<(EnsembleDecision, FaceBox), EnsembleError> {
    let face = locator.locate(frame)?;
    let mut scores = Vec::with_capacity(ensemble.members.len());
    for member in &ensemble.members {
        let view = extract_region(
            frame,
            &face,
            member.config.region,
            member.config.backbone.input_resolution,
            band_fraction,
        )?;
        scores.push(predict_member(&member.params, &view, &member.config.member_id)?);
    }
    let decision = aggregate(&scores, ensemble.config.rule)?;
    Ok((decision, face))
}

/// Full video pipeline: best-frame selection, then [`infer_frame`]. A
/// single-frame video short-circuits selection to index 0 (the argmax of
/// one element), so single images and one-frame videos are identical.
pub fn infer_video(
    ensemble: &LoadedEnsemble,
    video: &VideoFrames,
    locator: &dyn FaceLocator,
    weights: &QualityWeights,
    band_fraction: f64,
) -> Result<InferenceOutcome, EnsembleError> {
    let (frame_index, quality) = select_best_frame(video, locator, weights)?;
    let (decision, face) = infer_frame(ensemble, &video.frames[frame_index], locator, band_fraction)?;
    Ok(InferenceOutcome {
        decision,
        frame_index,
        quality,
        face,
    })
}

/// One evaluated sample: manifest metadata plus the ensemble outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_path: String,
    pub subject_id: String,
    pub scenario_id: String,
    pub label: Label,
    pub p_aggregate: f64,
    pub member_scores: Vec<MemberScore>,
}

/// Run inference over manifest samples (single images) and collect scores.
pub fn score_samples<'a>(
    ensemble: &LoadedEnsemble,
    manifest: &DatasetManifest,
    samples: impl Iterator<Item = &'a Sample>,
    locator: &dyn FaceLocator,
    band_fraction: f64,
) -> Result<Vec<ScoredSample>, EnsembleError> {
    let mut out = Vec::new();
    for sample in samples {
        let image = load_image(&manifest.resolve(sample)).map_err(DataError::from)?;
        let (decision, _) = infer_frame(ensemble, &image, locator, band_fraction)?;
        out.push(ScoredSample {
            sample_path: sample.path.clone(),
            subject_id: sample.subject_id.clone(),
            scenario_id: sample.scenario_id.clone(),
            label: sample.label,
            p_aggregate: decision.aggregate,
            member_scores: decision.member_scores,
        });
    }
    Ok(out)
}

/// Training output: the ready ensemble plus per-member histories.
pub struct TrainedEnsemble {
    pub ensemble: LoadedEnsemble,
    pub records: Vec<(String, TrainingRecord)>,
    pub calibrated_threshold: Option<f64>,
}

/// Train every member of an ensemble from a manifest.
///
/// Faces are located once per image and each member trains on its own
/// region views. Member seeds derive deterministically from the training
/// seed and the member index. When `calibration` is set, the rule's
/// threshold is refit on the validation aggregates afterwards.
pub fn train_ensemble(
    config: &EnsembleConfig,
    tconfig: &TrainingConfig,
    manifest: &DatasetManifest,
    augmentation: &AugmentationConfig,
    locator: &dyn FaceLocator,
    band_fraction: f64,
    calibration: Option<CalibrationTarget>,
) -> Result<TrainedEnsemble, EnsembleError> {
    config.validate()?;
    tconfig.validate()?;

    let load_split = |split: Split| -> Result<Vec<(Image, FaceBox, Label)>, EnsembleError> {
        let mut out = Vec::new();
        for sample in manifest.split(split) {
            let image = load_image(&manifest.resolve(sample)).map_err(DataError::from)?;
            let face = locator.locate(&image)?;
            out.push((image, face, sample.label));
        }
        Ok(out)
    };
    let train_images = load_split(Split::Train)?;
    let val_images = load_split(Split::Val)?;

    let views_for = |member: &MemberConfig,
                     images: &[(Image, FaceBox, Label)]|
     -> Result<Vec<LabeledView>, EnsembleError> {
        images
            .iter()
            .map(|(image, face, label)| {
                let view: RegionView = extract_region(
                    image,
                    face,
                    member.region,
                    member.backbone.input_resolution,
                    band_fraction,
                )?;
                Ok(LabeledView {
                    pixels: view.pixels,
                    label: *label,
                })
            })
            .collect()
    };

    let mut members = Vec::with_capacity(config.members.len());
    let mut records = Vec::with_capacity(config.members.len());
    for (index, member_config) in config.members.iter().enumerate() {
        let member_tconfig = TrainingConfig {
            seed: tconfig
                .seed
                .wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            ..*tconfig
        };
        let train_views = views_for(member_config, &train_images)?;
        let val_views = views_for(member_config, &val_images)?;
        let (params, record) = train_member(
            member_config,
            &member_tconfig,
            &train_views,
            &val_views,
            augmentation,
        )?;
        records.push((member_config.member_id.clone(), record));
        members.push(LoadedMember {
            config: member_config.clone(),
            params,
        });
    }

    let mut ensemble = LoadedEnsemble {
        config: config.clone(),
        members,
    };

    let mut calibrated_threshold = None;
    if let Some(target) = calibration {
        let mut val_scores = Vec::with_capacity(val_images.len());
        for (image, _, label) in &val_images {
            let (decision, _) = infer_frame(&ensemble, image, locator, band_fraction)?;
            val_scores.push((decision.aggregate, *label));
        }
        let threshold = calibrate_threshold(&val_scores, target)?;
        ensemble.config.rule = ensemble.config.rule.with_threshold(threshold);
        calibrated_threshold = Some(threshold);
    }

    Ok(TrainedEnsemble {
        ensemble,
        records,
        calibrated_threshold,
    })
}
