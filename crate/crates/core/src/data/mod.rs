//! Dataset manifests, the attack taxonomy, and subject-disjoint splitting.
//!
//! A manifest is a UTF-8 JSON Lines file: a single header line
//! `{"version": 1, "root": "<dir>"}` followed by one sample object per
//! line. The `attack_type` key is present exactly when `label` is
//! `attack`. Splits are subject-disjoint so that no identity appears in
//! more than one of train/val/test.

mod augment;
mod synth;

pub use augment::{augment_crop, augment_flip, AugmentationConfig, AugmentationSampler};
pub use synth::{
    generate_dataset, render_synthetic_face, synthesize_attack, FaceStyle, SynthDatasetConfig,
    SynthesizedAttack, SyntheticAttackConfig,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The four presentation-attack categories, in stable serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackType {
    PrintedPhoto,
    DigitalPhoto,
    Replay,
    CardMask,
}

impl AttackType {
    pub const ALL: [AttackType; 4] = [
        AttackType::PrintedPhoto,
        AttackType::DigitalPhoto,
        AttackType::Replay,
        AttackType::CardMask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackType::PrintedPhoto => "printed_photo",
            AttackType::DigitalPhoto => "digital_photo",
            AttackType::Replay => "replay",
            AttackType::CardMask => "card_mask",
        }
    }
}

impl fmt::Display for AttackType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ground-truth label. Bonafide is the positive class throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Bonafide,
    Attack,
}

impl Label {
    pub fn is_bonafide(self) -> bool {
        matches!(self, Label::Bonafide)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Bonafide => "bonafide",
            Label::Attack => "attack",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One image record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub path: String,
    pub label: Label,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack_type: Option<AttackType>,
    pub subject_id: String,
    pub scenario_id: String,
    pub split: Split,
}

impl Sample {
    /// `attack_type` must be present exactly when the label is `attack`.
    pub fn taxonomy_consistent(&self) -> bool {
        self.attack_type.is_some() == matches!(self.label, Label::Attack)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    version: u32,
    root: String,
}

/// An ordered collection of samples rooted at a directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub version: u32,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("label/attack_type mismatch at line {line} for '{path}'")]
    LabelTaxonomyViolation { line: usize, path: String },
    #[error("duplicate path in manifest: {0}")]
    DuplicatePath(String),
    #[error("subject '{0}' appears in more than one split")]
    SplitLeakage(String),
    #[error("path '{0}' does not resolve under the manifest root")]
    PathEscapesRoot(String),
    #[error("need at least {needed} distinct subjects, got {got}")]
    TooFewSubjects { needed: usize, got: usize },
    #[error("split fractions must be nonnegative and sum to 1")]
    BadFractions,
    #[error("image is empty")]
    EmptyImage,
    #[error("crop window exceeds image bounds")]
    CropOutOfBounds,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    ImageIo(#[from] crate::imageops::ImageIoError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A relative path stays under the root if it has no parent-dir components
/// and is not absolute.
fn path_stays_under_root(path: &str) -> bool {
    let p = Path::new(path);
    !p.is_absolute()
        && p.components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

impl DatasetManifest {
    pub fn new(root: PathBuf, samples: Vec<Sample>) -> Result<Self, DataError> {
        let manifest = DatasetManifest {
            root,
            version: 1,
            samples,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Check every invariant: taxonomy consistency, path hygiene, duplicate
    /// paths, and subject-disjoint splits.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen_paths = BTreeSet::new();
        let mut subject_split: BTreeMap<&str, Split> = BTreeMap::new();
        for (i, sample) in self.samples.iter().enumerate() {
            let line = i + 2; // header occupies line 1
            if sample.path.is_empty() {
                return Err(DataError::MalformedRecord {
                    line,
                    message: "empty path".into(),
                });
            }
            if !path_stays_under_root(&sample.path) {
                return Err(DataError::PathEscapesRoot(sample.path.clone()));
            }
            if !sample.taxonomy_consistent() {
                return Err(DataError::LabelTaxonomyViolation {
                    line,
                    path: sample.path.clone(),
                });
            }
            if !seen_paths.insert(sample.path.as_str()) {
                return Err(DataError::DuplicatePath(sample.path.clone()));
            }
            match subject_split.get(sample.subject_id.as_str()) {
                Some(&split) if split != sample.split => {
                    return Err(DataError::SplitLeakage(sample.subject_id.clone()));
                }
                _ => {
                    subject_split.insert(&sample.subject_id, sample.split);
                }
            }
        }
        Ok(())
    }

    /// Absolute path of a sample's image file.
    pub fn resolve(&self, sample: &Sample) -> PathBuf {
        self.root.join(&sample.path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Write as JSON Lines: header line, then one sample per line.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let header = ManifestHeader {
            version: self.version,
            root: self.root.display().to_string(),
        };
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for sample in &self.samples {
            out.push_str(&serde_json::to_string(sample).expect("sample serializes"));
            out.push('\n');
        }
        let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
    }
}

/// Parse and validate a JSON Lines manifest file. A relative `root` in the
/// header is resolved against the manifest file's parent directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    if !path.is_file() {
        return Err(DataError::MissingFile(path.display().to_string()));
    }
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header: ManifestHeader = match lines.next() {
        Some((_, Ok(text))) => {
            serde_json::from_str(&text).map_err(|e| DataError::MalformedRecord {
                line: 1,
                message: e.to_string(),
            })?
        }
        Some((_, Err(e))) => {
            return Err(DataError::MalformedRecord {
                line: 1,
                message: e.to_string(),
            })
        }
        None => {
            return Err(DataError::MalformedRecord {
                line: 1,
                message: "empty manifest".into(),
            })
        }
    };

    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let text = line.map_err(|e| DataError::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let sample: Sample =
            serde_json::from_str(&text).map_err(|e| DataError::MalformedRecord {
                line: line_no,
                message: e.to_string(),
            })?;
        if !sample.taxonomy_consistent() {
            return Err(DataError::LabelTaxonomyViolation {
                line: line_no,
                path: sample.path,
            });
        }
        samples.push(sample);
    }

    let root = {
        let header_root = PathBuf::from(&header.root);
        if header_root.is_absolute() {
            header_root
        } else {
            path.parent().unwrap_or(Path::new(".")).join(header_root)
        }
    };

    let manifest = DatasetManifest {
        root,
        version: header.version,
        samples,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Deterministic subject-disjoint split: sort the distinct subjects, shuffle
/// them with a seeded generator, and cut the shuffled list by the rounded
/// fractions. Every split with a nonzero fraction receives at least one
/// subject.
pub fn split_by_subject(
    samples: &[Sample],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions);
    }
    let mut subjects: Vec<&str> = samples
        .iter()
        .map(|s| s.subject_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let nonzero = [ft, fv, fe].iter().filter(|&&f| f > 0.0).count();
    if subjects.len() < nonzero {
        return Err(DataError::TooFewSubjects {
            needed: nonzero,
            got: subjects.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);

    let n = subjects.len();
    let mut sizes = [
        (ft * n as f64).round() as usize,
        (fv * n as f64).round() as usize,
        0usize,
    ];
    sizes[0] = sizes[0].min(n);
    sizes[1] = sizes[1].min(n - sizes[0]);
    sizes[2] = n - sizes[0] - sizes[1];
    // Rounding can starve a nonzero-fraction split; steal from the largest.
    let fracs = [ft, fv, fe];
    for i in 0..3 {
        if fracs[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..3)
                .max_by_key(|&j| sizes[j])
                .expect("three candidate splits");
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }

    let mut assignment: BTreeMap<&str, Split> = BTreeMap::new();
    let mut cursor = 0usize;
    for (size, split) in sizes.iter().zip([Split::Train, Split::Val, Split::Test]) {
        for subject in &subjects[cursor..cursor + size] {
            assignment.insert(subject, split);
        }
        cursor += size;
    }

    let reassigned: Vec<Sample> = samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.split = assignment[s.subject_id.as_str()];
            s
        })
        .collect();
    DatasetManifest::new(PathBuf::from("."), reassigned)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(path: &str, label: Label, subject: &str, split: Split) -> Sample {
        Sample {
            path: path.to_string(),
            label,
            attack_type: matches!(label, Label::Attack).then_some(AttackType::Replay),
            subject_id: subject.to_string(),
            scenario_id: "scn".to_string(),
            split,
        }
    }

    #[test]
    fn attack_type_order_is_stable() {
        let names: Vec<&str> = AttackType::ALL.iter().map(|a| a.as_str()).collect();
        assert_eq!(
            names,
            ["printed_photo", "digital_photo", "replay", "card_mask"]
        );
    }

    #[test]
    fn minimal_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"version\": 1, \"root\": \".\"}\n",
                "{\"path\":\"a.png\",\"label\":\"bonafide\",\"subject_id\":\"s1\",\"scenario_id\":\"x\",\"split\":\"train\"}\n",
            ),
        )
        .unwrap();
        let manifest = load_manifest(&path).unwrap();
        assert_eq!(manifest.samples.len(), 1);
        assert_eq!(manifest.samples[0].label, Label::Bonafide);
    }

    #[test]
    fn bonafide_with_attack_type_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"version\": 1, \"root\": \".\"}\n",
                "{\"path\":\"a.png\",\"label\":\"bonafide\",\"attack_type\":\"replay\",\"subject_id\":\"s1\",\"scenario_id\":\"x\",\"split\":\"train\"}\n",
            ),
        )
        .unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(
            err,
            DataError::LabelTaxonomyViolation { line: 2, .. }
        ));
    }

    #[test]
    fn split_leakage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"version\": 1, \"root\": \".\"}\n",
                "{\"path\":\"a.png\",\"label\":\"bonafide\",\"subject_id\":\"s1\",\"scenario_id\":\"x\",\"split\":\"train\"}\n",
                "{\"path\":\"b.png\",\"label\":\"bonafide\",\"subject_id\":\"s1\",\"scenario_id\":\"x\",\"split\":\"test\"}\n",
            ),
        )
        .unwrap();
        let err = load_manifest(&path).unwrap_err();
        match err {
            DataError::SplitLeakage(s) => assert_eq!(s, "s1"),
            other => panic!("expected SplitLeakage, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_path_rejected() {
        let samples = vec![
            sample("a.png", Label::Bonafide, "s1", Split::Train),
            sample("a.png", Label::Bonafide, "s1", Split::Train),
        ];
        let err = DatasetManifest::new(PathBuf::from("."), samples).unwrap_err();
        assert!(matches!(err, DataError::DuplicatePath(_)));
    }

    #[test]
    fn missing_manifest_file() {
        let err = load_manifest(Path::new("/nonexistent/manifest.jsonl")).unwrap_err();
        assert!(matches!(err, DataError::MissingFile(_)));
    }

    #[test]
    fn escaping_path_rejected() {
        let samples = vec![sample("../a.png", Label::Bonafide, "s1", Split::Train)];
        let err = DatasetManifest::new(PathBuf::from("."), samples).unwrap_err();
        assert!(matches!(err, DataError::PathEscapesRoot(_)));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let samples = vec![
            sample("a.png", Label::Bonafide, "s1", Split::Train),
            sample("b.png", Label::Attack, "s2", Split::Val),
            sample("c.png", Label::Attack, "s3", Split::Test),
        ];
        let manifest = DatasetManifest::new(dir.path().to_path_buf(), samples).unwrap();
        manifest.save(&path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.samples, manifest.samples);
        assert_eq!(loaded.version, manifest.version);
    }

    #[test]
    fn three_subjects_equal_fractions_one_each() {
        let samples = vec![
            sample("a.png", Label::Bonafide, "s1", Split::Train),
            sample("b.png", Label::Bonafide, "s2", Split::Train),
            sample("c.png", Label::Bonafide, "s3", Split::Train),
        ];
        let manifest =
            split_by_subject(&samples, (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), 7).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(manifest.split(split).count(), 1, "split {split}");
        }
    }

    #[test]
    fn split_is_deterministic() {
        let samples: Vec<Sample> = (0..20)
            .map(|i| sample(&format!("{i}.png"), Label::Bonafide, &format!("s{i}"), Split::Train))
            .collect();
        let a = split_by_subject(&samples, (0.5, 0.25, 0.25), 99).unwrap();
        let b = split_by_subject(&samples, (0.5, 0.25, 0.25), 99).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn hundred_subjects_match_reference_shuffle() {
        // Reference oracle: sort subjects, Fisher-Yates with ChaCha8(seed),
        // prefix cut at the rounded fractions.
        let samples: Vec<Sample> = (0..100)
            .map(|i| {
                sample(
                    &format!("{i}.png"),
                    Label::Bonafide,
                    &format!("s{i:03}"),
                    Split::Train,
                )
            })
            .collect();
        let manifest = split_by_subject(&samples, (0.8, 0.1, 0.1), 1).unwrap();

        let mut subjects: Vec<String> = (0..100).map(|i| format!("s{i:03}")).collect();
        subjects.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        subjects.shuffle(&mut rng);
        let expected: BTreeMap<&str, Split> = subjects[..80]
            .iter()
            .map(|s| (s.as_str(), Split::Train))
            .chain(subjects[80..90].iter().map(|s| (s.as_str(), Split::Val)))
            .chain(subjects[90..].iter().map(|s| (s.as_str(), Split::Test)))
            .collect();

        assert_eq!(manifest.split(Split::Train).count(), 80);
        assert_eq!(manifest.split(Split::Val).count(), 10);
        assert_eq!(manifest.split(Split::Test).count(), 10);
        for s in &manifest.samples {
            assert_eq!(s.split, expected[s.subject_id.as_str()], "{}", s.subject_id);
        }
    }

    #[test]
    fn too_few_subjects_rejected() {
        let samples = vec![
            sample("a.png", Label::Bonafide, "s1", Split::Train),
            sample("b.png", Label::Bonafide, "s2", Split::Train),
        ];
        let err = split_by_subject(&samples, (0.4, 0.3, 0.3), 0).unwrap_err();
        assert!(matches!(err, DataError::TooFewSubjects { .. }));
    }

    #[test]
    fn bad_fractions_rejected() {
        let samples = vec![sample("a.png", Label::Bonafide, "s1", Split::Train)];
        assert!(matches!(
            split_by_subject(&samples, (0.5, 0.3, 0.3), 0).unwrap_err(),
            DataError::BadFractions
        ));
        assert!(matches!(
            split_by_subject(&samples, (1.2, -0.1, -0.1), 0).unwrap_err(),
            DataError::BadFractions
        ));
    }

    #[test]
    fn nonzero_fraction_never_starved() {
        let samples: Vec<Sample> = (0..3)
            .map(|i| sample(&format!("{i}.png"), Label::Bonafide, &format!("s{i}"), Split::Train))
            .collect();
        let manifest = split_by_subject(&samples, (0.98, 0.01, 0.01), 3).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            assert!(manifest.split(split).count() >= 1);
        }
    }
}
