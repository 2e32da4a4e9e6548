//! Directory ingestion: walks labeled roots, validates every candidate image
//! by decoding it, and assigns splits.

use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::record::{ClassCounts, DatasetIndex, Label, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::seed::{rng_for, STREAM_SPLIT};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "webp", "gif", "tif", "tiff"];

/// A directory whose every image carries the same label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledRoot {
    pub path: PathBuf,
    pub label: Label,
}

impl LabeledRoot {
    pub fn new(path: impl Into<PathBuf>, label: Label) -> Self {
        Self {
            path: path.into(),
            label,
        }
    }

    /// Expands a corpus directory following the `<root>/real/**`,
    /// `<root>/fake/**` convention.
    pub fn corpus(root: impl AsRef<Path>) -> [LabeledRoot; 2] {
        let root = root.as_ref();
        [
            LabeledRoot::new(root.join("real"), Label::Real),
            LabeledRoot::new(root.join("fake"), Label::Fake),
        ]
    }
}

/// How records are assigned to train/val/test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitRule {
    /// Seeded per-class shuffle: `test_fraction` of each class goes to test,
    /// then `val_fraction` of the remainder goes to val.
    Stratified {
        val_fraction: f64,
        test_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Split named by the first `train`/`val`/`test` path component below the
    /// root; files outside such a directory are train.
    FromDirectories,
    /// Everything lands in one split.
    Fixed { split: Split },
}

impl Default for SplitRule {
    fn default() -> Self {
        SplitRule::Stratified {
            val_fraction: 0.05,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexReport {
    pub exclusions: Vec<Exclusion>,
    pub skipped_non_image: usize,
    pub train: ClassCounts,
    pub val: ClassCounts,
    pub test: ClassCounts,
}

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

struct Candidate {
    path: PathBuf,
    rel: PathBuf,
    label: Label,
}

/// Builds an index from labeled roots. Undecodable images are excluded and
/// listed in the report; an unreadable root or an empty class is fatal.
pub fn build_index(roots: &[LabeledRoot], rule: &SplitRule) -> Result<(DatasetIndex, IndexReport)> {
    validate_rule(rule)?;
    let mut candidates = Vec::new();
    let mut skipped_non_image = 0;
    for root in roots {
        let meta = std::fs::metadata(&root.path).map_err(|e| Error::io(&root.path, e))?;
        if !meta.is_dir() {
            return Err(Error::io(
                &root.path,
                std::io::Error::new(std::io::ErrorKind::NotADirectory, "root is not a directory"),
            ));
        }
        for entry in walkdir::WalkDir::new(&root.path).follow_links(true) {
            let entry = entry.map_err(|e| {
                let path = e.path().unwrap_or(&root.path).to_path_buf();
                Error::io(path, e.into())
            })?;
            if !entry.file_type().is_file() {
                continue;
            }
            if !is_image_path(entry.path()) {
                skipped_non_image += 1;
                continue;
            }
            let rel = entry
                .path()
                .strip_prefix(&root.path)
                .unwrap_or(entry.path())
                .to_path_buf();
            candidates.push(Candidate {
                path: entry.path().to_path_buf(),
                rel,
                label: root.label,
            });
        }
    }
    candidates.sort_by(|a, b| a.path.cmp(&b.path));

    let decoded: Vec<Option<String>> = candidates
        .par_iter()
        .map(|c| match image::open(&c.path) {
            Ok(_) => None,
            Err(e) => Some(e.to_string()),
        })
        .collect();

    let mut exclusions = Vec::new();
    let mut kept = Vec::with_capacity(candidates.len());
    for (c, failure) in candidates.into_iter().zip(decoded) {
        match failure {
            Some(reason) => {
                log::warn!("excluding undecodable image {}: {reason}", c.path.display());
                exclusions.push(Exclusion { path: c.path, reason });
            }
            None => kept.push(c),
        }
    }

    if !kept.iter().any(|c| c.label == Label::Real) {
        return Err(Error::EmptyClass("real"));
    }
    if !kept.iter().any(|c| c.label == Label::Fake) {
        return Err(Error::EmptyClass("fake"));
    }

    let splits = assign_splits(&kept, rule);
    let records: Vec<SampleRecord> = kept
        .into_iter()
        .zip(splits)
        .map(|(c, split)| SampleRecord {
            id: sample_id(c.label, &c.rel),
            path: c.path,
            label: c.label,
            split,
        })
        .collect();
    let index = DatasetIndex::new(records)?;
    let report = IndexReport {
        exclusions,
        skipped_non_image,
        train: index.counts(Split::Train),
        val: index.counts(Split::Val),
        test: index.counts(Split::Test),
    };
    Ok((index, report))
}

fn validate_rule(rule: &SplitRule) -> Result<()> {
    if let SplitRule::Stratified {
        val_fraction,
        test_fraction,
        ..
    } = rule
    {
        for (name, f) in [("val_fraction", val_fraction), ("test_fraction", test_fraction)] {
            if !(0.0..1.0).contains(f) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {f}")));
            }
        }
    }
    Ok(())
}

fn sample_id(label: Label, rel: &Path) -> String {
    let parts: Vec<String> = rel
        .components()
        .filter_map(|c| match c {
            Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect();
    format!("{}/{}", label.name(), parts.join("/"))
}

fn assign_splits(kept: &[Candidate], rule: &SplitRule) -> Vec<Split> {
    match rule {
        SplitRule::Fixed { split } => vec![*split; kept.len()],
        SplitRule::FromDirectories => kept
            .iter()
            .map(|c| {
                c.rel
                    .components()
                    .find_map(|comp| match comp {
                        Component::Normal(s) => s.to_str().and_then(|s| s.parse::<Split>().ok()),
                        _ => None,
                    })
                    .unwrap_or(Split::Train)
            })
            .collect(),
        SplitRule::Stratified {
            val_fraction,
            test_fraction,
            seed,
        } => {
            let mut out = vec![Split::Train; kept.len()];
            for label in [Label::Fake, Label::Real] {
                let mut members: Vec<usize> = kept
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.label == label)
                    .map(|(i, _)| i)
                    .collect();
                members.shuffle(&mut rng_for(*seed, &[STREAM_SPLIT, label.as_u8() as u64]));
                let n = members.len();
                let n_test = (n as f64 * test_fraction).round() as usize;
                let n_val = ((n - n_test) as f64 * val_fraction).round() as usize;
                for (rank, &i) in members.iter().enumerate() {
                    out[i] = if rank < n_test {
                        Split::Test
                    } else if rank < n_test + n_val {
                        Split::Val
                    } else {
                        Split::Train
                    };
                }
            }
            out
        }
    }
}
