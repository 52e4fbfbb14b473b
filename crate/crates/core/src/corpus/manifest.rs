use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{list_image_ids, mask_path};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Stream offset so the unlabelled ordering is independent of the split shuffle.
const PREFIX_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Persisted assignment of a dataset's image ids to labelled / unlabelled roles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset_name: String,
    pub seed: u64,
    pub labelled_fraction: f64,
    pub labelled_ids: Vec<String>,
    pub unlabelled_ids: Vec<String>,
    /// In-memory only; the file stays byte-identical across rebuilds.
    #[serde(skip)]
    pub created_at: Option<DateTime<Utc>>,
}

impl SplitManifest {
    /// Partition sorted `ids` with a seeded permutation; the first
    /// `round(fraction * n)` (at least one) become labelled.
    pub fn from_ids(dataset_name: &str, mut ids: Vec<String>, labelled_fraction: f64, seed: u64) -> Result<Self> {
        if !(labelled_fraction > 0.0 && labelled_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "labelled_fraction must be in (0, 1], got {labelled_fraction}"
            )));
        }
        if ids.is_empty() {
            return Err(Error::Empty("dataset id list"));
        }
        ids.sort();
        ids.dedup();
        let n_labelled = labelled_count(ids.len(), labelled_fraction);
        let mut order = ids.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut labelled_ids = order[..n_labelled].to_vec();
        let mut unlabelled_ids = order[n_labelled..].to_vec();
        labelled_ids.sort();
        unlabelled_ids.sort();
        Ok(SplitManifest {
            dataset_name: dataset_name.to_string(),
            seed,
            labelled_fraction,
            labelled_ids,
            unlabelled_ids,
            created_at: Some(Utc::now()),
        })
    }

    pub fn all_ids(&self) -> Vec<String> {
        let mut all: Vec<String> = self.labelled_ids.iter().chain(&self.unlabelled_ids).cloned().collect();
        all.sort();
        all
    }

    pub fn total(&self) -> usize {
        self.labelled_ids.len() + self.unlabelled_ids.len()
    }

    /// The first `round(fraction * n)` unlabelled ids in a seeded order.
    /// Subsets nest as the fraction grows.
    pub fn unlabelled_subset(&self, fraction: f64) -> Vec<String> {
        let mut order = self.unlabelled_ids.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed ^ PREFIX_STREAM));
        let n = order.len();
        let mut take = (fraction.clamp(0.0, 1.0) * n as f64).round() as usize;
        if fraction > 0.0 && n > 0 {
            take = take.max(1);
        }
        order.truncate(take);
        order
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        text.push('\n');
        crate::util::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn labelled_count(total: usize, fraction: f64) -> usize {
    ((fraction * total as f64).round() as usize).clamp(1, total)
}

pub fn manifest_path(dataset_root: &Path) -> PathBuf {
    dataset_root.join(MANIFEST_FILE)
}

pub fn dataset_name(dataset_root: &Path) -> String {
    dataset_root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

/// Split the images under `<root>/images`, check every labelled id has a mask,
/// and persist the manifest as `<root>/manifest.json`.
pub fn build_split_manifest(dataset_root: &Path, labelled_fraction: f64, seed: u64) -> Result<SplitManifest> {
    let ids = list_image_ids(dataset_root)?;
    if ids.is_empty() {
        return Err(Error::EmptyDataset(dataset_root.join("images")));
    }
    let manifest = SplitManifest::from_ids(&dataset_name(dataset_root), ids, labelled_fraction, seed)?;
    for id in &manifest.labelled_ids {
        let expected = mask_path(dataset_root, id);
        if !expected.is_file() {
            return Err(Error::MissingMask { id: id.clone(), expected });
        }
    }
    manifest.save(&manifest_path(dataset_root))?;
    Ok(manifest)
}
