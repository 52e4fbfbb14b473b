//! Dataset ingestion, deterministic labelled/unlabelled splits and synthetic
//! cell-image generation.

mod io;
mod manifest;
mod synthetic;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

pub use io::{image_path, list_image_ids, load_sample, mask_path, resize, save_gray_png, to_intensity, Role, LUMA_WEIGHTS};
pub use manifest::{build_split_manifest, dataset_name, labelled_count, manifest_path, SplitManifest, MANIFEST_FILE};
pub use synthetic::{generate_pair, generate_synthetic_dataset, CellStyle, SyntheticConfig};

use crate::edgemaps::{self, CannyConfig};
use crate::error::{Error, Result};
use crate::maps::{is_binary, Map};

/// One image with its optional ground-truth mask and edge target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Map,
    pub mask: Option<Map>,
    pub edge_target: Option<Map>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Map, mask: Option<Map>) -> Result<Self> {
        let s = Sample {
            id: id.into(),
            image,
            mask,
            edge_target: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig(format!("image `{}` has values outside [0,1]", self.id)));
        }
        for (what, map) in [("mask", &self.mask), ("edge target", &self.edge_target)] {
            if let Some(m) = map {
                if m.dim() != self.image.dim() {
                    return Err(Error::ShapeMismatch {
                        context: format!("{what} of `{}`", self.id),
                        left: m.dim(),
                        right: self.image.dim(),
                    });
                }
                if !is_binary(m.view()) {
                    return Err(Error::NonBinary(what));
                }
            }
        }
        Ok(())
    }

    pub fn mask(&self) -> Result<&Map> {
        self.mask.as_ref().ok_or(Error::Missing(format!("mask for `{}`", self.id)))
    }

    pub fn edge_target(&self) -> Result<&Map> {
        self.edge_target
            .as_ref()
            .ok_or(Error::Missing(format!("edge target for `{}`", self.id)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceDataset {
    pub name: String,
    pub root: PathBuf,
    pub manifest: SplitManifest,
}

/// The collection of source datasets plus the unlabelled fraction in use.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceCorpus {
    pub datasets: Vec<SourceDataset>,
    pub unlabelled_fraction_used: f64,
}

impl SourceCorpus {
    pub fn new(datasets: Vec<SourceDataset>, unlabelled_fraction_used: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&unlabelled_fraction_used) {
            return Err(Error::InvalidConfig(format!(
                "unlabelled fraction must be in [0,1], got {unlabelled_fraction_used}"
            )));
        }
        let mut names = BTreeSet::new();
        for d in &datasets {
            if !names.insert(d.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate dataset name `{}`", d.name)));
            }
        }
        Ok(SourceCorpus {
            datasets,
            unlabelled_fraction_used,
        })
    }

    /// Read `<root>/manifest.json` for each root.
    pub fn open(roots: &[PathBuf], unlabelled_fraction_used: f64) -> Result<Self> {
        let datasets = roots
            .iter()
            .map(|root| {
                let path = manifest_path(root);
                if !path.is_file() {
                    return Err(Error::Missing(format!(
                        "no split manifest at {}; run `prepare` first",
                        path.display()
                    )));
                }
                let manifest = SplitManifest::load(&path)?;
                Ok(SourceDataset {
                    name: manifest.dataset_name.clone(),
                    root: root.clone(),
                    manifest,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(datasets, unlabelled_fraction_used)
    }

    pub fn unlabelled_ids(&self, dataset: &SourceDataset) -> Vec<String> {
        dataset.manifest.unlabelled_subset(self.unlabelled_fraction_used)
    }

    /// Load labelled samples (with masks) and the selected unlabelled samples.
    /// Unlabelled samples get edge targets from the cache when present,
    /// computed on the fly otherwise; `canny = None` skips edge targets.
    pub fn load(&self, target_size: (usize, usize), canny: Option<&CannyConfig>) -> Result<TrainingData> {
        let mut labelled = Vec::new();
        let mut unlabelled = Vec::new();
        for d in &self.datasets {
            for id in &d.manifest.labelled_ids {
                let mut s = load_sample(id, Role::Labelled, &d.root, target_size)?;
                s.id = format!("{}/{id}", d.name);
                labelled.push(s);
            }
            for id in self.unlabelled_ids(d) {
                let mut s = load_sample(&id, Role::Unlabelled, &d.root, target_size)?;
                if let Some(cfg) = canny {
                    let cached = edgemaps::edge_cache_path(&edge_cache_dir(&d.root), &id, cfg);
                    let edges = match edgemaps::load_edge_map(&cached) {
                        Ok(m) if m.dim() == s.image.dim() => m,
                        _ => edgemaps::canny_edges(&s.image, cfg)?.values,
                    };
                    s.edge_target = Some(edges);
                }
                s.id = format!("{}/{id}", d.name);
                unlabelled.push(s);
            }
        }
        Ok(TrainingData { labelled, unlabelled })
    }
}

pub fn edge_cache_dir(dataset_root: &Path) -> PathBuf {
    dataset_root.join("edges")
}

/// Loaded samples ready for training.
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub labelled: Vec<Sample>,
    pub unlabelled: Vec<Sample>,
}

/// Load every image of a fully annotated target dataset, keyed by id.
pub fn load_target(dataset_root: &Path, target_size: (usize, usize)) -> Result<Vec<Sample>> {
    let ids = list_image_ids(dataset_root)?;
    if ids.is_empty() {
        return Err(Error::EmptyDataset(dataset_root.join("images")));
    }
    ids.iter()
        .map(|id| load_sample(id, Role::Target, dataset_root, target_size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_corpus_samples_are_valid() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("fluo");
        let cfg = SyntheticConfig::preset(CellStyle::Fluorescent, 12, 32, 3);
        generate_synthetic_dataset(&cfg, &root).unwrap();
        build_split_manifest(&root, 0.25, 1).unwrap();
        let corpus = SourceCorpus::open(&[root.clone()], 0.5).unwrap();
        let data = corpus.load((32, 32), Some(&CannyConfig::default())).unwrap();
        assert_eq!(data.labelled.len(), 3);
        assert_eq!(data.unlabelled.len(), 5);
        for s in data.labelled.iter().chain(&data.unlabelled) {
            s.validate().unwrap();
        }
        assert!(data.unlabelled.iter().all(|s| s.edge_target.is_some()));
        assert!(data.labelled.iter().all(|s| s.mask.is_some()));
    }

    #[test]
    fn missing_manifest_points_to_prepare() {
        let dir = tempfile::tempdir().unwrap();
        let err = SourceCorpus::open(&[dir.path().to_path_buf()], 0.3).unwrap_err();
        assert!(err.to_string().contains("prepare"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let m = SplitManifest::from_ids("a", vec!["x".into()], 1.0, 0).unwrap();
        let d = SourceDataset {
            name: "a".into(),
            root: PathBuf::from("/a"),
            manifest: m,
        };
        assert!(SourceCorpus::new(vec![d.clone(), d], 0.0).is_err());
    }

    #[test]
    fn empty_images_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        assert!(matches!(
            build_split_manifest(dir.path(), 0.1, 0),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn missing_mask_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig::preset(CellStyle::Textured, 4, 32, 0);
        generate_synthetic_dataset(&cfg, dir.path()).unwrap();
        std::fs::remove_dir_all(dir.path().join("masks")).unwrap();
        match build_split_manifest(dir.path(), 0.5, 0) {
            Err(Error::MissingMask { id, .. }) => assert!(id.starts_with("img_")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_rebuild_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig::preset(CellStyle::Textured, 20, 32, 0);
        generate_synthetic_dataset(&cfg, dir.path()).unwrap();
        let m = build_split_manifest(dir.path(), 0.1, 42).unwrap();
        assert_eq!(m.labelled_ids.len(), 2);
        let first = std::fs::read(manifest_path(dir.path())).unwrap();
        build_split_manifest(dir.path(), 0.1, 42).unwrap();
        assert_eq!(first, std::fs::read(manifest_path(dir.path())).unwrap());
    }
}
