use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::maps::Map;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Labelled,
    Unlabelled,
    Target,
}

impl Role {
    pub fn has_mask(self) -> bool {
        !matches!(self, Role::Unlabelled)
    }
}

/// File stems under `<root>/images`, sorted.
pub fn list_image_ids(dataset_root: &Path) -> Result<Vec<String>> {
    let dir = dataset_root.join("images");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
        if matches!(ext.as_deref(), Some(e) if IMAGE_EXTENSIONS.contains(&e)) {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    ids.dedup();
    Ok(ids)
}

pub fn image_path(dataset_root: &Path, id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dataset_root.join("images").join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

pub fn mask_path(dataset_root: &Path, id: &str) -> PathBuf {
    dataset_root.join("masks").join(format!("{id}.png"))
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Single-channel intensities in [0, 1]. Integer formats are divided by their
/// type maximum; colour inputs are reduced with [`LUMA_WEIGHTS`].
pub fn to_intensity(img: &DynamicImage) -> Map {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        Map::from_shape_fn((h, w), |(r, c)| {
            let p = rgb.get_pixel(c as u32, r as u32).0;
            let v = LUMA_WEIGHTS[0] * p[0] as f64 + LUMA_WEIGHTS[1] * p[1] as f64 + LUMA_WEIGHTS[2] * p[2] as f64;
            v.clamp(0.0, 1.0)
        })
    } else {
        let luma = img.to_luma32f();
        Map::from_shape_fn((h, w), |(r, c)| (luma.get_pixel(c as u32, r as u32).0[0] as f64).clamp(0.0, 1.0))
    }
}

pub fn resize(map: &Map, size: (usize, usize), filter: FilterType) -> Map {
    if map.dim() == size {
        return map.clone();
    }
    let (h, w) = map.dim();
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(w as u32, h as u32, |c, r| Luma([map[[r as usize, c as usize]] as f32]));
    let out = imageops::resize(&buf, size.1 as u32, size.0 as u32, filter);
    Map::from_shape_fn(size, |(r, c)| (out.get_pixel(c as u32, r as u32).0[0] as f64).clamp(0.0, 1.0))
}

/// Load one image (and its mask for roles that carry one), rescaled to [0, 1]
/// and resized to `target_size` as `(height, width)`.
pub fn load_sample(id: &str, role: Role, dataset_root: &Path, target_size: (usize, usize)) -> Result<Sample> {
    let path = image_path(dataset_root, id).ok_or_else(|| Error::Missing(format!(
        "image `{id}` not found under {}",
        dataset_root.join("images").display()
    )))?;
    let raw = to_intensity(&open(&path)?);
    let mask = if role.has_mask() {
        let mpath = mask_path(dataset_root, id);
        if !mpath.is_file() {
            return Err(Error::MissingMask {
                id: id.to_string(),
                expected: mpath,
            });
        }
        let m = to_intensity(&open(&mpath)?);
        if m.dim() != raw.dim() {
            return Err(Error::ShapeMismatch {
                context: format!("mask vs image for `{id}`"),
                left: m.dim(),
                right: raw.dim(),
            });
        }
        let m = resize(&m, target_size, FilterType::Nearest);
        Some(crate::maps::binarize(&m, 0.5))
    } else {
        None
    };
    Ok(Sample {
        id: id.to_string(),
        image: resize(&raw, target_size, FilterType::Triangle),
        mask,
        edge_target: None,
    })
}

/// Save a [0,1] map as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, map: &Map) -> Result<()> {
    let (h, w) = map.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |c, r| {
        Luma([(map[[r as usize, c as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    crate::util::write_atomic(path, &bytes)
}
