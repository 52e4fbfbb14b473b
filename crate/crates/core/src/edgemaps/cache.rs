use std::fs;
use std::path::{Path, PathBuf};

use super::{canny_edges, CannyConfig};
use crate::corpus::{load_sample, Role, SplitManifest};
use crate::error::{Error, Result};
use crate::maps::Map;

/// `<cache_dir>/<id>.edge.<confighash>.png`
pub fn edge_cache_path(cache_dir: &Path, id: &str, config: &CannyConfig) -> PathBuf {
    cache_dir.join(format!("{id}.edge.{}.png", config.hash_hex()))
}

/// Encode a binary map as a 1-bit grayscale PNG.
pub fn save_edge_map(path: &Path, values: &Map) -> Result<()> {
    crate::maps::ensure_binary(values.view(), "edge map")?;
    let (h, w) = values.dim();
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for ((r, c), &v) in values.indexed_iter() {
        if v == 1.0 {
            packed[r * stride + c / 8] |= 0x80 >> (c % 8);
        }
    }
    let mut bytes = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut bytes, w as u32, h as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::One);
        let to_err = |e: png::EncodingError| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut writer = encoder.write_header().map_err(to_err)?;
        writer.write_image_data(&packed).map_err(to_err)?;
    }
    crate::util::write_atomic(path, &bytes)
}

pub fn load_edge_map(path: &Path) -> Result<Map> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = img.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    Ok(Map::from_shape_fn((h, w), |(r, c)| {
        if luma.get_pixel(c as u32, r as u32).0[0] >= 128 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Write one cached edge map per unlabelled id of `manifest`. Entries whose
/// file for the current config hash already exists are skipped; returns the
/// number of maps written.
pub fn precompute_edge_targets(
    manifest: &SplitManifest,
    dataset_root: &Path,
    config: &CannyConfig,
    cache_dir: &Path,
    target_size: (usize, usize),
) -> Result<usize> {
    config.validate()?;
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let mut written = 0;
    for id in &manifest.unlabelled_ids {
        let path = edge_cache_path(cache_dir, id, config);
        if path.is_file() {
            continue;
        }
        let sample = load_sample(id, Role::Unlabelled, dataset_root, target_size)?;
        let edges = canny_edges(&sample.image, config)?;
        save_edge_map(&path, &edges.values)?;
        written += 1;
    }
    Ok(written)
}
