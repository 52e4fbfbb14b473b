//! Edge-map proxy targets for unlabelled images and the foreground weighting
//! factor used by the weighted BCE objectives.

mod cache;
mod canny;

pub use cache::{edge_cache_path, load_edge_map, precompute_edge_targets, save_edge_map};
pub use canny::{canny_edges, gaussian_kernel, gradient_step, reflect_index, CannyConfig, EdgeMap, TIE_TOLERANCE};

use crate::error::Result;
use crate::maps::{ensure_binary, Map};

/// Ratio of background to foreground pixels in a binary target.
///
/// A target without foreground gets weight 1.0 so the loss falls back to
/// plain BCE.
pub fn foreground_weight(target: &Map) -> Result<f64> {
    ensure_binary(target.view(), "weighting target")?;
    let ones = target.iter().filter(|&&v| v == 1.0).count();
    let zeros = target.len() - ones;
    if ones == 0 {
        return Ok(1.0);
    }
    Ok(zeros as f64 / ones as f64)
}
