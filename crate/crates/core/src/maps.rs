//! 2-D map helpers shared by every module: binary checks and the dihedral
//! transforms used for augmentation, consistency regularization and rotation
//! pretext labels.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single-channel 2-D map (image, mask, prediction) indexed `[row, col]`.
pub type Map = Array2<f64>;

pub fn is_binary(map: ArrayView2<'_, f64>) -> bool {
    map.iter().all(|&v| v == 0.0 || v == 1.0)
}

pub fn ensure_binary(map: ArrayView2<'_, f64>, what: &'static str) -> Result<()> {
    if is_binary(map) {
        Ok(())
    } else {
        Err(Error::NonBinary(what))
    }
}

pub fn ensure_same_shape(a: &Map, b: &Map, context: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context: context.to_string(),
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Threshold a probability map into a {0,1} mask (`p >= threshold` is foreground).
pub fn binarize(map: &Map, threshold: f64) -> Map {
    map.mapv(|v| if v >= threshold { 1.0 } else { 0.0 })
}

/// Elements of the dihedral group acting on square (or, for flips, any) maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpatialTransform {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rotate90,
    Rotate180,
    Rotate270,
}

impl SpatialTransform {
    pub const ALL: [SpatialTransform; 6] = [
        SpatialTransform::Identity,
        SpatialTransform::FlipHorizontal,
        SpatialTransform::FlipVertical,
        SpatialTransform::Rotate90,
        SpatialTransform::Rotate180,
        SpatialTransform::Rotate270,
    ];

    /// The non-trivial augmentations.
    pub const AUGMENTATIONS: [SpatialTransform; 5] = [
        SpatialTransform::FlipHorizontal,
        SpatialTransform::FlipVertical,
        SpatialTransform::Rotate90,
        SpatialTransform::Rotate180,
        SpatialTransform::Rotate270,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpatialTransform::Identity => "identity",
            SpatialTransform::FlipHorizontal => "flip_horizontal",
            SpatialTransform::FlipVertical => "flip_vertical",
            SpatialTransform::Rotate90 => "rotate90",
            SpatialTransform::Rotate180 => "rotate180",
            SpatialTransform::Rotate270 => "rotate270",
        }
    }

    /// Counter-clockwise quarter turn count, for rotation pretext labels.
    pub fn from_quarter_turns(k: usize) -> SpatialTransform {
        match k % 4 {
            0 => SpatialTransform::Identity,
            1 => SpatialTransform::Rotate90,
            2 => SpatialTransform::Rotate180,
            _ => SpatialTransform::Rotate270,
        }
    }

    pub fn inverse(self) -> SpatialTransform {
        match self {
            SpatialTransform::Rotate90 => SpatialTransform::Rotate270,
            SpatialTransform::Rotate270 => SpatialTransform::Rotate90,
            other => other,
        }
    }

    fn changes_shape(self) -> bool {
        matches!(self, SpatialTransform::Rotate90 | SpatialTransform::Rotate270)
    }

    pub fn apply(self, map: &Map) -> Map {
        match self {
            SpatialTransform::Identity => map.clone(),
            SpatialTransform::FlipHorizontal => map.slice(s![.., ..;-1]).to_owned(),
            SpatialTransform::FlipVertical => map.slice(s![..;-1, ..]).to_owned(),
            // counter-clockwise: out[r][c] = in[c][w-1-r]
            SpatialTransform::Rotate90 => map.t().slice(s![..;-1, ..]).to_owned(),
            SpatialTransform::Rotate180 => map.slice(s![..;-1, ..;-1]).to_owned(),
            SpatialTransform::Rotate270 => map.t().slice(s![.., ..;-1]).to_owned(),
        }
    }

    /// Undo `self` on a map produced by `self.apply`. Quarter turns on
    /// non-square maps are rejected so the result aligns with the original frame.
    pub fn invert(self, map: &Map) -> Result<Map> {
        let (h, w) = map.dim();
        if self.changes_shape() && h != w {
            return Err(Error::NonInvertibleTransform(self.name(), h, w));
        }
        Ok(self.inverse().apply(map))
    }
}
