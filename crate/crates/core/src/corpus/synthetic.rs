//! Desk-scale stand-in for microscopy corpora: elliptical cells with smooth
//! intensity profiles, a top-to-bottom illumination falloff and additive
//! Gaussian noise. Styles differ in contrast polarity, texture and density so
//! that a source/target domain gap exists.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::save_gray_png;
use crate::error::{Error, Result};
use crate::maps::Map;

const CELL_RETRIES: usize = 200;
const IMAGE_RETRIES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStyle {
    /// Source style: bright domed cells on a dark background.
    Fluorescent,
    /// Source style: flat textured cells on a mid-grey background.
    Textured,
    /// Target style: dark cells with a darker membrane on a bright background.
    Inverted,
}

impl CellStyle {
    pub fn is_target(self) -> bool {
        matches!(self, CellStyle::Inverted)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub count: usize,
    /// `(height, width)`
    pub image_size: (usize, usize),
    pub cell_count_range: (usize, usize),
    pub cell_radius_range: (f64, f64),
    pub noise_level: f64,
    pub seed: u64,
    pub style: CellStyle,
    /// Accepted range of mask foreground fraction per image.
    pub foreground_range: (f64, f64),
}

impl SyntheticConfig {
    pub fn preset(style: CellStyle, count: usize, size: usize, seed: u64) -> Self {
        let scale = size as f64 / 64.0;
        let (cells, radii, noise, fg) = match style {
            CellStyle::Fluorescent => ((3, 6), (5.0, 9.0), 0.03, (0.05, 0.45)),
            CellStyle::Textured => ((4, 7), (4.5, 8.0), 0.05, (0.05, 0.45)),
            CellStyle::Inverted => ((4, 8), (4.0, 7.5), 0.05, (0.05, 0.45)),
        };
        let cells = (
            ((cells.0 as f64) * scale * scale).round().max(1.0) as usize,
            ((cells.1 as f64) * scale * scale).round().max(1.0) as usize,
        );
        SyntheticConfig {
            count,
            image_size: (size, size),
            cell_count_range: cells,
            cell_radius_range: (radii.0 * scale, radii.1 * scale),
            noise_level: noise,
            seed,
            style,
            foreground_range: fg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (rmin, rmax) = self.cell_radius_range;
        if self.count == 0 {
            return Err(Error::InvalidConfig("synthetic count must be >= 1".into()));
        }
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::InvalidConfig(format!("bad cell radius range {rmin}..{rmax}")));
        }
        if 2.0 * rmax + 3.0 > h.min(w) as f64 {
            return Err(Error::InvalidConfig(format!(
                "cell radius {rmax} does not fit inside {h}x{w}"
            )));
        }
        if self.cell_count_range.0 == 0 || self.cell_count_range.0 > self.cell_count_range.1 {
            return Err(Error::InvalidConfig("bad cell count range".into()));
        }
        let (lo, hi) = self.foreground_range;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::InvalidConfig("bad foreground range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    angle: f64,
    brightness: f64,
    texture_phase: f64,
}

impl Cell {
    /// Normalized elliptical radius: < 1 inside, 1 on the boundary.
    fn radius_at(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

fn place_cells<R: Rng>(cfg: &SyntheticConfig, rng: &mut R) -> Result<Vec<Cell>> {
    let (h, w) = cfg.image_size;
    let n = rng.gen_range(cfg.cell_count_range.0..=cfg.cell_count_range.1);
    let (rmin, rmax) = cfg.cell_radius_range;
    let mut cells: Vec<Cell> = Vec::with_capacity(n);
    for i in 0..n {
        let mut placed = false;
        for _ in 0..CELL_RETRIES {
            let a = rng.gen_range(rmin..=rmax);
            let b = rng.gen_range(rmin..=rmax).min(a);
            let cy = rng.gen_range(a + 1.0..=h as f64 - a - 2.0);
            let cx = rng.gen_range(a + 1.0..=w as f64 - a - 2.0);
            let clear = cells.iter().all(|o| {
                let d = ((o.cy - cy).powi(2) + (o.cx - cx).powi(2)).sqrt();
                d > o.a + a + 2.0
            });
            if clear {
                cells.push(Cell {
                    cy,
                    cx,
                    a,
                    b,
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                    brightness: rng.gen_range(0.8..1.0),
                    texture_phase: rng.gen_range(0.0..std::f64::consts::TAU),
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement(format!(
                "could not place cell {} of {n} after {CELL_RETRIES} attempts",
                i + 1
            )));
        }
    }
    Ok(cells)
}

/// Render one image/mask pair. Returns `(image, mask)`.
fn render<R: Rng>(cfg: &SyntheticConfig, cells: &[Cell], rng: &mut R) -> (Map, Map) {
    let (h, w) = cfg.image_size;
    let illumination = rng.gen_range(0.04..0.12);
    let noise = Normal::new(0.0, cfg.noise_level.max(1e-12)).expect("finite std");
    let mut image = Map::zeros((h, w));
    let mut mask = Map::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64, c as f64);
            let falloff = illumination * (1.0 - y / h as f64);
            let background = match cfg.style {
                CellStyle::Fluorescent => 0.08,
                CellStyle::Textured => 0.30,
                CellStyle::Inverted => 0.72,
            };
            let mut value = background;
            for cell in cells {
                let d = cell.radius_at(y, x);
                if d < 1.0 {
                    mask[[r, c]] = 1.0;
                }
                // one-pixel anti-aliased rim
                let coverage = ((1.0 - d) * cell.b + 0.5).clamp(0.0, 1.0);
                if coverage <= 0.0 {
                    continue;
                }
                let inside = match cfg.style {
                    CellStyle::Fluorescent => cell.brightness * (0.45 + 0.4 * (1.0 - d * d).max(0.0)),
                    CellStyle::Textured => {
                        let t = ((x + y) * 0.9 + cell.texture_phase).sin() * 0.06;
                        cell.brightness * 0.78 + t
                    }
                    CellStyle::Inverted => {
                        if d > 0.75 {
                            0.18
                        } else {
                            0.42 * cell.brightness
                        }
                    }
                };
                value = value * (1.0 - coverage) + inside * coverage;
            }
            image[[r, c]] = (value + falloff + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    (image, mask)
}

/// Deterministic image/mask pair for index `index` of a config.
pub fn generate_pair(cfg: &SyntheticConfig, index: usize) -> Result<(Map, Map)> {
    cfg.validate()?;
    let mut rng = crate::util::rng_for(cfg.seed, &format!("synthetic/{:?}/{index}", cfg.style));
    let total = (cfg.image_size.0 * cfg.image_size.1) as f64;
    for _ in 0..IMAGE_RETRIES {
        let cells = place_cells(cfg, &mut rng)?;
        let (image, mask) = render(cfg, &cells, &mut rng);
        let fg = mask.sum() / total;
        if fg >= cfg.foreground_range.0 && fg <= cfg.foreground_range.1 {
            return Ok((image, mask));
        }
    }
    Err(Error::Placement(format!(
        "foreground fraction stayed outside {:?} after {IMAGE_RETRIES} attempts",
        cfg.foreground_range
    )))
}

/// Write `count` images and masks as `<out>/images/img_NNN.png` and
/// `<out>/masks/img_NNN.png`.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut written = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let (image, mask) = generate_pair(cfg, i)?;
        let name = format!("img_{i:03}.png");
        let ipath = out_dir.join("images").join(&name);
        save_gray_png(&ipath, &image)?;
        save_gray_png(&out_dir.join("masks").join(&name), &mask)?;
        written.push(ipath);
    }
    Ok(written)
}
