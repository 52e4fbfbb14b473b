//! Human-readable outputs: error overlays, IoU-vs-shots plots with CSV
//! sidecars, and Markdown comparison tables. Renderers only format numbers
//! already present in a [`MetricsReport`]; nothing is recomputed here.

use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::maps::{ensure_binary, ensure_same_shape, Map};
use crate::util::write_atomic;

pub const FALSE_POSITIVE: Rgb<u8> = Rgb([255, 0, 0]);
pub const FALSE_NEGATIVE: Rgb<u8> = Rgb([0, 255, 0]);
pub const TRUE_NEGATIVE: Rgb<u8> = Rgb([0, 0, 0]);
pub const TRUE_POSITIVE: Rgb<u8> = Rgb([255, 255, 255]);

/// Confusion-class coloring of a predicted mask against ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorOverlay {
    pub image: RgbImage,
}

/// Pixel counts per confusion class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
}

impl ErrorOverlay {
    /// Counts the four overlay colors.
    pub fn color_counts(&self) -> Confusion {
        let mut c = Confusion::default();
        for p in self.image.pixels() {
            match *p {
                TRUE_POSITIVE => c.true_positive += 1,
                FALSE_POSITIVE => c.false_positive += 1,
                FALSE_NEGATIVE => c.false_negative += 1,
                TRUE_NEGATIVE => c.true_negative += 1,
                other => unreachable!("overlay holds only the four class colors, found {other:?}"),
            }
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &encode_png(&self.image)?)
    }
}

fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Cursor::new(Vec::new());
    image
        .write_to(&mut bytes, ImageFormat::Png)
        .map_err(|e| Error::Decode {
            path: PathBuf::from("<png encoder>"),
            message: e.to_string(),
        })?;
    Ok(bytes.into_inner())
}

/// Red = false positive, green = false negative, black = true negative,
/// white = true positive.
pub fn render_error_overlay(pred: &Map, gt: &Map) -> Result<ErrorOverlay> {
    ensure_same_shape(pred, gt, "overlay masks")?;
    ensure_binary(pred.view(), "predicted mask")?;
    ensure_binary(gt.view(), "ground-truth mask")?;
    let (h, w) = pred.dim();
    let image = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let idx = [y as usize, x as usize];
        match (pred[idx] == 1.0, gt[idx] == 1.0) {
            (true, true) => TRUE_POSITIVE,
            (true, false) => FALSE_POSITIVE,
            (false, true) => FALSE_NEGATIVE,
            (false, false) => TRUE_NEGATIVE,
        }
    });
    Ok(ErrorOverlay { image })
}

/// What a shot-curve plot contains.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotCurves {
    pub legend: Vec<String>,
    pub x_ticks: Vec<usize>,
    pub image_path: PathBuf,
    pub csv_path: PathBuf,
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
];

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    fn blend(&mut self, x: i64, y: i64, c: [u8; 3], alpha: f64) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            let p = self.img.get_pixel_mut(x as u32, y as u32);
            for i in 0..3 {
                p.0[i] = (p.0[i] as f64 * (1.0 - alpha) + c[i] as f64 * alpha).round() as u8;
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3], thick: i64) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            for ox in 0..thick {
                for oy in 0..thick {
                    self.put(x + ox - thick / 2, y + oy - thick / 2, c);
                }
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: [u8; 3]) {
        for (i, ch) in s.chars().enumerate() {
            let glyph = font8x8::legacy::BASIC_LEGACY[if ch.is_ascii() { ch as usize } else { b'?' as usize }];
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..8 {
                    if bits >> col & 1 == 1 {
                        self.put(x + 8 * i as i64 + col, y + row as i64, c);
                    }
                }
            }
        }
    }
}

fn legend_labels(reports: &[MetricsReport]) -> Vec<String> {
    let methods: Vec<&str> = reports.iter().map(|r| r.method.as_str()).collect();
    let unique = methods.iter().collect::<BTreeSet<_>>().len() == methods.len();
    reports
        .iter()
        .map(|r| {
            if unique {
                r.method.clone()
            } else {
                format!("{} ({})", r.method, r.setting())
            }
        })
        .collect()
}

/// Mean IoU against shot count for one target, one curve per report with a
/// ±std band. The plotted numbers are also written to `<output>.csv`.
pub fn render_shot_curves(reports: &[MetricsReport], target: &str, output_path: &Path) -> Result<ShotCurves> {
    if reports.is_empty() {
        return Err(Error::Empty("reports to plot"));
    }
    let shots: BTreeSet<usize> = reports
        .iter()
        .flat_map(|r| r.cells.iter().filter(|c| c.target == target).map(|c| c.shot))
        .collect();
    if shots.is_empty() {
        return Err(Error::Missing(format!("results for target `{target}`")));
    }
    let x_ticks: Vec<usize> = shots.into_iter().collect();
    let legend = legend_labels(reports);

    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["method", "setting", "target", "shot", "mean", "std"])?;
    for r in reports {
        for &k in &x_ticks {
            if let Some(c) = r.cell(target, k) {
                csv.write_record([
                    r.method.clone(),
                    r.setting(),
                    target.to_string(),
                    k.to_string(),
                    format!("{:.1}", c.mean),
                    format!("{:.1}", c.std),
                ])?;
            }
        }
    }
    let csv_path = output_path.with_extension("csv");
    let csv_bytes = csv.into_inner().map_err(|e| Error::io(&csv_path, e.into_error()))?;

    let (width, height) = (760i64, 440i64);
    let (left, right, top, bottom) = (56i64, 560i64, 36i64, 390i64);
    let mut canvas = Canvas {
        img: RgbImage::from_pixel(width as u32, height as u32, Rgb([255, 255, 255])),
    };
    let (xmin, xmax) = (x_ticks[0] as f64, *x_ticks.last().expect("non-empty") as f64);
    let px = |k: f64| -> i64 {
        if xmax == xmin {
            (left + right) / 2
        } else {
            left + ((k - xmin) / (xmax - xmin) * (right - left) as f64).round() as i64
        }
    };
    let py = |v: f64| -> i64 { bottom - (v.clamp(0.0, 100.0) / 100.0 * (bottom - top) as f64).round() as i64 };

    for v in (0..=100).step_by(20) {
        let y = py(v as f64);
        canvas.line((left, y), (right, y), [225, 225, 225], 1);
        let label = v.to_string();
        canvas.text(left - 10 - 8 * label.len() as i64, y - 4, &label, [0, 0, 0]);
    }
    for &k in &x_ticks {
        let x = px(k as f64);
        canvas.line((x, bottom), (x, bottom + 5), [0, 0, 0], 1);
        let label = k.to_string();
        canvas.text(x - 4 * label.len() as i64, bottom + 10, &label, [0, 0, 0]);
    }
    canvas.text((left + right) / 2 - 20, bottom + 28, "shots", [0, 0, 0]);
    canvas.text(8, 12, "mean IoU (%)", [0, 0, 0]);
    canvas.text(left + 120, 12, target, [0, 0, 0]);

    for (i, r) in reports.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64, f64)> = x_ticks
            .iter()
            .filter_map(|&k| r.cell(target, k).map(|c| (k as f64, c.mean, c.std)))
            .collect();
        for w in pts.windows(2) {
            let (xa, xb) = (px(w[0].0), px(w[1].0));
            for x in xa..=xb {
                let t = if xb == xa { 0.0 } else { (x - xa) as f64 / (xb - xa) as f64 };
                let m = w[0].1 + t * (w[1].1 - w[0].1);
                let s = w[0].2 + t * (w[1].2 - w[0].2);
                for y in py(m + s)..=py(m - s) {
                    canvas.blend(x, y, color, 0.15);
                }
            }
        }
        for w in pts.windows(2) {
            canvas.line((px(w[0].0), py(w[0].1)), (px(w[1].0), py(w[1].1)), color, 2);
        }
        for &(k, m, _) in &pts {
            let (x, y) = (px(k), py(m));
            for dx in -2..=2 {
                for dy in -2..=2 {
                    canvas.put(x + dx, y + dy, color);
                }
            }
        }
        let ly = top + 20 * i as i64;
        canvas.line((right + 20, ly + 4), (right + 40, ly + 4), color, 2);
        canvas.text(right + 48, ly, &legend[i], [0, 0, 0]);
    }
    canvas.line((left, bottom), (right, bottom), [0, 0, 0], 1);
    canvas.line((left, top), (left, bottom), [0, 0, 0], 1);

    write_atomic(output_path, &encode_png(&canvas.img)?)?;
    write_atomic(&csv_path, &csv_bytes)?;
    Ok(ShotCurves {
        legend,
        x_ticks,
        image_path: output_path.to_path_buf(),
        csv_path,
    })
}

/// Markdown comparison: one block per target, rows grouped by training
/// setting, one `mean±std` column per shot count. The best mean in each
/// column of a block is bold.
pub fn comparison_table_markdown(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Empty("reports to tabulate"));
    }
    let shots = reports[0].shots();
    for r in reports {
        if r.shots() != shots {
            return Err(Error::InvalidConfig(format!(
                "inconsistent shot sets: `{}` has {:?}, `{}` has {:?}",
                reports[0].method,
                shots,
                r.method,
                r.shots()
            )));
        }
    }
    let targets: BTreeSet<String> = reports.iter().flat_map(|r| r.targets()).collect();
    let mut order: Vec<&MetricsReport> = reports.iter().collect();
    order.sort_by(|a, b| {
        (a.labelled_fraction, a.unlabelled_fraction)
            .partial_cmp(&(b.labelled_fraction, b.unlabelled_fraction))
            .expect("finite fractions")
            .then_with(|| a.method.cmp(&b.method))
    });

    let mut out = String::from("# Mean IoU (%) by shot count\n");
    for target in &targets {
        out.push_str(&format!("\n## {target}\n\n| Setting | Method |"));
        for k in &shots {
            out.push_str(&format!(" {k}-shot |"));
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---:|".repeat(shots.len()));
        out.push('\n');
        let rows: Vec<&MetricsReport> = order.iter().copied().filter(|r| r.targets().contains(target)).collect();
        let best: Vec<f64> = shots
            .iter()
            .map(|&k| {
                rows.iter()
                    .filter_map(|r| r.cell(target, k).map(|c| c.mean))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        for r in rows {
            out.push_str(&format!("| {} | {} |", r.setting(), r.method));
            for (j, &k) in shots.iter().enumerate() {
                match r.cell(target, k) {
                    Some(c) if c.mean == best[j] => out.push_str(&format!(" **{}** |", c.formatted())),
                    Some(c) => out.push_str(&format!(" {} |", c.formatted())),
                    None => out.push_str(" – |"),
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn render_comparison_table(reports: &[MetricsReport], output_path: &Path) -> Result<String> {
    let md = comparison_table_markdown(reports)?;
    write_atomic(output_path, md.as_bytes())?;
    Ok(md)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::MetricCell;
    use ndarray::array;

    fn report(method: &str, unlabelled: f64, means: &[(usize, f64)]) -> MetricsReport {
        MetricsReport {
            method: method.into(),
            labelled_fraction: 0.1,
            unlabelled_fraction: unlabelled,
            cells: means
                .iter()
                .map(|&(shot, mean)| MetricCell {
                    target: "cells".into(),
                    shot,
                    mean,
                    std: 2.5,
                    ious: vec![mean / 100.0],
                })
                .collect(),
        }
    }

    #[test]
    fn overlay_examples() {
        let ones = Map::ones((2, 3));
        let all_tp = render_error_overlay(&ones, &ones).unwrap();
        assert!(all_tp.image.pixels().all(|p| *p == TRUE_POSITIVE));
        let gt = array![[1.0, 0.0], [0.0, 1.0]];
        let inv = gt.mapv(|v| 1.0 - v);
        let c = render_error_overlay(&inv, &gt).unwrap().color_counts();
        assert_eq!((c.false_positive, c.false_negative, c.true_positive, c.true_negative), (2, 2, 0, 0));
        assert!(render_error_overlay(&ones, &Map::ones((3, 2))).is_err());
    }

    #[test]
    fn shot_curves_have_legend_ticks_and_matching_csv() {
        let dir = tempfile::tempdir().unwrap();
        let shots = [1, 3, 5, 7, 10];
        let a = report("supervised", 0.0, &shots.map(|k| (k, 30.0 + k as f64)));
        let b = report("edge_joint", 0.6, &shots.map(|k| (k, 35.0 + k as f64)));
        let out = render_shot_curves(&[a.clone(), b.clone()], "cells", &dir.path().join("curves.png")).unwrap();
        assert_eq!(out.legend, vec!["supervised", "edge_joint"]);
        assert_eq!(out.x_ticks, vec![1, 3, 5, 7, 10]);
        let img = image::open(&out.image_path).unwrap();
        assert_eq!((img.width(), img.height()), (760, 440));
        let mut rdr = csv::Reader::from_path(&out.csv_path).unwrap();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 10);
        for row in rows {
            let r = if &row[0] == "supervised" { &a } else { &b };
            let cell = r.cell("cells", row[3].parse().unwrap()).unwrap();
            assert_eq!(row[4].parse::<f64>().unwrap(), cell.mean);
            assert_eq!(row[5].parse::<f64>().unwrap(), cell.std);
        }
        assert!(render_shot_curves(&[], "cells", &dir.path().join("x.png")).is_err());
    }

    #[test]
    fn table_rows_cells_and_bold() {
        let a = report("supervised", 0.0, &[(1, 30.0), (5, 41.0)]);
        let b = report("edge_joint", 0.6, &[(1, 33.3), (5, 40.0)]);
        let c = report("edge_joint", 0.3, &[(1, 20.0), (5, 46.7)]);
        let md = comparison_table_markdown(&[b, a, c]).unwrap();
        let rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| 10%")).collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].starts_with("| 10% labelled | supervised"));
        assert!(rows[1].contains("+ 30% unlabelled"));
        assert!(rows[2].contains("**33.3±2.5**") && rows[1].contains("**46.7±2.5**"));
        for cell in rows.iter().flat_map(|r| r.split('|').skip(3)) {
            let cell = cell.trim().trim_matches('*');
            if cell.is_empty() {
                continue;
            }
            let (m, s) = cell.split_once('±').unwrap();
            for part in [m, s] {
                let (i, f) = part.split_once('.').unwrap();
                assert!(!i.is_empty() && i.chars().all(|c| c.is_ascii_digit()));
                assert!(f.len() == 1 && f.chars().all(|c| c.is_ascii_digit()));
            }
        }
    }

    #[test]
    fn table_rejects_inconsistent_shots() {
        let a = report("supervised", 0.0, &[(1, 30.0), (5, 41.0)]);
        let b = report("edge_joint", 0.6, &[(1, 33.3)]);
        assert!(comparison_table_markdown(&[a, b]).is_err());
    }
}
