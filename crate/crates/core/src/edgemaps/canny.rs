use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::Map;

/// Gaussian sigma plus hysteresis thresholds, both thresholds expressed as
/// fractions of the image's maximum gradient magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannyConfig {
    pub sigma: f64,
    pub low_fraction: f64,
    pub high_fraction: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        CannyConfig {
            sigma: 1.0,
            low_fraction: 0.1,
            high_fraction: 0.2,
        }
    }
}

impl CannyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("canny sigma must be > 0, got {}", self.sigma)));
        }
        if !(0.0 < self.low_fraction && self.low_fraction < self.high_fraction && self.high_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "canny thresholds need 0 < low < high <= 1, got low={} high={}",
                self.low_fraction, self.high_fraction
            )));
        }
        Ok(())
    }

    /// Stable short hash used in cache file names.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.sigma.to_le_bytes());
        hasher.update(self.low_fraction.to_le_bytes());
        hasher.update(self.high_fraction.to_le_bytes());
        hex::encode(&hasher.finalize()[..8])
    }
}

/// Binary edge map together with the parameters that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub values: Map,
    pub params: CannyConfig,
}

impl EdgeMap {
    pub fn edge_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }
}

/// Relative tolerance under which two gradient magnitudes count as tied.
/// Mathematically equal magnitudes (symmetric steps, ramps) otherwise compare
/// by rounding noise.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Reflect an out-of-range index back into `0..n` (mirror about the edge
/// pixels, edge not repeated), handling offsets larger than `n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable reflect-padded Gaussian blur. Mirrored taps are summed pairwise
/// so the result is bitwise invariant under flipping the input.
fn smooth(image: &Map, sigma: f64) -> Map {
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    let (h, w) = image.dim();
    let pass = |get: &dyn Fn(isize) -> f64| -> f64 {
        let mut acc = kernel[radius] * get(0);
        for j in 1..=radius {
            acc += kernel[radius + j] * (get(-(j as isize)) + get(j as isize));
        }
        acc
    };
    let rows = Array2::from_shape_fn((h, w), |(r, c)| {
        pass(&|d| image[[r, reflect_index(c as isize + d, w)]])
    });
    Array2::from_shape_fn((h, w), |(r, c)| {
        pass(&|d| rows[[reflect_index(r as isize + d, h), c]])
    })
}

/// Sobel derivatives on a reflect-padded image. `gx` grows to the right,
/// `gy` grows downward.
fn sobel(image: &Map) -> (Map, Map) {
    let (h, w) = image.dim();
    let at = |r: isize, c: isize| image[[reflect_index(r, h), reflect_index(c, w)]];
    let mut gx = Map::zeros((h, w));
    let mut gy = Map::zeros((h, w));
    for r in 0..h as isize {
        for c in 0..w as isize {
            let outer = (at(r - 1, c + 1) - at(r - 1, c - 1)) + (at(r + 1, c + 1) - at(r + 1, c - 1));
            gx[[r as usize, c as usize]] = outer + 2.0 * (at(r, c + 1) - at(r, c - 1));
            let below = (at(r + 1, c - 1) + at(r + 1, c + 1)) + 2.0 * at(r + 1, c);
            let above = (at(r - 1, c - 1) + at(r - 1, c + 1)) + 2.0 * at(r - 1, c);
            gy[[r as usize, c as usize]] = below - above;
        }
    }
    (gx, gy)
}

/// Quantized gradient direction as a unit step `(dr, dc)` pointing along the
/// gradient (towards increasing intensity).
pub fn gradient_step(gx: f64, gy: f64) -> (isize, isize) {
    let tan_22_5 = std::f64::consts::SQRT_2 - 1.0;
    let tan_67_5 = std::f64::consts::SQRT_2 + 1.0;
    let (ax, ay) = (gx.abs(), gy.abs());
    let sx = if gx > 0.0 { 1 } else if gx < 0.0 { -1 } else { 0 };
    let sy = if gy > 0.0 { 1 } else if gy < 0.0 { -1 } else { 0 };
    if ay <= tan_22_5 * ax {
        (0, sx)
    } else if ay >= tan_67_5 * ax {
        (sy, 0)
    } else {
        (sy, sx)
    }
}

/// Full Canny pipeline: blur, Sobel, non-maximum suppression along the
/// quantized gradient direction, then hysteresis.
///
/// A pixel survives suppression when its magnitude is at least the neighbour
/// behind it and strictly above the neighbour ahead of it (in the gradient
/// direction). Plateaus therefore thin to a single pixel on the bright side,
/// and the rule commutes with flips because flipping reverses both the
/// gradient and the neighbour ordering.
pub fn canny_edges(image: &Map, config: &CannyConfig) -> Result<EdgeMap> {
    config.validate()?;
    let (h, w) = image.dim();
    if h < 3 || w < 3 {
        return Err(Error::InvalidConfig(format!("canny needs at least 3x3 input, got {h}x{w}")));
    }
    let smoothed = smooth(image, config.sigma);
    let (gx, gy) = sobel(&smoothed);
    let magnitude = Array2::from_shape_fn((h, w), |(r, c)| gx[[r, c]].hypot(gy[[r, c]]));
    let max = magnitude.iter().cloned().fold(0.0, f64::max);
    let mut values = Map::zeros((h, w));
    if max <= 0.0 {
        return Ok(EdgeMap { values, params: *config });
    }
    let tol = TIE_TOLERANCE * max;
    let mag_at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            magnitude[[r as usize, c as usize]]
        }
    };

    let mut thinned = Map::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let m = magnitude[[r, c]];
            if m <= tol {
                continue;
            }
            let (dr, dc) = gradient_step(gx[[r, c]], gy[[r, c]]);
            let ahead = mag_at(r as isize + dr, c as isize + dc);
            let behind = mag_at(r as isize - dr, c as isize - dc);
            if m >= behind - tol && m > ahead + tol {
                thinned[[r, c]] = m;
            }
        }
    }

    let high = config.high_fraction * max - tol;
    let low = config.low_fraction * max - tol;
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if thinned[[r, c]] > 0.0 && thinned[[r, c]] >= high {
                values[[r, c]] = 1.0;
                stack.push((r, c));
            }
        }
    }
    while let Some((r, c)) = stack.pop() {
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if values[[nr, nc]] == 0.0 && thinned[[nr, nc]] > 0.0 && thinned[[nr, nc]] >= low {
                    values[[nr, nc]] = 1.0;
                    stack.push((nr, nc));
                }
            }
        }
    }
    Ok(EdgeMap { values, params: *config })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::SpatialTransform;
    use proptest::prelude::*;

    fn step_image(size: usize) -> Map {
        Map::from_shape_fn((size, size), |(_, c)| if c >= size / 2 { 1.0 } else { 0.0 })
    }

    fn disk(size: usize, radius: f64) -> Map {
        let centre = (size as f64 - 1.0) / 2.0;
        Map::from_shape_fn((size, size), |(r, c)| {
            let d = ((r as f64 - centre).powi(2) + (c as f64 - centre).powi(2)).sqrt();
            if d <= radius {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn reflect_index_mirrors() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        // offsets beyond one period on a tiny image
        assert_eq!(reflect_index(-4, 3), 0);
        assert_eq!(reflect_index(7, 3), 1);
    }

    #[test]
    fn kernel_radius_and_normalization() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let k = gaussian_kernel(0.4);
        assert_eq!(k.len(), 5);
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = Map::from_elem((12, 9), 0.37);
        let e = canny_edges(&img, &CannyConfig::default()).unwrap();
        assert_eq!(e.edge_count(), 0);
    }

    #[test]
    fn tiny_image_is_rejected() {
        assert!(canny_edges(&Map::zeros((2, 5)), &CannyConfig::default()).is_err());
        assert!(canny_edges(&Map::zeros((3, 3)), &CannyConfig::default()).is_ok());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = CannyConfig {
            sigma: 1.0,
            low_fraction: 0.3,
            high_fraction: 0.2,
        };
        assert!(canny_edges(&step_image(8), &bad).is_err());
    }

    #[test]
    fn vertical_step_yields_one_column() {
        let img = step_image(16);
        let e = canny_edges(&img, &CannyConfig::default()).unwrap();
        for r in 0..16 {
            let cols: Vec<usize> = (0..16).filter(|&c| e.values[[r, c]] == 1.0).collect();
            assert_eq!(cols, vec![8], "row {r}");
        }
    }

    #[test]
    fn disk_outline_is_connected_ring() {
        let img = disk(64, 10.0);
        let e = canny_edges(&img, &CannyConfig::default()).unwrap();
        let n = e.edge_count() as f64;
        let expected = 2.0 * std::f64::consts::PI * 10.0;
        assert!((n - expected).abs() <= 0.3 * expected, "edge count {n}");
        // every edge pixel lies within 2 px of the analytic boundary
        let centre = 31.5;
        for ((r, c), &v) in e.values.indexed_iter() {
            if v == 1.0 {
                let d = ((r as f64 - centre).powi(2) + (c as f64 - centre).powi(2)).sqrt();
                assert!((d - 10.0).abs() <= 2.0, "({r},{c}) at distance {d}");
            }
        }
        // a single 8-connected component
        let mut seen = Map::zeros((64, 64));
        let start = e.values.indexed_iter().find(|(_, &v)| v == 1.0).unwrap().0;
        let mut stack = vec![start];
        seen[start] = 1.0;
        let mut count = 1;
        while let Some((r, c)) = stack.pop() {
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = ((r as isize + dr) as usize, (c as isize + dc) as usize);
                    if nr < 64 && nc < 64 && e.values[[nr, nc]] == 1.0 && seen[[nr, nc]] == 0.0 {
                        seen[[nr, nc]] = 1.0;
                        count += 1;
                        stack.push((nr, nc));
                    }
                }
            }
        }
        assert_eq!(count as f64, n);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn output_is_binary_and_flip_equivariant(
            seed in 0u64..1000,
            h in 3usize..20,
            w in 3usize..20,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = Map::from_shape_fn((h, w), |_| rng.gen::<f64>());
            let cfg = CannyConfig::default();
            let e = canny_edges(&img, &cfg).unwrap();
            prop_assert_eq!(e.values.dim(), (h, w));
            prop_assert!(crate::maps::is_binary(e.values.view()));
            for t in [SpatialTransform::FlipHorizontal, SpatialTransform::FlipVertical] {
                let flipped = canny_edges(&t.apply(&img), &cfg).unwrap();
                prop_assert_eq!(&flipped.values, &t.apply(&e.values));
            }
        }

        #[test]
        fn raising_high_threshold_never_adds_edges(seed in 0u64..1000, high in 0.15f64..0.9) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = Map::from_shape_fn((16, 16), |_| rng.gen::<f64>());
            let lo = CannyConfig { sigma: 1.0, low_fraction: 0.1, high_fraction: high };
            let hi = CannyConfig { high_fraction: (high + 0.1).min(1.0), ..lo };
            let a = canny_edges(&img, &lo).unwrap().edge_count();
            let b = canny_edges(&img, &hi).unwrap().edge_count();
            prop_assert!(b <= a);
        }
    }
}
