//! Loss functions with analytic gradients w.r.t. their prediction inputs:
//! foreground-weighted BCE for segmentation and edge targets, plus the
//! entropy, consistency and rotation baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{ensure_binary, ensure_same_shape, Map, SpatialTransform};

/// Predictions are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub n_pixels: usize,
    pub n_images: usize,
}

impl LossValue {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// How per-pixel terms are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the total number of pixels in the batch.
    #[default]
    PixelMean,
    /// Sum over pixels, average over images (larger by the pixel count per image).
    ImageSum,
}

impl Normalization {
    fn divisor(self, n_pixels: usize, n_images: usize) -> f64 {
        match self {
            Normalization::PixelMean => n_pixels as f64,
            Normalization::ImageSum => n_images as f64,
        }
    }
}

/// Loss value plus `dL/dinput` for each input map.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: LossValue,
    pub grads: Vec<Map>,
}

fn clamp(p: f64) -> (f64, bool) {
    if p < EPS {
        (EPS, false)
    } else if p > 1.0 - EPS {
        (1.0 - EPS, false)
    } else {
        (p, true)
    }
}

fn check_batch(pred: &[Map], target: &[Map]) -> Result<usize> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            context: "batch length".into(),
            left: (pred.len(), 0),
            right: (target.len(), 0),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let mut n = 0;
    for (p, t) in pred.iter().zip(target) {
        ensure_same_shape(p, t, "prediction vs target")?;
        n += p.len();
    }
    Ok(n)
}

/// Mean over pixels of `-[w t log p + (1 - t) log(1 - p)]` with a per-image
/// foreground weight `w`.
pub fn weighted_bce(pred: &[Map], target: &[Map], weights: &[f64]) -> Result<LossValue> {
    weighted_bce_grad(pred, target, weights, Normalization::PixelMean).map(|lg| lg.loss)
}

pub fn weighted_bce_grad(pred: &[Map], target: &[Map], weights: &[f64], norm: Normalization) -> Result<LossGrad> {
    let n_pixels = check_batch(pred, target)?;
    if weights.len() != pred.len() {
        return Err(Error::ShapeMismatch {
            context: "weights per image".into(),
            left: (weights.len(), 0),
            right: (pred.len(), 0),
        });
    }
    for t in target {
        ensure_binary(t.view(), "BCE target")?;
    }
    let div = norm.divisor(n_pixels, pred.len());
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for ((p, t), &w) in pred.iter().zip(target).zip(weights) {
        let mut g = Map::zeros(p.dim());
        ndarray::Zip::from(&mut g).and(p).and(t).for_each(|g, &p, &t| {
            let (pc, live) = clamp(p);
            total -= w * t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
            if live {
                *g = (-w * t / pc + (1.0 - t) / (1.0 - pc)) / div;
            }
        });
        grads.push(g);
    }
    Ok(LossGrad {
        loss: LossValue {
            value: total / div,
            n_pixels,
            n_images: pred.len(),
        },
        grads,
    })
}

/// Mean binary entropy `-[p log p + (1 - p) log(1 - p)]`.
pub fn entropy_loss(pred: &[Map]) -> Result<LossValue> {
    entropy_loss_grad(pred).map(|lg| lg.loss)
}

pub fn entropy_loss_grad(pred: &[Map]) -> Result<LossGrad> {
    if pred.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let n_pixels: usize = pred.iter().map(|p| p.len()).sum();
    let div = n_pixels as f64;
    let mut total = 0.0;
    let grads = pred
        .iter()
        .map(|p| {
            p.mapv(|p| {
                let (pc, live) = clamp(p);
                total -= pc * pc.ln() + (1.0 - pc) * (1.0 - pc).ln();
                if live {
                    ((1.0 - pc) / pc).ln() / div
                } else {
                    0.0
                }
            })
        })
        .collect();
    Ok(LossGrad {
        loss: LossValue {
            value: total / div,
            n_pixels,
            n_images: pred.len(),
        },
        grads,
    })
}

/// Mean squared difference between clean predictions and augmented
/// predictions mapped back through the inverse of their augmentation.
/// Gradients are returned for the clean maps followed by the augmented maps.
pub fn consistency_loss(pred_clean: &[Map], pred_aug: &[Map], transforms: &[SpatialTransform]) -> Result<LossValue> {
    consistency_loss_grad(pred_clean, pred_aug, transforms).map(|lg| lg.loss)
}

pub fn consistency_loss_grad(pred_clean: &[Map], pred_aug: &[Map], transforms: &[SpatialTransform]) -> Result<LossGrad> {
    if transforms.len() != pred_clean.len() {
        return Err(Error::ShapeMismatch {
            context: "transforms per image".into(),
            left: (transforms.len(), 0),
            right: (pred_clean.len(), 0),
        });
    }
    let aligned = pred_aug
        .iter()
        .zip(transforms)
        .map(|(p, t)| t.invert(p))
        .collect::<Result<Vec<_>>>()?;
    let n_pixels = check_batch(pred_clean, &aligned)?;
    let div = n_pixels as f64;
    let mut total = 0.0;
    let mut clean_grads = Vec::with_capacity(pred_clean.len());
    let mut aug_grads = Vec::with_capacity(pred_clean.len());
    for ((c, a), t) in pred_clean.iter().zip(&aligned).zip(transforms) {
        let diff = c - a;
        total += diff.iter().map(|d| d * d).sum::<f64>();
        let g = diff.mapv(|d| 2.0 * d / div);
        aug_grads.push(t.apply(&g.mapv(|v| -v)));
        clean_grads.push(g);
    }
    clean_grads.extend(aug_grads);
    Ok(LossGrad {
        loss: LossValue {
            value: total / div,
            n_pixels,
            n_images: pred_clean.len(),
        },
        grads: clean_grads,
    })
}

/// Mean negative log-probability of the true rotation class.
pub fn rotation_loss(probs: &[[f64; 4]], labels: &[usize]) -> Result<LossValue> {
    rotation_loss_grad(probs, labels).map(|(l, _)| l)
}

pub fn rotation_loss_grad(probs: &[[f64; 4]], labels: &[usize]) -> Result<(LossValue, Vec<[f64; 4]>)> {
    if probs.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "labels per image".into(),
            left: (labels.len(), 0),
            right: (probs.len(), 0),
        });
    }
    if probs.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(probs.len());
    for (p, &label) in probs.iter().zip(labels) {
        if label >= 4 {
            return Err(Error::LabelOutOfRange(label));
        }
        let (pc, live) = clamp(p[label]);
        total -= pc.ln();
        let mut g = [0.0; 4];
        if live {
            g[label] = -1.0 / (pc * n);
        }
        grads.push(g);
    }
    Ok((
        LossValue {
            value: total / n,
            n_pixels: 0,
            n_images: probs.len(),
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn bce_half_prediction_is_ln2() {
        let p = Map::from_elem((4, 4), 0.5);
        let t = Map::from_shape_fn((4, 4), |(r, _)| if r < 2 { 1.0 } else { 0.0 });
        let l = weighted_bce(&[p], &[t], &[1.0]).unwrap();
        assert_abs_diff_eq!(l.value, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_eq!(l.n_pixels, 16);
    }

    #[test]
    fn bce_perfect_prediction_is_near_zero() {
        let t = Map::from_shape_fn((4, 4), |(r, c)| ((r + c) % 2) as f64);
        let l = weighted_bce(&[t.clone()], &[t], &[3.0]).unwrap();
        assert!(l.value <= 2.0 * EPS * EPS.ln().abs());
    }

    #[test]
    fn bce_two_by_two_hand_value() {
        let t = array![[1.0, 0.0], [0.0, 0.0]];
        let p = array![[0.8, 0.1], [0.2, 0.1]];
        let l = weighted_bce(&[p], &[t], &[3.0]).unwrap();
        let expected = (3.0 * -(0.8f64.ln()) - 0.9f64.ln() - 0.8f64.ln() - 0.9f64.ln()) / 4.0;
        assert_abs_diff_eq!(l.value, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(l.value, 0.2758, epsilon = 1e-4);
    }

    #[test]
    fn image_sum_differs_by_pixel_count() {
        let t = array![[1.0, 0.0], [0.0, 0.0]];
        let p = array![[0.8, 0.1], [0.2, 0.1]];
        let mean = weighted_bce_grad(&[p.clone()], &[t.clone()], &[3.0], Normalization::PixelMean).unwrap();
        let sum = weighted_bce_grad(&[p], &[t], &[3.0], Normalization::ImageSum).unwrap();
        assert_abs_diff_eq!(sum.loss.value, 4.0 * mean.loss.value, epsilon = 1e-12);
    }

    #[test]
    fn bce_errors() {
        let p = Map::from_elem((2, 2), 0.5);
        assert!(weighted_bce(&[p.clone()], &[Map::zeros((2, 3))], &[1.0]).is_err());
        assert!(matches!(
            weighted_bce(&[p.clone()], &[Map::from_elem((2, 2), 0.3)], &[1.0]),
            Err(Error::NonBinary(_))
        ));
    }

    #[test]
    fn entropy_values() {
        assert_abs_diff_eq!(
            entropy_loss(&[Map::from_elem((3, 3), 0.5)]).unwrap().value,
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(entropy_loss(&[Map::from_elem((3, 3), 0.25)]).unwrap().value, 0.5623, epsilon = 1e-4);
        assert!(entropy_loss(&[Map::from_elem((3, 3), 1e-12)]).unwrap().value < 1e-5);
    }

    #[test]
    fn entropy_peaks_at_half() {
        let at = |p: f64| entropy_loss(&[Map::from_elem((2, 2), p)]).unwrap().value;
        let peak = at(0.5);
        for i in 1..100 {
            assert!(at(i as f64 / 100.0) <= peak + 1e-15);
        }
    }

    #[test]
    fn consistency_values() {
        let a = Map::from_shape_fn((4, 4), |(r, c)| 0.1 + 0.05 * (r + c) as f64);
        let id = [SpatialTransform::Identity];
        assert_eq!(consistency_loss(&[a.clone()], &[a.clone()], &id).unwrap().value, 0.0);
        let b = a.mapv(|v| v + 0.1);
        assert_abs_diff_eq!(consistency_loss(&[a.clone()], &[b.clone()], &id).unwrap().value, 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(
            consistency_loss(&[a.clone()], &[b.clone()], &id).unwrap().value,
            consistency_loss(&[b], &[a.clone()], &id).unwrap().value,
            epsilon = 1e-15
        );
        // an augmented prediction that is exactly the transformed clean map is consistent
        let t = SpatialTransform::Rotate90;
        assert_eq!(consistency_loss(&[a.clone()], &[t.apply(&a)], &[t]).unwrap().value, 0.0);
        let rect = Map::zeros((2, 3));
        assert!(consistency_loss(&[rect.clone()], &[rect], &[t]).is_err());
    }

    #[test]
    fn rotation_values() {
        let u = rotation_loss(&[[0.25; 4]], &[2]).unwrap();
        assert_abs_diff_eq!(u.value, 4f64.ln(), epsilon = 1e-12);
        let l = rotation_loss(&[[0.7, 0.1, 0.1, 0.1]], &[0]).unwrap();
        assert_abs_diff_eq!(l.value, 0.3567, epsilon = 1e-4);
        let confident = rotation_loss(&[[1.0 - 3.0 * EPS, EPS, EPS, EPS]], &[0]).unwrap();
        assert!(confident.value < 1e-6);
        assert!(matches!(rotation_loss(&[[0.25; 4]], &[4]), Err(Error::LabelOutOfRange(4))));
    }

    #[test]
    fn unit_weight_matches_plain_bce() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p = Map::from_shape_fn((5, 5), |_| rng.gen_range(0.01..0.99));
        let t = Map::from_shape_fn((5, 5), |_| rng.gen_bool(0.3) as u8 as f64);
        let plain: f64 = p
            .iter()
            .zip(t.iter())
            .map(|(&p, &t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum::<f64>()
            / 25.0;
        assert_abs_diff_eq!(weighted_bce(&[p], &[t], &[1.0]).unwrap().value, plain, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn losses_are_pixel_permutation_invariant(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..16).map(|_| rng.gen_range(0.01..0.99)).collect();
            let q: Vec<f64> = (0..16).map(|_| rng.gen_range(0.01..0.99)).collect();
            let t: Vec<f64> = (0..16).map(|_| rng.gen_bool(0.4) as u8 as f64).collect();
            let mut perm: Vec<usize> = (0..16).collect();
            perm.shuffle(&mut rng);
            let as_map = |v: &[f64]| Map::from_shape_vec((4, 4), v.to_vec()).unwrap();
            let permute = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let (pm, qm, tm) = (as_map(&p), as_map(&q), as_map(&t));
            let (pp, qp, tp) = (as_map(&permute(&p)), as_map(&permute(&q)), as_map(&permute(&t)));
            let id = [SpatialTransform::Identity];
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
            prop_assert!(close(
                weighted_bce(&[pm.clone()], &[tm.clone()], &[2.5]).unwrap().value,
                weighted_bce(&[pp.clone()], &[tp], &[2.5]).unwrap().value
            ));
            prop_assert!(close(entropy_loss(&[pm.clone()]).unwrap().value, entropy_loss(&[pp.clone()]).unwrap().value));
            prop_assert!(close(
                consistency_loss(&[pm], &[qm], &id).unwrap().value,
                consistency_loss(&[pp], &[qp], &id).unwrap().value
            ));
        }
    }
}
