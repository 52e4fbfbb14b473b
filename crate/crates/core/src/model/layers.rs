use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::edgemaps::reflect_index;

/// Weight matrix plus bias vector. Convolutions store their kernel as
/// `(out, in * k * k)`; the same type holds gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Affine {
            weight: Array2::zeros((rows, cols)),
            bias: Array1::zeros(rows),
        }
    }

    pub fn zeros_like(other: &Affine) -> Self {
        Self::zeros(other.weight.nrows(), other.weight.ncols())
    }

    /// Normal weights with `std = gain / sqrt(fan_in)`, zero bias.
    pub fn random<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, gain / (cols as f64).sqrt()).expect("finite std");
        Affine {
            weight: Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng)),
            bias: Array1::zeros(rows),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn add_assign(&mut self, other: &Affine) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    pub fn scale(&mut self, factor: f64) {
        self.weight *= factor;
        self.bias *= factor;
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Square convolution, stride 1, reflect padding of `kernel / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub params: Affine,
}

/// Per-row (or per-column) source indices for every kernel offset.
fn tap_indices(len: usize, kernel: usize) -> Vec<Vec<usize>> {
    let pad = (kernel / 2) as isize;
    (0..kernel)
        .map(|k| (0..len).map(|i| reflect_index(i as isize + k as isize - pad, len)).collect())
        .collect()
}

impl Conv2d {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, gain: f64, rng: &mut R) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            params: Affine::random(out_channels, in_channels * kernel * kernel, gain, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let rows = tap_indices(h, k);
        let cols_idx = tap_indices(w, k);
        let src = x.as_slice().expect("contiguous input");
        let mut cols = Array2::zeros((c * k * k, h * w));
        let dst = cols.as_slice_mut().expect("contiguous");
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let r = ci * k * k + ky * k + kx;
                    let row = &mut dst[r * h * w..(r + 1) * h * w];
                    let cx = &cols_idx[kx];
                    for y in 0..h {
                        let line = &plane[rows[ky][y] * w..(rows[ky][y] + 1) * w];
                        for (d, &sx) in row[y * w..(y + 1) * w].iter_mut().zip(cx) {
                            *d = line[sx];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, shape: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = shape;
        let k = self.kernel;
        let rows = tap_indices(h, k);
        let cols_idx = tap_indices(w, k);
        let src = cols.as_slice().expect("contiguous");
        let mut out = Array3::zeros(shape);
        let dst = out.as_slice_mut().expect("contiguous");
        for ci in 0..c {
            let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let r = ci * k * k + ky * k + kx;
                    let row = &src[r * h * w..(r + 1) * h * w];
                    let cx = &cols_idx[kx];
                    for y in 0..h {
                        let base = rows[ky][y] * w;
                        for (&g, &sx) in row[y * w..(y + 1) * w].iter().zip(cx) {
                            plane[base + sx] += g;
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the output and the unfolded input needed by `backward`.
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let cols = if self.kernel == 1 {
            x.view().into_shape_with_order((self.in_channels, h * w)).expect("contiguous").to_owned()
        } else {
            self.im2col(x)
        };
        let mut out = self.params.weight.dot(&cols);
        out += &self.params.bias.view().insert_axis(Axis(1));
        let out = out.into_shape_with_order((self.out_channels, h, w)).expect("contiguous");
        (out, cols)
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, cols: &Array2<f64>, grad_out: &Array3<f64>, grad: &mut Affine, want_input: bool) -> Option<Array3<f64>> {
        let (_, h, w) = grad_out.dim();
        let g = grad_out.view().into_shape_with_order((self.out_channels, h * w)).expect("contiguous");
        grad.weight += &g.dot(&cols.t());
        grad.bias += &g.sum_axis(Axis(1));
        if !want_input {
            return None;
        }
        let gcols = self.params.weight.t().dot(&g);
        let shape = (self.in_channels, h, w);
        Some(if self.kernel == 1 {
            gcols.into_shape_with_order(shape).expect("contiguous")
        } else {
            self.col2im(&gcols, shape)
        })
    }
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zero the gradient wherever the ReLU output was not positive.
pub fn relu_backward(output: &Array3<f64>, grad: &mut Array3<f64>) {
    grad.zip_mut_with(output, |g, &o| {
        if o <= 0.0 {
            *g = 0.0
        }
    });
}

/// 2x2 max pooling, stride 2. Returns the pooled map and the flat input index
/// of each maximum (first occurrence wins ties).
pub fn max_pool2(x: &Array3<f64>) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (sy, sx) = (2 * y + dy, 2 * xx + dx);
                        let v = x[[ci, sy, sx]];
                        if v > best {
                            best = v;
                            best_idx = (ci * h + sy) * w + sx;
                        }
                    }
                }
                out[[ci, y, xx]] = best;
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(grad_out: &Array3<f64>, arg: &[usize], input_shape: (usize, usize, usize)) -> Array3<f64> {
    let mut grad = Array3::zeros(input_shape);
    let flat = grad.as_slice_mut().expect("contiguous");
    for (&idx, &g) in arg.iter().zip(grad_out.iter()) {
        flat[idx] += g;
    }
    grad
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

pub fn upsample2_backward(grad: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = grad.dim();
    let mut out = Array3::zeros((c, h / 2, w / 2));
    for ((ci, y, xx), &g) in grad.indexed_iter() {
        out[[ci, y / 2, xx / 2]] += g;
    }
    out
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
