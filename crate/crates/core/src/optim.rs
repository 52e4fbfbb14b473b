//! First-order optimizers over an ordered list of [`Affine`] layers.

use crate::model::Affine;

pub trait Optimizer {
    /// Apply one update. `params` and `grads` must be in the same order and
    /// shapes as the layers the optimizer was created for.
    fn step(&mut self, params: Vec<&mut Affine>, grads: &[Affine]);
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    m: Vec<Affine>,
    v: Vec<Affine>,
}

impl Adam {
    pub fn new(learning_rate: f64, layers: &[&Affine]) -> Self {
        let zeros: Vec<Affine> = layers.iter().map(|l| Affine::zeros_like(l)).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: Vec<&mut Affine>, grads: &[Affine]) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter layer count");
        assert_eq!(grads.len(), self.m.len(), "optimizer/gradient layer count");
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.learning_rate, self.epsilon);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.values_mut().zip(g.values()).zip(m.values_mut()).zip(v.values_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: Vec<&mut Affine>, grads: &[Affine]) {
        assert_eq!(params.len(), grads.len(), "optimizer/gradient layer count");
        for (p, g) in params.into_iter().zip(grads) {
            for (p, &g) in p.values_mut().zip(g.values()) {
                *p -= self.learning_rate * g;
            }
        }
    }
}
