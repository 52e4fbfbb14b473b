//! Training loops: joint segmentation + edge training, the supervised and
//! regularized baselines, rotation pre-training and K-shot fine-tuning.

mod methods;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, TrainingData};
use crate::edgemaps::foreground_weight;
use crate::error::{Error, Result};
use crate::maps::{Map, SpatialTransform};
use crate::model::{DecoderKind, ModelParameters, ParamBlock, PathGrads};
use crate::objectives::{consistency_loss_grad, entropy_loss_grad, rotation_loss_grad, weighted_bce_grad, LossValue, Normalization};
use crate::optim::{Adam, Optimizer, Sgd};
use crate::util::rng_for;

pub use methods::{
    ConsistencyMethod, EdgeJointMethod, EntropyMethod, MethodRegistry, RotationPretrainMethod, SupervisedMethod, TrainingMethod,
};

/// Unlabelled fractions the experiment protocol is defined for.
pub const UNLABELLED_FRACTIONS: [f64; 4] = [0.0, 0.3, 0.6, 1.0];

/// How the two optimizers of joint training are driven.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointUpdate {
    /// Segmentation step, then an edge step on the updated parameters.
    #[default]
    Alternating,
    /// Both gradients taken at the same parameters; the encoder receives
    /// their sum through a single optimizer.
    Summed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub method: String,
    pub unlabelled_fraction: f64,
    pub seed: u64,
    /// Weight of the entropy / consistency term.
    pub regularizer_weight: f64,
    pub joint_update: JointUpdate,
    pub normalization: Normalization,
    /// SGD step size for rotation pre-training.
    pub rotation_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.001,
            method: "supervised".into(),
            unlabelled_fraction: 0.0,
            seed: 0,
            regularizer_weight: 1.0,
            joint_update: JointUpdate::Alternating,
            normalization: Normalization::PixelMean,
            rotation_learning_rate: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("train.learning_rate", self.learning_rate),
            ("train.rotation_learning_rate", self.rotation_learning_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.regularizer_weight.is_finite() && self.regularizer_weight >= 0.0) {
            return bad(format!(
                "train.regularizer_weight must be non-negative, got {}",
                self.regularizer_weight
            ));
        }
        if !UNLABELLED_FRACTIONS.contains(&self.unlabelled_fraction) {
            return bad(format!(
                "train.unlabelled_fraction must be one of {UNLABELLED_FRACTIONS:?}, got {}",
                self.unlabelled_fraction
            ));
        }
        let supervised = self.method == "supervised";
        if supervised != (self.unlabelled_fraction == 0.0) {
            return bad(format!(
                "train.unlabelled_fraction is {} but method is `{}`: the fraction must be 0 exactly when the method is supervised",
                self.unlabelled_fraction, self.method
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Mini-batches hold `min(K, max_batch_size)` shots.
    pub max_batch_size: usize,
    /// Randomly flip each shot horizontally or vertically (or not at all).
    pub flip_augmentation: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            learning_rate: 0.001,
            max_batch_size: 4,
            flip_augmentation: true,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.max_batch_size == 0 {
            return Err(Error::InvalidConfig(
                "finetune.epochs and finetune.max_batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "finetune.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub supervised_loss: f64,
    pub self_supervised_loss: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainHistory {
    pub fn supervised_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.supervised_loss).collect()
    }

    pub fn self_supervised_losses(&self) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.self_supervised_loss).collect()
    }

    /// Writes `epoch,L_S,L_SS,wall_time`; an absent L_SS is an empty field.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "L_S", "L_SS", "wall_time"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.supervised_loss.to_string(),
                r.self_supervised_loss.map(|v| v.to_string()).unwrap_or_default(),
                format!("{:.3}", r.wall_time),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        crate::util::write_atomic(path, &bytes)
    }
}

/// Fixed-size mini-batches over a pool, reshuffled whenever it is exhausted.
struct CyclicSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl CyclicSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        CyclicSampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

/// One shuffled pass over `n` items, chunked into batches.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Share of a per-image loss term in the batch reduction.
fn image_share(norm: Normalization, pixels: usize, total_pixels: usize, n_images: usize) -> f64 {
    match norm {
        Normalization::PixelMean => pixels as f64 / total_pixels as f64,
        Normalization::ImageSum => 1.0 / n_images as f64,
    }
}

fn check_finite(loss: f64, phase: &'static str, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { phase, epoch, batch })
    }
}

/// Weighted BCE of one decoder path over `(image, target)` pairs, with
/// gradients for the encoder and that decoder. Images are processed one at a
/// time so activations for the whole batch are never held at once.
pub fn path_loss_grads(
    model: &ModelParameters,
    kind: DecoderKind,
    batch: &[(&Map, &Map)],
    norm: Normalization,
) -> Result<(LossValue, PathGrads)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let total_pixels: usize = batch.iter().map(|(x, _)| x.len()).sum();
    let mut grads = model.zero_path_grads(kind);
    let mut value = 0.0;
    for (image, target) in batch {
        let trace = model.forward_traced(kind, image)?;
        let w = foreground_weight(target)?;
        let lg = weighted_bce_grad(
            std::slice::from_ref(&trace.prediction),
            std::slice::from_ref(*target),
            &[w],
            norm,
        )?;
        let share = image_share(norm, image.len(), total_pixels, batch.len());
        value += lg.loss.value * share;
        model.backward(kind, &trace, &(&lg.grads[0] * share), &mut grads);
    }
    Ok((
        LossValue {
            value,
            n_pixels: total_pixels,
            n_images: batch.len(),
        },
        grads,
    ))
}

/// Unlabelled-data regularizers for the segmentation path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    Entropy,
    Consistency,
}

impl Regularizer {
    /// Regularizer value on `images` and its gradient scaled by `weight`.
    pub fn loss_grads(self, model: &ModelParameters, images: &[&Map], weight: f64, rng: &mut ChaCha8Rng) -> Result<(LossValue, PathGrads)> {
        if images.is_empty() {
            return Err(Error::Empty("regularizer batch"));
        }
        let kind = DecoderKind::Segmentation;
        let total_pixels: usize = images.iter().map(|x| x.len()).sum();
        let mut grads = model.zero_path_grads(kind);
        let mut value = 0.0;
        for image in images {
            let share = image.len() as f64 / total_pixels as f64;
            match self {
                Regularizer::Entropy => {
                    let trace = model.forward_traced(kind, image)?;
                    let lg = entropy_loss_grad(std::slice::from_ref(&trace.prediction))?;
                    value += lg.loss.value * share;
                    model.backward(kind, &trace, &(&lg.grads[0] * (share * weight)), &mut grads);
                }
                Regularizer::Consistency => {
                    let choices: &[SpatialTransform] = if image.nrows() == image.ncols() {
                        &SpatialTransform::AUGMENTATIONS
                    } else {
                        &[SpatialTransform::FlipHorizontal, SpatialTransform::FlipVertical]
                    };
                    let t = choices[rng.gen_range(0..choices.len())];
                    let clean = model.forward_traced(kind, image)?;
                    let aug = model.forward_traced(kind, &t.apply(image))?;
                    let lg = consistency_loss_grad(
                        std::slice::from_ref(&clean.prediction),
                        std::slice::from_ref(&aug.prediction),
                        &[t],
                    )?;
                    value += lg.loss.value * share;
                    model.backward(kind, &clean, &(&lg.grads[0] * (share * weight)), &mut grads);
                    model.backward(kind, &aug, &(&lg.grads[1] * (share * weight)), &mut grads);
                }
            }
        }
        Ok((
            LossValue {
                value,
                n_pixels: total_pixels,
                n_images: images.len(),
            },
            grads,
        ))
    }
}

fn seg_pairs<'a>(samples: &'a [Sample], idx: &[usize]) -> Result<Vec<(&'a Map, &'a Map)>> {
    idx.iter().map(|&i| Ok((&samples[i].image, samples[i].mask()?))).collect()
}

fn edge_pairs<'a>(samples: &'a [Sample], idx: &[usize]) -> Result<Vec<(&'a Map, &'a Map)>> {
    idx.iter()
        .map(|&i| Ok((&samples[i].image, samples[i].edge_target()?)))
        .collect()
}

fn seg_layers(model: &ModelParameters) -> Vec<&crate::model::Affine> {
    let mut v = model.encoder.layers();
    v.extend(model.seg_decoder.layers());
    v
}

fn seg_layers_mut(model: &mut ModelParameters) -> Vec<&mut crate::model::Affine> {
    let mut v = model.encoder.layers_mut();
    v.extend(model.seg_decoder.layers_mut());
    v
}

fn flat_grads(grads: PathGrads) -> Vec<crate::model::Affine> {
    let mut v = grads.encoder;
    v.extend(grads.branch);
    v
}

/// Joint trainer state: the model plus one Adam instance per decoder path,
/// each also covering the shared encoder.
pub struct JointTrainer {
    pub model: ModelParameters,
    opt_seg: Adam,
    opt_edge: Adam,
    /// In summed mode the edge optimizer covers only the edge decoder.
    summed: bool,
    norm: Normalization,
}

impl JointTrainer {
    pub fn new(model: ModelParameters, learning_rate: f64, update: JointUpdate, norm: Normalization) -> Self {
        let opt_seg = Adam::new(learning_rate, &seg_layers(&model));
        let summed = update == JointUpdate::Summed;
        let mut edge_layers = if summed { Vec::new() } else { model.encoder.layers() };
        edge_layers.extend(model.edge_decoder.layers());
        let opt_edge = Adam::new(learning_rate, &edge_layers);
        JointTrainer {
            model,
            opt_seg,
            opt_edge,
            summed,
            norm,
        }
    }

    /// One step of the segmentation optimizer on `L_S` (plus an optional extra
    /// gradient for the same path).
    pub fn supervised_step(&mut self, batch: &[(&Map, &Map)]) -> Result<LossValue> {
        let (loss, grads) = path_loss_grads(&self.model, DecoderKind::Segmentation, batch, self.norm)?;
        self.apply_seg(grads);
        Ok(loss)
    }

    fn apply_seg(&mut self, grads: PathGrads) {
        self.opt_seg.step(seg_layers_mut(&mut self.model), &flat_grads(grads));
    }

    /// One step of the edge optimizer on `L_SS`.
    pub fn edge_step(&mut self, batch: &[(&Map, &Map)]) -> Result<LossValue> {
        let (loss, grads) = path_loss_grads(&self.model, DecoderKind::Edge, batch, self.norm)?;
        let mut layers = self.model.encoder.layers_mut();
        let mut g = grads.encoder;
        if self.summed {
            layers.clear();
            g.clear();
        }
        layers.extend(self.model.edge_decoder.layers_mut());
        g.extend(grads.branch);
        self.opt_edge.step(layers, &g);
        Ok(loss)
    }

    /// Both losses at the current parameters; the encoder is moved once by
    /// the segmentation optimizer using the summed encoder gradient.
    fn summed_step(&mut self, seg: &[(&Map, &Map)], edge: &[(&Map, &Map)]) -> Result<(LossValue, LossValue)> {
        let (ls, mut gs) = path_loss_grads(&self.model, DecoderKind::Segmentation, seg, self.norm)?;
        let (le, ge) = path_loss_grads(&self.model, DecoderKind::Edge, edge, self.norm)?;
        for (a, b) in gs.encoder.iter_mut().zip(&ge.encoder) {
            a.add_assign(b);
        }
        if ls.is_finite() && le.is_finite() {
            self.apply_seg(gs);
            self.opt_edge.step(self.model.edge_decoder.layers_mut(), &ge.branch);
        }
        Ok((ls, le))
    }
}

fn require_pool(samples: &[Sample], what: &'static str) -> Result<()> {
    if samples.is_empty() {
        Err(Error::Empty(what))
    } else {
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Edge-map joint training: per iteration one labelled batch drives the
/// segmentation optimizer on `L_S` and one unlabelled batch drives the edge
/// optimizer on `L_SS`. An epoch is one pass over the labelled set.
pub fn joint_train(params: ModelParameters, data: &TrainingData, config: &TrainConfig) -> Result<(ModelParameters, TrainHistory)> {
    require_pool(&data.labelled, "labelled pool")?;
    require_pool(&data.unlabelled, "unlabelled pool")?;
    let mut trainer = JointTrainer::new(params, config.learning_rate, config.joint_update, config.normalization);
    let mut order_rng = rng_for(config.seed, "labelled-order");
    let mut unlabelled = CyclicSampler::new(data.unlabelled.len(), rng_for(config.seed, "unlabelled-order"));
    let start = Instant::now();
    let mut history = TrainHistory::default();
    for epoch in 1..=config.epochs {
        let (mut ls, mut lss) = (Vec::new(), Vec::new());
        for (b, idx) in epoch_batches(data.labelled.len(), config.batch_size, &mut order_rng).into_iter().enumerate() {
            let seg = seg_pairs(&data.labelled, &idx)?;
            let uidx = unlabelled.next_batch(config.batch_size);
            let edge = edge_pairs(&data.unlabelled, &uidx)?;
            let (s, e) = match config.joint_update {
                JointUpdate::Alternating => {
                    let s = trainer.supervised_step(&seg)?;
                    check_finite(s.value, "supervised", epoch, b)?;
                    (s, trainer.edge_step(&edge)?)
                }
                JointUpdate::Summed => trainer.summed_step(&seg, &edge)?,
            };
            check_finite(s.value, "supervised", epoch, b)?;
            check_finite(e.value, "edge", epoch, b)?;
            ls.push(s.value);
            lss.push(e.value);
        }
        history.records.push(EpochRecord {
            epoch,
            supervised_loss: mean(&ls),
            self_supervised_loss: Some(mean(&lss)),
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok((trainer.model, history))
}

/// Segmentation training on labelled images only; shared by the supervised
/// baseline and the decoder stage after rotation pre-training.
fn supervised_loop(params: ModelParameters, labelled: &[Sample], config: &TrainConfig) -> Result<(ModelParameters, TrainHistory)> {
    require_pool(labelled, "labelled pool")?;
    let mut trainer = JointTrainer::new(params, config.learning_rate, JointUpdate::Alternating, config.normalization);
    let mut order_rng = rng_for(config.seed, "labelled-order");
    let start = Instant::now();
    let mut history = TrainHistory::default();
    for epoch in 1..=config.epochs {
        let mut ls = Vec::new();
        for (b, idx) in epoch_batches(labelled.len(), config.batch_size, &mut order_rng).into_iter().enumerate() {
            let s = trainer.supervised_step(&seg_pairs(labelled, &idx)?)?;
            check_finite(s.value, "supervised", epoch, b)?;
            ls.push(s.value);
        }
        history.records.push(EpochRecord {
            epoch,
            supervised_loss: mean(&ls),
            self_supervised_loss: None,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok((trainer.model, history))
}

/// Supervised-only baseline; rejects configs that ask for unlabelled data.
pub fn train_supervised(params: ModelParameters, labelled: &[Sample], config: &TrainConfig) -> Result<(ModelParameters, TrainHistory)> {
    if config.unlabelled_fraction != 0.0 {
        return Err(Error::InvalidConfig(format!(
            "supervised training uses no unlabelled data, but unlabelled_fraction is {}",
            config.unlabelled_fraction
        )));
    }
    supervised_loop(params, labelled, config)
}

/// Supervised loss plus a weighted unlabelled regularizer, all driving the
/// segmentation optimizer. The regularizer and its sampling use their own
/// random streams, so a zero weight reproduces the supervised trajectory.
pub fn train_with_regularizer(
    params: ModelParameters,
    data: &TrainingData,
    config: &TrainConfig,
    regularizer: Regularizer,
) -> Result<(ModelParameters, TrainHistory)> {
    require_pool(&data.labelled, "labelled pool")?;
    require_pool(&data.unlabelled, "unlabelled pool")?;
    let mut trainer = JointTrainer::new(params, config.learning_rate, JointUpdate::Alternating, config.normalization);
    let mut order_rng = rng_for(config.seed, "labelled-order");
    let mut unlabelled = CyclicSampler::new(data.unlabelled.len(), rng_for(config.seed, "unlabelled-order"));
    let mut aug_rng = rng_for(config.seed, "augmentation");
    let start = Instant::now();
    let mut history = TrainHistory::default();
    for epoch in 1..=config.epochs {
        let (mut ls, mut lr) = (Vec::new(), Vec::new());
        for (b, idx) in epoch_batches(data.labelled.len(), config.batch_size, &mut order_rng).into_iter().enumerate() {
            let seg = seg_pairs(&data.labelled, &idx)?;
            let images: Vec<&Map> = unlabelled
                .next_batch(config.batch_size)
                .into_iter()
                .map(|i| &data.unlabelled[i].image)
                .collect();
            let (s, mut g) = path_loss_grads(&trainer.model, DecoderKind::Segmentation, &seg, config.normalization)?;
            let (r, gr) = regularizer.loss_grads(&trainer.model, &images, config.regularizer_weight, &mut aug_rng)?;
            check_finite(s.value, "supervised", epoch, b)?;
            check_finite(r.value, "regularizer", epoch, b)?;
            if config.regularizer_weight != 0.0 {
                g.add_assign(&gr);
            }
            trainer.apply_seg(g);
            ls.push(s.value);
            lr.push(r.value);
        }
        history.records.push(EpochRecord {
            epoch,
            supervised_loss: mean(&ls),
            self_supervised_loss: Some(mean(&lr)),
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok((trainer.model, history))
}

/// `n` rotation labels drawn uniformly from {0, 1, 2, 3} quarter turns.
pub fn sample_rotation_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..4)).collect()
}

/// Rotation-prediction pre-training of the encoder and rotation head with SGD.
/// Returns the parameters and the per-epoch rotation loss.
pub fn pretrain_rotation_with_history(
    params: ModelParameters,
    unlabelled: &[Sample],
    config: &TrainConfig,
) -> Result<(ModelParameters, Vec<f64>)> {
    require_pool(unlabelled, "unlabelled pool")?;
    let mut model = params;
    let mut head_grads = model.zero_rotation_grads()?;
    let square = unlabelled.iter().all(|s| s.image.nrows() == s.image.ncols());
    if !square {
        return Err(Error::InvalidConfig("rotation pre-training needs square images".into()));
    }
    let mut sgd = Sgd {
        learning_rate: config.rotation_learning_rate,
    };
    let mut order_rng = rng_for(config.seed, "rotation-order");
    let mut label_rng = rng_for(config.seed, "rotation-labels");
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut epoch_losses = Vec::new();
        for (b, idx) in epoch_batches(unlabelled.len(), config.batch_size, &mut order_rng).into_iter().enumerate() {
            let labels = sample_rotation_labels(&mut label_rng, idx.len());
            head_grads.scale(0.0);
            let mut value = 0.0;
            for (&i, &label) in idx.iter().zip(&labels) {
                let rotated = SpatialTransform::from_quarter_turns(label).apply(&unlabelled[i].image);
                let trace = model.rotation_traced(&rotated)?;
                let (l, g) = rotation_loss_grad(&[trace.probs], &[label])?;
                let share = 1.0 / idx.len() as f64;
                value += l.value * share;
                let g = g[0].map(|v| v * share);
                model.rotation_backward(&trace, &g, &mut head_grads)?;
            }
            check_finite(value, "rotation", epoch, b)?;
            let mut layers = model.encoder.layers_mut();
            layers.extend(model.rotation_head.as_mut().expect("checked above").layers_mut());
            let mut g = head_grads.encoder.clone();
            g.extend(head_grads.branch.iter().cloned());
            sgd.step(layers, &g);
            epoch_losses.push(value);
        }
        losses.push(mean(&epoch_losses));
    }
    Ok((model, losses))
}

pub fn pretrain_rotation(params: ModelParameters, unlabelled: &[Sample], config: &TrainConfig) -> Result<ModelParameters> {
    pretrain_rotation_with_history(params, unlabelled, config).map(|(m, _)| m)
}

/// Rotation pre-training followed by segmentation training on the labelled set.
pub fn train_rotation_then_decoder(params: ModelParameters, data: &TrainingData, config: &TrainConfig) -> Result<(ModelParameters, TrainHistory)> {
    require_pool(&data.labelled, "labelled pool")?;
    let (model, rot_losses) = pretrain_rotation_with_history(params, &data.unlabelled, config)?;
    let (model, mut history) = supervised_loop(model, &data.labelled, config)?;
    for (r, l) in history.records.iter_mut().zip(rot_losses) {
        r.self_supervised_loss = Some(l);
    }
    Ok((model, history))
}

/// Fine-tune the encoder and segmentation decoder on a K-shot support set.
/// The edge decoder is never touched.
pub fn finetune(params: &ModelParameters, support: &[Sample], config: &FinetuneConfig) -> Result<ModelParameters> {
    finetune_with_losses(params, support, config).map(|(m, _)| m)
}

/// As [`finetune`], also returning the mean support loss of every epoch.
pub fn finetune_with_losses(params: &ModelParameters, support: &[Sample], config: &FinetuneConfig) -> Result<(ModelParameters, Vec<f64>)> {
    config.validate()?;
    require_pool(support, "support set")?;
    let mut trainer = JointTrainer::new(params.clone(), config.learning_rate, JointUpdate::Alternating, Normalization::PixelMean);
    let mut order_rng = rng_for(config.seed, "finetune-order");
    let mut flip_rng = rng_for(config.seed, "finetune-flips");
    let batch_size = support.len().min(config.max_batch_size);
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut epoch_losses = Vec::new();
        for (b, idx) in epoch_batches(support.len(), batch_size, &mut order_rng).into_iter().enumerate() {
            let mut owned = Vec::with_capacity(idx.len());
            for &i in &idx {
                let s = &support[i];
                let t = if config.flip_augmentation {
                    [
                        SpatialTransform::Identity,
                        SpatialTransform::FlipHorizontal,
                        SpatialTransform::FlipVertical,
                    ][flip_rng.gen_range(0..3)]
                } else {
                    SpatialTransform::Identity
                };
                owned.push((t.apply(&s.image), t.apply(s.mask()?)));
            }
            let batch: Vec<(&Map, &Map)> = owned.iter().map(|(x, y)| (x, y)).collect();
            let l = trainer.supervised_step(&batch)?;
            check_finite(l.value, "finetune", epoch, b)?;
            epoch_losses.push(l.value);
        }
        losses.push(mean(&epoch_losses));
    }
    Ok((trainer.model, losses))
}

/// Mean weighted BCE of the segmentation path on labelled samples.
pub fn segmentation_loss(model: &ModelParameters, samples: &[Sample]) -> Result<f64> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let pairs = seg_pairs(samples, &idx)?;
    let (loss, _) = path_loss_grads(model, DecoderKind::Segmentation, &pairs, Normalization::PixelMean)?;
    Ok(loss.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;

    fn tiny_model(seed: u64, rot: bool) -> ModelParameters {
        ModelParameters::init(&ArchConfig::new(vec![4, 8], 8), seed, rot).unwrap()
    }

    fn disk_sample(id: usize, size: usize) -> Sample {
        let c = (size as f64 - 1.0) / 2.0 + (id % 3) as f64 - 1.0;
        let r = size as f64 / 4.0;
        let mask = Map::from_shape_fn((size, size), |(y, x)| {
            if (y as f64 - c).powi(2) + (x as f64 - c).powi(2) <= r * r {
                1.0
            } else {
                0.0
            }
        });
        let image = mask.mapv(|m| 0.2 + 0.6 * m);
        let mut s = Sample::new(format!("s{id}"), image, Some(mask.clone())).unwrap();
        s.edge_target = Some(crate::edgemaps::canny_edges(&s.image, &Default::default()).unwrap().values);
        s
    }

    fn data(n_l: usize, n_u: usize) -> TrainingData {
        TrainingData {
            labelled: (0..n_l).map(|i| disk_sample(i, 8)).collect(),
            unlabelled: (0..n_u)
                .map(|i| {
                    let mut s = disk_sample(i + 10, 8);
                    s.mask = None;
                    s
                })
                .collect(),
        }
    }

    fn cfg(method: &str, frac: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            learning_rate: 0.01,
            method: method.into(),
            unlabelled_fraction: frac,
            ..Default::default()
        }
    }

    #[test]
    fn config_invariant_ties_fraction_to_method() {
        assert!(cfg("supervised", 0.0, 1).validate().is_ok());
        assert!(cfg("supervised", 0.3, 1).validate().is_err());
        assert!(cfg("edge_joint", 0.0, 1).validate().is_err());
        assert!(cfg("edge_joint", 0.5, 1).validate().is_err());
        assert!(cfg("edge_joint", 0.6, 0).validate().is_err());
    }

    #[test]
    fn cyclic_sampler_covers_pool_before_repeating() {
        let mut s = CyclicSampler::new(5, rng_for(1, "x"));
        let mut seen = s.next_batch(3);
        seen.extend(s.next_batch(2));
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.next_batch(9).len(), 5);
    }

    #[test]
    fn joint_history_has_one_record_per_epoch() {
        let (m, h) = joint_train(tiny_model(0, false), &data(3, 4), &cfg("edge_joint", 0.6, 3)).unwrap();
        assert_eq!(h.records.len(), 3);
        assert!(h.records.iter().all(|r| r.supervised_loss.is_finite() && r.self_supervised_loss.unwrap().is_finite()));
        assert!(m.is_finite());
    }

    #[test]
    fn joint_train_rejects_empty_pools() {
        let mut d = data(2, 2);
        d.unlabelled.clear();
        assert!(joint_train(tiny_model(0, false), &d, &cfg("edge_joint", 0.6, 1)).is_err());
        let mut d = data(2, 2);
        d.labelled.clear();
        assert!(joint_train(tiny_model(0, false), &d, &cfg("edge_joint", 0.6, 1)).is_err());
    }

    #[test]
    fn joint_train_is_deterministic() {
        let d = data(3, 4);
        let c = cfg("edge_joint", 0.6, 2);
        let (a, ha) = joint_train(tiny_model(5, false), &d, &c).unwrap();
        let (b, hb) = joint_train(tiny_model(5, false), &d, &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.supervised_losses(), hb.supervised_losses());
    }

    #[test]
    fn summed_mode_trains_and_differs_from_alternating() {
        let d = data(3, 4);
        let mut c = cfg("edge_joint", 0.6, 2);
        let (a, _) = joint_train(tiny_model(5, false), &d, &c).unwrap();
        c.joint_update = JointUpdate::Summed;
        let (b, h) = joint_train(tiny_model(5, false), &d, &c).unwrap();
        assert!(b.is_finite() && h.records.len() == 2);
        assert_ne!(a, b);
    }

    #[test]
    fn supervised_descends_and_rejects_unlabelled_fraction() {
        let d = data(4, 0);
        let (_, h) = train_supervised(tiny_model(1, false), &d.labelled, &cfg("supervised", 0.0, 30)).unwrap();
        let l = h.supervised_losses();
        assert!(mean(&l[25..]) < mean(&l[..5]), "{l:?}");
        assert!(train_supervised(tiny_model(1, false), &d.labelled, &cfg("edge_joint", 0.3, 1)).is_err());
    }

    #[test]
    fn zero_weight_regularizer_matches_supervised() {
        let d = data(3, 4);
        let sup = train_supervised(tiny_model(2, false), &d.labelled, &cfg("supervised", 0.0, 3)).unwrap();
        for reg in [Regularizer::Entropy, Regularizer::Consistency] {
            let mut c = cfg("entropy", 0.3, 3);
            c.regularizer_weight = 0.0;
            let (m, h) = train_with_regularizer(tiny_model(2, false), &d, &c, reg).unwrap();
            assert_eq!(m, sup.0);
            assert_eq!(h.supervised_losses(), sup.1.supervised_losses());
        }
    }

    #[test]
    fn regularized_training_is_deterministic() {
        let d = data(3, 4);
        let c = cfg("consistency", 0.3, 2);
        let a = train_with_regularizer(tiny_model(2, false), &d, &c, Regularizer::Consistency).unwrap();
        let b = train_with_regularizer(tiny_model(2, false), &d, &c, Regularizer::Consistency).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn rotation_labels_are_uniform() {
        let n = 10_000;
        let labels = sample_rotation_labels(&mut rng_for(3, "rotation-labels"), n);
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for k in 0..4 {
            let c = labels.iter().filter(|&&l| l == k).count() as f64;
            assert!((c - n as f64 * 0.25).abs() < 4.0 * sigma, "class {k}: {c}");
        }
    }

    #[test]
    fn rotation_pretraining_needs_head_and_is_deterministic() {
        let d = data(1, 4);
        let c = cfg("rotation_pretrain", 0.3, 2);
        assert!(matches!(
            pretrain_rotation(tiny_model(0, false), &d.unlabelled, &c),
            Err(Error::MissingRotationHead)
        ));
        let a = pretrain_rotation(tiny_model(0, true), &d.unlabelled, &c).unwrap();
        let b = pretrain_rotation(tiny_model(0, true), &d.unlabelled, &c).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, tiny_model(0, true));
        assert_eq!(a.seg_decoder, tiny_model(0, true).seg_decoder);
    }

    #[test]
    fn finetune_one_shot_keeps_edge_decoder_and_reduces_loss() {
        let d = data(1, 0);
        let m = tiny_model(4, false);
        let cfg = FinetuneConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let before = segmentation_loss(&m, &d.labelled).unwrap();
        let tuned = finetune(&m, &d.labelled, &cfg).unwrap();
        assert!(tuned.is_finite());
        assert_eq!(tuned.edge_decoder, m.edge_decoder);
        assert!(segmentation_loss(&tuned, &d.labelled).unwrap() < before);
        assert!(finetune(&m, &[], &cfg).is_err());
    }

    #[test]
    fn history_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let h = TrainHistory {
            records: vec![EpochRecord {
                epoch: 1,
                supervised_loss: 0.5,
                self_supervised_loss: None,
                wall_time: 1.25,
            }],
            checkpoint: None,
        };
        let p = dir.path().join("history.csv");
        h.write_csv(&p).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "epoch,L_S,L_SS,wall_time\n1,0.5,,1.250\n");
    }
}
