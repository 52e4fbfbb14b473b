//! Episodic few-shot evaluation: support/query sampling, fine-tune-then-test
//! per episode, IoU, and aggregation into mean ± std per shot count.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::maps::{binarize, ensure_binary, ensure_same_shape, Map};
use crate::model::ModelParameters;
use crate::training::{finetune, FinetuneConfig};
use crate::util::rng_for;

/// Shot counts of the standard protocol.
pub const DEFAULT_SHOTS: [usize; 5] = [1, 3, 5, 7, 10];
pub const DEFAULT_SELECTIONS: usize = 10;
/// Probability threshold turning predictions into masks.
pub const MASK_THRESHOLD: f64 = 0.5;

/// `|pred ∧ gt| / |pred ∨ gt|`, defined as 1 when both masks are empty.
pub fn binary_iou(pred: &Map, gt: &Map) -> Result<f64> {
    ensure_same_shape(pred, gt, "IoU masks")?;
    ensure_binary(pred.view(), "predicted mask")?;
    ensure_binary(gt.view(), "ground-truth mask")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p == 1.0, g == 1.0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotEpisode {
    pub target_name: String,
    pub shot_count: usize,
    pub selection_index: usize,
    pub support_ids: Vec<String>,
    pub query_ids: Vec<String>,
}

/// Episodes for every (shot count, selection). Each selection draws one
/// permutation of the target ids and takes its first K as support, so the
/// supports of one selection are nested across shot counts.
pub fn sample_episodes(target_name: &str, ids: &[String], shots: &[usize], n_selections: usize, seed: u64) -> Result<Vec<FewShotEpisode>> {
    let max_shot = shots.iter().copied().max().ok_or(Error::Empty("shot list"))?;
    if shots.contains(&0) {
        return Err(Error::InvalidConfig("shot counts must be at least 1".into()));
    }
    if n_selections == 0 {
        return Err(Error::InvalidConfig("need at least one selection".into()));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() <= max_shot {
        return Err(Error::InvalidConfig(format!(
            "target `{target_name}` has {} images; {max_shot}-shot episodes need at least {}",
            sorted.len(),
            max_shot + 1
        )));
    }
    let perms: Vec<Vec<String>> = (0..n_selections)
        .map(|s| {
            let mut p = sorted.clone();
            p.shuffle(&mut rng_for(seed, &format!("episode-selection-{s}")));
            p
        })
        .collect();
    let mut episodes = Vec::with_capacity(shots.len() * n_selections);
    for &k in shots {
        for (s, perm) in perms.iter().enumerate() {
            let mut query = perm[k..].to_vec();
            query.sort();
            episodes.push(FewShotEpisode {
                target_name: target_name.to_string(),
                shot_count: k,
                selection_index: s,
                support_ids: perm[..k].to_vec(),
                query_ids: query,
            });
        }
    }
    Ok(episodes)
}

/// Query ids with their thresholded predictions and IoU.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub mean_iou: f64,
    pub predictions: Vec<(String, Map)>,
    pub ious: Vec<f64>,
}

fn lookup<'a>(samples: &'a BTreeMap<String, Sample>, id: &str) -> Result<&'a Sample> {
    samples
        .get(id)
        .ok_or_else(|| Error::Missing(format!("target sample `{id}`")))
}

/// Fine-tune seed for one episode, so episodes are independent of the order
/// in which they run.
fn episode_seed(base: u64, episode: &FewShotEpisode) -> u64 {
    base ^ ((episode.shot_count as u64) << 32) ^ episode.selection_index as u64
}

/// Fine-tune a copy of `base` on the support set and score the query set.
pub fn evaluate_episode_detailed(
    base: &ModelParameters,
    episode: &FewShotEpisode,
    samples: &BTreeMap<String, Sample>,
    config: &FinetuneConfig,
) -> Result<EpisodeOutcome> {
    if episode.query_ids.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let support = episode
        .support_ids
        .iter()
        .map(|id| lookup(samples, id).cloned())
        .collect::<Result<Vec<_>>>()?;
    let cfg = FinetuneConfig {
        seed: episode_seed(config.seed, episode),
        ..config.clone()
    };
    let tuned = finetune(base, &support, &cfg)?;
    let mut predictions = Vec::with_capacity(episode.query_ids.len());
    let mut ious = Vec::with_capacity(episode.query_ids.len());
    for id in &episode.query_ids {
        let s = lookup(samples, id)?;
        let prob = tuned.forward_segmentation(std::slice::from_ref(&s.image))?.remove(0);
        let mask = binarize(&prob, MASK_THRESHOLD);
        ious.push(binary_iou(&mask, s.mask()?)?);
        predictions.push((id.clone(), mask));
    }
    Ok(EpisodeOutcome {
        mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
        predictions,
        ious,
    })
}

/// Mean query IoU of one episode; `base` is never modified.
pub fn evaluate_episode(
    base: &ModelParameters,
    episode: &FewShotEpisode,
    samples: &BTreeMap<String, Sample>,
    config: &FinetuneConfig,
) -> Result<f64> {
    evaluate_episode_detailed(base, episode, samples, config).map(|o| o.mean_iou)
}

/// Evaluate episodes on up to `workers` threads, each fine-tuning its own
/// copy. Results come back in input order.
pub fn evaluate_episodes(
    base: &ModelParameters,
    episodes: &[FewShotEpisode],
    samples: &BTreeMap<String, Sample>,
    config: &FinetuneConfig,
    workers: usize,
) -> Result<Vec<EpisodeOutcome>> {
    let workers = workers.max(1).min(episodes.len().max(1));
    if workers == 1 {
        return episodes
            .iter()
            .map(|e| evaluate_episode_detailed(base, e, samples, config))
            .collect();
    }
    let mut slots: Vec<Option<Result<EpisodeOutcome>>> = (0..episodes.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..episodes.len())
                        .step_by(workers)
                        .map(|i| (i, evaluate_episode_detailed(base, &episodes[i], samples, config)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every episode evaluated")).collect()
}

/// One row of a results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub method: String,
    pub target: String,
    pub shot: usize,
    pub selection: usize,
    pub iou: f64,
}

/// Aggregated IoU for one (target, shot count), in percentage points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub target: String,
    pub shot: usize,
    pub mean: f64,
    pub std: f64,
    pub ious: Vec<f64>,
}

impl MetricCell {
    /// `mean±std` with one decimal, e.g. `50.0±14.1`.
    pub fn formatted(&self) -> String {
        format!("{:.1}±{:.1}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub labelled_fraction: f64,
    pub unlabelled_fraction: f64,
    pub cells: Vec<MetricCell>,
}

impl MetricsReport {
    /// Training setting label, e.g. `10% labelled + 60% unlabelled`.
    pub fn setting(&self) -> String {
        setting_label(self.labelled_fraction, self.unlabelled_fraction)
    }

    pub fn cell(&self, target: &str, shot: usize) -> Option<&MetricCell> {
        self.cells.iter().find(|c| c.target == target && c.shot == shot)
    }

    pub fn targets(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.cells.iter().map(|c| c.target.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn shots(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.cells.iter().map(|c| c.shot).collect();
        set.into_iter().collect()
    }
}

pub fn setting_label(labelled_fraction: f64, unlabelled_fraction: f64) -> String {
    let pct = |f: f64| format!("{}%", (f * 100.0).round());
    if unlabelled_fraction == 0.0 {
        format!("{} labelled", pct(labelled_fraction))
    } else {
        format!("{} labelled + {} unlabelled", pct(labelled_fraction), pct(unlabelled_fraction))
    }
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Group results by (target, shot) and reduce each cell to mean and sample
/// std in percentage points, rounded to one decimal. Every cell must hold
/// exactly the selections `0..n_selections`.
pub fn aggregate_results(
    results: &[EpisodeResult],
    n_selections: usize,
    labelled_fraction: f64,
    unlabelled_fraction: f64,
) -> Result<MetricsReport> {
    let first = results.first().ok_or(Error::Empty("episode results"))?;
    let method = first.method.clone();
    let mut cells: BTreeMap<(String, usize), BTreeMap<usize, f64>> = BTreeMap::new();
    for r in results {
        if r.method != method {
            return Err(Error::InvalidConfig(format!(
                "results mix methods `{method}` and `{}`",
                r.method
            )));
        }
        if !(0.0..=1.0).contains(&r.iou) {
            return Err(Error::InvalidConfig(format!("IoU {} outside [0, 1]", r.iou)));
        }
        let cell = cells.entry((r.target.clone(), r.shot)).or_default();
        if cell.insert(r.selection, r.iou).is_some() {
            return Err(Error::Incomplete(format!(
                "duplicate episode {}/{}-shot/selection {}",
                r.target, r.shot, r.selection
            )));
        }
    }
    let mut missing = Vec::new();
    for ((target, shot), cell) in &cells {
        for s in 0..n_selections {
            if !cell.contains_key(&s) {
                missing.push(format!("{target}/{shot}-shot/selection {s}"));
            }
        }
        if let Some(extra) = cell.keys().find(|&&s| s >= n_selections) {
            missing.push(format!("{target}/{shot}-shot has unexpected selection {extra}"));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Incomplete(format!("missing episodes: {}", missing.join(", "))));
    }
    let cells = cells
        .into_iter()
        .map(|((target, shot), cell)| {
            let ious: Vec<f64> = cell.into_values().collect();
            let (m, s) = mean_std(&ious);
            MetricCell {
                target,
                shot,
                mean: round1(100.0 * m),
                std: round1(100.0 * s),
                ious,
            }
        })
        .collect();
    Ok(MetricsReport {
        method,
        labelled_fraction,
        unlabelled_fraction,
        cells,
    })
}
