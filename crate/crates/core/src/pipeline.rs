//! Preprocessing shared by training and evaluation, and chunked inference
//! over clouds of any size.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cloud::{self, DecimationPolicy, LabeledCloud, NormalizationRecord};
use crate::datagen::{self, AugmentationSpec};
use crate::error::{Error, Result};
use crate::eval::{confusion, ConfusionMatrix};
use crate::nn::{self, Batch, FusionConfig, Mode, ParameterStore};
use crate::rng::{self, derive_seed};
use crate::scalar::Real;

/// Steps that turn a labeled scene into a network input:
/// class-aware decimation, resampling to the point budget,
/// zero-centering and normalization, then (training only) augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Preprocess {
    /// Skipped when `None` or when the cloud carries no labels.
    pub decimation: Option<DecimationPolicy>,
    pub budget: usize,
    pub augmentation: Option<AugmentationSpec>,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            decimation: Some(DecimationPolicy::default()),
            budget: 2048,
            augmentation: Some(AugmentationSpec::default()),
        }
    }
}

impl Preprocess {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("point budget must be positive".into()));
        }
        if let Some(p) = &self.decimation {
            p.validate()?;
        }

        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }

    /// Runs the pipeline. Augmentation is applied only when `augment` is set;
    /// its jitter is specified in meters and converted to normalized units.
    pub fn apply(&self, cloud: &LabeledCloud, seed: u64, augment: bool) -> Result<LabeledCloud> {
        let mut c = match (&self.decimation, cloud.has_labels()) {
            (Some(policy), true) => cloud::class_aware_decimate(cloud, policy, derive_seed(seed, 1))?,
            _ => cloud.clone(),
        };
        c = cloud::resample_to_budget(&c, self.budget, derive_seed(seed, 2))?;
        let (mut c, record) = cloud::zero_center_normalize(&c)?;
        if let (true, Some(spec)) = (augment, &self.augmentation) {
            let spec = AugmentationSpec {
                jitter_sigma: spec.jitter_sigma / record.scale,
                jitter_clip: spec.jitter_clip / record.scale,
                ..*spec
            };
            c = datagen::augment(&c, &spec, derive_seed(seed, 3));
        }
        Ok(c)
    }
}

/// Seed used to preprocess evaluation scene `index`.
pub fn eval_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, 0xE7A1_0000 + index as u64)
}

/// Deterministic evaluation inputs: no augmentation, fixed per-scene seeds.
pub fn prepare_eval(scenes: &[LabeledCloud], pre: &Preprocess, seed: u64) -> Result<Vec<LabeledCloud>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| pre.apply(s, eval_seed(seed, i), false))
        .collect()
}

/// Random near-equal partition of `0..n` into `ceil(n / budget)` chunks.
pub fn chunk_plan(n: usize, budget: usize, seed: u64) -> Vec<Vec<usize>> {
    if n <= budget {
        return vec![(0..n).collect()];
    }
    let chunks = n.div_ceil(budget);
    chunk_plan_with(n, chunks, seed)
}

/// Random partition of `0..n` into exactly `chunks` near-equal parts.
pub fn chunk_plan_with(n: usize, chunks: usize, seed: u64) -> Vec<Vec<usize>> {
    let chunks = chunks.clamp(1, n.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    if chunks > 1 {
        order.shuffle(&mut rng::seeded(seed));
    }
    (0..chunks)
        .map(|c| order[c * n / chunks..(c + 1) * n / chunks].to_vec())
        .collect()
}

/// Labels for an already normalized cloud: every chunk of the plan is
/// forwarded in eval mode and each point keeps its own prediction.
pub fn predict_chunks<T: Real>(
    cloud: &LabeledCloud,
    plan: &[Vec<usize>],
    params: &ParameterStore<T>,
    config: &FusionConfig,
) -> Result<Vec<u8>> {
    let mut labels = vec![0u8; cloud.len()];
    for chunk in plan.iter().filter(|c| !c.is_empty()) {
        let part = cloud.select(chunk);
        let (logits, _) = nn::forward(&Batch::single(&part), params, config, Mode::Eval, Default::default())?;
        for (&i, l) in chunk.iter().zip(nn::predict_labels(&logits)) {
            labels[i] = l;
        }
    }
    Ok(labels)
}

/// Result of [`segment`].
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub labels: Vec<u8>,
    pub record: NormalizationRecord,
    pub chunks: usize,
}

/// Labels every point of a cloud in world coordinates. The cloud is
/// normalized as a whole, then split into random chunks no larger than
/// `budget` so each forward sees a scene-like density.
pub fn segment<T: Real>(
    cloud: &LabeledCloud,
    params: &ParameterStore<T>,
    config: &FusionConfig,
    budget: usize,
    seed: u64,
) -> Result<Segmentation> {
    if budget == 0 {
        return Err(Error::Parameter("budget must be positive".into()));
    }
    let (normalized, record) = cloud::zero_center_normalize(cloud)?;
    let plan = chunk_plan(normalized.len(), budget, seed);
    let labels = predict_chunks(&normalized, &plan, params, config)?;
    Ok(Segmentation { labels, record, chunks: plan.len() })
}

/// Confusion matrix of predictions on preprocessed, labeled clouds, one
/// forward per cloud.
pub fn evaluate_prepared<T: Real>(
    clouds: &[LabeledCloud],
    params: &ParameterStore<T>,
    config: &FusionConfig,
) -> Result<ConfusionMatrix> {
    let mut total = ConfusionMatrix::zeros(config.num_classes);
    for c in clouds {
        let truth = c
            .label_ids()
            .ok_or_else(|| Error::Precondition("evaluation needs labeled clouds".into()))?;
        let (logits, _) = nn::forward(&Batch::single(c), params, config, Mode::Eval, Default::default())?;
        total.merge(&confusion(&nn::predict_labels(&logits), &truth, config.num_classes)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_plan_partitions() {
        let plan = chunk_plan(10_001, 2048, 3);
        assert_eq!(plan.len(), 5);
        let mut all: Vec<usize> = plan.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10_001).collect::<Vec<_>>());
        assert!(plan.iter().all(|c| c.len() <= 2048 && c.len() >= 2000));
        assert_eq!(chunk_plan(5, 2048, 3), vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn preprocess_hits_budget_and_normalizes() {
        let scene = datagen::generate_scene(&datagen::SceneSpec { density: 80.0, ..Default::default() }).unwrap();
        let pre = Preprocess { budget: 512, ..Default::default() };
        let out = pre.apply(&scene, 1, false).unwrap();
        assert_eq!(out.len(), 512);
        let max = out.points().iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-9);
        assert_eq!(pre.apply(&scene, 1, true).unwrap().labels(), out.labels());
    }
}
