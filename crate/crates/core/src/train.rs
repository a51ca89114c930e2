//! Dataset splitting, Adam with cosine decay, the training loop and
//! fine-tuning with selective freezing.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{ArrayD, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cloud::LabeledCloud;
use crate::error::{Error, Result};
use crate::eval::accuracies;
use crate::nn::{self, pattern_matches, Batch, Checkpoint, FusionConfig, Mode, ParameterStore};
use crate::pipeline::{self, Preprocess};
use crate::rng::{self, derive_seed};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            lr_min: 0.0,
            epochs: 100,
            batch_size: 4,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: same learning rate, 30 epochs.
    pub fn finetune() -> Self {
        Self { epochs: 30, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let beta = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr0 > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return Err(Error::Config(format!("need 0 < lr0 and 0 <= lr_min <= lr0, got {} / {}", self.lr0, self.lr_min)));
        }
        if !(beta(self.adam_beta1) && beta(self.adam_beta2) && self.adam_epsilon > 0.0) {
            return Err(Error::Config("Adam betas must lie in (0, 1) and epsilon be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Seeded shuffle, then the first `round(fraction × N)` scenes train.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyInput("cannot split an empty dataset"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Parameter(format!("train fraction {train_fraction} must lie in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let cut = (train_fraction * n as f64).round() as usize;
    let eval = order.split_off(cut);
    Ok((order, eval))
}

pub fn split_dataset(
    dataset: &[LabeledCloud],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledCloud>, Vec<LabeledCloud>)> {
    let (train, eval) = split_indices(dataset.len(), train_fraction, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect();
    Ok((pick(&train), pick(&eval)))
}

/// Cosine decay from `lr0` at `t = 0` to `lr_min` at `t = total`; steps past
/// the horizon stay at `lr_min`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if t >= total {
        return lr_min;
    }
    let w = 0.5 * (1.0 + (PI * t as f64 / total.max(1) as f64).cos());
    w * lr0 + (1.0 - w) * lr_min
}

/// Adam moments per parameter entry.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: BTreeMap<String, ArrayD<T>>,
    v: BTreeMap<String, ArrayD<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParameterStore<T>, config: &TrainConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(n, p)| (n.to_string(), ArrayD::zeros(p.value.raw_dim())))
                .collect()
        };
        Self {
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            epsilon: config.adam_epsilon,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&ArrayD<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&ArrayD<T>> {
        self.v.get(name)
    }
}

/// One bias-corrected Adam update. Frozen entries, and entries whose
/// gradient is identically zero, are left untouched together with their
/// moments; the step counter advances once.
pub fn adam_step<T: Real>(params: &mut ParameterStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    for (name, p) in params.iter() {
        match state.m.get(name) {
            Some(m) if m.shape() == p.value.shape() => {}
            _ => return Err(Error::State(format!("optimizer state does not match parameter {name}"))),
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let step = T::of(lr / c1);
    let inv_c2 = T::of(1.0 / c2);
    let eps = T::of(state.epsilon);
    let one = T::one();
    for (name, p) in params.iter_mut() {
        if p.frozen || p.grad.iter().all(|g| g.is_zero()) {
            continue;
        }
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("checked above");
        Zip::from(&mut p.value)
            .and(&p.grad)
            .and(m)
            .and(v)
            .for_each(|w, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w -= step * *m / ((*v * inv_c2).sqrt() + eps);
            });
    }
    Ok(())
}

/// Parameter-name patterns that stay trainable; everything else freezes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub trainable_groups: Vec<String>,
}

impl FreezeSpec {
    /// The final hidden head layer and the output layer.
    pub fn head_last2(config: &FusionConfig) -> Self {
        Self { trainable_groups: config.head_last2() }
    }

    /// Freezes every parameter.
    pub fn all_frozen() -> Self {
        Self { trainable_groups: Vec::new() }
    }

    /// Accepts the named group `head.last2` or a comma-separated pattern list.
    pub fn parse(text: &str, config: &FusionConfig) -> Self {
        let mut groups = Vec::new();
        for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if part == "head.last2" {
                groups.extend(config.head_last2());
            } else {
                groups.push(part.to_string());
            }
        }
        Self { trainable_groups: groups }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable_groups.iter().any(|p| pattern_matches(p, name))
    }

    /// Sets frozen flags. An explicit empty set freezes everything; a
    /// non-empty set that matches nothing is a configuration error.
    pub fn apply<T: Real>(&self, params: &mut ParameterStore<T>) -> Result<usize> {
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let trainable = names.iter().filter(|n| self.is_trainable(n)).count();
        if trainable == 0 && !self.trainable_groups.is_empty() {
            return Err(Error::Config(format!(
                "freeze spec {:?} matches no parameter",
                self.trainable_groups
            )));
        }
        for n in &names {
            params.set_frozen(n, !self.is_trainable(n))?;
        }
        Ok(trainable)
    }
}

/// One completed epoch. Equality ignores wall-clock time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub eval_oa: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub seconds: f64,
}

impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        self.epoch == o.epoch
            && self.train_loss.to_bits() == o.train_loss.to_bits()
            && self.eval_loss.map(f64::to_bits) == o.eval_loss.map(f64::to_bits)
            && self.eval_oa.map(f64::to_bits) == o.eval_oa.map(f64::to_bits)
            && self.lr.to_bits() == o.lr.to_bits()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Learning rate used at every optimizer step.
    pub step_lrs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpoint with the highest eval OA (the last one when there is no
    /// eval set).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: TrainHistory,
}

/// Run directory: `config.json`, `history.jsonl`, `last.fsck`, `best.fsck`,
/// and `diverged.fsck` if training blew up.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let history = root.join("history.jsonl");
        fs::write(&history, b"").map_err(|e| Error::io(&history, e))?;
        Ok(Self { root })
    }

    pub fn write_config(&self, value: &impl Serialize) -> Result<()> {
        let path = self.root.join("config.json");
        let text = serde_json::to_string_pretty(value).expect("config serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    fn append(&self, record: &EpochRecord) -> Result<()> {
        let path = self.root.join("history.jsonl");
        let mut f = fs::OpenOptions::new().append(true).create(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.fsck"))
    }
}

/// Inputs of [`train`] besides the scenes.
#[derive(Clone, Debug, Default)]
pub struct TrainSetup<'a> {
    pub preprocess: Preprocess,
    /// Starting parameters; freshly initialized from the training seed
    /// when absent.
    pub init: Option<&'a ParameterStore<f32>>,
    pub run_dir: Option<&'a RunDir>,
}

struct Evaluation {
    loss: f64,
    oa: f64,
}

fn evaluate(clouds: &[LabeledCloud], params: &ParameterStore<f32>, config: &FusionConfig) -> Result<Option<Evaluation>> {
    if clouds.is_empty() {
        return Ok(None);
    }
    let mut loss = 0.0;
    let mut matrix = crate::eval::ConfusionMatrix::zeros(config.num_classes);
    let mut points = 0usize;
    for c in clouds {
        let truth = c.label_ids().expect("eval clouds are labeled");
        let (logits, _) = nn::forward(&Batch::single(c), params, config, Mode::Eval, Default::default())?;
        loss += nn::cross_entropy_loss(&logits, &truth)?.0 * truth.len() as f64;
        points += truth.len();
        matrix.merge(&crate::eval::confusion(&nn::predict_labels(&logits), &truth, config.num_classes)?)?;
    }
    Ok(Some(Evaluation { loss: loss / points as f64, oa: accuracies(&matrix)?.0 }))
}

fn check_labels(scenes: &[LabeledCloud], config: &FusionConfig) -> Result<()> {
    for s in scenes {
        let ids = s
            .label_ids()
            .ok_or_else(|| Error::Precondition("training scenes must be labeled".into()))?;
        if let Some(&bad) = ids.iter().find(|&&l| l as usize >= config.num_classes) {
            return Err(Error::Validation(format!("label {bad} outside the model's {} classes", config.num_classes)));
        }
    }
    Ok(())
}

/// Trains from scratch (or from `setup.init`) with mini-batches of
/// preprocessed, augmented scenes and a per-step cosine schedule.
/// Deterministic in `config.seed`, the scenes and the setup.
pub fn train(
    config: &TrainConfig,
    model: &FusionConfig,
    train_set: &[LabeledCloud],
    eval_set: &[LabeledCloud],
    setup: &TrainSetup<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    setup.preprocess.validate()?;
    check_labels(train_set, model)?;
    check_labels(eval_set, model)?;
    if train_set.is_empty() && config.epochs > 0 {
        return Err(Error::EmptyInput("no training scenes"));
    }
    let mut params = match setup.init {
        Some(p) => {
            p.check_layout(model)?;
            p.clone()
        }
        None => nn::init_params::<f32>(model, derive_seed(config.seed, 0x1417))?,
    };
    let eval_inputs = pipeline::prepare_eval(eval_set, &setup.preprocess, config.seed)?;
    let mut adam = AdamState::new(&params, config);
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle = rng::seeded(derive_seed(config.seed, 0x5417));
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut lr = config.lr0;
        for (b, batch_idx) in order.chunks(config.batch_size).enumerate() {
            let clouds = batch_idx
                .iter()
                .map(|&i| {
                    let seed = derive_seed(derive_seed(config.seed, epoch as u64 + 1), i as u64);
                    setup.preprocess.apply(&train_set[i], seed, true)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&LabeledCloud> = clouds.iter().collect();
            let labels: Vec<u8> = clouds.iter().flat_map(|c| c.label_ids().unwrap()).collect();
            let (logits, mut trace) = nn::forward(&Batch::from_clouds(&refs), &params, model, Mode::Train, Default::default())?;
            let (loss, grad) = nn::cross_entropy_loss(&logits, &labels)?;
            if !loss.is_finite() {
                if let Some(run) = setup.run_dir {
                    Checkpoint::new(model.clone(), &params).save(run.checkpoint("diverged"))?;
                }
                return Err(Error::Divergence { epoch, step: b, loss });
            }
            nn::backward(&mut trace, grad.view(), &mut params, model)?;
            nn::apply_running_stats(&mut params, &trace, model.bn_momentum)?;
            lr = cosine_lr(step, total, config.lr0, config.lr_min);
            adam_step(&mut params, &mut adam, lr)?;
            history.step_lrs.push(lr);
            loss_sum += loss;
            step += 1;
        }
        let eval = evaluate(&eval_inputs, &params, model)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            eval_loss: eval.as_ref().map(|e| e.loss),
            eval_oa: eval.as_ref().map(|e| e.oa),
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}, eval OA {}, lr {lr:.2e}, {:.1}s",
            record.train_loss,
            record.eval_oa.map_or("-".to_string(), |v| format!("{v:.4}")),
            record.seconds
        );
        if let Some(e) = &eval {
            if best.as_ref().is_none_or(|(oa, _)| e.oa > *oa) {
                best = Some((e.oa, Checkpoint::new(model.clone(), &params)));
            }
        }
        if let Some(run) = setup.run_dir {
            run.append(&record)?;
        }
        history.epochs.push(record);
    }

    let last = Checkpoint::new(model.clone(), &params);
    let best = best.map_or_else(|| last.clone(), |(_, c)| c);
    if let Some(run) = setup.run_dir {
        last.save(run.checkpoint("last"))?;
        best.save(run.checkpoint("best"))?;
    }
    Ok(TrainOutcome { best, last, history })
}

/// Continues training `checkpoint` on target-domain samples with every
/// parameter outside `freeze` held fixed, using fresh optimizer state.
/// Frozen layers also keep their normalization statistics. Output
/// checkpoints carry the input's frozen flags.
pub fn finetune(
    checkpoint: &Checkpoint,
    target: &[LabeledCloud],
    freeze: &FreezeSpec,
    config: &TrainConfig,
    eval_set: &[LabeledCloud],
    preprocess: &Preprocess,
    run_dir: Option<&RunDir>,
) -> Result<TrainOutcome> {
    let mut params = checkpoint.params.clone();
    freeze.apply(&mut params)?;
    let setup = TrainSetup { preprocess: preprocess.clone(), init: Some(&params), run_dir };
    let mut out = train(config, &checkpoint.config, target, eval_set, &setup)?;
    for ckpt in [&mut out.best, &mut out.last] {
        for (name, p) in checkpoint.params.iter() {
            ckpt.params.set_frozen(name, p.frozen)?;
        }
    }
    if let Some(run) = run_dir {
        out.last.save(run.checkpoint("last"))?;
        out.best.save(run.checkpoint("best"))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let (a, b) = split_indices(10, 0.8, 1).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a, b) = split_indices(2, 0.5, 1).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert!(split_indices(0, 0.5, 1).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.001, 0.0), 0.001);
        assert_eq!(cosine_lr(100, 100, 0.001, 0.0), 0.0);
        assert!((cosine_lr(50, 100, 0.001, 0.0) - 0.0005).abs() < 1e-15);
        assert_eq!(cosine_lr(150, 100, 0.001, 1e-5), 1e-5);
    }
}
