//! Desk-scale training experiments. Trained models are kept for the rest of
//! the run so later criteria reuse them.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};

use fusionseg::datagen::{self, DomainProfile, SceneSpec};
use fusionseg::eval::{self, MetricsReport};
use fusionseg::nn::{Checkpoint, FusionConfig};
use fusionseg::pipeline::{self, Preprocess};
use fusionseg::train::{self, FreezeSpec, TrainConfig, TrainSetup};
use fusionseg::LabeledCloud;

use crate::Outcome;

pub const DATASET_SEED: u64 = 7;
pub const EPOCHS: usize = 20;
const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Fusion,
    EdgeConvOnly,
    ResidualOnly,
}

impl Variant {
    fn model(self) -> FusionConfig {
        let desk = FusionConfig::desk();
        match self {
            Variant::Fusion => desk,
            Variant::EdgeConvOnly => desk.edgeconv_only(),
            Variant::ResidualOnly => desk.residual_only(),
        }
    }
}

pub struct SimData {
    pub train: Vec<LabeledCloud>,
    pub eval: Vec<LabeledCloud>,
}

pub fn sim_data() -> &'static SimData {
    static DATA: OnceLock<SimData> = OnceLock::new();
    DATA.get_or_init(|| {
        let scenes = datagen::make_dataset(120, DomainProfile::sim(), &SceneSpec::default(), DATASET_SEED).unwrap();
        let (train, eval) = train::split_dataset(&scenes, 0.8, DATASET_SEED).unwrap();
        SimData { train, eval }
    })
}

pub struct Trained {
    pub checkpoint: Checkpoint,
    pub best_eval_oa: f64,
    pub epoch_reached_90: Option<usize>,
}

/// Trains (once) the given variant with the given seed on the shared
/// sim-profile split and keeps its best-eval checkpoint.
pub fn trained(variant: Variant, seed: u64) -> Arc<Trained> {
    static MODELS: Mutex<BTreeMap<(Variant, u64), Arc<Trained>>> = Mutex::new(BTreeMap::new());
    if let Some(t) = MODELS.lock().unwrap().get(&(variant, seed)) {
        return t.clone();
    }
    let data = sim_data();
    let config = TrainConfig { epochs: EPOCHS, seed, ..TrainConfig::default() };
    let setup = TrainSetup::default();
    let out = train::train(&config, &variant.model(), &data.train, &data.eval, &setup).unwrap();
    let oas: Vec<f64> = out.history.epochs.iter().map(|e| e.eval_oa.unwrap()).collect();
    let t = Arc::new(Trained {
        checkpoint: out.best,
        best_eval_oa: oas.iter().copied().fold(0.0, f64::max),
        epoch_reached_90: oas.iter().position(|&oa| oa >= 0.90).map(|e| e + 1),
    });
    MODELS.lock().unwrap().insert((variant, seed), t.clone());
    t
}

/// Metrics over every class on preprocessed copies of `scenes`.
pub fn report(checkpoint: &Checkpoint, scenes: &[LabeledCloud], classes: &[usize]) -> MetricsReport {
    let inputs = pipeline::prepare_eval(scenes, &Preprocess::default(), 0).unwrap();
    let m = pipeline::evaluate_prepared(&inputs, &checkpoint.params, &checkpoint.config).unwrap();
    MetricsReport::from_matrix(&m, classes).unwrap()
}

pub fn desk_training() -> Outcome {
    let data = sim_data();
    let mut miou: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
    let mut fusion_ok = true;
    let mut reached = Vec::new();
    for variant in [Variant::Fusion, Variant::EdgeConvOnly, Variant::ResidualOnly] {
        for seed in SEEDS {
            let t = trained(variant, seed);
            let r = report(&t.checkpoint, &data.eval, &eval::named_classes());
            println!("  {variant:?} seed {seed}: best eval OA {:.4}, mIoU {:.4}", t.best_eval_oa, r.miou);
            miou.entry(variant).or_default().push(r.miou);
            if variant == Variant::Fusion {
                fusion_ok &= t.epoch_reached_90.is_some();
                reached.push(t.epoch_reached_90.map_or("never".to_string(), |e| e.to_string()));
            }
        }
    }
    let mean = |v: Variant| miou[&v].iter().sum::<f64>() / miou[&v].len() as f64;
    let (f, e, r) = (mean(Variant::Fusion), mean(Variant::EdgeConvOnly), mean(Variant::ResidualOnly));
    Outcome {
        pass: fusion_ok && f >= e - 0.01 && f >= r - 0.01,
        detail: format!(
            "fusion reached 90% OA at epoch {} of {EPOCHS}; mean mIoU fusion {f:.4}, edgeconv-only {e:.4}, residual-only {r:.4}",
            reached.join("/")
        ),
    }
}

pub fn sim_to_real() -> Outcome {
    let data = sim_data();
    let sim_model = trained(Variant::Fusion, 0);
    let eval_seed = 1000 + DATASET_SEED;
    let real_eval = datagen::make_dataset(40, DomainProfile::real(), &SceneSpec::default(), eval_seed).unwrap();
    // The same 40 layouts rendered with the sim profile, so the comparison
    // measures the domain shift rather than differences between scene sets.
    let sim_eval = datagen::make_dataset(40, DomainProfile::sim(), &SceneSpec::default(), eval_seed).unwrap();
    let real_samples = datagen::make_dataset(25, DomainProfile::real(), &SceneSpec::default(), 2000 + DATASET_SEED).unwrap();
    let all = eval::all_classes();
    let split_oa = report(&sim_model.checkpoint, &data.eval, &all).overall_accuracy;
    let sim_oa = report(&sim_model.checkpoint, &sim_eval, &all).overall_accuracy;
    let zero_shot = report(&sim_model.checkpoint, &real_eval, &all).overall_accuracy;

    let freeze = FreezeSpec::head_last2(&sim_model.checkpoint.config);
    let config = TrainConfig { seed: 0, ..TrainConfig::finetune() };
    // No eval set: the final fine-tuned weights are scored, so the real
    // eval scenes never influence model selection.
    let out = train::finetune(&sim_model.checkpoint, &real_samples, &freeze, &config, &[], &Preprocess::default(), None).unwrap();
    let tuned = report(&out.last, &real_eval, &all).overall_accuracy;

    let points = |v: f64| 100.0 * v;
    let gap = points(sim_oa - zero_shot);
    let gain = points(tuned - zero_shot);
    let residual = points(sim_oa - tuned);
    Outcome {
        pass: gap >= 5.0 && gain >= 10.0 && residual <= 5.0,
        detail: format!(
            "sim OA {:.2} on the eval layouts ({:.2} on the training split), zero-shot real OA {:.2} (gap {gap:.2} pts), fine-tuned real OA {:.2} (+{gain:.2} pts, {residual:.2} below sim)",
            points(sim_oa),
            points(split_oa),
            points(zero_shot),
            points(tuned)
        ),
    }
}
