use std::fs;
use std::path::Path;

use fusionseg::datagen::{self, DatasetManifest, DomainProfile, SceneSpec};
use fusionseg::eval::{self, MetricsReport};
use fusionseg::nn::{Checkpoint, FusionConfig};
use fusionseg::pipeline::{self, Preprocess};
use fusionseg::train::{self, RunDir, TrainConfig, TrainSetup};

use crate::Outcome;

struct Artifacts {
    checkpoints: Vec<Vec<u8>>,
    report: String,
}

/// Generates a dataset on disk, trains from the files and evaluates the
/// saved checkpoint, returning the bytes that must not vary.
fn end_to_end(root: &Path) -> Artifacts {
    let data_dir = root.join("data");
    let scenes = datagen::make_dataset(12, DomainProfile::sim(), &SceneSpec::default(), 5).unwrap();
    let manifest = DatasetManifest {
        seed: 5,
        profile_name: "sim".into(),
        profile: DomainProfile::sim(),
        base: SceneSpec::default(),
        scenes: Vec::new(),
    };
    datagen::save_dataset(&data_dir, &scenes, manifest).unwrap();
    let (_, scenes) = datagen::load_dataset(&data_dir).unwrap();

    let (train_set, eval_set) = train::split_dataset(&scenes, 0.8, 5).unwrap();
    let run = RunDir::create(root.join("run")).unwrap();
    let config = TrainConfig { epochs: 2, seed: 5, ..TrainConfig::default() };
    let setup = TrainSetup { run_dir: Some(&run), ..Default::default() };
    train::train(&config, &FusionConfig::desk(), &train_set, &eval_set, &setup).unwrap();

    let best = Checkpoint::load(run.checkpoint("best")).unwrap();
    let inputs = pipeline::prepare_eval(&eval_set, &Preprocess::default(), 5).unwrap();
    let m = pipeline::evaluate_prepared(&inputs, &best.params, &best.config).unwrap();
    let report = MetricsReport::from_matrix(&m, &eval::all_classes()).unwrap().to_json();
    Artifacts {
        checkpoints: ["best", "last"].iter().map(|n| fs::read(run.checkpoint(n)).unwrap()).collect(),
        report,
    }
}

pub fn run() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = end_to_end(a.path());
    // The repeat runs on a different worker count.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let second = pool.install(|| end_to_end(b.path()));
    let same_checkpoints = first.checkpoints == second.checkpoints;
    let same_report = first.report == second.report;
    Outcome {
        pass: same_checkpoints && same_report,
        detail: format!(
            "checkpoints {} ({} bytes each), metric reports {}",
            if same_checkpoints { "byte-identical" } else { "DIFFER" },
            first.checkpoints[0].len(),
            if same_report { "byte-identical" } else { "DIFFER" }
        ),
    }
}
