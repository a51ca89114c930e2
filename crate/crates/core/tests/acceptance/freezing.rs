use fusionseg::datagen::{self, DomainProfile, SceneSpec};
use fusionseg::nn::{self, Checkpoint, FusionConfig};
use fusionseg::pipeline::Preprocess;
use fusionseg::train::{self, FreezeSpec, TrainConfig};

use crate::Outcome;

pub fn run() -> Outcome {
    let model = FusionConfig::desk();
    let start = Checkpoint::new(model.clone(), &nn::init_params::<f32>(&model, 21).unwrap());
    let samples = datagen::make_dataset(10, DomainProfile::real(), &SceneSpec::default(), 21).unwrap();
    let freeze = FreezeSpec::head_last2(&model);
    // Ten samples, one per batch, one epoch: ten optimizer steps.
    let config = TrainConfig { epochs: 1, batch_size: 1, seed: 21, ..TrainConfig::finetune() };
    let out = train::finetune(&start, &samples, &freeze, &config, &[], &Preprocess::default(), None).unwrap();
    let steps = out.history.step_lrs.len();
    let tuned = &out.last.params;

    let mut frozen_same = 0;
    let mut frozen_changed = Vec::new();
    let mut trainable_changed = 0;
    let mut trainable_total = 0;
    for (name, p) in start.params.iter() {
        let after = &tuned.get(name).unwrap().value;
        let identical = after.iter().zip(p.value.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        if freeze.is_trainable(name) {
            trainable_total += 1;
            trainable_changed += usize::from(!identical);
        } else if identical {
            frozen_same += 1;
        } else {
            frozen_changed.push(name.to_string());
        }
    }
    let mut frozen_buffers = 0;
    for (name, b) in start.params.buffers() {
        if freeze.is_trainable(name) {
            continue;
        }
        frozen_buffers += 1;
        let after = tuned.buffer(name).unwrap();
        if after.iter().zip(b.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            frozen_changed.push(name.to_string());
        }
    }

    Outcome {
        pass: steps == 10 && frozen_changed.is_empty() && trainable_changed > 0,
        detail: format!(
            "{steps} steps; {frozen_same} frozen tensors and {frozen_buffers} frozen statistics bit-identical, {} changed {:?}; {trainable_changed}/{trainable_total} trainable tensors moved",
            frozen_changed.len(),
            frozen_changed.iter().take(3).collect::<Vec<_>>()
        ),
    }
}
