use fusionseg::pipeline;
use fusionseg::stream::{self, StreamConfig, SyntheticStream};

use crate::training::{trained, Variant};
use crate::Outcome;

pub fn run() -> Outcome {
    let model = trained(Variant::Fusion, 0);
    let checkpoint = &model.checkpoint;
    let config = StreamConfig::default();
    let synthetic = SyntheticStream::default();
    let messages = synthetic.messages().unwrap();

    // Offline reference: every merged frame segmented in full.
    let offline: Vec<Vec<u8>> = (0..synthetic.frames as u64)
        .map(|f| {
            let parts: Vec<_> = messages.iter().filter(|m| m.index == f).map(|m| (m.sensor, m.cloud.clone())).collect();
            let merged = stream::merge_frame(&parts, config.voxel_size).unwrap();
            pipeline::segment(&merged, &checkpoint.params, &checkpoint.config, config.budget, config.seed).unwrap().labels
        })
        .collect();

    let mut results = Vec::new();
    stream::run_stream(&config, checkpoint.clone(), messages.into_iter().map(Ok), |r| {
        results.push(r);
        Ok(())
    })
    .unwrap();

    let mut problems = Vec::new();
    if results.len() != synthetic.frames {
        problems.push(format!("{} results for {} frames", results.len(), synthetic.frames));
    }
    let warmup = &results[0];
    if warmup.cloud.label_ids().unwrap() != offline[0] {
        problems.push("warmup labels differ from offline segmentation".into());
    }
    let warmup_points = warmup.report.inference_points;
    let (mut agree, mut compared) = (0usize, 0usize);
    let mut min_hit = f64::INFINITY;
    let mut max_inference = 0;
    for (r, reference) in results.iter().zip(&offline).skip(1) {
        let labels = r.cloud.label_ids().unwrap();
        for ((a, b), &cached) in labels.iter().zip(reference).zip(&r.cached) {
            if !cached {
                compared += 1;
                agree += usize::from(a == b);
            }
        }
        min_hit = min_hit.min(r.report.cache_hit_fraction);
        max_inference = max_inference.max(r.report.inference_points);
        if r.report.inference_points >= warmup_points {
            problems.push(format!("frame {} forwarded {} points", r.report.frame_index, r.report.inference_points));
        }
    }
    let agreement = agree as f64 / compared as f64;
    if min_hit <= 0.3 {
        problems.push(format!("cache hit fraction fell to {min_hit:.3}"));
    }
    if agreement < 0.95 {
        problems.push(format!("agreement {agreement:.4}"));
    }
    Outcome {
        pass: problems.is_empty(),
        detail: format!(
            "warmup bit-identical: {}; post-warmup cache hits >= {min_hit:.3}; inference points <= {max_inference} vs {warmup_points} at warmup; agreement on {compared} inferred points {agreement:.4}{}",
            warmup.cloud.label_ids().unwrap() == offline[0],
            if problems.is_empty() { String::new() } else { format!("; problems: {}", problems.join(", ")) }
        ),
    }
}
