use fusionseg::nn::{self, Batch, ForwardOptions, FusionConfig, Mode, ParameterStore};
use fusionseg::{rng, LabeledCloud};
use rand::Rng;

use crate::Outcome;

const STEP: f64 = 1e-5;

fn loss(batch: &Batch<f64>, params: &ParameterStore<f64>, config: &FusionConfig, labels: &[u8], graphs: &[Vec<fusionseg::graph::KnnGraph>]) -> f64 {
    let options = ForwardOptions { graphs: Some(graphs), ..Default::default() };
    let (logits, _) = nn::forward(batch, params, config, Mode::Train, options).unwrap();
    nn::cross_entropy_loss(&logits, labels).unwrap().0
}

/// Relative error. Entries whose true gradient is exactly zero (head weights
/// fed by the per-cloud global feature, which batch normalization cancels)
/// only see difference round-off of order 1e-11, so the denominator has a
/// floor well above that noise.
fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn run() -> Outcome {
    let config = FusionConfig {
        k: 3,
        edgeconv_widths: vec![8, 8],
        residual_widths: vec![8],
        head_widths: vec![16],
        num_classes: 4,
        ..Default::default()
    };
    let mut errors = Vec::new();
    let mut worst = (0.0, String::new());
    // One cloud, then two stacked clouds so the per-cloud pooling is exercised.
    for clouds in [1, 2] {
        check(&config, clouds, &mut errors, &mut worst);
    }
    let within = errors.iter().filter(|&&e| e <= 1e-4).count() as f64 / errors.len() as f64;
    let pass = within >= 0.99 && worst.0 <= 1e-3;
    Outcome {
        pass,
        detail: format!(
            "{} entries, {:.2}% within 1e-4, worst {:.2e} at {}",
            errors.len(),
            100.0 * within,
            worst.0,
            worst.1
        ),
    }
}

fn check(config: &FusionConfig, clouds: usize, errors: &mut Vec<f64>, worst: &mut (f64, String)) {
    let config = config.clone();
    let mut r = rng::seeded(11 + clouds as u64);
    let parts: Vec<LabeledCloud> = (0..clouds)
        .map(|_| {
            let points = (0..16).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
            LabeledCloud::unlabeled(points).unwrap()
        })
        .collect();
    let labels: Vec<u8> = (0..16 * clouds).map(|_| r.random_range(0..4u8)).collect();
    let refs: Vec<&LabeledCloud> = parts.iter().collect();
    let batch = Batch::<f64>::from_clouds(&refs);
    let mut params = nn::init_params::<f64>(&config, 5).unwrap();

    let (logits, mut trace) = nn::forward(&batch, &params, &config, Mode::Train, ForwardOptions::default()).unwrap();
    let graphs = trace.graphs().to_vec();
    let (_, dlogits) = nn::cross_entropy_loss(&logits, &labels).unwrap();
    nn::backward(&mut trace, dlogits.view(), &mut params, &config).unwrap();

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let analytic = params.get(name).unwrap().grad.clone();
        for idx in 0..analytic.len() {
            let mut probe = params.clone();
            let base = probe.value_mut(name).unwrap().as_slice_mut().unwrap()[idx];
            probe.value_mut(name).unwrap().as_slice_mut().unwrap()[idx] = base + STEP;
            let up = loss(&batch, &probe, &config, &labels, &graphs);
            probe.value_mut(name).unwrap().as_slice_mut().unwrap()[idx] = base - STEP;
            let down = loss(&batch, &probe, &config, &labels, &graphs);
            let numeric = (up - down) / (2.0 * STEP);
            let e = relative(analytic.as_slice().unwrap()[idx], numeric);
            if e > worst.0 {
                *worst = (e, format!("{name}[{idx}] ({clouds} cloud batch)"));
            }
            errors.push(e);
        }
    }
}
