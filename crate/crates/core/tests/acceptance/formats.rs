use fusionseg::cloud::{self, CloudFormat};
use fusionseg::{rng, LabeledCloud, SemanticClass};
use rand::Rng;

use crate::Outcome;

/// Clouds whose coordinates are exactly representable in `f32`, the
/// on-disk precision, including extremes and signed zeros.
fn cloud(n: usize, labeled: bool, seed: u64) -> LabeledCloud {
    let mut r = rng::seeded(seed);
    let specials = [0.0f32, -0.0, f32::MIN_POSITIVE, f32::MAX, -f32::MAX, 1e-30, 123456.79];
    let points: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            std::array::from_fn(|c| {
                if i < specials.len() {
                    specials[(i + c) % specials.len()] as f64
                } else {
                    r.random_range(-50.0f32..50.0) as f64
                }
            })
        })
        .collect();
    if labeled {
        let labels = (0..n).map(|_| SemanticClass::ALL[r.random_range(0..SemanticClass::COUNT)]).collect();
        LabeledCloud::labeled(points, labels).unwrap()
    } else {
        LabeledCloud::unlabeled(points).unwrap()
    }
}

fn same_bits(a: &LabeledCloud, b: &LabeledCloud) -> bool {
    a.labels() == b.labels()
        && a.len() == b.len()
        && a.points().iter().zip(b.points()).all(|(p, q)| p.iter().zip(q).all(|(x, y)| x.to_bits() == y.to_bits()))
}

pub fn run() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    let mut checked = 0;
    for n in [0, 1, 11_000] {
        for labeled in [false, true] {
            let original = cloud(n, labeled, n as u64 + labeled as u64);
            for (format, ext) in [(CloudFormat::Binary, "pcsb"), (CloudFormat::Ascii, "pcst")] {
                let path = dir.path().join(format!("c{n}_{labeled}.{ext}"));
                cloud::save_cloud(&original, &path, format).unwrap();
                let first = std::fs::read(&path).unwrap();
                let loaded = cloud::load_cloud(&path).unwrap();
                cloud::save_cloud(&loaded, &path, format).unwrap();
                let second = std::fs::read(&path).unwrap();
                checked += 1;
                if !same_bits(&original, &loaded) || first != second {
                    failures.push(format!("{ext} N={n} labeled={labeled}"));
                }
            }
        }
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{checked} save/load/save cycles bit-identical")
        } else {
            format!("failed: {}", failures.join(", "))
        },
    }
}
