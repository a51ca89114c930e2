use fusionseg::eval::{self, MetricsReport};
use fusionseg::{rng, SemanticClass};
use rand::Rng;

use crate::Outcome;

/// Per-class IoUs of the fusion network as published, in class order
/// AGV, AssemblyLine, Floor, Human, Robot, Table, Wall.
const PUBLISHED: [f64; 7] = [0.955, 0.943, 0.974, 0.947, 0.978, 0.923, 0.922];

struct Oracle {
    overall: f64,
    per_class: f64,
    ious: Vec<Option<f64>>,
}

/// Metrics straight from the point lists: intersections and unions are
/// set counts, accuracies are per-point comparisons.
fn oracle(pred: &[u8], truth: &[u8], classes: usize) -> Oracle {
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let mut recalls = Vec::new();
    let mut ious = Vec::new();
    for c in 0..classes as u8 {
        let members = truth.iter().filter(|&&t| t == c).count();
        let hits = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count();
        let union = pred.iter().zip(truth).filter(|&(&p, &t)| p == c || t == c).count();
        if members > 0 {
            recalls.push(hits as f64 / members as f64);
        }
        ious.push((union > 0).then(|| hits as f64 / union as f64));
    }
    Oracle {
        overall: correct as f64 / truth.len() as f64,
        per_class: recalls.iter().sum::<f64>() / recalls.len() as f64,
        ious,
    }
}

pub fn run() -> Outcome {
    let mut problems = Vec::new();

    let ious: Vec<Option<f64>> = std::iter::once(None).chain(PUBLISHED.iter().copied().map(Some)).collect();
    let published = eval::mean_iou(&ious, &eval::named_classes()).unwrap();
    let expected = 6642.0 / 7000.0;
    if (published - expected).abs() > 1e-6 {
        problems.push(format!("published row mean {published} != {expected}"));
    }

    let mut r = rng::seeded(2024);
    let classes = SemanticClass::COUNT;
    for case in 0..1000 {
        let n = r.random_range(1..400);
        // Skewed labels so some classes are missing and some dominate.
        let used = r.random_range(1..=classes as u8);
        let truth: Vec<u8> = (0..n).map(|_| r.random_range(0..used)).collect();
        let noise = r.random::<f64>();
        let pred: Vec<u8> = truth
            .iter()
            .map(|&t| if r.random::<f64>() < noise { r.random_range(0..classes as u8) } else { t })
            .collect();

        let m = eval::confusion(&pred, &truth, classes).unwrap();
        let o = oracle(&pred, &truth, classes);
        for t in 0..classes {
            for p in 0..classes {
                let direct = pred.iter().zip(&truth).filter(|&(&a, &b)| a as usize == p && b as usize == t).count();
                if m.get(t, p) != direct as u64 {
                    problems.push(format!("case {case}: confusion[{t}][{p}]"));
                }
            }
        }
        let (overall, per_class) = eval::accuracies(&m).unwrap();
        if overall != o.overall || per_class != o.per_class {
            problems.push(format!("case {case}: accuracies {overall}/{per_class} vs {}/{}", o.overall, o.per_class));
        }
        if eval::iou_per_class(&m) != o.ious {
            problems.push(format!("case {case}: per-class IoU"));
        }
        let all = eval::all_classes();
        let present: Vec<f64> = o.ious.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        if eval::miou(&m, &all).unwrap() != mean {
            problems.push(format!("case {case}: mIoU"));
        }
        let report = MetricsReport::from_matrix(&m, &all).unwrap();
        if report.overall_accuracy != o.overall || report.miou != mean || report.points != n as u64 {
            problems.push(format!("case {case}: report"));
        }
    }

    Outcome {
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("published row mean {published:.9}; 1000 random cases match the per-point oracle exactly")
        } else {
            format!("{} mismatches, first: {}", problems.len(), problems[0])
        },
    }
}
