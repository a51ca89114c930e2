use fusionseg::graph;
use fusionseg::rng;
use ndarray::Array2;
use rand::Rng;

use crate::Outcome;

const K: usize = 10;

/// Clouds of several layouts: uniform, a floor with a couple of walls,
/// an integer lattice (many exact distance ties), and copies of a few
/// source points (exact duplicates).
fn cloud(case: usize, r: &mut impl Rng) -> Array2<f64> {
    let n = r.random_range(K + 1..=2000);
    let mut pts = Array2::zeros((n, 3));
    match case % 4 {
        0 => pts.mapv_inplace(|_: f64| r.random_range(-2.0..2.0)),
        1 => {
            for mut p in pts.rows_mut() {
                let (u, v) = (r.random_range(0.0..5.0), r.random_range(0.0..3.0));
                let q = match r.random_range(0..3) {
                    0 => [u, v, 0.0],
                    1 => [u, 0.0, v],
                    _ => [0.0, u, v],
                };
                p.assign(&ndarray::arr1(&q));
            }
        }
        2 => pts.mapv_inplace(|_: f64| r.random_range(0..6) as f64 * 0.5),
        _ => {
            let sources = r.random_range(1..=n.div_ceil(3));
            let base: Vec<[f64; 3]> = (0..sources).map(|_| [r.random(), r.random(), r.random()]).collect();
            for mut p in pts.rows_mut() {
                p.assign(&ndarray::arr1(&base[r.random_range(0..sources)]));
            }
        }
    }
    pts
}

/// Full sort of every other point by (squared distance, index).
fn sorted_oracle(pts: &Array2<f64>, i: usize) -> Vec<u32> {
    let pi = pts.row(i);
    let mut all: Vec<(f64, u32)> = (0..pts.nrows())
        .filter(|&j| j != i)
        .map(|j| {
            let d: f64 = pi.iter().zip(pts.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, j as u32)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.iter().take(K).map(|&(_, j)| j).collect()
}

pub fn run() -> Outcome {
    let mut r = rng::seeded(33);
    let mut mismatches = Vec::new();
    let mut points = 0;
    for case in 0..100 {
        let pts = cloud(case, &mut r);
        points += pts.nrows();
        let grid = graph::knn_grid(pts.view(), K).unwrap();
        let brute = graph::knn_brute_force(pts.view(), K).unwrap();
        if grid.table() != brute.table() {
            mismatches.push(format!("cloud {case} (N={}): grid differs from brute force", pts.nrows()));
        }
        if case < 12 {
            for i in (0..pts.nrows()).step_by(7) {
                if brute.row(i) != sorted_oracle(&pts, i).as_slice() {
                    mismatches.push(format!("cloud {case}: brute force row {i} differs from full sort"));
                    break;
                }
            }
        }
        let single = pts.mapv(|v| v as f32);
        if graph::knn_grid(single.view(), K).unwrap().table() != graph::knn_brute_force(single.view(), K).unwrap().table() {
            mismatches.push(format!("cloud {case}: single-precision tables differ"));
        }
    }
    Outcome {
        pass: mismatches.is_empty(),
        detail: if mismatches.is_empty() {
            format!("100 clouds, {points} points, identical tables in double and single precision")
        } else {
            format!("{} mismatches, first: {}", mismatches.len(), mismatches[0])
        },
    }
}
