//! K-nearest-neighbor graphs and EdgeConv edge features.
//!
//! Every graph excludes the query point itself and orders each row by
//! ascending squared Euclidean distance, breaking ties by ascending index.
//! The brute-force and grid paths compute distances with the same
//! expression, so they agree index for index.

use std::collections::HashMap;

use ndarray::{s, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricSpace {
    Spatial,
    Feature,
}

/// Row-major `n × k` neighbor table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    neighbors: Vec<u32>,
    n: usize,
    k: usize,
    metric: MetricSpace,
}

impl KnnGraph {
    /// Wraps a prebuilt table, checking index bounds and self-exclusion.
    pub fn from_table(neighbors: Vec<u32>, n: usize, k: usize, metric: MetricSpace) -> Result<Self> {
        if neighbors.len() != n * k {
            return Err(Error::Validation(format!(
                "neighbor table has {} entries, expected {n}×{k}",
                neighbors.len()
            )));
        }
        for (i, row) in neighbors.chunks(k.max(1)).enumerate() {
            if row.iter().any(|&j| j as usize >= n || j as usize == i) {
                return Err(Error::Validation(format!("row {i} has an invalid neighbor index")));
            }
        }
        Ok(Self { neighbors, n, k, metric })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn metric(&self) -> MetricSpace {
        self.metric
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn table(&self) -> &[u32] {
        &self.neighbors
    }

    pub(crate) fn with_metric(mut self, metric: MetricSpace) -> Self {
        self.metric = metric;
        self
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::Parameter(format!("k = {k} requires 0 < k < N = {n}")));
    }
    Ok(())
}

#[inline]
fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc = acc + d * d;
    }
    acc
}

/// Bounded best-k list ordered by (distance, index).
struct TopK<T> {
    items: Vec<(T, u32)>,
    k: usize,
}

impl<T: Real> TopK<T> {
    fn new(k: usize) -> Self {
        Self {
            items: Vec::with_capacity(k + 1),
            k,
        }
    }

    #[inline]
    fn is_full(&self) -> bool {
        self.items.len() == self.k
    }

    #[inline]
    fn worst(&self) -> T {
        self.items.last().map(|&(d, _)| d).unwrap_or_else(T::infinity)
    }

    #[inline]
    fn offer(&mut self, d: T, j: u32) {
        let better = |a: (T, u32), b: (T, u32)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
        if self.is_full() && !better((d, j), *self.items.last().unwrap()) {
            return;
        }
        let pos = self.items.partition_point(|&it| better(it, (d, j)));
        self.items.insert(pos, (d, j));
        self.items.truncate(self.k);
    }

    fn write(&self, out: &mut [u32]) {
        for (o, &(_, j)) in out.iter_mut().zip(&self.items) {
            *o = j;
        }
    }
}

#[cfg(feature = "parallel")]
fn fill_rows(table: &mut [u32], k: usize, f: impl Fn(usize, &mut [u32]) + Sync) {
    use rayon::prelude::*;
    table
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
fn fill_rows(table: &mut [u32], k: usize, f: impl Fn(usize, &mut [u32]) + Sync) {
    table.chunks_mut(k).enumerate().for_each(|(i, row)| f(i, row));
}

fn check_finite<T: Real>(features: &ArrayView2<T>) -> Result<()> {
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("features contain non-finite values".into()));
    }
    Ok(())
}

/// Exact KNN. Three-column inputs go through the grid path; wider feature
/// spaces use brute force.
pub fn knn<T: Real>(features: ArrayView2<T>, k: usize) -> Result<KnnGraph> {
    if features.ncols() == 3 {
        knn_grid(features, k)
    } else {
        knn_brute_force(features, k)
    }
}

/// O(N²) reference search.
pub fn knn_brute_force<T: Real>(features: ArrayView2<T>, k: usize) -> Result<KnnGraph> {
    let n = features.nrows();
    check_k(n, k)?;
    check_finite(&features)?;
    let owned = features.as_standard_layout();
    let rows: Vec<&[T]> = owned.outer_iter().map(|r| r.to_slice().unwrap()).collect();
    let mut table = vec![0u32; n * k];
    fill_rows(&mut table, k, |i, out| {
        let mut top = TopK::new(k);
        for (j, row) in rows.iter().enumerate() {
            if j != i {
                top.offer(sq_dist(rows[i], row), j as u32);
            }
        }
        top.write(out);
    });
    let metric = if features.ncols() == 3 { MetricSpace::Spatial } else { MetricSpace::Feature };
    Ok(KnnGraph { neighbors: table, n, k, metric })
}

/// Exact grid-hash search for 3-D points. Cells are visited in Chebyshev
/// rings around the query's cell until no unvisited cell can hold a point
/// closer than the current k-th neighbor.
pub fn knn_grid<T: Real>(points: ArrayView2<T>, k: usize) -> Result<KnnGraph> {
    let n = points.nrows();
    if points.ncols() != 3 {
        return Err(Error::Validation(format!(
            "grid KNN needs 3 columns, got {}",
            points.ncols()
        )));
    }
    check_k(n, k)?;
    check_finite(&points)?;
    let owned = points.as_standard_layout();
    let rows: Vec<&[T]> = owned.outer_iter().map(|r| r.to_slice().unwrap()).collect();

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for r in &rows {
        for d in 0..3 {
            let v = r[d].as_f64();
            lo[d] = lo[d].min(v);
            hi[d] = hi[d].max(v);
        }
    }
    let mut ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    ext.sort_by(|a, b| b.total_cmp(a));
    // Roughly k points per cell on the dominant surface.
    let mut cell = (ext[0] * ext[1] * k as f64 / n as f64).sqrt();
    if !(cell.is_finite() && cell > 0.0) {
        cell = if ext[0] > 0.0 { ext[0] * k as f64 / n as f64 } else { 1.0 };
    }
    let key_of = |r: &[T]| -> [i64; 3] {
        [
            ((r[0].as_f64() - lo[0]) / cell).floor() as i64,
            ((r[1].as_f64() - lo[1]) / cell).floor() as i64,
            ((r[2].as_f64() - lo[2]) / cell).floor() as i64,
        ]
    };
    let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
    let mut max_key = [0i64; 3];
    for (i, r) in rows.iter().enumerate() {
        let key = key_of(r);
        for d in 0..3 {
            max_key[d] = max_key[d].max(key[d]);
        }
        cells.entry(key).or_default().push(i as u32);
    }
    let max_ring = max_key.iter().copied().max().unwrap_or(0);
    // Slack absorbs rounding in the squared distances.
    const SLACK: f64 = 1.0 - 1e-4;

    let mut table = vec![0u32; n * k];
    fill_rows(&mut table, k, |i, out| {
        let c = key_of(rows[i]);
        let mut top = TopK::new(k);
        let visit = |key: [i64; 3], top: &mut TopK<T>| {
            if let Some(members) = cells.get(&key) {
                for &j in members {
                    if j as usize != i {
                        top.offer(sq_dist(rows[i], rows[j as usize]), j);
                    }
                }
            }
        };
        let mut r = 0i64;
        loop {
            for dx in -r..=r {
                for dy in -r..=r {
                    if dx.abs() == r || dy.abs() == r {
                        for dz in -r..=r {
                            visit([c[0] + dx, c[1] + dy, c[2] + dz], &mut top);
                        }
                    } else if r > 0 {
                        visit([c[0] + dx, c[1] + dy, c[2] - r], &mut top);
                        visit([c[0] + dx, c[1] + dy, c[2] + r], &mut top);
                    }
                }
            }
            let reach = r as f64 * cell;
            if (top.is_full() && top.worst().as_f64() < reach * reach * SLACK) || r > max_ring {
                break;
            }
            r += 1;
        }
        top.write(out);
    });
    Ok(KnnGraph { neighbors: table, n, k, metric: MetricSpace::Spatial })
}

/// Feature-space search used between EdgeConv layers. Squared distances
/// come from the expansion |a|² + |b|² − 2a·b evaluated blockwise with a
/// matrix product; ties and self-exclusion follow the same rules as the
/// exact paths, but near-ties may order differently from [`knn_brute_force`].
pub fn knn_gram<T: Real>(features: ArrayView2<T>, k: usize) -> Result<KnnGraph> {
    const BLOCK: usize = 256;
    let n = features.nrows();
    check_k(n, k)?;
    let sq: Vec<T> = features.outer_iter().map(|r| r.dot(&r)).collect();
    let mut table = vec![0u32; n * k];
    let t = features.t();
    for start in (0..n).step_by(BLOCK) {
        let end = (start + BLOCK).min(n);
        let gram = features.slice(s![start..end, ..]).dot(&t);
        let gram = gram.as_standard_layout();
        let rows = gram.as_slice().expect("standard layout");
        let two = T::one() + T::one();
        fill_rows(&mut table[start * k..end * k], k, |r, out| {
            let i = start + r;
            let g = &rows[r * n..(r + 1) * n];
            // ‖x_i‖² is constant along the row and does not change the ranking.
            let mut d: Vec<T> = g.iter().zip(&sq).map(|(&gj, &sj)| sj - two * gj).collect();
            d[i] = T::infinity();
            let mut top = TopK::new(k);
            let mut worst = T::infinity();
            const LANES: usize = 16;
            for (c, chunk) in d.chunks(LANES).enumerate() {
                let low = chunk.iter().fold(T::infinity(), |m, &v| if v < m { v } else { m });
                if low > worst {
                    continue;
                }
                for (o, &v) in chunk.iter().enumerate() {
                    let j = c * LANES + o;
                    if v <= worst && j != i {
                        top.offer(v, j as u32);
                        if top.is_full() {
                            worst = top.worst();
                        }
                    }
                }
            }
            top.write(out);
        });
    }
    Ok(KnnGraph { neighbors: table, n, k, metric: MetricSpace::Feature })
}

/// `values[i, j, ..F]` is the feature of point `i`; `values[i, j, F..]` is
/// the feature of its `j`-th neighbor minus that of `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeFeatureBlock<T> {
    pub values: Array3<T>,
    pub width: usize,
}

pub fn build_edge_features<T: Real>(
    features: ArrayView2<T>,
    graph: &KnnGraph,
) -> Result<EdgeFeatureBlock<T>> {
    let (n, f) = features.dim();
    if graph.n() != n {
        return Err(Error::Validation(format!(
            "graph has {} rows but features have {n}",
            graph.n()
        )));
    }
    let k = graph.k();
    let mut values = Array3::zeros((n, k, 2 * f));
    for (i, mut block) in values.axis_iter_mut(Axis(0)).enumerate() {
        let hi = features.row(i);
        for (slot, &j) in graph.row(i).iter().enumerate() {
            let hj = features.row(j as usize);
            let mut edge = block.row_mut(slot);
            for c in 0..f {
                edge[c] = hi[c];
                edge[f + c] = hj[c] - hi[c];
            }
        }
    }
    Ok(EdgeFeatureBlock { values, width: f })
}
