//! Layer primitives with hand-written backward passes. Activations are
//! row-major `rows × channels`; rows are points (or edges, inside EdgeConv).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::scalar::Real;

/// How a batch-normalization layer computes its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    /// Batch statistics (training).
    Batch,
    /// Running statistics (evaluation).
    Running,
    /// Identity: no normalization, no affine. Used to test layers in isolation.
    Bypass,
}

pub struct BnParams<'a, T> {
    pub gamma: ArrayView1<'a, T>,
    pub beta: ArrayView1<'a, T>,
    pub running_mean: ArrayView1<'a, T>,
    pub running_var: ArrayView1<'a, T>,
    pub eps: T,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub norm: Norm,
    /// Normalized input; equals the raw input under [`Norm::Bypass`].
    pub xhat: Array2<T>,
    pub inv_std: Array1<T>,
}

/// Per-channel batch statistics reported for running-average updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Array1<T>,
    /// Unbiased variance.
    pub var: Array1<T>,
}

fn rows_of<T>(x: &Array2<T>) -> std::slice::ChunksExact<'_, T> {
    x.as_slice().expect("standard layout").chunks_exact(x.ncols().max(1))
}

fn rows_of_mut<T>(x: &mut Array2<T>) -> std::slice::ChunksExactMut<'_, T> {
    let c = x.ncols().max(1);
    x.as_slice_mut().expect("standard layout").chunks_exact_mut(c)
}

fn column_mean<T: Real>(x: &Array2<T>) -> Array1<T> {
    let mut sum = vec![T::zero(); x.ncols()];
    for row in rows_of(x) {
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    let rows = T::of(x.nrows() as f64);
    Array1::from_iter(sum.into_iter().map(|v| v / rows))
}

/// `(x − shift) · scale` per channel, in place.
fn standardize<T: Real>(x: &mut Array2<T>, shift: &[T], scale: &[T]) {
    for row in rows_of_mut(x) {
        for ((v, &m), &s) in row.iter_mut().zip(shift).zip(scale) {
            *v = (*v - m) * s;
        }
    }
}

pub fn bn_forward<T: Real>(
    x: Array2<T>,
    p: &BnParams<'_, T>,
    norm: Norm,
) -> (Array2<T>, BnCache<T>, Option<BatchStats<T>>) {
    let c = x.ncols();
    match norm {
        Norm::Bypass => {
            let y = x.clone();
            (y, BnCache { norm, xhat: x, inv_std: Array1::ones(c) }, None)
        }
        Norm::Running => {
            let inv_std = p.running_var.mapv(|v| T::one() / (v + p.eps).sqrt());
            let mut xhat = x.as_standard_layout().into_owned();
            let mean: Vec<T> = p.running_mean.to_vec();
            standardize(&mut xhat, &mean, inv_std.as_slice().unwrap());
            let y = affine(&xhat, p);
            (y, BnCache { norm, xhat, inv_std }, None)
        }
        Norm::Batch => {
            let x = x.as_standard_layout().into_owned();
            let m = x.nrows();
            let mean = column_mean(&x);
            let mut var = Array1::<T>::zeros(c);
            {
                let (ms, vs) = (mean.as_slice().unwrap(), var.as_slice_mut().unwrap());
                for row in rows_of(&x) {
                    for ((v, &r), &mu) in vs.iter_mut().zip(row).zip(ms) {
                        let d = r - mu;
                        *v += d * d;
                    }
                }
            }
            let biased = var.mapv(|v| v / T::of(m as f64));
            let unbiased = if m > 1 {
                var.mapv(|v| v / T::of((m - 1) as f64))
            } else {
                biased.clone()
            };
            let inv_std = biased.mapv(|v| T::one() / (v + p.eps).sqrt());
            let mut xhat = x;
            standardize(&mut xhat, mean.as_slice().unwrap(), inv_std.as_slice().unwrap());
            let y = affine(&xhat, p);
            (
                y,
                BnCache { norm, xhat, inv_std },
                Some(BatchStats { mean, var: unbiased }),
            )
        }
    }
}

fn affine<T: Real>(xhat: &Array2<T>, p: &BnParams<'_, T>) -> Array2<T> {
    let mut y = xhat.clone();
    let (g, b) = (p.gamma.to_vec(), p.beta.to_vec());
    for row in rows_of_mut(&mut y) {
        for ((v, &g), &b) in row.iter_mut().zip(&g).zip(&b) {
            *v = g * *v + b;
        }
    }
    y
}

/// Post-normalization value of one element, recomputed from the cache.
#[inline]
pub fn bn_output<T: Real>(cache: &BnCache<T>, gamma: &ArrayView1<'_, T>, beta: &ArrayView1<'_, T>, row: usize, ch: usize) -> T {
    match cache.norm {
        Norm::Bypass => cache.xhat[[row, ch]],
        _ => gamma[ch] * cache.xhat[[row, ch]] + beta[ch],
    }
}

pub struct BnGrads<T> {
    pub dx: Array2<T>,
    pub dgamma: Array1<T>,
    pub dbeta: Array1<T>,
}

pub fn bn_backward<T: Real>(dy: Array2<T>, cache: &BnCache<T>, gamma: &ArrayView1<'_, T>) -> BnGrads<T> {
    let c = dy.ncols();
    let m = dy.nrows();
    let mut dbeta = vec![T::zero(); c];
    let mut dgamma = vec![T::zero(); c];
    if cache.norm == Norm::Bypass {
        return BnGrads { dx: dy, dgamma: Array1::from(dgamma), dbeta: Array1::from(dbeta) };
    }
    let mut dx = dy.as_standard_layout().into_owned();
    for (drow, xrow) in rows_of(&dx).zip(rows_of(&cache.xhat)) {
        for ch in 0..c {
            dbeta[ch] += drow[ch];
            dgamma[ch] += drow[ch] * xrow[ch];
        }
    }
    match cache.norm {
        Norm::Running => {
            let scale: Vec<T> = (0..c).map(|ch| gamma[ch] * cache.inv_std[ch]).collect();
            for row in rows_of_mut(&mut dx) {
                for (v, &s) in row.iter_mut().zip(&scale) {
                    *v = *v * s;
                }
            }
        }
        Norm::Batch => {
            // dx = γ·inv_std/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
            let mt = T::of(m as f64);
            let scale: Vec<T> = (0..c).map(|ch| gamma[ch] * cache.inv_std[ch] / mt).collect();
            for (row, xrow) in rows_of_mut(&mut dx).zip(rows_of(&cache.xhat)) {
                for ch in 0..c {
                    row[ch] = scale[ch] * (mt * row[ch] - dbeta[ch] - xrow[ch] * dgamma[ch]);
                }
            }
        }
        Norm::Bypass => unreachable!(),
    }
    BnGrads { dx, dgamma: Array1::from(dgamma), dbeta: Array1::from(dbeta) }
}

#[inline]
pub fn relu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

#[inline]
pub fn leaky<T: Real>(v: T, slope: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * slope
    }
}

// ---------------------------------------------------------------------------
// EdgeConv

/// Inputs to one EdgeConv layer. `theta` is `2F × F'`: the first `F` rows
/// act on `h_i`, the last `F` rows on `h_j − h_i`.
pub struct EdgeConvParams<'a, T> {
    pub theta: ArrayView2<'a, T>,
    pub bn: BnParams<'a, T>,
    pub slope: T,
}

#[derive(Clone, Debug)]
pub struct EdgeConvCache<T> {
    pub input: Array2<T>,
    /// Global neighbor indices, `rows × k`.
    pub neighbors: Vec<u32>,
    pub k: usize,
    pub bn: BnCache<T>,
    /// Winning neighbor slot per output element.
    pub argmax: Array2<u32>,
}

/// Splits θ·[h_i ⊕ (h_j − h_i)] into (θ₁ − θ₂)·h_i + θ₂·h_j.
fn split_theta<'a, T: Real>(theta: ArrayView2<'a, T>, f: usize) -> (Array2<T>, ArrayView2<'a, T>) {
    let (top, bottom) = theta.split_at(Axis(0), f);
    (&top - &bottom, bottom)
}

/// Per-edge pre-normalization outputs, row `i·k + j` for neighbor slot `j`.
pub fn edge_affine<T: Real>(h: &ArrayView2<'_, T>, neighbors: &[u32], k: usize, theta: &ArrayView2<'_, T>) -> Array2<T> {
    let (rows, f) = h.dim();
    let out_c = theta.ncols();
    let (self_w, nbr_w) = split_theta(theta.clone(), f);
    let a = h.dot(&self_w).as_standard_layout().into_owned();
    let b = h.dot(&nbr_w).as_standard_layout().into_owned();
    let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    let mut edges = Array2::<T>::zeros((rows * k, out_c));
    for (e, row) in rows_of_mut(&mut edges).enumerate() {
        let i = e / k;
        let j = neighbors[e] as usize;
        let (ai, bj) = (&a[i * out_c..(i + 1) * out_c], &b[j * out_c..(j + 1) * out_c]);
        for ((v, &x), &y) in row.iter_mut().zip(ai).zip(bj) {
            *v = x + y;
        }
    }
    edges
}

pub fn edgeconv_forward<T: Real>(
    h: Array2<T>,
    neighbors: Vec<u32>,
    k: usize,
    p: &EdgeConvParams<'_, T>,
    norm: Norm,
) -> (Array2<T>, EdgeConvCache<T>, Option<BatchStats<T>>) {
    let rows = h.nrows();
    let out_c = p.theta.ncols();
    let edges = edge_affine(&h.view(), &neighbors, k, &p.theta);
    let (z, bn, stats) = bn_forward(edges, &p.bn, norm);
    let mut out = Array2::<T>::zeros((rows, out_c));
    let mut argmax = Array2::<u32>::zeros((rows, out_c));
    let zs = z.as_slice().expect("standard layout");
    let block = k * out_c;
    for ((orow, arow), zb) in rows_of_mut(&mut out)
        .zip(argmax.as_slice_mut().unwrap().chunks_exact_mut(out_c.max(1)))
        .zip(zs.chunks_exact(block.max(1)))
    {
        for (o, &v) in orow.iter_mut().zip(&zb[..out_c]) {
            *o = leaky(v, p.slope);
        }
        for j in 1..k {
            let zr = &zb[j * out_c..(j + 1) * out_c];
            for ((o, a), &v) in orow.iter_mut().zip(arow.iter_mut()).zip(zr) {
                let v = leaky(v, p.slope);
                // Strict comparison keeps the first maximal slot.
                if v > *o {
                    *o = v;
                    *a = j as u32;
                }
            }
        }
    }
    (
        out,
        EdgeConvCache { input: h, neighbors, k, bn, argmax },
        stats,
    )
}

pub struct EdgeConvGrads<T> {
    pub dinput: Array2<T>,
    pub dtheta: Array2<T>,
    pub dgamma: Array1<T>,
    pub dbeta: Array1<T>,
}

pub fn edgeconv_backward<T: Real>(dout: &Array2<T>, cache: &EdgeConvCache<T>, p: &EdgeConvParams<'_, T>) -> EdgeConvGrads<T> {
    let (rows, out_c) = dout.dim();
    let k = cache.k;
    let f = cache.input.ncols();
    let mut dz = Array2::<T>::zeros((rows * k, out_c));
    for i in 0..rows {
        for c in 0..out_c {
            let e = i * k + cache.argmax[[i, c]] as usize;
            let z = bn_output(&cache.bn, &p.bn.gamma, &p.bn.beta, e, c);
            let slope = if z > T::zero() { T::one() } else { p.slope };
            dz[[e, c]] = dout[[i, c]] * slope;
        }
    }
    let bn = bn_backward(dz, &cache.bn, &p.bn.gamma);
    let de = bn.dx;
    let mut da = Array2::<T>::zeros((rows, out_c));
    let mut db = Array2::<T>::zeros((rows, out_c));
    {
        let (das, dbs) = (da.as_slice_mut().unwrap(), db.as_slice_mut().unwrap());
        for (e, drow) in rows_of(&de).enumerate() {
            let i = e / k;
            let j = cache.neighbors[e] as usize;
            for (v, &d) in das[i * out_c..(i + 1) * out_c].iter_mut().zip(drow) {
                *v += d;
            }
            for (v, &d) in dbs[j * out_c..(j + 1) * out_c].iter_mut().zip(drow) {
                *v += d;
            }
        }
    }
    let (self_w, nbr_w) = split_theta(p.theta, f);
    let ht = cache.input.t();
    let d_self = ht.dot(&da);
    let d_nbr = ht.dot(&db);
    let mut dtheta = Array2::<T>::zeros((2 * f, out_c));
    dtheta.slice_mut(ndarray::s![..f, ..]).assign(&d_self);
    dtheta.slice_mut(ndarray::s![f.., ..]).assign(&(&d_nbr - &d_self));
    let dinput = da.dot(&self_w.t()) + db.dot(&nbr_w.t());
    EdgeConvGrads {
        dinput,
        dtheta,
        dgamma: bn.dgamma,
        dbeta: bn.dbeta,
    }
}

// ---------------------------------------------------------------------------
// Residual block

pub struct ResidualParams<'a, T> {
    pub conv1: ArrayView2<'a, T>,
    pub bn1: BnParams<'a, T>,
    pub conv2: ArrayView2<'a, T>,
    pub bn2: BnParams<'a, T>,
    /// Pointwise projection; `None` means identity shortcut.
    pub shortcut: Option<ArrayView2<'a, T>>,
}

#[derive(Clone, Debug)]
pub struct ResidualCache<T> {
    pub input: Array2<T>,
    pub bn1: BnCache<T>,
    pub hidden: Array2<T>,
    pub bn2: BnCache<T>,
}

pub fn residual_forward<T: Real>(
    x: Array2<T>,
    p: &ResidualParams<'_, T>,
    norm: Norm,
) -> (Array2<T>, ResidualCache<T>, [Option<BatchStats<T>>; 2]) {
    let (z1, bn1, s1) = bn_forward(x.dot(&p.conv1), &p.bn1, norm);
    let hidden = z1.mapv(relu);
    let (z2, bn2, s2) = bn_forward(hidden.dot(&p.conv2), &p.bn2, norm);
    let mut y = z2.mapv(relu);
    match &p.shortcut {
        Some(w) => y += &x.dot(w),
        None => y += &x,
    }
    (y, ResidualCache { input: x, bn1, hidden, bn2 }, [s1, s2])
}

pub struct ResidualGrads<T> {
    pub dinput: Array2<T>,
    pub dconv1: Array2<T>,
    pub dgamma1: Array1<T>,
    pub dbeta1: Array1<T>,
    pub dconv2: Array2<T>,
    pub dgamma2: Array1<T>,
    pub dbeta2: Array1<T>,
    pub dshortcut: Option<Array2<T>>,
}

fn mask_relu<T: Real>(d: Array2<T>, cache: &BnCache<T>, p: &BnParams<'_, T>) -> Array2<T> {
    let mut d = d.as_standard_layout().into_owned();
    let bypass = cache.norm == Norm::Bypass;
    let (g, b) = (p.gamma.to_vec(), p.beta.to_vec());
    for (row, xrow) in rows_of_mut(&mut d).zip(rows_of(&cache.xhat)) {
        for ch in 0..row.len() {
            let z = if bypass { xrow[ch] } else { g[ch] * xrow[ch] + b[ch] };
            if z <= T::zero() {
                row[ch] = T::zero();
            }
        }
    }
    d
}

pub fn residual_backward<T: Real>(dy: &Array2<T>, cache: &ResidualCache<T>, p: &ResidualParams<'_, T>) -> ResidualGrads<T> {
    let dz2 = mask_relu(dy.clone(), &cache.bn2, &p.bn2);
    let g2 = bn_backward(dz2, &cache.bn2, &p.bn2.gamma);
    let dconv2 = cache.hidden.t().dot(&g2.dx);
    let dhidden = g2.dx.dot(&p.conv2.t());
    let dz1 = mask_relu(dhidden, &cache.bn1, &p.bn1);
    let g1 = bn_backward(dz1, &cache.bn1, &p.bn1.gamma);
    let dconv1 = cache.input.t().dot(&g1.dx);
    let mut dinput = g1.dx.dot(&p.conv1.t());
    let dshortcut = match &p.shortcut {
        Some(w) => {
            dinput += &dy.dot(&w.t());
            Some(cache.input.t().dot(dy))
        }
        None => {
            dinput += dy;
            None
        }
    };
    ResidualGrads {
        dinput,
        dconv1,
        dgamma1: g1.dgamma,
        dbeta1: g1.dbeta,
        dconv2,
        dgamma2: g2.dgamma,
        dbeta2: g2.dbeta,
        dshortcut,
    }
}

// ---------------------------------------------------------------------------
// Head

#[derive(Clone, Debug)]
pub struct DenseCache<T> {
    pub input: Array2<T>,
    pub bn: BnCache<T>,
}

/// Pointwise linear → batch norm → ReLU.
pub fn dense_bn_relu_forward<T: Real>(
    x: Array2<T>,
    w: &ArrayView2<'_, T>,
    bn: &BnParams<'_, T>,
    norm: Norm,
) -> (Array2<T>, DenseCache<T>, Option<BatchStats<T>>) {
    let (z, bnc, stats) = bn_forward(x.dot(w), bn, norm);
    (z.mapv(relu), DenseCache { input: x, bn: bnc }, stats)
}

pub fn dense_bn_relu_backward<T: Real>(
    dy: Array2<T>,
    cache: &DenseCache<T>,
    w: &ArrayView2<'_, T>,
    bn: &BnParams<'_, T>,
) -> (Array2<T>, Array2<T>, Array1<T>, Array1<T>) {
    let dz = mask_relu(dy, &cache.bn, bn);
    let g = bn_backward(dz, &cache.bn, &bn.gamma);
    let dw = cache.input.t().dot(&g.dx);
    let dx = g.dx.dot(&w.t());
    (dx, dw, g.dgamma, g.dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit_bn<'a>(gamma: &'a Array1<f64>, beta: &'a Array1<f64>, rm: &'a Array1<f64>, rv: &'a Array1<f64>) -> BnParams<'a, f64> {
        BnParams {
            gamma: gamma.view(),
            beta: beta.view(),
            running_mean: rm.view(),
            running_var: rv.view(),
            eps: 1e-5,
        }
    }

    #[test]
    fn batch_norm_centers_and_scales() {
        let x = array![[1.0, 10.0], [3.0, 10.0], [5.0, 10.0]];
        let (g, b, rm, rv) = (Array1::ones(2), Array1::zeros(2), Array1::zeros(2), Array1::ones(2));
        let (y, _, stats) = bn_forward(x, &unit_bn(&g, &b, &rm, &rv), Norm::Batch);
        let stats = stats.unwrap();
        assert_eq!(stats.mean.to_vec(), vec![3.0, 10.0]);
        assert_eq!(stats.var.to_vec(), vec![4.0, 0.0]);
        assert!((y.column(0).sum()).abs() < 1e-12);
        // Constant channel normalizes to exactly zero.
        assert!(y.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_affine_identity_theta() {
        // h_1 = 1 with neighbor h_2 = 3 gives [h_i, h_j − h_i] = [1, 2].
        let h = array![[1.0], [3.0]];
        let theta = array![[1.0, 0.0], [0.0, 1.0]];
        let edges = edge_affine(&h.view(), &[1, 0], 1, &theta.view());
        assert_eq!(edges.row(0).to_vec(), vec![1.0, 2.0]);
        assert_eq!(edges.row(1).to_vec(), vec![3.0, -2.0]);
    }

    #[test]
    fn residual_zero_weights_propagate_identity() {
        let x = array![[0.3, -1.2], [2.0, 0.5], [-0.7, 0.1]];
        let zero = Array2::<f64>::zeros((2, 2));
        let (g, b, rm, rv) = (Array1::ones(2), Array1::zeros(2), Array1::zeros(2), Array1::ones(2));
        let p = ResidualParams {
            conv1: zero.view(),
            bn1: unit_bn(&g, &b, &rm, &rv),
            conv2: zero.view(),
            bn2: unit_bn(&g, &b, &rm, &rv),
            shortcut: None,
        };
        let (y, _, _) = residual_forward(x.clone(), &p, Norm::Batch);
        assert_eq!(y, x);
    }

    #[test]
    fn residual_single_point_relu() {
        // With identity norms and unit weights, F(x) = ReLU(ReLU(x)) = ReLU(x).
        let one = array![[1.0]];
        let (g, b, rm, rv) = (Array1::ones(1), Array1::zeros(1), Array1::zeros(1), Array1::ones(1));
        let p = ResidualParams {
            conv1: one.view(),
            bn1: unit_bn(&g, &b, &rm, &rv),
            conv2: one.view(),
            bn2: unit_bn(&g, &b, &rm, &rv),
            shortcut: None,
        };
        for x in [2.5, -1.5] {
            let (y, _, _) = residual_forward(array![[x]], &p, Norm::Bypass);
            assert_eq!(y[[0, 0]], x + x.max(0.0));
        }
    }
}
