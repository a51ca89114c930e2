//! The dual-stream segmentation network.
//!
//! Stream A stacks EdgeConv layers, each on a KNN graph rebuilt in the
//! current feature space (the first on raw coordinates). Stream B stacks
//! residual blocks of pointwise convolutions over raw coordinates. Every
//! EdgeConv output and the final residual output are concatenated per
//! point, a per-cloud max-pooled copy of that vector is appended, and a
//! pointwise head maps the result to class logits.
//!
//! A batch is a set of independent clouds stacked row-wise; graphs and the
//! global pool respect cloud boundaries while batch normalization pools
//! over every row (every edge, inside EdgeConv).

pub mod checkpoint;
pub mod layers;
pub mod params;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};

pub use checkpoint::Checkpoint;
pub use layers::Norm;
pub use params::{init_params, pattern_matches, FusionConfig, Param, ParameterStore, INPUT_CHANNELS};

use crate::cloud::LabeledCloud;
use crate::error::{Error, Result};
use crate::graph::{self, KnnGraph, MetricSpace};
use crate::scalar::Real;
use layers::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Clouds stacked row-wise for one forward pass.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub points: Array2<T>,
    pub sizes: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn from_clouds(clouds: &[&LabeledCloud]) -> Self {
        let total = clouds.iter().map(|c| c.len()).sum();
        let mut points = Array2::zeros((total, INPUT_CHANNELS));
        let mut row = 0;
        for c in clouds {
            for p in c.points() {
                for d in 0..3 {
                    points[[row, d]] = T::of(p[d]);
                }
                row += 1;
            }
        }
        Self {
            points,
            sizes: clouds.iter().map(|c| c.len()).collect(),
        }
    }

    pub fn single(cloud: &LabeledCloud) -> Self {
        Self::from_clouds(&[cloud])
    }

    pub fn rows(&self) -> usize {
        self.points.nrows()
    }

    fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sizes.iter().scan(0, |start, &n| {
            let seg = (*start, *start + n);
            *start += n;
            Some(seg)
        })
    }
}

/// Unnormalized class scores, one row per point.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<T> {
    pub values: Array2<T>,
}

/// Extra knobs for [`forward`]. The defaults derive everything from the mode.
#[derive(Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Overrides how every normalization layer behaves.
    pub norm: Option<Norm>,
    /// Reuses graphs from an earlier trace, `[layer][cloud]`.
    pub graphs: Option<&'a [Vec<KnnGraph>]>,
}

/// Everything [`backward`] needs to differentiate the recorded forward.
#[derive(Debug)]
pub struct ForwardTrace<T> {
    mode: Mode,
    fingerprint: (u64, u64),
    consumed: bool,
    sizes: Vec<usize>,
    graphs: Vec<Vec<KnnGraph>>,
    edge: Vec<EdgeConvCache<T>>,
    residual: Vec<ResidualCache<T>>,
    local_width: usize,
    /// Winning row of the global max pool, `clouds × local_width`.
    pool_argmax: Array2<usize>,
    head: Vec<DenseCache<T>>,
    out_input: Array2<T>,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<T> ForwardTrace<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// KNN graphs used by each EdgeConv layer, per cloud.
    pub fn graphs(&self) -> &[Vec<KnnGraph>] {
        &self.graphs
    }

    pub fn batch_stats(&self) -> &[(String, BatchStats<T>)] {
        &self.stats
    }
}

fn bn_params<'a, T: Real>(store: &'a ParameterStore<T>, prefix: &str, eps: T) -> Result<BnParams<'a, T>> {
    Ok(BnParams {
        gamma: store.vector(&format!("{prefix}.gamma"))?,
        beta: store.vector(&format!("{prefix}.beta"))?,
        running_mean: store.buffer_vector(&format!("{prefix}.running_mean"))?,
        running_var: store.buffer_vector(&format!("{prefix}.running_var"))?,
        eps,
    })
}

fn edge_params<'a, T: Real>(store: &'a ParameterStore<T>, config: &FusionConfig, layer: usize) -> Result<EdgeConvParams<'a, T>> {
    let name = FusionConfig::edgeconv_name(layer);
    Ok(EdgeConvParams {
        theta: store.mat(&format!("{name}.theta"))?,
        bn: bn_params(store, &format!("{name}.bn"), T::of(config.bn_epsilon))?,
        slope: T::of(config.leaky_slope),
    })
}

fn residual_params<'a, T: Real>(store: &'a ParameterStore<T>, config: &FusionConfig, block: usize) -> Result<ResidualParams<'a, T>> {
    let name = FusionConfig::residual_name(block);
    let eps = T::of(config.bn_epsilon);
    let shortcut_name = format!("{name}.shortcut");
    Ok(ResidualParams {
        conv1: store.mat(&format!("{name}.conv1"))?,
        bn1: bn_params(store, &format!("{name}.bn1"), eps)?,
        conv2: store.mat(&format!("{name}.conv2"))?,
        bn2: bn_params(store, &format!("{name}.bn2"), eps)?,
        shortcut: match store.get(&shortcut_name) {
            Some(_) => Some(store.mat(&shortcut_name)?),
            None => None,
        },
    })
}

/// Segment-local graph with indices shifted to stacked-row positions.
fn stacked_table(graphs: &[KnnGraph], sizes: &[usize]) -> Vec<u32> {
    let mut table = Vec::with_capacity(sizes.iter().sum::<usize>() * graphs.first().map_or(0, |g| g.k()));
    let mut offset = 0u32;
    for (g, &n) in graphs.iter().zip(sizes) {
        table.extend(g.table().iter().map(|&j| j + offset));
        offset += n as u32;
    }
    table
}

/// Single EdgeConv layer over one cloud, building its graph in the input's
/// own feature space. Spatial inputs (3 channels on the first layer) use the
/// exact grid search.
pub fn edgeconv_forward<T: Real>(
    features: ArrayView2<'_, T>,
    params: &ParameterStore<T>,
    config: &FusionConfig,
    layer: usize,
    norm: Norm,
) -> Result<(Array2<T>, EdgeConvCache<T>)> {
    let n = features.nrows();
    if config.k >= n {
        return Err(Error::Parameter(format!("k = {} requires more than {n} points", config.k)));
    }
    let g = if layer == 0 {
        graph::knn(features, config.k)?
    } else {
        graph::knn_gram(features, config.k)?
    };
    let p = edge_params(params, config, layer)?;
    let (out, cache, _) = layers::edgeconv_forward(features.to_owned(), g.table().to_vec(), config.k, &p, norm);
    Ok((out, cache))
}

/// Single residual block over stacked rows.
pub fn residual_block_forward<T: Real>(
    features: ArrayView2<'_, T>,
    params: &ParameterStore<T>,
    config: &FusionConfig,
    block: usize,
    norm: Norm,
) -> Result<(Array2<T>, ResidualCache<T>)> {
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite residual input".into()));
    }
    let p = residual_params(params, config, block)?;
    let (out, cache, _) = layers::residual_forward(features.to_owned(), &p, norm);
    Ok((out, cache))
}

/// Full network forward on a stacked batch.
pub fn forward<T: Real>(
    batch: &Batch<T>,
    params: &ParameterStore<T>,
    config: &FusionConfig,
    mode: Mode,
    options: ForwardOptions<'_>,
) -> Result<(Logits<T>, ForwardTrace<T>)> {
    config.validate()?;
    if batch.sizes.iter().sum::<usize>() != batch.rows() || batch.points.ncols() != INPUT_CHANNELS {
        return Err(Error::Validation("batch sizes do not match stacked points".into()));
    }
    if batch.sizes.is_empty() {
        return Err(Error::EmptyInput("forward needs at least one cloud"));
    }
    if let Some(&n) = batch.sizes.iter().find(|&&n| n <= config.k) {
        return Err(Error::Parameter(format!("cloud of {n} points is too small for k = {}", config.k)));
    }
    let norm = options.norm.unwrap_or(match mode {
        Mode::Train => Norm::Batch,
        Mode::Eval => Norm::Running,
    });
    // Frozen layers act as fixed functions: even in training they normalize
    // with their running statistics, exactly as at evaluation.
    let layer_norm = |gamma: String| match (options.norm, mode) {
        (None, Mode::Train) if params.is_frozen(&gamma) => Norm::Running,
        _ => norm,
    };
    let eps = T::of(config.bn_epsilon);
    let mut stats = Vec::new();
    let mut locals: Vec<Array2<T>> = Vec::new();

    // Stream A.
    let mut graphs: Vec<Vec<KnnGraph>> = Vec::new();
    let mut edge = Vec::new();
    let mut h = batch.points.clone();
    for layer in 0..config.edgeconv_widths.len() {
        let layer_graphs = match options.graphs.and_then(|g| g.get(layer)) {
            Some(g) => g.clone(),
            None => batch
                .segments()
                .map(|(a, b)| {
                    let view = h.slice(s![a..b, ..]);
                    if layer == 0 {
                        graph::knn(view, config.k).map(|g| g.with_metric(MetricSpace::Spatial))
                    } else {
                        graph::knn_gram(view, config.k)
                    }
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if layer_graphs.len() != batch.sizes.len()
            || layer_graphs.iter().zip(&batch.sizes).any(|(g, &n)| g.n() != n || g.k() != config.k)
        {
            return Err(Error::Validation(format!("supplied graphs for layer {layer} do not fit the batch")));
        }
        let table = stacked_table(&layer_graphs, &batch.sizes);
        let p = edge_params(params, config, layer)?;
        let norm = layer_norm(format!("{}.bn.gamma", FusionConfig::edgeconv_name(layer)));
        let (out, cache, st) = layers::edgeconv_forward(h, table, config.k, &p, norm);
        if let Some(st) = st {
            stats.push((format!("{}.bn", FusionConfig::edgeconv_name(layer)), st));
        }
        edge.push(cache);
        graphs.push(layer_graphs);
        locals.push(out.clone());
        h = out;
    }

    // Stream B.
    let mut residual = Vec::new();
    let mut x = batch.points.clone();
    for block in 0..config.residual_widths.len() {
        let p = residual_params(params, config, block)?;
        let name = FusionConfig::residual_name(block);
        let norm = layer_norm(format!("{name}.bn1.gamma"));
        let (out, cache, [s1, s2]) = layers::residual_forward(x, &p, norm);
        if let Some(st) = s1 {
            stats.push((format!("{name}.bn1"), st));
        }
        if let Some(st) = s2 {
            stats.push((format!("{name}.bn2"), st));
        }
        residual.push(cache);
        x = out;
    }
    if !config.residual_widths.is_empty() {
        locals.push(x);
    }

    // Fusion: local features plus the broadcast per-cloud max.
    let local_views: Vec<_> = locals.iter().map(|a| a.view()).collect();
    let local = concatenate(Axis(1), &local_views).expect("row counts agree");
    let width = local.ncols();
    let mut global = Array2::<T>::zeros((batch.rows(), width));
    let mut pool_argmax = Array2::<usize>::zeros((batch.sizes.len(), width));
    for (seg, (a, b)) in batch.segments().enumerate() {
        for c in 0..width {
            let mut best = a;
            for r in a + 1..b {
                if local[[r, c]] > local[[best, c]] {
                    best = r;
                }
            }
            pool_argmax[[seg, c]] = best;
            let v = local[[best, c]];
            global.slice_mut(s![a..b, c]).fill(v);
        }
    }
    let mut z = concatenate(Axis(1), &[local.view(), global.view()]).expect("row counts agree");

    // Head.
    let mut head = Vec::new();
    for i in 0..config.head_widths.len() {
        let name = FusionConfig::head_name(i);
        let w = params.mat(&format!("{name}.weight"))?;
        let bn = bn_params(params, &format!("{name}.bn"), eps)?;
        let (out, cache, st) = dense_bn_relu_forward(z, &w, &bn, layer_norm(format!("{name}.bn.gamma")));
        if let Some(st) = st {
            stats.push((format!("{name}.bn"), st));
        }
        head.push(cache);
        z = out;
    }
    let w = params.mat(&format!("{}.weight", FusionConfig::HEAD_OUT))?;
    let bias = params.vector(&format!("{}.bias", FusionConfig::HEAD_OUT))?;
    let logits = z.dot(&w) + &bias;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("network produced non-finite logits".into()));
    }

    let trace = ForwardTrace {
        mode,
        fingerprint: params.fingerprint(),
        consumed: false,
        sizes: batch.sizes.clone(),
        graphs,
        edge,
        residual,
        local_width: width,
        pool_argmax,
        head,
        out_input: z,
        stats,
    };
    Ok((Logits { values: logits }, trace))
}

/// Forward on a single cloud's coordinates; labels are ignored.
pub fn fusion_forward<T: Real>(
    cloud: &LabeledCloud,
    params: &ParameterStore<T>,
    config: &FusionConfig,
    mode: Mode,
) -> Result<(Logits<T>, ForwardTrace<T>)> {
    forward(&Batch::single(cloud), params, config, mode, ForwardOptions::default())
}

fn store_grad<T: Real, D: ndarray::Dimension>(params: &mut ParameterStore<T>, name: &str, grad: ndarray::Array<T, D>) -> Result<()> {
    if params.is_frozen(name) {
        return Ok(());
    }
    let slot = params.grad_mut(name)?;
    if slot.shape() != grad.shape() {
        return Err(Error::State(format!("gradient shape mismatch for {name}")));
    }
    slot.assign(&grad.into_dyn());
    Ok(())
}

/// Populates gradients of the scalar loss whose logit gradient is
/// `loss_grad`. Frozen entries end with exactly zero gradient. A trace can
/// be differentiated once.
pub fn backward<T: Real>(
    trace: &mut ForwardTrace<T>,
    loss_grad: ArrayView2<'_, T>,
    params: &mut ParameterStore<T>,
    config: &FusionConfig,
) -> Result<()> {
    if trace.consumed {
        return Err(Error::State("trace already differentiated; run forward again".into()));
    }
    if trace.fingerprint != params.fingerprint() {
        return Err(Error::State("parameters changed since the forward pass".into()));
    }
    if loss_grad.dim() != (trace.out_input.nrows(), config.num_classes) {
        return Err(Error::Validation("loss gradient shape does not match logits".into()));
    }
    trace.consumed = true;
    params.zero_grads();

    let edge_trainable: Vec<bool> = (0..config.edgeconv_widths.len())
        .map(|l| params.any_trainable(&format!("{}.", FusionConfig::edgeconv_name(l))))
        .collect();
    let res_trainable: Vec<bool> = (0..config.residual_widths.len())
        .map(|b| params.any_trainable(&format!("{}.", FusionConfig::residual_name(b))))
        .collect();
    let head_trainable: Vec<bool> = (0..config.head_widths.len())
        .map(|i| params.any_trainable(&format!("{}.", FusionConfig::head_name(i))))
        .collect();
    let streams_trainable = edge_trainable.iter().chain(&res_trainable).any(|&t| t);

    let eps = T::of(config.bn_epsilon);
    let out = FusionConfig::HEAD_OUT;
    store_grad(params, &format!("{out}.weight"), trace.out_input.t().dot(&loss_grad))?;
    store_grad(params, &format!("{out}.bias"), loss_grad.sum_axis(Axis(0)))?;
    let upstream = |i: usize| streams_trainable || head_trainable[..i].iter().any(|&t| t);
    if !upstream(config.head_widths.len()) {
        return Ok(());
    }
    let mut dz = {
        let w = params.mat(&format!("{out}.weight"))?;
        loss_grad.dot(&w.t())
    };
    for i in (0..config.head_widths.len()).rev() {
        let name = FusionConfig::head_name(i);
        let (dx, dw, dg, db) = {
            let w = params.mat(&format!("{name}.weight"))?;
            let bn = bn_params(params, &format!("{name}.bn"), eps)?;
            dense_bn_relu_backward(dz, &trace.head[i], &w, &bn)
        };
        store_grad(params, &format!("{name}.weight"), dw)?;
        store_grad(params, &format!("{name}.bn.gamma"), dg)?;
        store_grad(params, &format!("{name}.bn.beta"), db)?;
        if !upstream(i) {
            return Ok(());
        }
        dz = dx;
    }

    // Undo the fusion: local part plus the global max routed to its winner.
    let width = trace.local_width;
    let mut dlocal = dz.slice(s![.., ..width]).to_owned();
    let dglobal = dz.slice(s![.., width..]);
    let mut start = 0;
    for (seg, &n) in trace.sizes.iter().enumerate() {
        for c in 0..width {
            let total: T = dglobal.slice(s![start..start + n, c]).sum();
            let r = trace.pool_argmax[[seg, c]];
            dlocal[[r, c]] = dlocal[[r, c]] + total;
        }
        start += n;
    }

    let mut col = 0;
    let mut dedge: Vec<Array2<T>> = Vec::new();
    for &w in &config.edgeconv_widths {
        dedge.push(dlocal.slice(s![.., col..col + w]).to_owned());
        col += w;
    }
    let mut dres = dlocal.slice(s![.., col..]).to_owned();

    for l in (0..config.edgeconv_widths.len()).rev() {
        if !edge_trainable[..=l].iter().any(|&t| t) {
            break;
        }
        let name = FusionConfig::edgeconv_name(l);
        let grads = {
            let p = edge_params(params, config, l)?;
            edgeconv_backward(&dedge[l], &trace.edge[l], &p)
        };
        store_grad(params, &format!("{name}.theta"), grads.dtheta)?;
        store_grad(params, &format!("{name}.bn.gamma"), grads.dgamma)?;
        store_grad(params, &format!("{name}.bn.beta"), grads.dbeta)?;
        if l > 0 {
            dedge[l - 1] += &grads.dinput;
        }
    }

    for b in (0..config.residual_widths.len()).rev() {
        if !res_trainable[..=b].iter().any(|&t| t) {
            break;
        }
        let name = FusionConfig::residual_name(b);
        let grads = {
            let p = residual_params(params, config, b)?;
            residual_backward(&dres, &trace.residual[b], &p)
        };
        store_grad(params, &format!("{name}.conv1"), grads.dconv1)?;
        store_grad(params, &format!("{name}.bn1.gamma"), grads.dgamma1)?;
        store_grad(params, &format!("{name}.bn1.beta"), grads.dbeta1)?;
        store_grad(params, &format!("{name}.conv2"), grads.dconv2)?;
        store_grad(params, &format!("{name}.bn2.gamma"), grads.dgamma2)?;
        store_grad(params, &format!("{name}.bn2.beta"), grads.dbeta2)?;
        if let Some(ds) = grads.dshortcut {
            store_grad(params, &format!("{name}.shortcut"), ds)?;
        }
        dres = grads.dinput;
    }
    Ok(())
}

/// Folds a train-mode trace's batch statistics into the running averages.
/// Layers whose scale parameter is frozen keep their statistics.
pub fn apply_running_stats<T: Real>(params: &mut ParameterStore<T>, trace: &ForwardTrace<T>, momentum: f64) -> Result<()> {
    let m = T::of(momentum);
    for (prefix, st) in &trace.stats {
        if params.is_frozen(&format!("{prefix}.gamma")) {
            continue;
        }
        for (suffix, batch) in [("running_mean", &st.mean), ("running_var", &st.var)] {
            let name = format!("{prefix}.{suffix}");
            let buf = params
                .buffer_mut(&name)
                .ok_or_else(|| Error::State(format!("missing buffer {name}")))?;
            buf.zip_mut_with(&batch.view().into_dyn(), |r, &b| *r = (T::one() - m) * *r + m * b);
        }
    }
    Ok(())
}

/// Mean cross-entropy over points and its gradient with respect to the logits.
pub fn cross_entropy_loss<T: Real>(logits: &Logits<T>, labels: &[u8]) -> Result<(f64, Array2<T>)> {
    let (n, c) = logits.values.dim();
    if labels.len() != n {
        return Err(Error::Validation(format!("{} labels for {n} logit rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::EmptyInput("no points to score"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Validation(format!("label {bad} out of range for {c} classes")));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Array2::<T>::zeros((n, c));
    for ((row, mut g), &label) in logits.values.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() + max - row[label as usize].as_f64();
        for (j, e) in exps.iter().enumerate() {
            let target = if j == label as usize { 1.0 } else { 0.0 };
            g[j] = T::of((e / sum - target) * inv_n);
        }
    }
    Ok((loss * inv_n, grad))
}

fn argmax_row<T: Real>(row: ArrayView1<'_, T>) -> u8 {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best as u8
}

/// Per-point argmax; ties go to the lowest class id.
pub fn predict_labels<T: Real>(logits: &Logits<T>) -> Vec<u8> {
    logits.values.rows().into_iter().map(argmax_row).collect()
}

/// Softmax probabilities, kept for inspection tools.
pub fn softmax<T: Real>(logits: &Logits<T>) -> Array2<T> {
    let mut out = logits.values.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Column-sum helper shared by tests and tools.
pub fn column_sums<T: Real>(a: &Array2<T>) -> Array1<T> {
    a.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_config() -> FusionConfig {
        FusionConfig {
            k: 2,
            edgeconv_widths: vec![4],
            residual_widths: vec![4],
            head_widths: vec![6],
            num_classes: 3,
            ..FusionConfig::default()
        }
    }

    fn cloud(n: usize, seed: u64) -> LabeledCloud {
        use rand::Rng as _;
        let mut rng = crate::rng::seeded(seed);
        LabeledCloud::unlabeled((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let logits = Logits { values: Array2::<f64>::zeros((5, 8)) };
        let (loss, _) = cross_entropy_loss(&logits, &[0, 1, 2, 3, 4]).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_loss_is_zero() {
        let mut v = Array2::<f64>::zeros((1, 8));
        v[[0, 3]] = 1000.0;
        let (loss, grad) = cross_entropy_loss(&Logits { values: v }, &[3]).unwrap();
        assert!(loss.abs() < 1e-12 && loss >= 0.0);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn loss_rejects_invalid_labels() {
        let logits = Logits { values: Array2::<f32>::zeros((2, 8)) };
        assert!(matches!(cross_entropy_loss(&logits, &[0, 8]), Err(Error::Validation(_))));
        assert!(matches!(cross_entropy_loss(&logits, &[0]), Err(Error::Validation(_))));
    }

    #[test]
    fn predict_examples() {
        let logits = Logits { values: array![[0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], [1.0; 8]] };
        assert_eq!(predict_labels(&logits), vec![1, 0]);
    }

    #[test]
    fn forward_shapes_and_small_cloud_error() {
        let config = tiny_config();
        let params = init_params::<f64>(&config, 1).unwrap();
        let (logits, trace) = fusion_forward(&cloud(12, 2), &params, &config, Mode::Train).unwrap();
        assert_eq!(logits.values.dim(), (12, 3));
        assert_eq!(trace.graphs().len(), 1);
        assert!(matches!(
            fusion_forward(&cloud(2, 2), &params, &config, Mode::Eval),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn backward_twice_is_a_state_error() {
        let config = tiny_config();
        let mut params = init_params::<f64>(&config, 1).unwrap();
        let (logits, mut trace) = fusion_forward(&cloud(10, 3), &params, &config, Mode::Train).unwrap();
        let (_, grad) = cross_entropy_loss(&logits, &[0, 1, 2, 0, 1, 2, 0, 1, 2, 0]).unwrap();
        backward(&mut trace, grad.view(), &mut params, &config).unwrap();
        assert!(matches!(backward(&mut trace, grad.view(), &mut params, &config), Err(Error::State(_))));
    }

    #[test]
    fn backward_after_parameter_change_is_a_state_error() {
        let config = tiny_config();
        let mut params = init_params::<f64>(&config, 1).unwrap();
        let (logits, mut trace) = fusion_forward(&cloud(10, 3), &params, &config, Mode::Train).unwrap();
        params.value_mut("head.out.bias").unwrap().fill(0.5);
        let (_, grad) = cross_entropy_loss(&logits, &[0; 10]).unwrap();
        assert!(matches!(backward(&mut trace, grad.view(), &mut params, &config), Err(Error::State(_))));
    }

    #[test]
    fn all_frozen_gives_zero_gradients() {
        let config = tiny_config();
        let mut params = init_params::<f64>(&config, 1).unwrap();
        params.freeze_all(true);
        let (logits, mut trace) = fusion_forward(&cloud(10, 4), &params, &config, Mode::Train).unwrap();
        let (_, grad) = cross_entropy_loss(&logits, &[1; 10]).unwrap();
        backward(&mut trace, grad.view(), &mut params, &config).unwrap();
        assert!(params.iter().all(|(_, p)| p.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn running_stats_skip_frozen_layers() {
        let config = tiny_config();
        let mut params = init_params::<f64>(&config, 1).unwrap();
        params.set_frozen("head.0.bn.gamma", true).unwrap();
        let before = params.buffer("head.0.bn.running_mean").unwrap().clone();
        let (_, trace) = fusion_forward(&cloud(10, 5), &params, &config, Mode::Train).unwrap();
        apply_running_stats(&mut params, &trace, config.bn_momentum).unwrap();
        assert_eq!(params.buffer("head.0.bn.running_mean").unwrap(), &before);
        assert_ne!(
            params.buffer("edgeconv.0.bn.running_mean").unwrap().iter().map(|v| v.abs()).sum::<f64>(),
            0.0
        );
    }

    #[test]
    fn frozen_layers_normalize_with_running_stats_in_training() {
        let config = tiny_config();
        let mut params = init_params::<f64>(&config, 2).unwrap();
        // Non-trivial statistics, so running and batch normalization differ.
        let (_, trace) = fusion_forward(&cloud(12, 7), &params, &config, Mode::Train).unwrap();
        apply_running_stats(&mut params, &trace, 0.5).unwrap();
        let c = cloud(12, 8);
        params.freeze_all(true);
        let (train, trace) = fusion_forward(&c, &params, &config, Mode::Train).unwrap();
        let (eval, _) = fusion_forward(&c, &params, &config, Mode::Eval).unwrap();
        assert_eq!(train, eval);
        assert!(trace.batch_stats().is_empty());
        params.freeze_all(false);
        let (unfrozen, _) = fusion_forward(&c, &params, &config, Mode::Train).unwrap();
        assert_ne!(unfrozen, eval);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let config = tiny_config();
        let params = init_params::<f32>(&config, 9).unwrap();
        let c = cloud(20, 6);
        let (a, _) = fusion_forward(&c, &params, &config, Mode::Eval).unwrap();
        let (b, _) = fusion_forward(&c, &params, &config, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }
}
