use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array, ArrayD, ArrayView1, ArrayView2, IxDyn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Real;

/// Network hyperparameters. An empty `edgeconv_widths` or
/// `residual_widths` drops that stream, which is how the single-stream
/// ablations are expressed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub k: usize,
    pub edgeconv_widths: Vec<usize>,
    pub residual_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub num_classes: usize,
    pub leaky_slope: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            k: 10,
            edgeconv_widths: vec![64, 64, 128, 256],
            residual_widths: vec![64, 128, 256],
            head_widths: vec![512, 256],
            num_classes: 8,
            leaky_slope: 0.2,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

pub const INPUT_CHANNELS: usize = 3;

impl FusionConfig {
    /// Narrower layers that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            edgeconv_widths: vec![32, 32, 64],
            residual_widths: vec![32, 64],
            head_widths: vec![128, 64],
            ..Self::default()
        }
    }

    /// The same network without its residual stream.
    pub fn edgeconv_only(&self) -> Self {
        Self { residual_widths: Vec::new(), ..self.clone() }
    }

    /// The same network without its EdgeConv stream.
    pub fn residual_only(&self) -> Self {
        Self { edgeconv_widths: Vec::new(), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self
            .edgeconv_widths
            .iter()
            .chain(&self.residual_widths)
            .chain(&self.head_widths);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.edgeconv_widths.is_empty() && self.residual_widths.is_empty() {
            return Err(Error::Config("at least one stream must have layers".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Config(format!("num_classes = {} out of range", self.num_classes)));
        }
        if !(self.bn_epsilon > 0.0 && (0.0..=1.0).contains(&self.bn_momentum)) {
            return Err(Error::Config("bn_epsilon must be > 0 and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }

    /// Width of the per-point feature concatenated from both streams.
    pub fn local_width(&self) -> usize {
        self.edgeconv_widths.iter().sum::<usize>() + self.residual_widths.last().copied().unwrap_or(0)
    }

    /// Width entering the head: local features plus the global descriptor.
    pub fn fused_width(&self) -> usize {
        2 * self.local_width()
    }

    pub fn edgeconv_name(i: usize) -> String {
        format!("edgeconv.{i}")
    }

    pub fn residual_name(i: usize) -> String {
        format!("residual.{i}")
    }

    pub fn head_name(i: usize) -> String {
        format!("head.{i}")
    }

    pub const HEAD_OUT: &'static str = "head.out";

    /// Layer prefixes of the final hidden head layer and the output layer.
    pub fn head_last2(&self) -> Vec<String> {
        let mut groups = Vec::new();
        if let Some(last) = self.head_widths.len().checked_sub(1) {
            groups.push(Self::head_name(last));
        }
        groups.push(Self::HEAD_OUT.to_string());
        groups
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    /// Uniform in ±sqrt(3 / fan_in).
    FanIn(usize),
    Ones,
    Zeros,
}

pub(crate) struct EntrySpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn bn_specs(prefix: &str, width: usize, params: &mut Vec<EntrySpec>, buffers: &mut Vec<EntrySpec>) {
    params.push(EntrySpec { name: format!("{prefix}.gamma"), shape: vec![width], init: Init::Ones });
    params.push(EntrySpec { name: format!("{prefix}.beta"), shape: vec![width], init: Init::Zeros });
    buffers.push(EntrySpec { name: format!("{prefix}.running_mean"), shape: vec![width], init: Init::Zeros });
    buffers.push(EntrySpec { name: format!("{prefix}.running_var"), shape: vec![width], init: Init::Ones });
}

/// Trainable parameters and normalization buffers implied by `config`.
pub(crate) fn layout(config: &FusionConfig) -> (Vec<EntrySpec>, Vec<EntrySpec>) {
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let mut prev = INPUT_CHANNELS;
    for (i, &w) in config.edgeconv_widths.iter().enumerate() {
        let name = FusionConfig::edgeconv_name(i);
        params.push(EntrySpec { name: format!("{name}.theta"), shape: vec![2 * prev, w], init: Init::FanIn(2 * prev) });
        bn_specs(&format!("{name}.bn"), w, &mut params, &mut buffers);
        prev = w;
    }
    let mut prev = INPUT_CHANNELS;
    for (i, &w) in config.residual_widths.iter().enumerate() {
        let name = FusionConfig::residual_name(i);
        params.push(EntrySpec { name: format!("{name}.conv1"), shape: vec![prev, w], init: Init::FanIn(prev) });
        bn_specs(&format!("{name}.bn1"), w, &mut params, &mut buffers);
        params.push(EntrySpec { name: format!("{name}.conv2"), shape: vec![w, w], init: Init::FanIn(w) });
        bn_specs(&format!("{name}.bn2"), w, &mut params, &mut buffers);
        if prev != w {
            params.push(EntrySpec { name: format!("{name}.shortcut"), shape: vec![prev, w], init: Init::FanIn(prev) });
        }
        prev = w;
    }
    let mut prev = config.fused_width();
    for (i, &w) in config.head_widths.iter().enumerate() {
        let name = FusionConfig::head_name(i);
        params.push(EntrySpec { name: format!("{name}.weight"), shape: vec![prev, w], init: Init::FanIn(prev) });
        bn_specs(&format!("{name}.bn"), w, &mut params, &mut buffers);
        prev = w;
    }
    let out = FusionConfig::HEAD_OUT;
    params.push(EntrySpec { name: format!("{out}.weight"), shape: vec![prev, config.num_classes], init: Init::FanIn(prev) });
    params.push(EntrySpec { name: format!("{out}.bias"), shape: vec![config.num_classes], init: Init::FanIn(prev) });
    (params, buffers)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub frozen: bool,
}

static STORE_IDS: AtomicU64 = AtomicU64::new(1);

/// Named parameters with gradients and frozen flags, plus the batch-norm
/// running statistics. Iteration is lexicographic by name.
#[derive(Debug)]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, Param<T>>,
    buffers: BTreeMap<String, ArrayD<T>>,
    id: u64,
    version: u64,
}

impl<T: Real> Clone for ParameterStore<T> {
    fn clone(&self) -> Self {
        Self {
            entries: self.entries.clone(),
            buffers: self.buffers.clone(),
            id: STORE_IDS.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }
}

impl<T: Real> PartialEq for ParameterStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries && self.buffers == other.buffers
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a: stable across platforms and releases.
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl<T: Real> ParameterStore<T> {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
            buffers: BTreeMap::new(),
            id: STORE_IDS.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>, frozen: bool) {
        let grad = ArrayD::zeros(value.raw_dim());
        self.entries.insert(name.into(), Param { value, grad, frozen });
        self.version += 1;
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Mutable access to every entry. Counts as a parameter change.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.version += 1;
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffer(&self, name: &str) -> Option<&ArrayD<T>> {
        self.buffers.get(name)
    }

    pub(crate) fn buffer_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.buffers.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars (buffers excluded).
    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Identity and mutation counter, used to tie a forward trace to the
    /// exact parameter values it saw.
    pub fn fingerprint(&self) -> (u64, u64) {
        (self.id, self.version)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.version += 1;
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub(crate) fn grad_mut(&mut self, name: &str) -> Result<&mut ArrayD<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.grad)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.frozen)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.frozen = frozen)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        for p in self.entries.values_mut() {
            p.frozen = frozen;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn mat(&self, name: &str) -> Result<ArrayView2<'_, T>> {
        let p = self.entries.get(name).ok_or_else(|| Error::State(format!("missing parameter {name}")))?;
        p.value
            .view()
            .into_dimensionality()
            .map_err(|_| Error::State(format!("{name} is not a matrix")))
    }

    pub fn vector(&self, name: &str) -> Result<ArrayView1<'_, T>> {
        let p = self.entries.get(name).ok_or_else(|| Error::State(format!("missing parameter {name}")))?;
        p.value
            .view()
            .into_dimensionality()
            .map_err(|_| Error::State(format!("{name} is not a vector")))
    }

    pub fn buffer_vector(&self, name: &str) -> Result<ArrayView1<'_, T>> {
        let b = self.buffers.get(name).ok_or_else(|| Error::State(format!("missing buffer {name}")))?;
        b.view()
            .into_dimensionality()
            .map_err(|_| Error::State(format!("{name} is not a vector")))
    }

    /// Whether any parameter whose name starts with `prefix` is trainable.
    pub fn any_trainable(&self, prefix: &str) -> bool {
        self.entries
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .any(|(_, p)| !p.frozen)
    }

    /// Lossless conversion between element types when widening; `f64` to
    /// `f32` rounds.
    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        let conv = |a: &ArrayD<T>| a.mapv(|v| U::of(v.as_f64()));
        let mut out = ParameterStore::<U>::empty();
        for (name, p) in &self.entries {
            out.entries.insert(name.clone(), Param { value: conv(&p.value), grad: conv(&p.grad), frozen: p.frozen });
        }
        for (name, b) in &self.buffers {
            out.buffers.insert(name.clone(), conv(b));
        }
        out
    }

    /// Checks that names and shapes match what `config` implies.
    pub fn check_layout(&self, config: &FusionConfig) -> Result<()> {
        let (params, buffers) = layout(config);
        if params.len() != self.entries.len() || buffers.len() != self.buffers.len() {
            return Err(Error::State("parameter set does not match the configuration".into()));
        }
        for spec in params {
            match self.entries.get(&spec.name) {
                Some(p) if p.value.shape() == spec.shape.as_slice() => {}
                _ => return Err(Error::State(format!("parameter {} missing or misshapen", spec.name))),
            }
        }
        for spec in buffers {
            match self.buffers.get(&spec.name) {
                Some(b) if b.shape() == spec.shape.as_slice() => {}
                _ => return Err(Error::State(format!("buffer {} missing or misshapen", spec.name))),
            }
        }
        Ok(())
    }
}

fn materialize<T: Real>(spec: &EntrySpec, seed: u64) -> ArrayD<T> {
    let shape = IxDyn(&spec.shape);
    match spec.init {
        Init::Ones => Array::ones(shape),
        Init::Zeros => Array::zeros(shape),
        Init::FanIn(fan_in) => {
            let bound = (3.0 / fan_in as f64).sqrt();
            let mut rng = rng::seeded(rng::derive_seed(seed, name_hash(&spec.name)));
            Array::from_shape_simple_fn(shape, || T::of(rng.random_range(-bound..bound)))
        }
    }
}

/// Deterministic initialization: each entry draws from its own stream
/// derived from `rng_seed` and the entry name.
pub fn init_params<T: Real>(config: &FusionConfig, rng_seed: u64) -> Result<ParameterStore<T>> {
    config.validate()?;
    let (params, buffers) = layout(config);
    let mut store = ParameterStore::empty();
    for spec in &params {
        store.insert(spec.name.clone(), materialize(spec, rng_seed), false);
    }
    for spec in &buffers {
        store.insert_buffer(spec.name.clone(), materialize(spec, rng_seed));
    }
    Ok(store)
}

/// Glob match supporting `*` (any run of characters). A pattern with no
/// wildcard also matches as a dotted prefix, so `head.out` selects
/// `head.out.weight` and `head.out.bias`.
pub fn pattern_matches(pattern: &str, name: &str) -> bool {
    if !pattern.contains('*') {
        return name == pattern || name.starts_with(&format!("{pattern}."));
    }
    fn glob(p: &[u8], s: &[u8]) -> bool {
        match p.split_first() {
            None => s.is_empty(),
            Some((b'*', rest)) => (0..=s.len()).any(|i| glob(rest, &s[i..])),
            Some((c, rest)) => s.first() == Some(c) && glob(rest, &s[1..]),
        }
    }
    glob(pattern.as_bytes(), name.as_bytes())
}
