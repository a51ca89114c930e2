//! Frame-by-frame segmentation of a dual-sensor stream.
//!
//! Each frame index merges the clouds of sensors A and B, downsamples them
//! on a voxel grid and normalizes with the record of the first frame, so
//! world voxels keep one meaning for the whole stream. Warmup frames are
//! segmented in full. Their Floor/Wall predictions then seed a static
//! cache: later points whose voxel is cached take the cached label, and
//! only the rest go through the network, in the chunks a full pass would
//! have put them in, together with the cached points around them and a
//! random share of the others as scene context.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cloud::{self, LabeledCloud, NormalizationRecord, Point, VoxelKey};
use crate::datagen::{self, SceneSpec};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, FusionConfig};
use crate::pipeline;
use crate::rng::{self, derive_seed};
use crate::SemanticClass;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SensorId {
    A,
    B,
}

impl SensorId {
    fn code(self) -> u8 {
        match self {
            SensorId::A => b'A',
            SensorId::B => b'B',
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            b'A' => Ok(SensorId::A),
            b'B' => Ok(SensorId::B),
            other => Err(Error::Format(format!("unknown sensor id byte {other:#04x}"))),
        }
    }
}

/// One sensor's cloud for one frame index.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMessage {
    pub index: u64,
    /// Seconds on a monotonic clock.
    pub timestamp: f64,
    pub sensor: SensorId,
    pub cloud: LabeledCloud,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    Full,
    /// Dumped clouds keep only points that were not served by the cache.
    DynamicOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub voxel_size: f64,
    pub warmup_frames: usize,
    pub checkpoint: Option<PathBuf>,
    pub output: OutputMode,
    /// Where per-frame JSON lines go; standard output when unset.
    pub report: Option<PathBuf>,
    /// Largest number of points per network forward.
    pub budget: usize,
    pub seed: u64,
    /// Accept frames from a single sensor without waiting for a partner.
    pub single_sensor: bool,
    /// Stream-time seconds to wait for the partner sensor of a frame.
    pub pair_timeout: f64,
    pub static_classes: BTreeSet<SemanticClass>,
    /// Cached points within this many meters of an uncached point always go
    /// along with it as context.
    pub context_radius: f64,
    /// Share of the remaining, farther cached points sent as context.
    pub context_fraction: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            warmup_frames: 1,
            checkpoint: None,
            output: OutputMode::Full,
            report: None,
            budget: 2048,
            seed: 0,
            single_sensor: false,
            pair_timeout: 0.25,
            static_classes: [SemanticClass::Floor, SemanticClass::Wall].into(),
            context_radius: 0.1,
            context_fraction: 0.0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::Config(format!("voxel size must be positive, got {}", self.voxel_size)));
        }
        if self.warmup_frames == 0 {
            return Err(Error::Config("warmup_frames must be at least 1".into()));
        }
        if self.budget == 0 {
            return Err(Error::Config("stream budget must be positive".into()));
        }
        if !(self.pair_timeout >= 0.0) {
            return Err(Error::Config("pair_timeout must be >= 0".into()));
        }
        if !(self.context_radius >= 0.0 && self.context_radius.is_finite()) {
            return Err(Error::Config("context_radius must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.context_fraction) {
            return Err(Error::Config("context_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// World voxels labeled static by the warmup predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticCache {
    voxels: HashMap<VoxelKey, SemanticClass>,
    voxel_size: f64,
    built_at: u64,
    classes: BTreeSet<SemanticClass>,
}

impl StaticCache {
    pub fn new(voxel_size: f64, classes: BTreeSet<SemanticClass>, built_at: u64) -> Self {
        Self { voxels: HashMap::new(), voxel_size, built_at, classes }
    }

    /// Claims the voxel of every point predicted as a static class. A voxel
    /// keeps the first label it was claimed with.
    pub fn absorb(&mut self, points: &[Point], labels: &[SemanticClass]) {
        for (p, &l) in points.iter().zip(labels) {
            if self.classes.contains(&l) {
                self.voxels.entry(cloud::voxel_key(p, self.voxel_size)).or_insert(l);
            }
        }
    }

    pub fn lookup(&self, p: &Point) -> Option<SemanticClass> {
        self.voxels.get(&cloud::voxel_key(p, self.voxel_size)).copied()
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    /// Frame index after which the cache was complete.
    pub fn built_at(&self) -> u64 {
        self.built_at
    }

    pub fn classes(&self) -> &BTreeSet<SemanticClass> {
        &self.classes
    }
}

// ---------------------------------------------------------------------------
// Frame sources

/// File name of one sensor's frame in a stream directory.
pub fn frame_file_name(index: u64, sensor: SensorId) -> String {
    format!("frame_{index}_{}.pcsb", sensor.code() as char)
}

fn parse_frame_file_name(name: &str) -> Option<(u64, SensorId)> {
    let rest = name.strip_prefix("frame_")?.strip_suffix(".pcsb")?;
    let (idx, sensor) = rest.rsplit_once('_')?;
    let sensor = match sensor {
        "A" => SensorId::A,
        "B" => SensorId::B,
        _ => return None,
    };
    Some((idx.parse().ok()?, sensor))
}

/// Messages from a directory of `frame_<idx>_<sensor>.pcsb` files, ordered by
/// index then sensor. Directories carry no clock, so frame `i` is stamped
/// `i * period` seconds.
pub fn directory_source(dir: impl AsRef<Path>, period: f64) -> Result<Vec<FrameMessage>> {
    let dir = dir.as_ref();
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some((index, sensor)) = entry.file_name().to_str().and_then(parse_frame_file_name) {
            found.push((index, sensor, entry.path()));
        }
    }
    if found.is_empty() {
        return Err(Error::EmptyInput("no frame_<idx>_<sensor>.pcsb files in stream directory"));
    }
    found.sort();
    found
        .into_iter()
        .map(|(index, sensor, path)| {
            let cloud = cloud::load_cloud(&path)?.without_labels();
            Ok(FrameMessage { index, timestamp: index as f64 * period, sensor, cloud })
        })
        .collect()
}

const WIRE_HEADER: usize = 8 + 1 + 8 + 4;

/// One message in standard-input framing: frame index (u64), sensor byte
/// (`A` or `B`), timestamp (f64 seconds), payload length (u32), then the PCSB
/// payload. All integers and floats are little-endian.
pub fn encode_frame_message(message: &FrameMessage) -> Vec<u8> {
    let payload = cloud::encode_pcsb(&message.cloud);
    let mut out = Vec::with_capacity(WIRE_HEADER + payload.len());
    out.extend_from_slice(&message.index.to_le_bytes());
    out.push(message.sensor.code());
    out.extend_from_slice(&message.timestamp.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Reads framed messages until end of input.
pub struct ReaderSource<R> {
    reader: R,
}

impl<R: Read> ReaderSource<R> {
    pub fn new(reader: R) -> Self {
        Self { reader }
    }

    fn read_message(&mut self) -> Result<Option<FrameMessage>> {
        let mut header = [0u8; WIRE_HEADER];
        let mut filled = 0;
        while filled < WIRE_HEADER {
            match self.reader.read(&mut header[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => return Err(Error::Format("stream ended inside a message header".into())),
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io("<stdin>", e)),
            }
        }
        let index = u64::from_le_bytes(header[0..8].try_into().unwrap());
        let sensor = SensorId::from_code(header[8])?;
        let timestamp = f64::from_le_bytes(header[9..17].try_into().unwrap());
        let len = u32::from_le_bytes(header[17..21].try_into().unwrap()) as usize;
        let mut payload = vec![0u8; len];
        self.reader
            .read_exact(&mut payload)
            .map_err(|_| Error::Format(format!("frame {index}: payload shorter than {len} bytes")))?;
        let cloud = cloud::decode_pcsb(&payload)?.without_labels();
        Ok(Some(FrameMessage { index, timestamp, sensor, cloud }))
    }
}

impl<R: Read> Iterator for ReaderSource<R> {
    type Item = Result<FrameMessage>;

    fn next(&mut self) -> Option<Self::Item> {
        self.read_message().transpose()
    }
}

// ---------------------------------------------------------------------------
// Pairing

/// A frame index with every sensor cloud that arrived for it.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedFrame {
    pub index: u64,
    pub parts: Vec<(SensorId, LabeledCloud)>,
    pub warnings: Vec<String>,
}

#[derive(Default)]
struct Pending {
    first_seen: f64,
    parts: BTreeMap<SensorId, LabeledCloud>,
}

/// Groups messages by frame index and releases frames in index order, once
/// both sensors arrived, the partner timed out, or the input ended.
pub struct Pairer {
    single_sensor: bool,
    timeout: f64,
    pending: BTreeMap<u64, Pending>,
    last_index: HashMap<SensorId, u64>,
    released: Option<u64>,
    clock: f64,
}

impl Pairer {
    pub fn new(single_sensor: bool, timeout: f64) -> Self {
        Self {
            single_sensor,
            timeout,
            pending: BTreeMap::new(),
            last_index: HashMap::new(),
            released: None,
            clock: f64::NEG_INFINITY,
        }
    }

    pub fn push(&mut self, message: FrameMessage) -> Result<Vec<PairedFrame>> {
        if let Some(&last) = self.last_index.get(&message.sensor) {
            if message.index < last {
                return Err(Error::Validation(format!(
                    "sensor {:?} went back from frame {last} to {}",
                    message.sensor, message.index
                )));
            }
        }
        if self.released.is_some_and(|r| message.index <= r) {
            log::warn!("dropping late message for frame {} from sensor {:?}", message.index, message.sensor);
            return Ok(Vec::new());
        }
        self.last_index.insert(message.sensor, message.index);
        self.clock = self.clock.max(message.timestamp);
        let slot = self.pending.entry(message.index).or_insert_with(|| Pending {
            first_seen: message.timestamp,
            parts: BTreeMap::new(),
        });
        if slot.parts.insert(message.sensor, message.cloud).is_some() {
            return Err(Error::Validation(format!(
                "frame {} has two clouds from sensor {:?}",
                message.index, message.sensor
            )));
        }
        Ok(self.drain(false))
    }

    /// Releases everything still pending.
    pub fn finish(&mut self) -> Vec<PairedFrame> {
        self.drain(true)
    }

    fn drain(&mut self, all: bool) -> Vec<PairedFrame> {
        let mut out = Vec::new();
        while let Some(entry) = self.pending.first_entry() {
            let p = entry.get();
            let complete = self.single_sensor || p.parts.len() == 2;
            let expired = self.clock - p.first_seen > self.timeout;
            if !(complete || expired || all) {
                break;
            }
            let index = *entry.key();
            let p = entry.remove();
            let mut warnings = Vec::new();
            if !self.single_sensor && p.parts.len() < 2 {
                for s in [SensorId::A, SensorId::B] {
                    if !p.parts.contains_key(&s) {
                        warnings.push(format!("missing sensor {s:?}; continuing single-sensor"));
                    }
                }
            }
            self.released = Some(index);
            out.push(PairedFrame { index, parts: p.parts.into_iter().collect(), warnings });
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Per-frame processing

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyMs {
    pub preprocess: f64,
    pub inference: f64,
    pub postprocess: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame_index: u64,
    pub points: usize,
    /// Points sent through the network, context included.
    pub inference_points: usize,
    pub per_class_counts: BTreeMap<String, usize>,
    pub cache_hit_fraction: f64,
    pub latency_ms: LatencyMs,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct FrameResult {
    pub report: FrameReport,
    /// The merged, downsampled frame in world coordinates with predicted labels.
    pub cloud: LabeledCloud,
    /// Which points of `cloud` took their label from the static cache.
    pub cached: Vec<bool>,
}

impl FrameResult {
    /// The labeled cloud to dump under `mode`.
    pub fn output_cloud(&self, mode: OutputMode) -> LabeledCloud {
        match mode {
            OutputMode::Full => self.cloud.clone(),
            OutputMode::DynamicOnly => {
                let keep: Vec<usize> = (0..self.cloud.len()).filter(|&i| !self.cached[i]).collect();
                self.cloud.select(&keep)
            }
        }
    }
}

/// Merges the sensor clouds of a frame and downsamples them.
pub fn merge_frame(parts: &[(SensorId, LabeledCloud)], voxel_size: f64) -> Result<LabeledCloud> {
    let mut merged = LabeledCloud::default();
    for (_, c) in parts {
        merged = cloud::merge_clouds(&merged, c).cloud;
    }
    cloud::voxel_downsample(&merged, voxel_size)
}

/// Stateful per-frame segmenter; see the module docs.
pub struct StreamProcessor {
    config: StreamConfig,
    checkpoint: Checkpoint,
    record: Option<NormalizationRecord>,
    cache: Option<StaticCache>,
    frames_seen: usize,
}

impl StreamProcessor {
    pub fn new(config: StreamConfig, checkpoint: Checkpoint) -> Result<Self> {
        config.validate()?;
        checkpoint.config.validate()?;
        checkpoint.params.check_layout(&checkpoint.config)?;
        if let Some(c) = config.static_classes.iter().find(|c| c.id() as usize >= checkpoint.config.num_classes) {
            return Err(Error::Config(format!(
                "static class {c} is outside the checkpoint's {} classes",
                checkpoint.config.num_classes
            )));
        }
        Ok(Self { config, checkpoint, record: None, cache: None, frames_seen: 0 })
    }

    pub fn cache(&self) -> Option<&StaticCache> {
        self.cache.as_ref()
    }

    pub fn record(&self) -> Option<&NormalizationRecord> {
        self.record.as_ref()
    }

    fn model(&self) -> &FusionConfig {
        &self.checkpoint.config
    }

    pub fn process(&mut self, frame: PairedFrame) -> Result<FrameResult> {
        let t0 = Instant::now();
        let mut warnings = frame.warnings;
        let cloud = merge_frame(&frame.parts, self.config.voxel_size)?;
        let n = cloud.len();
        let mut labels = vec![SemanticClass::Unlabeled; n];
        let mut cached = vec![false; n];
        let warmup = self.frames_seen < self.config.warmup_frames;
        let k = self.model().k;

        if n == 0 {
            warnings.push("empty frame".into());
        } else if self.record.is_none() {
            self.record = Some(cloud::zero_center_normalize(&cloud)?.1);
        }
        let normalized = self.record.map(|r| r.apply(&cloud));
        if !warmup {
            if let Some(cache) = &self.cache {
                for (i, p) in cloud.points().iter().enumerate() {
                    if let Some(l) = cache.lookup(p) {
                        labels[i] = l;
                        cached[i] = true;
                    }
                }
            }
        }
        let plan = match &normalized {
            Some(_) if n <= k => {
                warnings.push(format!("only {n} points; need more than k = {k} to segment"));
                Vec::new()
            }
            Some(_) if warmup => pipeline::chunk_plan(n, self.config.budget, self.config.seed),
            Some(_) => self.incremental_plan(cloud.points(), &cached),
            None => Vec::new(),
        };
        let inference_points = plan.iter().map(Vec::len).sum();
        let t1 = Instant::now();

        let mut predicted = Vec::new();
        if let Some(normalized) = &normalized {
            predicted = pipeline::predict_chunks(normalized, &plan, &self.checkpoint.params, &self.checkpoint.config)?;
        }
        let t2 = Instant::now();

        for &i in plan.iter().flatten().filter(|&&i| !cached[i]) {
            labels[i] = SemanticClass::from_id(predicted[i]).expect("model emits valid class ids");
        }
        if warmup {
            let cache = self.cache.get_or_insert_with(|| {
                StaticCache::new(self.config.voxel_size, self.config.static_classes.clone(), frame.index)
            });
            cache.absorb(cloud.points(), &labels);
            cache.built_at = frame.index;
        }
        self.frames_seen += 1;
        let mut per_class_counts = BTreeMap::new();
        for l in &labels {
            *per_class_counts.entry(l.name().to_string()).or_insert(0) += 1;
        }
        let hits = cached.iter().filter(|&&c| c).count();
        let mut out = cloud.with_labels(labels)?;
        out.frame_id = Some(frame.index.to_string());
        let t3 = Instant::now();

        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        let report = FrameReport {
            frame_index: frame.index,
            points: n,
            inference_points,
            per_class_counts,
            cache_hit_fraction: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
            latency_ms: LatencyMs {
                preprocess: ms(t0, t1),
                inference: ms(t1, t2),
                postprocess: ms(t2, t3),
                total: ms(t0, t3),
            },
            warnings,
        };
        Ok(FrameResult { report, cloud: out, cached })
    }

    /// Chunks for a post-warmup frame: the warmup plan for a frame of this
    /// size, minus the cached points that lie farther than `context_radius`
    /// from every uncached point, of which a random `context_fraction`
    /// stays as scene context. Uncached points keep the same chunk
    /// companions they would have in a full pass.
    fn incremental_plan(&self, points: &[Point], cached: &[bool]) -> Vec<Vec<usize>> {
        let n = cached.len();
        if cached.iter().all(|&c| c) {
            return Vec::new();
        }
        let near = near_uncached(points, cached, self.config.context_radius);
        let mut r = rng::seeded(derive_seed(self.config.seed, 0xC0_7E47));
        let keep: Vec<bool> = (0..n)
            .map(|i| {
                let roll = r.random::<f64>();
                !cached[i] || near[i] || roll < self.config.context_fraction
            })
            .collect();
        let k = self.model().k;
        pipeline::chunk_plan(n, self.config.budget, self.config.seed)
            .into_iter()
            .map(|chunk| chunk.into_iter().filter(|&i| keep[i]).collect::<Vec<_>>())
            .filter(|chunk| chunk.len() > k && chunk.iter().any(|&i| !cached[i]))
            .collect()
    }
}

/// Marks cached points within `radius` of some uncached point.
fn near_uncached(points: &[Point], cached: &[bool], radius: f64) -> Vec<bool> {
    if radius <= 0.0 {
        return vec![false; points.len()];
    }
    let mut grid: HashMap<VoxelKey, Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate().filter(|&(i, _)| !cached[i]) {
        grid.entry(cloud::voxel_key(p, radius)).or_default().push(i);
    }
    let r2 = radius * radius;
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if !cached[i] {
                return false;
            }
            let (x, y, z) = cloud::voxel_key(p, radius);
            (-1..=1).any(|dx| {
                (-1..=1).any(|dy| {
                    (-1..=1).any(|dz| {
                        grid.get(&(x + dx, y + dy, z + dz)).is_some_and(|members| {
                            members.iter().any(|&j| {
                                let q = &points[j];
                                (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2) <= r2
                            })
                        })
                    })
                })
            })
        })
        .collect()
}

/// Aggregate counters of a finished stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub frames: usize,
    pub points: usize,
    pub inference_points: usize,
}

/// Pairs, processes and emits every frame of `source` in index order.
pub fn run_stream(
    config: &StreamConfig,
    checkpoint: Checkpoint,
    source: impl IntoIterator<Item = Result<FrameMessage>>,
    mut sink: impl FnMut(FrameResult) -> Result<()>,
) -> Result<StreamSummary> {
    let mut processor = StreamProcessor::new(config.clone(), checkpoint)?;
    let mut pairer = Pairer::new(config.single_sensor, config.pair_timeout);
    let mut summary = StreamSummary::default();
    let mut handle = |frame: PairedFrame, summary: &mut StreamSummary| -> Result<()> {
        let result = processor.process(frame)?;
        summary.frames += 1;
        summary.points += result.report.points;
        summary.inference_points += result.report.inference_points;
        sink(result)
    };
    for message in source {
        for frame in pairer.push(message?)? {
            handle(frame, &mut summary)?;
        }
    }
    for frame in pairer.finish() {
        handle(frame, &mut summary)?;
    }
    Ok(summary)
}

/// Writes one JSON line per frame report.
pub fn write_report_line(out: &mut impl Write, report: &FrameReport) -> Result<()> {
    let line = serde_json::to_string(report).expect("report serializes");
    writeln!(out, "{line}").map_err(|e| Error::io("<report>", e))
}

// ---------------------------------------------------------------------------
// Synthetic streams

/// A room seen by two sensors over time while its humans walk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticStream {
    pub scene: SceneSpec,
    pub frames: usize,
    /// Meters each human moves per frame.
    pub step: f64,
    /// Seconds between frames.
    pub period: f64,
}

impl Default for SyntheticStream {
    fn default() -> Self {
        Self {
            scene: SceneSpec { room: [5.0, 4.0], density: 900.0, ..SceneSpec::default() },
            frames: 20,
            step: 0.08,
            period: 0.1,
        }
    }
}

impl SyntheticStream {
    /// Labeled clouds per frame and sensor, in message order. Each sensor
    /// samples the shared layout independently at the scene density.
    pub fn render(&self) -> Result<Vec<(u64, SensorId, LabeledCloud)>> {
        let layouts = datagen::walking_layouts(&self.scene, self.frames, self.step)?;
        let mut out = Vec::with_capacity(2 * self.frames);
        for (t, layout) in layouts.iter().enumerate() {
            for (s, sensor) in [SensorId::A, SensorId::B].into_iter().enumerate() {
                let seed = derive_seed(self.scene.seed, 0x57_0000 + (2 * t + s) as u64);
                out.push((t as u64, sensor, datagen::render_layout(layout, &self.scene, seed)));
            }
        }
        Ok(out)
    }

    /// The rendered stream as unlabeled messages.
    pub fn messages(&self) -> Result<Vec<FrameMessage>> {
        Ok(self
            .render()?
            .into_iter()
            .map(|(index, sensor, cloud)| FrameMessage {
                index,
                timestamp: index as f64 * self.period,
                sensor,
                cloud: cloud.without_labels(),
            })
            .collect())
    }

    /// Writes the stream as a frame directory (labels kept, readers drop them).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (index, sensor, cloud) in self.render()? {
            cloud::save_cloud(&cloud, dir.join(frame_file_name(index, sensor)), cloud::CloudFormat::Binary)?;
        }
        Ok(())
    }
}

/// Caps worker threads from `FUSIONSEG_THREADS` (0 means serial). Returns the
/// thread count in effect; call once before any parallel work.
pub fn configure_threads() -> Result<usize> {
    let requested = match std::env::var("FUSIONSEG_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("FUSIONSEG_THREADS must be an integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = requested {
            // A pool that already exists keeps its size.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
        Ok(rayon::current_num_threads())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = requested;
        Ok(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(index: u64, sensor: SensorId, t: f64) -> FrameMessage {
        let cloud = LabeledCloud::unlabeled(vec![[index as f64, 0.0, 0.0]]).unwrap();
        FrameMessage { index, timestamp: t, sensor, cloud }
    }

    #[test]
    fn pairs_in_order_and_times_out() {
        let mut p = Pairer::new(false, 0.15);
        assert!(p.push(msg(0, SensorId::A, 0.0)).unwrap().is_empty());
        let out = p.push(msg(0, SensorId::B, 0.01)).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].warnings.is_empty());
        assert!(p.push(msg(1, SensorId::A, 0.1)).unwrap().is_empty());
        assert!(p.push(msg(2, SensorId::A, 0.2)).unwrap().is_empty());
        let out = p.push(msg(3, SensorId::A, 0.3)).unwrap();
        assert_eq!(out.iter().map(|f| f.index).collect::<Vec<_>>(), vec![1]);
        assert_eq!(out[0].warnings.len(), 1);
        let rest = p.finish();
        assert_eq!(rest.iter().map(|f| f.index).collect::<Vec<_>>(), vec![2, 3]);
        assert!(p.push(msg(1, SensorId::B, 0.4)).unwrap().is_empty());
    }

    #[test]
    fn rejects_backwards_sensor_and_duplicates() {
        let mut p = Pairer::new(false, 10.0);
        p.push(msg(3, SensorId::A, 0.0)).unwrap();
        assert!(p.push(msg(2, SensorId::A, 0.0)).is_err());
        assert!(p.push(msg(3, SensorId::A, 0.0)).is_err());
    }

    #[test]
    fn wire_format_round_trips() {
        let messages = vec![msg(0, SensorId::A, 0.0), msg(0, SensorId::B, 0.5), msg(7, SensorId::A, 1.25)];
        let bytes: Vec<u8> = messages.iter().flat_map(encode_frame_message).collect();
        let back: Vec<FrameMessage> = ReaderSource::new(&bytes[..]).collect::<Result<_>>().unwrap();
        assert_eq!(back, messages);
        assert!(ReaderSource::new(&bytes[..bytes.len() - 1]).any(|m| m.is_err()));
    }

    #[test]
    fn frame_names_parse() {
        assert_eq!(parse_frame_file_name(&frame_file_name(12, SensorId::B)), Some((12, SensorId::B)));
        assert_eq!(parse_frame_file_name("frame_x_A.pcsb"), None);
        assert_eq!(parse_frame_file_name("frame_1_C.pcsb"), None);
    }

    #[test]
    fn cache_keeps_only_static_predictions() {
        let mut cache = StaticCache::new(0.05, [SemanticClass::Floor, SemanticClass::Wall].into(), 0);
        cache.absorb(&[[0.01, 0.01, 0.0], [1.0, 1.0, 1.0]], &[SemanticClass::Floor, SemanticClass::Human]);
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.lookup(&[0.04, 0.02, 0.01]), Some(SemanticClass::Floor));
        assert_eq!(cache.lookup(&[1.0, 1.0, 1.0]), None);
    }
}
