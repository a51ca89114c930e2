//! Point-cloud data types, the PCSB/PCST file formats, and the geometric
//! preprocessing every other module builds on.
//!
//! Coordinates are meters and held as `f64` in memory; both file formats
//! store `f32`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type Point = [f64; 3];

/// One of the eight semantic labels. The numeric code is what files and
/// the network use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum SemanticClass {
    Unlabeled = 0,
    Floor = 1,
    Wall = 2,
    Robot = 3,
    Human = 4,
    Agv = 5,
    AssemblyLine = 6,
    Table = 7,
}

impl SemanticClass {
    pub const COUNT: usize = 8;

    pub const ALL: [SemanticClass; 8] = [
        SemanticClass::Unlabeled,
        SemanticClass::Floor,
        SemanticClass::Wall,
        SemanticClass::Robot,
        SemanticClass::Human,
        SemanticClass::Agv,
        SemanticClass::AssemblyLine,
        SemanticClass::Table,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticClass::Unlabeled => "Unlabeled",
            SemanticClass::Floor => "Floor",
            SemanticClass::Wall => "Wall",
            SemanticClass::Robot => "Robot",
            SemanticClass::Human => "Human",
            SemanticClass::Agv => "AGV",
            SemanticClass::AssemblyLine => "AssemblyLine",
            SemanticClass::Table => "Table",
        }
    }
}

impl fmt::Display for SemanticClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A set of points with optional per-point labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledCloud {
    points: Vec<Point>,
    labels: Option<Vec<SemanticClass>>,
    pub frame_id: Option<String>,
}

impl LabeledCloud {
    pub fn new(points: Vec<Point>, labels: Option<Vec<SemanticClass>>) -> Result<Self> {
        if let Some(labels) = &labels {
            if labels.len() != points.len() {
                return Err(Error::Validation(format!(
                    "{} labels for {} points",
                    labels.len(),
                    points.len()
                )));
            }
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Validation(format!("non-finite coordinate at point {i}")));
        }
        Ok(Self {
            points,
            labels,
            frame_id: None,
        })
    }

    pub fn unlabeled(points: Vec<Point>) -> Result<Self> {
        Self::new(points, None)
    }

    pub fn labeled(points: Vec<Point>, labels: Vec<SemanticClass>) -> Result<Self> {
        Self::new(points, Some(labels))
    }

    /// Builds from raw label codes, rejecting codes above 7.
    pub fn with_label_ids(points: Vec<Point>, ids: &[u8]) -> Result<Self> {
        let labels = ids
            .iter()
            .map(|&id| {
                SemanticClass::from_id(id)
                    .ok_or_else(|| Error::Validation(format!("label code {id} out of range 0..=7")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::labeled(points, labels)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[SemanticClass]> {
        self.labels.as_deref()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn label_ids(&self) -> Option<Vec<u8>> {
        self.labels
            .as_ref()
            .map(|l| l.iter().map(|c| c.id()).collect())
    }

    pub fn into_parts(self) -> (Vec<Point>, Option<Vec<SemanticClass>>) {
        (self.points, self.labels)
    }

    /// Gathers the given point indices (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> LabeledCloud {
        LabeledCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            frame_id: self.frame_id.clone(),
        }
    }

    pub fn without_labels(mut self) -> LabeledCloud {
        self.labels = None;
        self
    }

    pub fn with_labels(self, labels: Vec<SemanticClass>) -> Result<LabeledCloud> {
        let frame_id = self.frame_id;
        let mut out = LabeledCloud::labeled(self.points, labels)?;
        out.frame_id = frame_id;
        Ok(out)
    }

    /// Replaces coordinates while keeping labels aligned.
    pub(crate) fn map_points(&self, f: impl FnMut(&Point) -> Point) -> LabeledCloud {
        LabeledCloud {
            points: self.points.iter().map(f).collect(),
            labels: self.labels.clone(),
            frame_id: self.frame_id.clone(),
        }
    }

    /// Point count per class code; all zeros when unlabeled.
    pub fn class_counts(&self) -> [usize; SemanticClass::COUNT] {
        let mut counts = [0; SemanticClass::COUNT];
        if let Some(labels) = &self.labels {
            for l in labels {
                counts[l.id() as usize] += 1;
            }
        }
        counts
    }
}

// ---------------------------------------------------------------------------
// File formats

const PCSB_MAGIC: &[u8; 4] = b"PCSB";
const PCSB_VERSION: u16 = 1;
const FLAG_LABELS: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudFormat {
    Binary,
    Ascii,
}

/// Serializes to the little-endian PCSB layout.
pub fn encode_pcsb(cloud: &LabeledCloud) -> Vec<u8> {
    let labeled = cloud.has_labels();
    let record = if labeled { 13 } else { 12 };
    let mut out = Vec::with_capacity(12 + record * cloud.len());
    out.extend_from_slice(PCSB_MAGIC);
    out.extend_from_slice(&PCSB_VERSION.to_le_bytes());
    out.extend_from_slice(&(if labeled { FLAG_LABELS } else { 0 }).to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for (i, p) in cloud.points.iter().enumerate() {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        if let Some(labels) = &cloud.labels {
            out.push(labels[i].id());
        }
    }
    out
}

/// Parses a PCSB payload. Trailing bytes are rejected.
pub fn decode_pcsb(bytes: &[u8]) -> Result<LabeledCloud> {
    if bytes.len() < 12 || &bytes[0..4] != PCSB_MAGIC {
        return Err(Error::Format("missing PCSB magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PCSB_VERSION {
        return Err(Error::Format(format!("unsupported PCSB version {version}")));
    }
    let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::Format(format!("unknown PCSB flags {flags:#06x}")));
    }
    let labeled = flags & FLAG_LABELS != 0;
    let n = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let record = if labeled { 13 } else { 12 };
    let body = &bytes[12..];
    if body.len() != n * record {
        return Err(Error::Format(format!(
            "PCSB body is {} bytes, expected {} for {n} points",
            body.len(),
            n * record
        )));
    }
    let mut points = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(if labeled { n } else { 0 });
    for rec in body.chunks_exact(record) {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]) as f64;
        points.push([f(0), f(4), f(8)]);
        if labeled {
            ids.push(rec[12]);
        }
    }
    if labeled {
        LabeledCloud::with_label_ids(points, &ids)
    } else {
        LabeledCloud::unlabeled(points)
    }
}

const PCST_LABELED: &str = "# x y z label";
const PCST_UNLABELED: &str = "# x y z";

/// Renders the PCST text form. Floats print in shortest round-trip `f32`
/// notation so text round-trips are exact at `f32` precision. The first
/// line is a `# x y z label` or `# x y z` comment; the decoder reads it as
/// the field layout, which keeps empty labeled clouds labeled.
pub fn encode_pcst(cloud: &LabeledCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 32 + 16);
    out.push_str(if cloud.has_labels() { PCST_LABELED } else { PCST_UNLABELED });
    out.push('\n');
    for (i, p) in cloud.points.iter().enumerate() {
        let [x, y, z] = p.map(|c| c as f32);
        match &cloud.labels {
            Some(labels) => out.push_str(&format!("{x} {y} {z} {}\n", labels[i].id())),
            None => out.push_str(&format!("{x} {y} {z}\n")),
        }
    }
    out
}

pub fn decode_pcst(text: &str) -> Result<LabeledCloud> {
    let mut points = Vec::new();
    let mut ids = Vec::new();
    let mut labeled: Option<bool> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            if points.is_empty() && labeled.is_none() {
                match line {
                    PCST_LABELED => labeled = Some(true),
                    PCST_UNLABELED => labeled = Some(false),
                    _ => {}
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let has_label = match fields.len() {
            3 => false,
            4 => true,
            n => {
                return Err(Error::Format(format!(
                    "line {}: expected 3 or 4 fields, found {n}",
                    lineno + 1
                )))
            }
        };
        if *labeled.get_or_insert(has_label) != has_label {
            return Err(Error::Format(format!(
                "line {}: mixed labeled and unlabeled records",
                lineno + 1
            )));
        }
        let mut p = [0.0; 3];
        for (c, s) in p.iter_mut().zip(&fields) {
            // Parsing through f32 matches binary precision.
            *c = s.parse::<f32>().map_err(|e| {
                Error::Format(format!("line {}: bad coordinate {s:?}: {e}", lineno + 1))
            })? as f64;
        }
        points.push(p);
        if has_label {
            let id: u8 = fields[3].parse().map_err(|e| {
                Error::Format(format!("line {}: bad label {:?}: {e}", lineno + 1, fields[3]))
            })?;
            ids.push(id);
        }
    }
    if labeled == Some(true) {
        LabeledCloud::with_label_ids(points, &ids)
    } else {
        LabeledCloud::unlabeled(points)
    }
}

/// Reads a PCSB or PCST file, sniffing the magic bytes.
pub fn load_cloud(path: impl AsRef<Path>) -> Result<LabeledCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(PCSB_MAGIC) {
        return decode_pcsb(&bytes);
    }
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| Error::Format(format!("{} is neither PCSB nor PCST", path.display())))?;
    decode_pcst(text)
}

pub fn save_cloud(cloud: &LabeledCloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        CloudFormat::Binary => encode_pcsb(cloud),
        CloudFormat::Ascii => encode_pcst(cloud).into_bytes(),
    };
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Normalization

/// The translation and scale applied by [`zero_center_normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub centroid: Point,
    pub scale: f64,
}

impl NormalizationRecord {
    pub fn identity() -> Self {
        Self {
            centroid: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn apply_point(&self, p: &Point) -> Point {
        [
            (p[0] - self.centroid[0]) / self.scale,
            (p[1] - self.centroid[1]) / self.scale,
            (p[2] - self.centroid[2]) / self.scale,
        ]
    }

    pub fn invert_point(&self, p: &Point) -> Point {
        [
            p[0] * self.scale + self.centroid[0],
            p[1] * self.scale + self.centroid[1],
            p[2] * self.scale + self.centroid[2],
        ]
    }

    pub fn apply(&self, cloud: &LabeledCloud) -> LabeledCloud {
        cloud.map_points(|p| self.apply_point(p))
    }

    pub fn invert(&self, cloud: &LabeledCloud) -> LabeledCloud {
        cloud.map_points(|p| self.invert_point(p))
    }
}

/// Scales below this are treated as "all points coincide".
const DEGENERATE_SCALE: f64 = 1e-12;

/// Moves the centroid to the origin and scales so the farthest point has
/// unit norm.
pub fn zero_center_normalize(cloud: &LabeledCloud) -> Result<(LabeledCloud, NormalizationRecord)> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("zero_center_normalize needs at least one point"));
    }
    let n = cloud.len() as f64;
    let mut centroid = [0.0; 3];
    for p in cloud.points() {
        for d in 0..3 {
            centroid[d] += p[d];
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    let max_norm = cloud
        .points()
        .iter()
        .map(|p| {
            let v = [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]];
            (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
        })
        .fold(0.0, f64::max);
    let scale = if max_norm > DEGENERATE_SCALE { max_norm } else { 1.0 };
    let record = NormalizationRecord { centroid, scale };
    Ok((record.apply(cloud), record))
}

// ---------------------------------------------------------------------------
// Voxel grid

pub type VoxelKey = (i64, i64, i64);

pub fn voxel_key(p: &Point, voxel_size: f64) -> VoxelKey {
    (
        (p[0] / voxel_size).floor() as i64,
        (p[1] / voxel_size).floor() as i64,
        (p[2] / voxel_size).floor() as i64,
    )
}

#[derive(Default)]
struct VoxelAccum {
    sum: [f64; 3],
    count: usize,
    votes: [u32; SemanticClass::COUNT],
}

/// Replaces the points of each occupied voxel by their centroid. Labels, if
/// present, are the per-voxel majority (ties to the lowest code). Output is
/// ordered by voxel key.
pub fn voxel_downsample(cloud: &LabeledCloud, voxel_size: f64) -> Result<LabeledCloud> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::Parameter(format!("voxel size must be positive, got {voxel_size}")));
    }
    let mut voxels: HashMap<VoxelKey, VoxelAccum> = HashMap::new();
    for (i, p) in cloud.points().iter().enumerate() {
        let acc = voxels.entry(voxel_key(p, voxel_size)).or_default();
        for d in 0..3 {
            acc.sum[d] += p[d];
        }
        acc.count += 1;
        if let Some(labels) = cloud.labels() {
            acc.votes[labels[i].id() as usize] += 1;
        }
    }
    let mut keys: Vec<VoxelKey> = voxels.keys().copied().collect();
    keys.sort_unstable();
    let mut points = Vec::with_capacity(keys.len());
    let mut labels = Vec::with_capacity(if cloud.has_labels() { keys.len() } else { 0 });
    for key in &keys {
        let acc = &voxels[key];
        let n = acc.count as f64;
        points.push([acc.sum[0] / n, acc.sum[1] / n, acc.sum[2] / n]);
        if cloud.has_labels() {
            let mut best = 0;
            for c in 1..SemanticClass::COUNT {
                if acc.votes[c] > acc.votes[best] {
                    best = c;
                }
            }
            labels.push(SemanticClass::ALL[best]);
        }
    }
    let mut out = LabeledCloud::new(points, cloud.has_labels().then_some(labels))?;
    out.frame_id = cloud.frame_id.clone();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sampling

/// Per-class decimation rates applied to training scenes before resampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecimationPolicy {
    pub static_rate: usize,
    pub dynamic_rate: usize,
    pub static_classes: BTreeSet<SemanticClass>,
    pub dynamic_classes: BTreeSet<SemanticClass>,
    pub point_budget: usize,
}

impl Default for DecimationPolicy {
    fn default() -> Self {
        use SemanticClass::*;
        Self {
            static_rate: 10,
            dynamic_rate: 2,
            static_classes: [Floor, Wall, AssemblyLine, Table].into_iter().collect(),
            dynamic_classes: [Robot, Human, Agv].into_iter().collect(),
            point_budget: 11_000,
        }
    }
}

impl DecimationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.static_rate == 0 || self.dynamic_rate == 0 || self.point_budget == 0 {
            return Err(Error::Config("decimation rates and budget must be positive".into()));
        }
        if !self.static_classes.is_disjoint(&self.dynamic_classes) {
            return Err(Error::Config("static and dynamic class sets overlap".into()));
        }
        for class in SemanticClass::ALL {
            let covered = class == SemanticClass::Unlabeled
                || self.static_classes.contains(&class)
                || self.dynamic_classes.contains(&class);
            if !covered {
                return Err(Error::Config(format!("class {class} is neither static nor dynamic")));
            }
        }
        Ok(())
    }

    /// Unlabeled, and any class in the static set, uses the static rate.
    pub fn rate_for(&self, class: SemanticClass) -> usize {
        if self.dynamic_classes.contains(&class) {
            self.dynamic_rate
        } else {
            self.static_rate
        }
    }
}

/// Keeps `ceil(count / rate)` uniformly chosen points of every class.
/// Output preserves input order.
pub fn class_aware_decimate(
    cloud: &LabeledCloud,
    policy: &DecimationPolicy,
    rng_seed: u64,
) -> Result<LabeledCloud> {
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::Precondition("class_aware_decimate requires labels".into()))?;
    policy.validate()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); SemanticClass::COUNT];
    for (i, l) in labels.iter().enumerate() {
        by_class[l.id() as usize].push(i);
    }
    let mut rng = rng::seeded(rng_seed);
    let mut keep = Vec::new();
    for (class, members) in SemanticClass::ALL.iter().zip(&by_class) {
        if members.is_empty() {
            continue;
        }
        let target = members.len().div_ceil(policy.rate_for(*class));
        keep.extend(
            index::sample(&mut rng, members.len(), target)
                .into_iter()
                .map(|j| members[j]),
        );
    }
    keep.sort_unstable();
    Ok(cloud.select(&keep))
}

/// Index plan behind [`resample_to_budget`]: a sorted subset without
/// replacement when `n > budget`, otherwise `0..n` followed by uniform
/// draws with replacement.
pub fn resample_indices(n: usize, budget: usize, rng_seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::EmptyInput("cannot resample an empty cloud"));
    }
    if budget == 0 {
        return Err(Error::Parameter("budget must be positive".into()));
    }
    let mut rng = rng::seeded(rng_seed);
    Ok(match n.cmp(&budget) {
        std::cmp::Ordering::Equal => (0..n).collect(),
        std::cmp::Ordering::Greater => {
            let mut idx = index::sample(&mut rng, n, budget).into_vec();
            idx.sort_unstable();
            idx
        }
        std::cmp::Ordering::Less => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.extend((n..budget).map(|_| rng.random_range(0..n)));
            idx
        }
    })
}

pub fn resample_to_budget(cloud: &LabeledCloud, budget: usize, rng_seed: u64) -> Result<LabeledCloud> {
    let idx = resample_indices(cloud.len(), budget, rng_seed)?;
    Ok(cloud.select(&idx))
}

/// Outcome of [`merge_clouds`].
#[derive(Clone, Debug)]
pub struct Merged {
    pub cloud: LabeledCloud,
    /// Set when exactly one input carried labels, which are then dropped.
    pub labels_dropped: bool,
}

/// Concatenates `a` then `b`. Both must already share a world frame.
pub fn merge_clouds(a: &LabeledCloud, b: &LabeledCloud) -> Merged {
    let mut points = Vec::with_capacity(a.len() + b.len());
    points.extend_from_slice(a.points());
    points.extend_from_slice(b.points());
    // An empty cloud carries no label information either way.
    let labels = match (a.labels(), b.labels()) {
        (Some(la), Some(lb)) => Some([la, lb].concat()),
        (Some(la), None) if b.is_empty() => Some(la.to_vec()),
        (None, Some(lb)) if a.is_empty() => Some(lb.to_vec()),
        _ => None,
    };
    let labels_dropped = labels.is_none() && (a.has_labels() || b.has_labels());
    if labels_dropped {
        log::warn!("merging labeled with unlabeled cloud; labels dropped");
    }
    let frame_id = a.frame_id.clone().or_else(|| b.frame_id.clone());
    Merged {
        cloud: LabeledCloud {
            points,
            labels,
            frame_id,
        },
        labels_dropped,
    }
}
