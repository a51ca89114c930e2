//! Procedural indoor scenes built from surface primitives, domain profiles
//! that separate clean simulation-style scans from noisy real-style ones,
//! and label-preserving augmentation.
//!
//! Coordinates are meters with `z` up. The floor occupies `z = 0` over
//! `[0, x] × [0, y]`; every other surface stays at least [`CLEARANCE`]
//! away from surfaces of other classes, so noiseless scenes never
//! interpenetrate.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::{self, CloudFormat, LabeledCloud, Point, SemanticClass};
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, Rng};

/// Gap between the floor, walls and objects.
pub const CLEARANCE: f64 = 0.02;
const WALL_MARGIN: f64 = 0.12;
const OBJECT_GAP: f64 = 0.08;

/// Sensor-realism knobs applied after surface sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainProfile {
    /// Isotropic Gaussian noise per coordinate, meters.
    pub sigma: f64,
    /// Fraction of points dropped uniformly.
    pub dropout: f64,
    /// Fraction of one random object's points removed from one side.
    pub occlusion: f64,
    /// Unlabeled clutter points, as a fraction of the scene's point count,
    /// gathered in a few flat blobs against the walls (none without walls).
    pub clutter: f64,
}

impl Default for DomainProfile {
    fn default() -> Self {
        Self::sim()
    }
}

impl DomainProfile {
    pub fn sim() -> Self {
        Self { sigma: 0.002, dropout: 0.0, occlusion: 0.0, clutter: 0.0 }
    }

    pub fn real() -> Self {
        Self { sigma: 0.012, dropout: 0.25, occlusion: 0.25, clutter: 0.2 }
    }

    pub fn noiseless() -> Self {
        Self { sigma: 0.0, ..Self::sim() }
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..1.0).contains(&v);
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("profile sigma {} must be >= 0", self.sigma)));
        }
        if !(frac(self.dropout) && frac(self.occlusion) && frac(self.clutter)) {
            return Err(Error::Config("profile fractions must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Number of objects of each movable or furniture class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectCounts {
    pub robot: usize,
    pub human: usize,
    pub agv: usize,
    pub table: usize,
    pub assembly_line: usize,
}

impl Default for ObjectCounts {
    fn default() -> Self {
        Self { robot: 1, human: 1, agv: 1, table: 2, assembly_line: 1 }
    }
}

impl ObjectCounts {
    pub fn none() -> Self {
        Self { robot: 0, human: 0, agv: 0, table: 0, assembly_line: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Floor extents along x and y, meters.
    pub room: [f64; 2],
    pub wall_height: f64,
    /// Number of wall patches, 2 to 4.
    pub walls: usize,
    pub objects: ObjectCounts,
    /// Surface sampling density, points per square meter.
    pub density: f64,
    pub profile: DomainProfile,
    /// Probability that each robot and human of the base spec appears in a
    /// scene drawn by [`make_dataset`].
    pub dynamic_presence: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            room: [7.0, 6.0],
            wall_height: 2.6,
            walls: 3,
            objects: ObjectCounts::default(),
            density: 250.0,
            profile: DomainProfile::sim(),
            dynamic_presence: 1.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let [x, y] = self.room;
        if !(x > 1.0 && y > 1.0 && x.is_finite() && y.is_finite()) {
            return Err(Error::Validation(format!("room extents {x} × {y} are degenerate")));
        }
        if !(self.wall_height > 0.5 && self.wall_height.is_finite()) {
            return Err(Error::Validation(format!("wall height {} is degenerate", self.wall_height)));
        }
        if !(2..=4).contains(&self.walls) {
            return Err(Error::Validation(format!("{} walls; expected 2 to 4", self.walls)));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::Validation("density must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dynamic_presence) {
            return Err(Error::Validation("dynamic_presence must lie in [0, 1]".into()));
        }
        self.profile.validate()
    }
}

// ---------------------------------------------------------------------------
// Geometry

type Vec3 = [f64; 3];

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn unit(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

fn rotate_z(a: Vec3, yaw: f64) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    [c * a[0] - s * a[1], s * a[0] + c * a[1], a[2]]
}

/// Sampled surface element.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Parallelogram `origin + s·u + t·v`, `s, t ∈ [0, 1]`.
    Rect { origin: Vec3, u: Vec3, v: Vec3 },
    /// Lateral surface of a cylinder from `base` along `axis`, with both
    /// end disks when `caps` is set.
    Cylinder { base: Vec3, axis: Vec3, radius: f64, caps: bool },
    /// Ellipsoid with mutually orthogonal semi-axis vectors.
    Ellipsoid { center: Vec3, axes: [Vec3; 3] },
}

/// Approximate ellipsoid surface area (Knud Thomsen, ≤ 1.1% error).
fn ellipsoid_area(a: f64, b: f64, c: f64) -> f64 {
    const P: f64 = 1.6075;
    let m = ((a * b).powf(P) + (a * c).powf(P) + (b * c).powf(P)) / 3.0;
    4.0 * PI * m.powf(1.0 / P)
}

fn perpendicular_basis(axis: Vec3) -> (Vec3, Vec3) {
    let a = unit(axis);
    let helper = if a[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let e1 = unit(cross(a, helper));
    let e2 = cross(a, e1);
    (e1, e2)
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Rect { u, v, .. } => norm(cross(u, v)),
            Primitive::Cylinder { axis, radius, caps, .. } => {
                let side = 2.0 * PI * radius * norm(axis);
                if caps {
                    side + 2.0 * PI * radius * radius
                } else {
                    side
                }
            }
            Primitive::Ellipsoid { axes, .. } => ellipsoid_area(norm(axes[0]), norm(axes[1]), norm(axes[2])),
        }
    }

    fn transformed(&self, yaw: f64, offset: Vec3) -> Self {
        let p = |a: Vec3| add(rotate_z(a, yaw), offset);
        let v = |a: Vec3| rotate_z(a, yaw);
        match *self {
            Primitive::Rect { origin, u, v: w } => Primitive::Rect { origin: p(origin), u: v(u), v: v(w) },
            Primitive::Cylinder { base, axis, radius, caps } => Primitive::Cylinder { base: p(base), axis: v(axis), radius, caps },
            Primitive::Ellipsoid { center, axes } => Primitive::Ellipsoid {
                center: p(center),
                axes: [v(axes[0]), v(axes[1]), v(axes[2])],
            },
        }
    }

    /// Corner-ish extreme points, padded by `pad`, for bounds.
    fn extremes(&self) -> (Vec<Vec3>, f64) {
        match *self {
            Primitive::Rect { origin, u, v } => (vec![origin, add(origin, u), add(origin, v), add(add(origin, u), v)], 0.0),
            Primitive::Cylinder { base, axis, radius, .. } => (vec![base, add(base, axis)], radius),
            Primitive::Ellipsoid { center, axes } => {
                let r = axes.iter().map(|&a| norm(a)).fold(0.0, f64::max);
                (vec![center], r)
            }
        }
    }

    fn sample(&self, rng: &mut Rng, out: &mut Vec<Point>) {
        match *self {
            Primitive::Rect { origin, u, v } => {
                let (s, t): (f64, f64) = (rng.random(), rng.random());
                out.push(add(origin, add(scale(u, s), scale(v, t))));
            }
            Primitive::Cylinder { base, axis, radius, caps } => {
                let (e1, e2) = perpendicular_basis(axis);
                let side = 2.0 * PI * radius * norm(axis);
                let cap = if caps { PI * radius * radius } else { 0.0 };
                let pick = rng.random::<f64>() * (side + 2.0 * cap);
                let phi = rng.random::<f64>() * 2.0 * PI;
                let ring = add(scale(e1, phi.cos()), scale(e2, phi.sin()));
                if pick < side {
                    let t: f64 = rng.random();
                    out.push(add(add(base, scale(axis, t)), scale(ring, radius)));
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    let end = if pick < side + cap { base } else { add(base, axis) };
                    out.push(add(end, scale(ring, r)));
                }
            }
            Primitive::Ellipsoid { center, axes } => {
                // Uniform sphere direction mapped through the axes, thinned by
                // the local area stretch so the result is area-uniform.
                let (a, b, c) = (norm(axes[0]), norm(axes[1]), norm(axes[2]));
                let top = (a * b).max(a * c).max(b * c);
                loop {
                    let d = sphere_direction(rng);
                    let w = ((b * c * d[0]).powi(2) + (a * c * d[1]).powi(2) + (a * b * d[2]).powi(2)).sqrt();
                    if rng.random::<f64>() * top <= w {
                        let p = add(add(scale(axes[0], d[0]), scale(axes[1], d[1])), scale(axes[2], d[2]));
                        out.push(add(center, p));
                        break;
                    }
                }
            }
        }
    }
}

fn sphere_direction(rng: &mut Rng) -> Vec3 {
    let z = rng.random::<f64>() * 2.0 - 1.0;
    let phi = rng.random::<f64>() * 2.0 * PI;
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// Closed or open box surface. `center` is the footprint center at `z0`.
fn box_faces(center: Vec3, size: Vec3, bottom: bool, top: bool) -> Vec<Primitive> {
    let [l, w, h] = size;
    let o = [center[0] - l / 2.0, center[1] - w / 2.0, center[2]];
    let (ex, ey, ez) = ([l, 0.0, 0.0], [0.0, w, 0.0], [0.0, 0.0, h]);
    let mut faces = vec![
        Primitive::Rect { origin: o, u: ex, v: ez },
        Primitive::Rect { origin: add(o, ey), u: ex, v: ez },
        Primitive::Rect { origin: o, u: ey, v: ez },
        Primitive::Rect { origin: add(o, ex), u: ey, v: ez },
    ];
    if bottom {
        faces.push(Primitive::Rect { origin: o, u: ex, v: ey });
    }
    if top {
        faces.push(Primitive::Rect { origin: add(o, ez), u: ex, v: ey });
    }
    faces
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// One labeled object in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class: SemanticClass,
    pub parts: Vec<Primitive>,
}

impl SceneObject {
    pub fn area(&self) -> f64 {
        self.parts.iter().map(Primitive::area).sum()
    }

    fn lowest_z(&self) -> f64 {
        let low = |p: &Primitive| match *p {
            Primitive::Cylinder { base, axis, radius, .. } => {
                let tilt = (1.0 - (axis[2] / norm(axis)).powi(2)).max(0.0).sqrt();
                base[2].min(base[2] + axis[2]) - radius * tilt
            }
            _ => {
                let (pts, pad) = p.extremes();
                pts.into_iter().map(|q| q[2] - pad).fold(f64::INFINITY, f64::min)
            }
        };
        self.parts.iter().map(low).fold(f64::INFINITY, f64::min)
    }

    /// Horizontal bounding radius around the local origin.
    fn radius(&self) -> f64 {
        self.parts
            .iter()
            .flat_map(|p| {
                let (pts, pad) = p.extremes();
                pts.into_iter().map(move |q| q[0].hypot(q[1]) + pad)
            })
            .fold(0.0, f64::max)
    }

    pub fn translated(&self, offset: [f64; 3]) -> Self {
        Self {
            class: self.class,
            parts: self.parts.iter().map(|p| p.transformed(0.0, offset)).collect(),
        }
    }

    fn placed(&self, yaw: f64, xy: [f64; 2]) -> Self {
        let offset = [xy[0], xy[1], 0.0];
        Self {
            class: self.class,
            parts: self.parts.iter().map(|p| p.transformed(yaw, offset)).collect(),
        }
    }
}

fn table(rng: &mut Rng) -> SceneObject {
    let (l, w, h) = (uniform(rng, 1.0, 1.6), uniform(rng, 0.6, 0.9), uniform(rng, 0.7, 0.9));
    let slab = 0.04;
    let leg = 0.05;
    let mut parts = box_faces([0.0, 0.0, h - slab], [l, w, slab], true, true);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            let c = [sx * (l / 2.0 - leg), sy * (w / 2.0 - leg), CLEARANCE];
            parts.extend(box_faces(c, [leg, leg, h - slab - CLEARANCE], false, false));
        }
    }
    SceneObject { class: SemanticClass::Table, parts }
}

fn assembly_line(rng: &mut Rng) -> SceneObject {
    let (l, w, h) = (uniform(rng, 2.0, 3.2), uniform(rng, 0.5, 0.8), uniform(rng, 0.8, 1.0));
    let belt = 0.25;
    let mut parts = box_faces([0.0, 0.0, h - belt], [l, w, belt], true, true);
    let supports = if l > 2.6 { 3 } else { 2 };
    for i in 0..supports {
        let x = -l / 2.0 + 0.1 + (l - 0.2) * i as f64 / (supports - 1) as f64;
        parts.extend(box_faces([x, 0.0, CLEARANCE], [0.08, w * 0.8, h - belt - CLEARANCE], false, false));
    }
    SceneObject { class: SemanticClass::AssemblyLine, parts }
}

fn agv(rng: &mut Rng) -> SceneObject {
    let (l, w, h) = (uniform(rng, 0.8, 1.2), uniform(rng, 0.5, 0.8), uniform(rng, 0.25, 0.4));
    let r = uniform(rng, 0.06, 0.08);
    let mut parts = box_faces([0.0, 0.0, CLEARANCE + r], [l, w, h], true, true);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            let y0 = sy * (w / 2.0 + 0.005);
            parts.push(Primitive::Cylinder {
                base: [sx * (l / 2.0 - r - 0.03), y0, CLEARANCE + r],
                axis: [0.0, sy * 0.05, 0.0],
                radius: r,
                caps: true,
            });
        }
    }
    SceneObject { class: SemanticClass::Agv, parts }
}

/// Base column plus a three-link arm with random joint angles.
fn robot(rng: &mut Rng) -> SceneObject {
    loop {
        let base_r = uniform(rng, 0.12, 0.18);
        let base_h = uniform(rng, 0.3, 0.6);
        let mut parts = vec![Primitive::Cylinder {
            base: [0.0, 0.0, CLEARANCE],
            axis: [0.0, 0.0, base_h],
            radius: base_r,
            caps: true,
        }];
        let mut joint = [0.0, 0.0, CLEARANCE + base_h];
        let azimuth = uniform(rng, 0.0, 2.0 * PI);
        let elevations = [(0.35, 1.4), (-0.7, 0.7), (-1.2, 0.35)];
        for (i, &(lo, hi)) in elevations.iter().enumerate() {
            let e = uniform(rng, lo, hi);
            let az = azimuth + uniform(rng, -0.5, 0.5);
            let len = uniform(rng, 0.3, 0.55);
            let radius = uniform(rng, 0.04, 0.065) * (1.0 - 0.15 * i as f64);
            let dir = [e.cos() * az.cos(), e.cos() * az.sin(), e.sin()];
            let axis = scale(dir, len);
            let r = radius * 1.25;
            parts.push(Primitive::Ellipsoid { center: joint, axes: [[r, 0.0, 0.0], [0.0, r, 0.0], [0.0, 0.0, r]] });
            parts.push(Primitive::Cylinder { base: joint, axis, radius, caps: false });
            joint = add(joint, axis);
        }
        parts.extend(box_faces([joint[0], joint[1], joint[2] - 0.04], [0.08, 0.08, 0.08], true, true));
        let arm = SceneObject { class: SemanticClass::Robot, parts: parts.split_off(1) };
        if arm.lowest_z() >= 0.1 {
            parts.extend(arm.parts);
            return SceneObject { class: SemanticClass::Robot, parts };
        }
    }
}

/// Legs, torso, head and arms scaled to a random body height.
fn human(rng: &mut Rng) -> SceneObject {
    let height = uniform(rng, 1.5, 1.95);
    let s = height / 1.75;
    let leg_len = 0.47 * height;
    let leg_r = 0.065 * s;
    let hip = 0.09 * s;
    let stride = uniform(rng, -0.2, 0.2);
    let mut parts = Vec::new();
    for (side, step) in [(-1.0, stride), (1.0, -stride)] {
        let foot = [side * hip, step, CLEARANCE + leg_r];
        let top = [side * hip, 0.0, CLEARANCE + leg_len];
        parts.push(Primitive::Cylinder {
            base: foot,
            axis: [top[0] - foot[0], top[1] - foot[1], top[2] - foot[2]],
            radius: leg_r,
            caps: true,
        });
    }
    let torso_h = 0.30 * height;
    let torso_c = [0.0, 0.0, CLEARANCE + leg_len + torso_h / 2.0];
    parts.push(Primitive::Ellipsoid {
        center: torso_c,
        axes: [[0.18 * s, 0.0, 0.0], [0.0, 0.11 * s, 0.0], [0.0, 0.0, torso_h / 2.0 + 0.03]],
    });
    let head_r = 0.1 * s;
    let head_c = [0.0, 0.0, CLEARANCE + leg_len + torso_h + 0.03 + head_r];
    parts.push(Primitive::Ellipsoid {
        center: head_c,
        axes: [[head_r, 0.0, 0.0], [0.0, head_r * 0.9, 0.0], [0.0, 0.0, head_r * 1.15]],
    });
    let shoulder_z = CLEARANCE + leg_len + 0.88 * torso_h;
    let arm_len = 0.36 * height;
    for side in [-1.0, 1.0] {
        let pitch = uniform(rng, -0.6, 1.4);
        let abduct = uniform(rng, 0.08, 0.45);
        let dir = unit([side * abduct.sin(), pitch.sin() * abduct.cos(), -pitch.cos() * abduct.cos()]);
        parts.push(Primitive::Cylinder {
            base: [side * (0.18 * s + 0.05), 0.0, shoulder_z],
            axis: scale(dir, arm_len),
            radius: 0.045 * s,
            caps: true,
        });
    }
    SceneObject { class: SemanticClass::Human, parts }
}

/// Object surfaces of one scene, before sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub objects: Vec<SceneObject>,
}

impl SceneLayout {
    /// Total surface area per class.
    pub fn class_areas(&self) -> [f64; SemanticClass::COUNT] {
        let mut areas = [0.0; SemanticClass::COUNT];
        for o in &self.objects {
            areas[o.class.id() as usize] += o.area();
        }
        areas
    }
}

fn place(
    rng: &mut Rng,
    template: SceneObject,
    room: [f64; 2],
    taken: &mut Vec<([f64; 2], f64)>,
) -> Option<SceneObject> {
    let r = template.radius();
    let (lo_x, hi_x) = (r + WALL_MARGIN, room[0] - r - WALL_MARGIN);
    let (lo_y, hi_y) = (r + WALL_MARGIN, room[1] - r - WALL_MARGIN);
    if lo_x > hi_x || lo_y > hi_y {
        return None;
    }
    for _ in 0..200 {
        let xy = [uniform(rng, lo_x, hi_x), uniform(rng, lo_y, hi_y)];
        let free = taken
            .iter()
            .all(|(c, rc)| (c[0] - xy[0]).hypot(c[1] - xy[1]) >= r + rc + OBJECT_GAP);
        if free {
            taken.push((xy, r));
            return Some(template.placed(uniform(rng, 0.0, 2.0 * PI), xy));
        }
    }
    None
}

/// Builds the primitive layout of a scene.
pub fn generate_layout(spec: &SceneSpec) -> Result<SceneLayout> {
    spec.validate()?;
    let mut rng = rng::seeded(derive_seed(spec.seed, 1));
    let [x, y] = spec.room;
    let mut objects = vec![SceneObject {
        class: SemanticClass::Floor,
        parts: vec![Primitive::Rect { origin: [0.0, 0.0, 0.0], u: [x, 0.0, 0.0], v: [0.0, y, 0.0] }],
    }];

    let mut sides = [0usize, 1, 2, 3];
    sides.shuffle(&mut rng);
    let mut walls = Vec::new();
    for &side in &sides[..spec.walls] {
        let length = if side % 2 == 0 { x } else { y };
        let span = uniform(&mut rng, 0.6, 1.0) * length;
        let start = uniform(&mut rng, 0.0, length - span);
        let h = spec.wall_height - CLEARANCE;
        let (origin, u) = match side {
            0 => ([start, 0.0, CLEARANCE], [span, 0.0, 0.0]),
            1 => ([0.0, start, CLEARANCE], [0.0, span, 0.0]),
            2 => ([start, y, CLEARANCE], [span, 0.0, 0.0]),
            _ => ([x, start, CLEARANCE], [0.0, span, 0.0]),
        };
        walls.push(Primitive::Rect { origin, u, v: [0.0, 0.0, h] });
    }
    objects.push(SceneObject { class: SemanticClass::Wall, parts: walls });

    // Dynamic classes first so crowded rooms still show them.
    let c = spec.objects;
    let mut taken = Vec::new();
    let builders: [(usize, fn(&mut Rng) -> SceneObject); 5] = [
        (c.robot, robot),
        (c.human, human),
        (c.agv, agv),
        (c.assembly_line, assembly_line),
        (c.table, table),
    ];
    for (count, build) in builders {
        for _ in 0..count {
            let template = build(&mut rng);
            match place(&mut rng, template, spec.room, &mut taken) {
                Some(obj) => objects.push(obj),
                None => log::debug!("scene {}: no room left for another object", spec.seed),
            }
        }
    }
    Ok(SceneLayout { objects })
}

/// Layouts of one room over `frames` time steps. Every human walks `step`
/// meters per frame toward the mirror image of its start through the room
/// center and back; everything else stays put.
pub fn walking_layouts(spec: &SceneSpec, frames: usize, step: f64) -> Result<Vec<SceneLayout>> {
    if !(step >= 0.0 && step.is_finite()) {
        return Err(Error::Parameter(format!("walking step {step} must be >= 0")));
    }
    let base = generate_layout(spec)?;
    let center = [spec.room[0] / 2.0, spec.room[1] / 2.0];
    let origin_of = |o: &SceneObject| {
        let (pts, _) = o.parts[0].extremes();
        let n = pts.len() as f64;
        [pts.iter().map(|q| q[0]).sum::<f64>() / n, pts.iter().map(|q| q[1]).sum::<f64>() / n]
    };
    Ok((0..frames)
        .map(|t| {
            let objects = base
                .objects
                .iter()
                .map(|o| {
                    if o.class != SemanticClass::Human {
                        return o.clone();
                    }
                    let start = origin_of(o);
                    let path = [2.0 * (center[0] - start[0]), 2.0 * (center[1] - start[1])];
                    let length = path[0].hypot(path[1]);
                    if length < 1e-9 {
                        return o.clone();
                    }
                    // Triangle wave: out along the path, then back.
                    let travelled = (t as f64 * step) % (2.0 * length);
                    let along = if travelled <= length { travelled } else { 2.0 * length - travelled };
                    let f = along / length;
                    o.translated([f * path[0], f * path[1], 0.0])
                })
                .collect();
            SceneLayout { objects }
        })
        .collect())
}

/// Samples every surface at `density`, returning points and per-point
/// object indices.
pub fn sample_layout(layout: &SceneLayout, density: f64, seed: u64) -> (Vec<Point>, Vec<usize>) {
    let mut rng = rng::seeded(seed);
    let mut points = Vec::new();
    let mut owner = Vec::new();
    for (oi, obj) in layout.objects.iter().enumerate() {
        for part in &obj.parts {
            // Stochastic rounding keeps the expected count exact.
            let expected = part.area() * density;
            let n = expected.floor() as usize + usize::from(rng.random::<f64>() < expected.fract());
            for _ in 0..n {
                part.sample(&mut rng, &mut points);
                owner.push(oi);
            }
        }
    }
    (points, owner)
}

fn apply_profile(
    layout: &SceneLayout,
    mut points: Vec<Point>,
    mut owner: Vec<usize>,
    profile: &DomainProfile,
    room: [f64; 2],
    wall_height: f64,
    rng: &mut Rng,
) -> (Vec<Point>, Vec<SemanticClass>) {
    if profile.occlusion > 0.0 {
        let movable: Vec<usize> = (0..layout.objects.len())
            .filter(|&i| !matches!(layout.objects[i].class, SemanticClass::Floor | SemanticClass::Wall))
            .collect();
        if let Some(&target) = movable.get(rng.random_range(0..movable.len().max(1))) {
            let theta = uniform(rng, 0.0, 2.0 * PI);
            let dir = [theta.cos(), theta.sin()];
            let mut proj: Vec<(f64, usize)> = owner
                .iter()
                .enumerate()
                .filter(|&(_, &o)| o == target)
                .map(|(i, _)| (points[i][0] * dir[0] + points[i][1] * dir[1], i))
                .collect();
            proj.sort_by(|a, b| b.0.total_cmp(&a.0));
            let cut = (proj.len() as f64 * profile.occlusion).round() as usize;
            let mut drop = vec![false; points.len()];
            for &(_, i) in &proj[..cut] {
                drop[i] = true;
            }
            let mut keep = drop.iter().map(|d| !d);
            points.retain(|_| keep.next().unwrap());
            let mut keep = drop.iter().map(|d| !d);
            owner.retain(|_| keep.next().unwrap());
        }
    }
    if profile.dropout > 0.0 {
        let keep: Vec<bool> = (0..points.len()).map(|_| rng.random::<f64>() >= profile.dropout).collect();
        let mut it = keep.iter();
        points.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        owner.retain(|_| *it.next().unwrap());
    }
    let mut labels: Vec<SemanticClass> = owner.iter().map(|&o| layout.objects[o].class).collect();
    let has_walls = layout.objects.iter().any(|o| o.class == SemanticClass::Wall && !o.parts.is_empty());
    if profile.clutter > 0.0 && has_walls {
        // Small blobs mounted on the walls standing in for unmodeled
        // equipment: cabinets, panels, pipes.
        let total = (points.len() as f64 * profile.clutter).round() as usize;
        let walls: Vec<(Vec3, Vec3)> = layout
            .objects
            .iter()
            .filter(|o| o.class == SemanticClass::Wall)
            .flat_map(|o| &o.parts)
            .filter_map(|p| match p {
                Primitive::Rect { origin, u, .. } => Some((*origin, *u)),
                _ => None,
            })
            .collect();
        let blobs = 3 + rng.random_range(0..4usize);
        // Center and inward wall normal of each blob.
        let anchors: Vec<(Vec3, Vec3)> = (0..blobs)
            .map(|_| {
                let (origin, u) = walls[rng.random_range(0..walls.len())];
                let t = uniform(rng, 0.1, 0.9);
                let along_x = u[0].abs() > u[1].abs();
                let normal = if along_x {
                    [0.0, if origin[1] < room[1] / 2.0 { 1.0 } else { -1.0 }, 0.0]
                } else {
                    [if origin[0] < room[0] / 2.0 { 1.0 } else { -1.0 }, 0.0, 0.0]
                };
                let z = uniform(rng, 0.4, (wall_height - 0.4).max(0.5));
                let c = [
                    origin[0] + t * u[0] + 0.1 * normal[0],
                    origin[1] + t * u[1] + 0.1 * normal[1],
                    z,
                ];
                (c, normal)
            })
            .collect();
        let spread = Normal::new(0.0, 0.08).expect("valid sigma");
        let depth = Normal::new(0.0, 0.03).expect("valid sigma");
        for i in 0..total {
            let (c, n) = anchors[i % blobs];
            let (a, b, d) = (spread.sample(rng), spread.sample(rng), depth.sample(rng));
            // `a` runs along the wall, `d` across it.
            points.push([c[0] + a * n[1].abs() + d * n[0], c[1] + a * n[0].abs() + d * n[1], c[2] + b]);
            labels.push(SemanticClass::Unlabeled);
        }
    }
    if profile.sigma > 0.0 {
        let noise = Normal::new(0.0, profile.sigma).expect("valid sigma");
        for p in &mut points {
            for v in p.iter_mut() {
                *v += noise.sample(rng);
            }
        }
    }
    (points, labels)
}

/// Generates one labeled scene. Deterministic in `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<LabeledCloud> {
    let layout = generate_layout(spec)?;
    Ok(render_layout(&layout, spec, spec.seed))
}

/// Samples a fixed layout under `spec`'s density and profile.
pub fn render_layout(layout: &SceneLayout, spec: &SceneSpec, seed: u64) -> LabeledCloud {
    let (points, owner) = sample_layout(layout, spec.density, derive_seed(seed, 2));
    let mut rng = rng::seeded(derive_seed(seed, 3));
    let (points, labels) = apply_profile(layout, points, owner, &spec.profile, spec.room, spec.wall_height, &mut rng);
    LabeledCloud::labeled(points, labels).expect("lengths agree by construction")
}

/// Per-scene spec drawn around `base`: room extents within ±15%, a random
/// wall count, each furniture and AGV count drawn from `0..=base`, and each
/// robot and human kept with probability `base.dynamic_presence`.
pub fn scene_variant(base: &SceneSpec, profile: DomainProfile, seed: u64) -> SceneSpec {
    let mut rng = rng::seeded(derive_seed(seed, 0));
    let mut spec = base.clone();
    spec.profile = profile;
    spec.seed = seed;
    spec.room = [
        base.room[0] * uniform(&mut rng, 0.85, 1.15),
        base.room[1] * uniform(&mut rng, 0.85, 1.15),
    ];
    spec.walls = rng.random_range(2..=4);
    let keep = |rng: &mut Rng, n: usize| (0..n).filter(|_| rng.random::<f64>() < base.dynamic_presence).count();
    spec.objects = ObjectCounts {
        robot: keep(&mut rng, base.objects.robot),
        human: keep(&mut rng, base.objects.human),
        agv: rng.random_range(0..=base.objects.agv),
        table: rng.random_range(0..=base.objects.table),
        assembly_line: rng.random_range(0..=base.objects.assembly_line),
    };
    spec
}

/// Seed of scene `index` in a dataset generated with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, 0x5CE0_0000 + index as u64)
}

/// `n` scenes with per-scene specs from [`scene_variant`].
pub fn make_dataset(n: usize, profile: DomainProfile, base: &SceneSpec, seed: u64) -> Result<Vec<LabeledCloud>> {
    if n == 0 {
        return Err(Error::Validation("dataset needs at least one scene".into()));
    }
    base.validate()?;
    profile.validate()?;
    (0..n)
        .map(|i| generate_scene(&scene_variant(base, profile, scene_seed(seed, i))))
        .collect()
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    /// Probability of mirroring along x, and independently along y.
    pub flip_probability: f64,
    /// Rotation about z drawn uniformly from `[lo, hi)`; radians.
    pub rotation: [f64; 2],
    /// Isotropic scale drawn uniformly from `[lo, hi]`.
    pub scale: [f64; 2],
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            rotation: [0.0, 2.0 * PI],
            scale: [0.8, 1.25],
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
        }
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self {
            flip_probability: 0.0,
            rotation: [0.0, 0.0],
            scale: [1.0, 1.0],
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.flip_probability)
            && self.rotation[0] <= self.rotation[1]
            && self.scale[0] > 0.0
            && self.scale[0] <= self.scale[1]
            && self.jitter_sigma >= 0.0
            && self.jitter_clip >= self.jitter_sigma;
        if !ok {
            return Err(Error::Config(format!("invalid augmentation spec {self:?}")));
        }
        Ok(())
    }
}

/// Flips, rotates about z, scales, then jitters every point. Labels and
/// order are untouched.
pub fn augment(cloud: &LabeledCloud, spec: &AugmentationSpec, seed: u64) -> LabeledCloud {
    let mut rng = rng::seeded(seed);
    let flip_x = rng.random::<f64>() < spec.flip_probability;
    let flip_y = rng.random::<f64>() < spec.flip_probability;
    let angle = uniform(&mut rng, spec.rotation[0], spec.rotation[1]);
    let s = if spec.scale[1] > spec.scale[0] {
        rng.random_range(spec.scale[0]..=spec.scale[1])
    } else {
        spec.scale[0]
    };
    let (sin, cos) = angle.sin_cos();
    let rotate = angle != 0.0;
    let jitter = (spec.jitter_sigma > 0.0).then(|| Normal::new(0.0, spec.jitter_sigma).expect("valid sigma"));
    let mut jitter_rng = rng::seeded(derive_seed(seed, rng.next_u64()));
    cloud.map_points(|p| {
        let mut q = *p;
        if flip_x {
            q[0] = -q[0];
        }
        if flip_y {
            q[1] = -q[1];
        }
        if rotate {
            q = [cos * q[0] - sin * q[1], sin * q[0] + cos * q[1], q[2]];
        }
        if s != 1.0 {
            q = scale(q, s);
        }
        if let Some(n) = &jitter {
            for v in q.iter_mut() {
                *v += n.sample(&mut jitter_rng).clamp(-spec.jitter_clip, spec.jitter_clip);
            }
        }
        q
    })
}

// ---------------------------------------------------------------------------
// Dataset directories

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub points: usize,
}

/// `manifest.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub profile_name: String,
    pub profile: DomainProfile,
    pub base: SceneSpec,
    pub scenes: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:04}.pcsb")
}

/// Writes scenes as PCSB files plus a manifest.
pub fn save_dataset(dir: impl AsRef<Path>, scenes: &[LabeledCloud], mut manifest: DatasetManifest) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest.scenes.clear();
    for (i, scene) in scenes.iter().enumerate() {
        let file = scene_file_name(i);
        cloud::save_cloud(scene, dir.join(&file), CloudFormat::Binary)?;
        manifest.scenes.push(ManifestEntry {
            file,
            seed: scene_seed(manifest.seed, i),
            points: scene.len(),
        });
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads every scene listed in the manifest, in order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<LabeledCloud>)> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|e| cloud::load_cloud(dir.join(&e.file)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec { density: 60.0, ..Default::default() }
    }

    #[test]
    fn floor_and_wall_only() {
        let spec = SceneSpec { objects: ObjectCounts::none(), ..small() };
        let scene = generate_scene(&spec).unwrap();
        let counts = scene.class_counts();
        let present: Vec<usize> = (0..8).filter(|&c| counts[c] > 0).collect();
        assert_eq!(present, vec![SemanticClass::Floor.id() as usize, SemanticClass::Wall.id() as usize]);
    }

    #[test]
    fn noiseless_floor_is_flat() {
        let spec = SceneSpec { profile: DomainProfile::noiseless(), ..small() };
        let scene = generate_scene(&spec).unwrap();
        let labels = scene.labels().unwrap();
        let floor: Vec<f64> = scene
            .points()
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == SemanticClass::Floor)
            .map(|(p, _)| p[2])
            .collect();
        assert!(!floor.is_empty());
        assert!(floor.iter().all(|&z| z == floor[0]));
    }

    #[test]
    fn degenerate_room_rejected() {
        let spec = SceneSpec { room: [0.0, 5.0], ..small() };
        assert!(matches!(generate_scene(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn deterministic() {
        let a = make_dataset(2, DomainProfile::real(), &small(), 9).unwrap();
        let b = make_dataset(2, DomainProfile::real(), &small(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_scene_dataset_matches_generate() {
        let base = small();
        let set = make_dataset(1, DomainProfile::sim(), &base, 4).unwrap();
        let direct = generate_scene(&scene_variant(&base, DomainProfile::sim(), scene_seed(4, 0))).unwrap();
        assert_eq!(set[0], direct);
    }

    #[test]
    fn rotation_by_pi() {
        let cloud = LabeledCloud::unlabeled(vec![[1.0, 0.0, 0.0]]).unwrap();
        let spec = AugmentationSpec { rotation: [PI, PI], ..AugmentationSpec::identity() };
        let out = augment(&cloud, &spec, 0);
        let p = out.points()[0];
        assert!((p[0] + 1.0).abs() < 1e-12 && p[1].abs() < 1e-12 && p[2] == 0.0);
    }

    #[test]
    fn identity_augmentation_is_exact() {
        let scene = generate_scene(&small()).unwrap();
        assert_eq!(augment(&scene, &AugmentationSpec::identity(), 3), scene);
    }
}
