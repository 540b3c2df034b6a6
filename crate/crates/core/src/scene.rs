//! Synthetic scenes: labeled point clouds, label registries, and cameras.
//!
//! Objects are dense surface samples of boxes, spheres and cylinders resting
//! on the ground plane `z = 0`. Sampling uses low-discrepancy lattices so that
//! every view sees a contiguous silhouette at the default point density.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{
    self, add, cos, cross, dist2, dot, mat_t_vec, mat_vec, normalize, orthonormality_error, sin,
    sqrt, sub, Mat3, Vec3,
};
use crate::perception::Embedding;

/// Reserved id for floor points.
pub const BACKGROUND_ID: u32 = 0;
pub const BACKGROUND_LABEL: &str = "background";

/// Minimum Euclidean distance between drawn object base colors.
pub const MIN_COLOR_DISTANCE: f64 = 0.3;
/// Maximum cosine between drawn base colors, so colors also differ in hue.
pub const MAX_COLOR_COSINE: f64 = 0.95;

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vec3>,
    colors: Vec<Rgb>,
    object_ids: Vec<u32>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>, colors: Vec<Rgb>, object_ids: Vec<u32>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("point cloud is empty"));
        }
        if positions.len() != colors.len() || positions.len() != object_ids.len() {
            return Err(Error::invalid(format!(
                "point cloud arrays disagree: {} positions, {} colors, {} ids",
                positions.len(),
                colors.len(),
                object_ids.len()
            )));
        }
        if let Some(i) = colors
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::invalid(format!("color of point {i} outside [0, 1]")));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite position"));
        }
        Ok(Self {
            positions,
            colors,
            object_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn colors(&self) -> &[Rgb] {
        &self.colors
    }

    pub fn object_ids(&self) -> &[u32] {
        &self.object_ids
    }

    /// Distinct object ids in ascending order.
    pub fn distinct_ids(&self) -> Vec<u32> {
        let mut ids = self.object_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn indices_of(&self, id: u32) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.object_ids[i] == id)
            .collect()
    }

    pub fn centroid_of(&self, id: u32) -> Result<Vec3> {
        let idx = self.indices_of(id);
        if idx.is_empty() {
            return Err(Error::NotFound(format!("object id {id}")));
        }
        Ok(centroid(idx.iter().map(|&i| self.positions[i])))
    }

    /// Copy with colors replaced; used to build the adversarial object.
    pub fn with_colors(&self, colors: Vec<Rgb>) -> Result<Self> {
        Self::new(self.positions.clone(), colors, self.object_ids.clone())
    }

    pub fn with_positions(&self, positions: Vec<Vec3>) -> Result<Self> {
        Self::new(positions, self.colors.clone(), self.object_ids.clone())
    }

    /// Every id must be known to `registry`.
    pub fn check_registry(&self, registry: &LabelRegistry) -> Result<()> {
        for id in self.distinct_ids() {
            if registry.label_of(id).is_none() {
                return Err(Error::invalid(format!(
                    "object id {id} has no label in the registry"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn centroid(points: impl Iterator<Item = Vec3>) -> Vec3 {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for p in points {
        sum = add(sum, p);
        n += 1;
    }
    math::scale(sum, 1.0 / n.max(1) as f64)
}

/// Object id to label mapping plus the calibrated label embeddings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelRegistry {
    entries: BTreeMap<u32, String>,
    labels: Vec<String>,
    prototypes: Vec<Option<Embedding>>,
}

impl LabelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: u32, label: &str) -> Result<()> {
        if label.trim().is_empty() || label.contains(['\t', '\n']) {
            return Err(Error::invalid(format!("bad label {label:?} for id {id}")));
        }
        if self.entries.contains_key(&id) {
            return Err(Error::invalid(format!("duplicate object id {id}")));
        }
        self.entries.insert(id, label.to_string());
        if !self.labels.iter().any(|l| l == label) {
            self.labels.push(label.to_string());
            self.prototypes.push(None);
        }
        Ok(())
    }

    pub fn label_of(&self, id: u32) -> Option<&str> {
        self.entries.get(&id).map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, &str)> {
        self.entries.iter().map(|(k, v)| (*k, v.as_str()))
    }

    /// Unique labels in registry order (first appearance by insertion).
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains_label(&self, label: &str) -> bool {
        self.label_index(label).is_some()
    }

    pub fn ids_with_label(&self, label: &str) -> Vec<u32> {
        self.entries
            .iter()
            .filter(|(_, l)| l.as_str() == label)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn set_prototype(&mut self, label: &str, embedding: Embedding) -> Result<()> {
        let i = self
            .label_index(label)
            .ok_or_else(|| Error::NotFound(format!("label {label:?}")))?;
        self.prototypes[i] = Some(embedding);
        Ok(())
    }

    pub fn prototype(&self, label: &str) -> Result<&Embedding> {
        let i = self
            .label_index(label)
            .ok_or_else(|| Error::NotFound(format!("label {label:?}")))?;
        self.prototypes[i]
            .as_ref()
            .ok_or_else(|| Error::Calibration(format!("label {label:?} has no prototype")))
    }

    /// All prototypes in registry order; fails if any label is uncalibrated.
    pub fn calibrated(&self) -> Result<Vec<&Embedding>> {
        self.labels.iter().map(|l| self.prototype(l)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Box,
    Sphere,
    Cylinder,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Box => "box",
            Shape::Sphere => "sphere",
            Shape::Cylinder => "cylinder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "box" => Some(Shape::Box),
            "sphere" => Some(Shape::Sphere),
            "cylinder" => Some(Shape::Cylinder),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub label: String,
    pub shape: Shape,
    /// Characteristic half-size range in meters.
    pub size: (f64, f64),
    /// Drawn from the seed when `None`.
    pub color: Option<Rgb>,
    pub points: usize,
}

impl ObjectSpec {
    pub fn new(label: &str, shape: Shape) -> Self {
        Self {
            label: label.to_string(),
            shape,
            size: (0.3, 0.42),
            color: None,
            points: 1200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Side of the square room in meters.
    pub extent: f64,
    pub objects: Vec<ObjectSpec>,
    /// Extra gap required between object bounding spheres.
    pub clearance: f64,
    /// Floor points with id 0; zero disables the floor.
    pub floor_points: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0) {
            return Err(Error::invalid("room extent must be positive"));
        }
        if self.objects.len() < 2 {
            return Err(Error::invalid(
                "a scene needs a victim and at least one background object",
            ));
        }
        if !(self.clearance >= 0.0) {
            return Err(Error::invalid("clearance must be non-negative"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.points < 50 {
                return Err(Error::invalid(format!("object {i} has fewer than 50 points")));
            }
            if !(o.size.0 > 0.0 && o.size.0 <= o.size.1) {
                return Err(Error::invalid(format!("object {i} has a bad size range")));
            }
            if let Some(c) = o.color {
                if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::invalid(format!("object {i} color outside [0, 1]")));
                }
            }
            if o.label == BACKGROUND_LABEL {
                return Err(Error::invalid("the background label is reserved"));
            }
        }
        Ok(())
    }
}

struct Placed {
    center: Vec3,
    radius: f64,
}

/// Generate the scene for `spec`; object ids start at 1.
pub fn generate_scene(spec: &SceneSpec) -> Result<(PointCloud, LabelRegistry)> {
    spec.validate()?;
    let seed = spec.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colors = draw_colors(spec, &mut rng)?;

    let mut registry = LabelRegistry::new();
    let mut positions = Vec::new();
    let mut point_colors = Vec::new();
    let mut ids = Vec::new();

    if spec.floor_points > 0 {
        registry.insert(BACKGROUND_ID, BACKGROUND_LABEL)?;
        for [u, v] in r2_sequence(spec.floor_points) {
            positions.push([u * spec.extent, v * spec.extent, 0.0]);
            point_colors.push([0.5, 0.5, 0.5]);
            ids.push(BACKGROUND_ID);
        }
    }

    let mut placed: Vec<Placed> = Vec::new();
    for (k, obj) in spec.objects.iter().enumerate() {
        let id = k as u32 + 1;
        registry.insert(id, &obj.label)?;
        let size = rng.random_range(obj.size.0..=obj.size.1);
        let yaw = rng.random_range(0.0..2.0 * PI);
        let (local, half_height, radius) = sample_shape(obj.shape, size, obj.points, &mut rng);

        let lo = radius + spec.clearance;
        let hi = spec.extent - radius - spec.clearance;
        if lo >= hi {
            return Err(Error::Generation {
                seed,
                reason: format!("object {id} does not fit in a room of extent {}", spec.extent),
            });
        }
        let mut center = None;
        for _ in 0..1000 {
            let c = [
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
                half_height,
            ];
            let clear = placed
                .iter()
                .all(|p| sqrt(dist2(p.center, c)) > p.radius + radius + spec.clearance);
            if clear {
                center = Some(c);
                break;
            }
        }
        let center = center.ok_or_else(|| Error::Generation {
            seed,
            reason: format!("could not place object {id} without overlap"),
        })?;
        placed.push(Placed { center, radius });

        let (s, c) = (sin(yaw), cos(yaw));
        for p in local {
            let rotated = [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
            positions.push(add(center, rotated));
            point_colors.push(colors[k]);
            ids.push(id);
        }
    }

    let cloud = PointCloud::new(positions, point_colors, ids)?;
    Ok((cloud, registry))
}

fn draw_colors(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Rgb>> {
    let fixed: Vec<Rgb> = spec.objects.iter().filter_map(|o| o.color).collect();
    let mut taken = fixed.clone();
    let mut out = Vec::with_capacity(spec.objects.len());
    for obj in &spec.objects {
        if let Some(c) = obj.color {
            out.push(c);
            continue;
        }
        let mut chosen = None;
        for _ in 0..10_000 {
            let c = [
                rng.random_range(0.1..0.95),
                rng.random_range(0.1..0.95),
                rng.random_range(0.1..0.95),
            ];
            if c.iter().copied().fold(0.0, f64::max) < 0.4 {
                continue;
            }
            let separated = taken.iter().all(|t| {
                let cosine = dot(*t, c) / (math::norm(*t) * math::norm(c));
                sqrt(dist2(*t, c)) >= MIN_COLOR_DISTANCE && cosine <= MAX_COLOR_COSINE
            });
            if separated {
                chosen = Some(c);
                break;
            }
        }
        let c = chosen.ok_or_else(|| Error::Generation {
            seed: spec.seed,
            reason: "could not draw separated object colors".to_string(),
        })?;
        taken.push(c);
        out.push(c);
    }
    Ok(out)
}

/// Returns local surface points (centered on the object), the height of the
/// center above the floor, and the bounding-sphere radius.
fn sample_shape(shape: Shape, size: f64, n: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec3>, f64, f64) {
    match shape {
        Shape::Sphere => {
            let golden = PI * (3.0 - sqrt(5.0));
            let pts = (0..n)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = sqrt((1.0 - z * z).max(0.0));
                    let phi = golden * i as f64;
                    [size * r * cos(phi), size * r * sin(phi), size * z]
                })
                .collect();
            (pts, size, size)
        }
        Shape::Box => {
            let h = [
                size,
                size * rng.random_range(0.7..1.0),
                size * rng.random_range(0.7..1.0),
            ];
            // Faces as (normal axis, sign); areas drive the point split.
            let faces: [(usize, f64); 6] = [
                (0, 1.0),
                (0, -1.0),
                (1, 1.0),
                (1, -1.0),
                (2, 1.0),
                (2, -1.0),
            ];
            let areas: Vec<f64> = faces
                .iter()
                .map(|&(axis, _)| {
                    let (a, b) = other_axes(axis);
                    4.0 * h[a] * h[b]
                })
                .collect();
            let counts = apportion(n, &areas);
            let mut pts = Vec::with_capacity(n);
            for (&(axis, sign), &k) in faces.iter().zip(&counts) {
                let (a, b) = other_axes(axis);
                for [u, v] in r2_sequence(k) {
                    let mut p = [0.0; 3];
                    p[axis] = sign * h[axis];
                    p[a] = (2.0 * u - 1.0) * h[a];
                    p[b] = (2.0 * v - 1.0) * h[b];
                    pts.push(p);
                }
            }
            (pts, h[2], math::norm(h))
        }
        Shape::Cylinder => {
            let r = 0.8 * size;
            let hh = size * rng.random_range(0.8..1.2);
            let side = 2.0 * PI * r * 2.0 * hh;
            let cap = PI * r * r;
            let counts = apportion(n, &[side, cap, cap]);
            let mut pts = Vec::with_capacity(n);
            for [u, v] in r2_sequence(counts[0]) {
                let t = 2.0 * PI * u;
                pts.push([r * cos(t), r * sin(t), (2.0 * v - 1.0) * hh]);
            }
            let golden = PI * (3.0 - sqrt(5.0));
            for (k, z) in [(counts[1], hh), (counts[2], -hh)] {
                for i in 0..k {
                    let rr = r * sqrt((i as f64 + 0.5) / k as f64);
                    let t = golden * i as f64;
                    pts.push([rr * cos(t), rr * sin(t), z]);
                }
            }
            (pts, hh, sqrt(r * r + hh * hh))
        }
    }
}

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Split `n` proportionally to `weights` using largest remainders.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| math::floor(*r) as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - counts[a] as f64;
        let fb = raw[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Additive recurrence on the plastic number; fills the unit square evenly
/// for any count.
fn r2_sequence(n: usize) -> impl Iterator<Item = [f64; 2]> {
    const G: f64 = 1.324_717_957_244_746;
    let a1 = 1.0 / G;
    let a2 = 1.0 / (G * G);
    (1..=n).map(move |i| {
        let i = i as f64;
        [frac(0.5 + a1 * i), frac(0.5 + a2 * i)]
    })
}

fn frac(x: f64) -> f64 {
    x - math::floor(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pinhole camera with world-to-camera extrinsics `p_cam = R·p + t`.
///
/// Camera axes: x right, y down, z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub id: u32,
    pub intrinsics: Intrinsics,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl CameraView {
    pub fn new(
        id: u32,
        intrinsics: Intrinsics,
        rotation: Mat3,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let view = Self {
            id,
            intrinsics,
            rotation,
            translation,
            width,
            height,
        };
        view.validate()?;
        Ok(view)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(0.0..self.width as f64).contains(&k.cx) || !(0.0..self.height as f64).contains(&k.cy)
        {
            return Err(Error::invalid("principal point outside the image"));
        }
        if !(orthonormality_error(&self.rotation) <= 1e-9) {
            return Err(Error::invalid("rotation is not orthonormal"));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target` with world `+z` up.
    pub fn look_at(
        id: u32,
        eye: Vec3,
        target: Vec3,
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = normalize(sub(target, eye));
        let mut right = cross(forward, [0.0, 0.0, 1.0]);
        if math::norm(right) < 1e-9 {
            right = cross(forward, [0.0, 1.0, 0.0]);
        }
        let right = normalize(right);
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let translation = math::scale(mat_vec(&rotation, eye), -1.0);
        Self::new(id, intrinsics, rotation, translation, width, height)
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, p), self.translation)
    }

    pub fn to_world(&self, p_cam: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, sub(p_cam, self.translation))
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        math::scale(mat_t_vec(&self.rotation, self.translation), -1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ViewPolicy {
    /// Even azimuths on a circle; `radius` is the camera-to-target distance
    /// and `height` the camera elevation above the target centroid.
    Ring { radius: f64, height: f64, phase: f64 },
    Random {
        radius: (f64, f64),
        height: (f64, f64),
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewSampling {
    pub policy: ViewPolicy,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Id of the first returned view; later views count up from it.
    pub first_id: u32,
}

impl ViewSampling {
    pub fn ring(radius: f64, height: f64) -> Self {
        Self {
            policy: ViewPolicy::Ring {
                radius,
                height,
                phase: 0.0,
            },
            width: 64,
            height: 64,
            focal: 64.0,
            first_id: 0,
        }
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        if let ViewPolicy::Ring { phase: p, .. } = &mut self.policy {
            *p = phase;
        }
        self
    }

    pub fn with_first_id(mut self, id: u32) -> Self {
        self.first_id = id;
        self
    }

    fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width / 2) as f64,
            cy: (self.height / 2) as f64,
        }
    }
}

/// Cameras aimed at the centroid of object `target_id`.
pub fn sample_views(
    cloud: &PointCloud,
    target_id: u32,
    count: usize,
    sampling: &ViewSampling,
    seed: u64,
) -> Result<Vec<CameraView>> {
    if count == 0 {
        return Err(Error::invalid("view count must be at least 1"));
    }
    let target = cloud.centroid_of(target_id)?;
    let k = sampling.intrinsics();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views = Vec::with_capacity(count);
    for i in 0..count {
        let (azimuth, radius, height) = match sampling.policy {
            ViewPolicy::Ring {
                radius,
                height,
                phase,
            } => (phase + 2.0 * PI * i as f64 / count as f64, radius, height),
            ViewPolicy::Random { radius, height } => (
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(radius.0..=radius.1),
                rng.random_range(height.0..=height.1),
            ),
        };
        if !(height.abs() < radius) {
            return Err(Error::invalid("camera height must be below the view radius"));
        }
        let horizontal = sqrt(radius * radius - height * height);
        let eye = [
            target[0] + horizontal * cos(azimuth),
            target[1] + horizontal * sin(azimuth),
            target[2] + height,
        ];
        views.push(CameraView::look_at(
            sampling.first_id + i as u32,
            eye,
            target,
            k,
            sampling.width,
            sampling.height,
        )?);
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_object_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            extent: 6.0,
            objects: vec![
                ObjectSpec::new("chair", Shape::Box),
                ObjectSpec::new("ball", Shape::Sphere),
            ],
            clearance: 0.3,
            floor_points: 0,
            seed,
        }
    }

    #[test]
    fn box_and_sphere_give_two_ids() {
        let (cloud, reg) = generate_scene(&two_object_spec(7)).unwrap();
        assert_eq!(cloud.distinct_ids(), vec![1, 2]);
        assert_eq!(reg.labels(), ["chair", "ball"]);
        cloud.check_registry(&reg).unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&two_object_spec(7)).unwrap();
        let b = generate_scene(&two_object_spec(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&two_object_spec(8)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn point_total_is_sum_of_objects() {
        let shapes = [Shape::Box, Shape::Sphere, Shape::Cylinder, Shape::Box, Shape::Sphere];
        let objects = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| ObjectSpec {
                points: 200,
                ..ObjectSpec::new(&format!("obj{i}"), *s)
            })
            .collect();
        let spec = SceneSpec {
            extent: 8.0,
            objects,
            clearance: 0.2,
            floor_points: 0,
            seed: 3,
        };
        let (cloud, _) = generate_scene(&spec).unwrap();
        assert_eq!(cloud.len(), 1000);
        for id in 1..=5 {
            assert_eq!(cloud.indices_of(id).len(), 200);
        }
    }

    #[test]
    fn objects_do_not_overlap_and_colors_separate() {
        for seed in 0..20 {
            let spec = SceneSpec {
                extent: 8.0,
                objects: (0..5)
                    .map(|i| ObjectSpec::new(&format!("o{i}"), Shape::Cylinder))
                    .collect(),
                clearance: 0.3,
                floor_points: 0,
                seed,
            };
            let (cloud, _) = generate_scene(&spec).unwrap();
            let ids = cloud.distinct_ids();
            for &a in &ids {
                for &b in &ids {
                    if a >= b {
                        continue;
                    }
                    let ca = cloud.colors()[cloud.indices_of(a)[0]];
                    let cb = cloud.colors()[cloud.indices_of(b)[0]];
                    assert!(sqrt(dist2(ca, cb)) >= MIN_COLOR_DISTANCE);
                    // no point of one object lies inside the other's hull
                    let cen_b = cloud.centroid_of(b).unwrap();
                    let min_d = cloud
                        .indices_of(a)
                        .iter()
                        .map(|&i| sqrt(dist2(cloud.positions()[i], cen_b)))
                        .fold(f64::INFINITY, f64::min);
                    assert!(min_d > 0.2);
                }
            }
        }
    }

    #[test]
    fn crowded_room_reports_seed() {
        let spec = SceneSpec {
            extent: 1.2,
            objects: (0..6)
                .map(|i| ObjectSpec::new(&format!("o{i}"), Shape::Sphere))
                .collect(),
            clearance: 0.1,
            floor_points: 0,
            seed: 99,
        };
        match generate_scene(&spec) {
            Err(Error::Generation { seed, .. }) => assert_eq!(seed, 99),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = two_object_spec(1);
        spec.objects.truncate(1);
        assert!(spec.validate().is_err());
        let mut spec = two_object_spec(1);
        spec.objects[0].points = 49;
        assert!(spec.validate().is_err());
        let mut spec = two_object_spec(1);
        spec.extent = 0.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn registry_rejects_duplicates_and_empty_labels() {
        let mut reg = LabelRegistry::new();
        reg.insert(1, "chair").unwrap();
        assert!(reg.insert(1, "table").is_err());
        assert!(reg.insert(2, "").is_err());
        reg.insert(3, "chair").unwrap();
        assert_eq!(reg.labels().len(), 1);
        assert_eq!(reg.ids_with_label("chair"), vec![1, 3]);
    }

    #[test]
    fn ring_views_are_evenly_spaced_at_radius() {
        let (cloud, _) = generate_scene(&two_object_spec(7)).unwrap();
        let target = cloud.centroid_of(1).unwrap();
        let views = sample_views(&cloud, 1, 8, &ViewSampling::ring(2.5, 0.8), 0).unwrap();
        assert_eq!(views.len(), 8);
        for (i, v) in views.iter().enumerate() {
            let c = v.center();
            assert!((sqrt(dist2(c, target)) - 2.5).abs() <= 1e-9);
            let az = math::atan2(c[1] - target[1], c[0] - target[0]);
            let expected = 2.0 * PI * i as f64 / 8.0;
            let diff = (az - expected).rem_euclid(2.0 * PI);
            assert!(diff < 1e-9 || (2.0 * PI - diff) < 1e-9, "view {i}: {az}");
            assert!(v.to_camera(target)[2] > 0.0);
        }
    }

    #[test]
    fn random_views_are_deterministic() {
        let (cloud, _) = generate_scene(&two_object_spec(7)).unwrap();
        let sampling = ViewSampling {
            policy: ViewPolicy::Random {
                radius: (2.0, 3.0),
                height: (0.2, 1.0),
            },
            ..ViewSampling::ring(2.5, 0.8)
        };
        let a = sample_views(&cloud, 2, 1, &sampling, 11).unwrap();
        let b = sample_views(&cloud, 2, 1, &sampling, 11).unwrap();
        assert_eq!(a, b);
        let target = cloud.centroid_of(2).unwrap();
        assert!(a[0].to_camera(target)[2] > 0.0);
    }

    #[test]
    fn missing_target_is_not_found() {
        let (cloud, _) = generate_scene(&two_object_spec(7)).unwrap();
        let r = sample_views(&cloud, 42, 4, &ViewSampling::ring(2.5, 0.8), 0);
        assert!(matches!(r, Err(Error::NotFound(_))));
    }

    #[test]
    fn camera_rejects_bad_rotation() {
        let k = Intrinsics {
            fx: 10.0,
            fy: 10.0,
            cx: 4.0,
            cy: 4.0,
        };
        let bad = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0 + 1e-6]];
        assert!(CameraView::new(0, k, bad, [0.0; 3], 8, 8).is_err());
        let ok = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraView::new(0, k, ok, [0.0; 3], 8, 8).is_ok());
        let off = Intrinsics { cx: 8.0, ..k };
        assert!(CameraView::new(0, off, ok, [0.0; 3], 8, 8).is_err());
    }
}
