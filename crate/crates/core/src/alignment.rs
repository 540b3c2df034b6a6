//! Victim localization: view filtering through a segmenter, back-projection
//! of the masks, density clustering, and matching of the chosen cluster back
//! to cloud points.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{back_project, ObjectMask, RenderedView, EMPTY};
use crate::math::{dist2, Vec3};
use crate::scene::{centroid, CameraView, LabelRegistry, PointCloud};
use crate::spatial::Grid;

/// Box/text threshold of the detector contract.
pub const DEFAULT_BOX_THRESHOLD: f64 = 0.40;

/// Cluster label of noise points.
pub const NOISE: i32 = -1;

/// Produces instance masks for a label in one rendered view.
pub trait Segmenter {
    fn segment(&self, rendered: &RenderedView, label: &str) -> Vec<ObjectMask>;
}

/// Boundary and pixel noise applied by [`OracleSegmenter`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MaskNoise {
    /// Erosion passes (4-neighborhood).
    pub erode: u32,
    /// Dilation passes, applied after erosion.
    pub dilate: u32,
    /// Probability of flipping any pixel.
    pub flip_prob: f64,
    pub seed: u64,
}

impl MaskNoise {
    pub fn is_clean(&self) -> bool {
        self.erode == 0 && self.dilate == 0 && self.flip_prob == 0.0
    }
}

/// Ground-truth segmenter: one mask per object instance carrying the label,
/// read off the point-index map. The score is the fraction of mask pixels
/// that are clean (owned by the instance), so it is 1.0 without noise.
pub struct OracleSegmenter<'a> {
    cloud: &'a PointCloud,
    registry: &'a LabelRegistry,
    noise: MaskNoise,
}

impl<'a> OracleSegmenter<'a> {
    pub fn new(cloud: &'a PointCloud, registry: &'a LabelRegistry) -> Self {
        Self {
            cloud,
            registry,
            noise: MaskNoise::default(),
        }
    }

    pub fn with_noise(mut self, noise: MaskNoise) -> Self {
        self.noise = noise;
        self
    }
}

fn morph(bits: &[bool], w: usize, h: usize, grow: bool) -> Vec<bool> {
    let mut out = bits.to_vec();
    for y in 0..h {
        for x in 0..w {
            let o = y * w + x;
            let mut nb = [None; 4];
            if x > 0 {
                nb[0] = Some(o - 1);
            }
            if x + 1 < w {
                nb[1] = Some(o + 1);
            }
            if y > 0 {
                nb[2] = Some(o - w);
            }
            if y + 1 < h {
                nb[3] = Some(o + w);
            }
            if grow {
                out[o] = bits[o] || nb.iter().flatten().any(|&n| bits[n]);
            } else {
                // Out-of-image neighbors count as background.
                out[o] = bits[o] && nb.iter().all(|n| n.is_some_and(|n| bits[n]));
            }
        }
    }
    out
}

impl Segmenter for OracleSegmenter<'_> {
    fn segment(&self, rendered: &RenderedView, label: &str) -> Vec<ObjectMask> {
        let (w, h) = (rendered.width(), rendered.height());
        let ids = self.cloud.object_ids();
        let mut masks = Vec::new();
        for id in self.registry.ids_with_label(label) {
            let clean: Vec<bool> = rendered
                .index
                .iter()
                .map(|&i| i != EMPTY && (i as usize) < ids.len() && ids[i as usize] == id)
                .collect();
            if !clean.iter().any(|b| *b) {
                continue;
            }
            let mut noisy = clean.clone();
            for _ in 0..self.noise.erode {
                noisy = morph(&noisy, w, h, false);
            }
            for _ in 0..self.noise.dilate {
                noisy = morph(&noisy, w, h, true);
            }
            if self.noise.flip_prob > 0.0 {
                let seed = self.noise.seed ^ ((rendered.view_id as u64) << 32) ^ id as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for b in &mut noisy {
                    if rng.random::<f64>() < self.noise.flip_prob {
                        *b = !*b;
                    }
                }
            }
            let inter = clean.iter().zip(&noisy).filter(|(c, n)| **c && **n).count();
            if inter == 0 {
                continue;
            }
            let score = inter as f64 / noisy.iter().filter(|b| **b).count() as f64;
            if let Ok(m) = ObjectMask::new(w, h, noisy, id, score) {
                masks.push(m);
            }
        }
        masks
    }
}

/// Indices of the views where `segmenter` finds the label with a score of at
/// least `threshold`.
pub fn filter_scenes(views: &[RenderedView], label: &str, segmenter: &dyn Segmenter, threshold: f64) -> Vec<usize> {
    views
        .iter()
        .enumerate()
        .filter(|(_, rv)| segmenter.segment(rv, label).iter().any(|m| m.score >= threshold))
        .map(|(i, _)| i)
        .collect()
}

/// Density clustering. A point is core when at least `min_pts` points
/// (itself included) lie within `eps`. Clusters are the eps-connected
/// components of core points, numbered by their lowest core index. A border
/// point joins the cluster of its nearest core neighbor, ties broken by the
/// neighbor's lexicographically smallest coordinates, so the partition does
/// not depend on input order.
pub fn dbscan(points: &[Vec3], eps: f64, min_pts: usize) -> Result<Vec<i32>> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid("dbscan eps must be positive"));
    }
    if min_pts == 0 {
        return Err(Error::invalid("dbscan min_pts must be at least 1"));
    }
    let n = points.len();
    let grid = Grid::new(points, eps);
    let mut neighbors: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut buf = Vec::new();
    for p in points {
        grid.within(*p, eps, &mut buf);
        neighbors.push(buf.clone());
    }
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![NOISE; n];
    let mut next = 0;
    let mut stack = Vec::new();
    for seed in 0..n {
        if !core[seed] || labels[seed] != NOISE {
            continue;
        }
        labels[seed] = next;
        stack.push(seed);
        while let Some(i) = stack.pop() {
            for &j in &neighbors[i] {
                if core[j] && labels[j] == NOISE {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }

    for i in 0..n {
        if core[i] {
            continue;
        }
        let best = neighbors[i]
            .iter()
            .copied()
            .filter(|&j| core[j])
            .min_by(|&a, &b| {
                let (da, db) = (dist2(points[i], points[a]), dist2(points[i], points[b]));
                da.total_cmp(&db).then_with(|| lex(points[a], points[b]))
            });
        if let Some(j) = best {
            labels[i] = labels[j];
        }
    }
    Ok(labels)
}

fn lex(a: Vec3, b: Vec3) -> core::cmp::Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterSelection {
    Largest,
    SeededRandom(u64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    pub eps: f64,
    pub min_pts: usize,
    pub selection: ClusterSelection,
    pub threshold: f64,
    /// When false the pooled mask points are used as-is, without clustering.
    pub cluster: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            eps: 0.1,
            min_pts: 5,
            selection: ClusterSelection::Largest,
            threshold: DEFAULT_BOX_THRESHOLD,
            cluster: true,
        }
    }
}

/// Victim mask and segmenter score in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct VictimView {
    pub view_id: u32,
    pub mask: ObjectMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VictimObject {
    /// Sorted cloud indices.
    pub indices: Vec<usize>,
    pub label: String,
    pub centroid: Vec3,
    pub views: Vec<VictimView>,
}

impl VictimObject {
    /// Build directly from a known point set.
    pub fn from_indices(cloud: &PointCloud, mut indices: Vec<usize>, label: &str) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() || indices.iter().any(|&i| i >= cloud.len()) {
            return Err(Error::invalid("victim indices empty or out of range"));
        }
        Ok(Self {
            centroid: centroid(indices.iter().map(|&i| cloud.positions()[i])),
            indices,
            label: label.into(),
            views: Vec::new(),
        })
    }

    /// Per-point membership flags over a cloud of `len` points.
    pub fn membership(&self, len: usize) -> Vec<bool> {
        let mut m = vec![false; len];
        for &i in &self.indices {
            if i < len {
                m[i] = true;
            }
        }
        m
    }

    pub fn mask_for(&self, view_id: u32) -> Option<&ObjectMask> {
        self.views.iter().find(|v| v.view_id == view_id).map(|v| &v.mask)
    }

    /// Precision and recall against a ground-truth point set.
    pub fn precision_recall(&self, truth: &[usize]) -> (f64, f64) {
        let hit = self.indices.iter().filter(|i| truth.binary_search(i).is_ok()).count() as f64;
        let p = if self.indices.is_empty() { 0.0 } else { hit / self.indices.len() as f64 };
        let r = if truth.is_empty() { 0.0 } else { hit / truth.len() as f64 };
        (p, r)
    }
}

struct Pooled {
    points: Vec<Vec3>,
    /// (view slot, pixel) of every pooled point.
    source: Vec<(usize, usize)>,
}

/// Locate the victim. `cameras[k]` must be the camera of `rendered[k]`.
pub fn align_victim(
    cloud: &PointCloud,
    registry: &LabelRegistry,
    cameras: &[CameraView],
    rendered: &[RenderedView],
    label: &str,
    segmenter: &dyn Segmenter,
    config: &AlignConfig,
) -> Result<VictimObject> {
    if !registry.contains_label(label) {
        return Err(Error::NotFound(format!("label {label:?}")));
    }
    if cameras.len() != rendered.len() {
        return Err(Error::contract("camera and rendering lists differ in length"));
    }
    if !(config.eps > 0.0) || config.min_pts == 0 {
        return Err(Error::invalid("alignment eps/min_pts must be positive"));
    }

    let mut per_view: Vec<(usize, Vec<ObjectMask>)> = Vec::new();
    for (k, rv) in rendered.iter().enumerate() {
        let masks: Vec<ObjectMask> = segmenter
            .segment(rv, label)
            .into_iter()
            .filter(|m| m.score >= config.threshold)
            .collect();
        if !masks.is_empty() {
            per_view.push((k, masks));
        }
    }
    if per_view.is_empty() {
        return Err(Error::Alignment(format!("no view shows {label:?}")));
    }

    let mut pooled = Pooled {
        points: Vec::new(),
        source: Vec::new(),
    };
    for (k, masks) in &per_view {
        let rv = &rendered[*k];
        let w = rv.width();
        let mut union = vec![false; rv.pixel_count()];
        for m in masks {
            for (u, b) in union.iter_mut().zip(m.bits()) {
                *u |= *b;
            }
        }
        let mut pixels = Vec::new();
        let mut depths = Vec::new();
        let mut offsets = Vec::new();
        for (o, _) in union.iter().enumerate().filter(|(_, b)| **b) {
            let d = rv.depth[o];
            if d.is_finite() {
                pixels.push(((o % w) as f64, (o / w) as f64));
                depths.push(d);
                offsets.push(o);
            }
        }
        pooled.points.extend(back_project(&pixels, &depths, &cameras[*k])?);
        pooled.source.extend(offsets.into_iter().map(|o| (*k, o)));
    }

    let selected: Vec<bool> = if config.cluster {
        let labels = dbscan(&pooled.points, config.eps, config.min_pts)?;
        let mut sizes: BTreeMap<i32, usize> = BTreeMap::new();
        for &l in labels.iter().filter(|&&l| l != NOISE) {
            *sizes.entry(l).or_default() += 1;
        }
        if sizes.is_empty() {
            return Err(Error::Alignment(format!("no cluster found for {label:?}")));
        }
        let chosen = match config.selection {
            ClusterSelection::Largest => {
                // BTreeMap order makes the lowest label win ties.
                let mut best = (NOISE, 0);
                for (&l, &s) in &sizes {
                    if s > best.1 {
                        best = (l, s);
                    }
                }
                best.0
            }
            ClusterSelection::SeededRandom(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pick = rng.random_range(0..sizes.len());
                *sizes.keys().nth(pick).expect("in range")
            }
        };
        labels.iter().map(|&l| l == chosen).collect()
    } else {
        vec![true; pooled.points.len()]
    };

    let cluster: Vec<Vec3> = pooled
        .points
        .iter()
        .zip(&selected)
        .filter(|(_, s)| **s)
        .map(|(p, _)| *p)
        .collect();
    let indices = match_cloud(cloud, &cluster, rendered, config.eps);
    if indices.is_empty() {
        return Err(Error::Alignment(format!("cluster for {label:?} matched no cloud point")));
    }

    let mut views = Vec::new();
    for (k, masks) in &per_view {
        let rv = &rendered[*k];
        let mut bits = vec![false; rv.pixel_count()];
        for ((slot, o), s) in pooled.source.iter().zip(&selected) {
            if *slot == *k && *s {
                bits[*o] = true;
            }
        }
        let score = masks.iter().map(|m| m.score).fold(0.0, f64::max);
        let mask = ObjectMask::new(rv.width(), rv.height(), bits, masks[0].object_id, score)?;
        if !mask.is_empty() {
            views.push(VictimView {
                view_id: rv.view_id,
                mask,
            });
        }
    }

    Ok(VictimObject {
        centroid: centroid(indices.iter().map(|&i| cloud.positions()[i])),
        indices,
        label: label.into(),
        views,
    })
}

/// Cloud points whose nearest cluster point lies within `eps`, grown through
/// points no rendered view shows (their hidden faces) by eps-connectivity.
fn match_cloud(cloud: &PointCloud, cluster: &[Vec3], rendered: &[RenderedView], eps: f64) -> Vec<usize> {
    let n = cloud.len();
    let grid = Grid::new(cluster, eps);
    let mut member: Vec<bool> = cloud
        .positions()
        .iter()
        .map(|p| grid.nearest_within(*p, eps).is_some())
        .collect();

    let mut seen = vec![false; n];
    for rv in rendered {
        for &i in &rv.index {
            if i != EMPTY && (i as usize) < n {
                seen[i as usize] = true;
            }
        }
    }
    let cloud_grid = Grid::new(cloud.positions(), eps);
    let mut stack: Vec<usize> = (0..n).filter(|&i| member[i]).collect();
    let mut buf = Vec::new();
    while let Some(i) = stack.pop() {
        cloud_grid.within(cloud.positions()[i], eps, &mut buf);
        for &j in &buf {
            if !member[j] && !seen[j] {
                member[j] = true;
                stack.push(j);
            }
        }
    }
    (0..n).filter(|&i| member[i]).collect()
}
