//! Dense perception: the encoder contract, the toy convolutional encoder,
//! label prototypes, masked features, object classification, and the
//! top-down semantic map used for object localization.
//!
//! Encoders produce *dense per-pixel features*: one `C`-dimensional unit
//! vector for every pixel. Adapters for real models are expected to supply
//! features at that granularity (upsampled if needed) together with a
//! vector-Jacobian product with respect to the input image.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{back_project, ObjectMask, RenderedView, EMPTY};
use crate::image::Image;
use crate::math::{self, sqrt, tanh};
use crate::scene::{CameraView, LabelRegistry, PointCloud};

/// Norm floor of the per-pixel feature normalization.
pub const FEATURE_NORM_FLOOR: f64 = 1e-8;

/// `H × W × C` feature array, channel-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
    pub view_id: u32,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            view_id: 0,
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::contract("feature buffer does not match its shape"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            view_id: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, o: usize) -> &[f64] {
        &self.data[o * self.channels..(o + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, o: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[o * c..(o + 1) * c]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    fn matches_mask(&self, mask: &ObjectMask) -> bool {
        self.width == mask.width() && self.height == mask.height()
    }
}

/// A unit-norm label embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `v`; fails on a zero or non-finite vector.
    pub fn from_vector(v: Vec<f64>) -> Result<Self> {
        let n = math::norm_slice(&v);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::domain("cannot normalize a zero embedding"));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Dense image encoder with a reverse-mode product.
///
/// The text side of the contract is served by the calibrated label
/// prototypes held in [`LabelRegistry`].
pub trait Encoder {
    fn channels(&self) -> usize;

    fn encode_image(&self, image: &Image) -> FeatureMap;

    /// `Jᵀ · cotangent` where `J` is the Jacobian of `encode_image` at `image`.
    fn vjp_image(&self, image: &Image, cotangent: &FeatureMap) -> Image;
}

/// One `k×k` convolution, `tanh`, per-pixel L2 normalization.
///
/// Weights are i.i.d. Gaussian with scale `1/√(k·k·3)`, bias zero, zero
/// padding at the borders. A pixel whose whole receptive field is black has
/// a zero pre-activation and maps to the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    channels: usize,
    kernel: usize,
    /// `[c][ky][kx][rgb]`
    weights: Vec<f64>,
}

impl ToyEncoder {
    pub const DEFAULT_CHANNELS: usize = 16;
    pub const DEFAULT_KERNEL: usize = 5;

    pub fn new(seed: u64, channels: usize, kernel: usize) -> Result<Self> {
        if channels == 0 || kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::invalid("encoder needs channels ≥ 1 and an odd kernel"));
        }
        let fan_in = kernel * kernel * 3;
        let scale = 1.0 / sqrt(fan_in as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..channels * fan_in)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self {
            channels,
            kernel,
            weights,
        })
    }

    pub fn with_defaults(seed: u64) -> Self {
        Self::new(seed, Self::DEFAULT_CHANNELS, Self::DEFAULT_KERNEL).expect("valid defaults")
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    fn fan_in(&self) -> usize {
        self.kernel * self.kernel * 3
    }

    /// Zero-padded receptive field of pixel `(x, y)`, `[ky][kx][rgb]`.
    fn patch(&self, image: &Image, x: usize, y: usize, out: &mut [f64]) {
        let r = (self.kernel / 2) as i64;
        let (w, h) = (image.width() as i64, image.height() as i64);
        let data = image.data();
        let mut k = 0;
        for ky in -r..=r {
            let yy = y as i64 + ky;
            for kx in -r..=r {
                let xx = x as i64 + kx;
                if yy < 0 || xx < 0 || yy >= h || xx >= w {
                    out[k..k + 3].fill(0.0);
                } else {
                    let o = (yy * w + xx) as usize * 3;
                    out[k..k + 3].copy_from_slice(&data[o..o + 3]);
                }
                k += 3;
            }
        }
    }

    /// `tanh` activations, before normalization.
    fn activations(&self, image: &Image) -> Vec<f64> {
        let (w, h, c) = (image.width(), image.height(), self.channels);
        let fan = self.fan_in();
        let mut patch = vec![0.0; fan];
        let mut out = vec![0.0; w * h * c];
        for y in 0..h {
            for x in 0..w {
                self.patch(image, x, y, &mut patch);
                let o = (y * w + x) * c;
                for (ch, row) in self.weights.chunks_exact(fan).enumerate() {
                    out[o + ch] = tanh(math::dot_slice(row, &patch));
                }
            }
        }
        out
    }
}

impl Encoder for ToyEncoder {
    fn channels(&self) -> usize {
        self.channels
    }

    fn encode_image(&self, image: &Image) -> FeatureMap {
        let c = self.channels;
        let mut data = self.activations(image);
        for px in data.chunks_exact_mut(c) {
            let n = math::norm_slice(px).max(FEATURE_NORM_FLOOR);
            px.iter_mut().for_each(|v| *v /= n);
        }
        FeatureMap {
            width: image.width(),
            height: image.height(),
            channels: c,
            data,
            view_id: 0,
        }
    }

    fn vjp_image(&self, image: &Image, cotangent: &FeatureMap) -> Image {
        let (w, h, c) = (image.width(), image.height(), self.channels);
        assert!(
            cotangent.width == w && cotangent.height == h && cotangent.channels == c,
            "cotangent shape mismatch"
        );
        let fan = self.fan_in();
        let r = (self.kernel / 2) as i64;
        let act = self.activations(image);
        let mut grad = Image::zeros(w, h);
        let gdata = grad.data_mut();
        let mut d_pre = vec![0.0; c];
        let mut d_patch = vec![0.0; fan];

        for o in 0..w * h {
            let t = &act[o * c..(o + 1) * c];
            let g = cotangent.pixel(o);
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let n = math::norm_slice(t);
            if n > FEATURE_NORM_FLOOR {
                // d(t/|t|) = (I - f fᵀ)/|t|
                let fg: f64 = t.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / n;
                for k in 0..c {
                    let f = t[k] / n;
                    d_pre[k] = (g[k] - f * fg) / n * (1.0 - t[k] * t[k]);
                }
            } else {
                for k in 0..c {
                    d_pre[k] = g[k] / FEATURE_NORM_FLOOR * (1.0 - t[k] * t[k]);
                }
            }
            d_patch.fill(0.0);
            for (k, row) in self.weights.chunks_exact(fan).enumerate() {
                let s = d_pre[k];
                if s != 0.0 {
                    d_patch.iter_mut().zip(row).for_each(|(d, wv)| *d += s * wv);
                }
            }
            let (x, y) = ((o % w) as i64, (o / w) as i64);
            let mut k = 0;
            for ky in -r..=r {
                let yy = y + ky;
                for kx in -r..=r {
                    let xx = x + kx;
                    if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                        let q = (yy as usize * w + xx as usize) * 3;
                        gdata[q] += d_patch[k];
                        gdata[q + 1] += d_patch[k + 1];
                        gdata[q + 2] += d_patch[k + 2];
                    }
                    k += 3;
                }
            }
        }
        grad
    }
}

/// Label prototypes: renormalized mean feature over each label's pixels.
pub fn calibrate_prototypes(
    cloud: &PointCloud,
    registry: &mut LabelRegistry,
    views: &[RenderedView],
    encoder: &dyn Encoder,
) -> Result<()> {
    let labels: Vec<String> = registry.labels().to_vec();
    let c = encoder.channels();
    let mut sums = vec![vec![0.0; c]; labels.len()];
    let mut counts = vec![0usize; labels.len()];
    let label_of_point: Vec<Option<usize>> = cloud
        .object_ids()
        .iter()
        .map(|id| registry.label_of(*id).and_then(|l| registry.label_index(l)))
        .collect();

    for rv in views {
        if rv.source_len != cloud.len() {
            return Err(Error::contract("calibration view rendered from another cloud"));
        }
        let fmap = encoder.encode_image(&rv.color);
        for (o, &i) in rv.index.iter().enumerate() {
            if i == EMPTY {
                continue;
            }
            if let Some(l) = label_of_point[i as usize] {
                sums[l]
                    .iter_mut()
                    .zip(fmap.pixel(o))
                    .for_each(|(s, f)| *s += f);
                counts[l] += 1;
            }
        }
    }

    for (l, label) in labels.iter().enumerate() {
        if counts[l] == 0 {
            return Err(Error::Calibration(format!(
                "label {label:?} is not visible in any calibration view"
            )));
        }
        let emb = Embedding::from_vector(core::mem::take(&mut sums[l]))
            .map_err(|_| Error::Calibration(format!("label {label:?} has a zero mean feature")))?;
        registry.set_prototype(label, emb)?;
    }
    Ok(())
}

/// `Flat(features ⊙ mask)`, row-major with channels fastest.
pub fn masked_features(fmap: &FeatureMap, mask: &ObjectMask) -> Result<Vec<f64>> {
    if !fmap.matches_mask(mask) {
        return Err(Error::contract("feature map and mask shapes differ"));
    }
    let c = fmap.channels;
    let mut out = fmap.data.clone();
    for (o, chunk) in out.chunks_exact_mut(c).enumerate() {
        if !mask.get(o) {
            chunk.fill(0.0);
        }
    }
    Ok(out)
}

/// Mean of the masked pixel features (not normalized).
pub fn pooled_feature(fmap: &FeatureMap, mask: &ObjectMask) -> Result<Vec<f64>> {
    if !fmap.matches_mask(mask) {
        return Err(Error::contract("feature map and mask shapes differ"));
    }
    if mask.is_empty() {
        return Err(Error::domain("cannot pool over an empty mask"));
    }
    let mut sum = vec![0.0; fmap.channels];
    for o in 0..fmap.pixel_count() {
        if mask.get(o) {
            sum.iter_mut().zip(fmap.pixel(o)).for_each(|(s, f)| *s += f);
        }
    }
    let n = mask.pixel_count() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(sum)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = (math::norm_slice(a) * math::norm_slice(b)).max(1e-12);
    math::dot_slice(a, b) / d
}

/// Per-pixel argmax label (registry order breaks ties) and its cosine.
fn pixel_label(feature: &[f64], prototypes: &[&Embedding]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (l, p) in prototypes.iter().enumerate() {
        let s = cosine(feature, p.as_slice());
        if s > best.1 {
            best = (l, s);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: String,
    pub label_index: usize,
    /// Mean winning cosine over the masked pixels.
    pub confidence: f64,
    /// Per-label pixel votes in registry order.
    pub votes: Vec<usize>,
}

/// Majority vote of per-pixel nearest prototypes inside `mask`.
pub fn classify_object(
    fmap: &FeatureMap,
    mask: &ObjectMask,
    registry: &LabelRegistry,
) -> Result<Classification> {
    if !fmap.matches_mask(mask) {
        return Err(Error::contract("feature map and mask shapes differ"));
    }
    if mask.is_empty() {
        return Err(Error::domain("cannot classify an empty mask"));
    }
    let prototypes = registry.calibrated()?;
    let mut votes = vec![0usize; prototypes.len()];
    let mut confidence = 0.0;
    for o in 0..fmap.pixel_count() {
        if mask.get(o) {
            let (l, s) = pixel_label(fmap.pixel(o), &prototypes);
            votes[l] += 1;
            confidence += s;
        }
    }
    let mut winner = 0;
    for (l, &v) in votes.iter().enumerate() {
        if v > votes[winner] {
            winner = l;
        }
    }
    Ok(Classification {
        label: registry.labels()[winner].clone(),
        label_index: winner,
        confidence: confidence / mask.pixel_count() as f64,
        votes,
    })
}

/// Top-down grid of aggregated features over the scene's ground plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub rows: usize,
    pub cols: usize,
    channels: usize,
    data: Vec<f64>,
    hits: Vec<u32>,
}

impl SemanticMap {
    pub fn new(min: [f64; 2], max: [f64; 2], cell_size: f64, channels: usize) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(Error::invalid("cell size must be positive"));
        }
        let cols = (math::floor((max[0] - min[0]) / cell_size) as usize + 1).max(1);
        let rows = (math::floor((max[1] - min[1]) / cell_size) as usize + 1).max(1);
        Ok(Self {
            origin: min,
            cell_size,
            rows,
            cols,
            channels,
            data: vec![0.0; rows * cols * channels],
            hits: vec![0; rows * cols],
        })
    }

    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let col = math::floor((x - self.origin[0]) / self.cell_size);
        let row = math::floor((y - self.origin[1]) / self.cell_size);
        (
            (row.max(0.0) as usize).min(self.rows - 1),
            (col.max(0.0) as usize).min(self.cols - 1),
        )
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.cell_size,
            self.origin[1] + (row as f64 + 0.5) * self.cell_size,
        ]
    }

    pub fn hits(&self, row: usize, col: usize) -> u32 {
        self.hits[row * self.cols + col]
    }

    pub fn feature(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.cols + col) * self.channels;
        &self.data[o..o + self.channels]
    }

    fn accumulate(&mut self, x: f64, y: f64, feature: &[f64]) {
        let (r, c) = self.cell_of(x, y);
        let o = r * self.cols + c;
        self.hits[o] += 1;
        self.data[o * self.channels..(o + 1) * self.channels]
            .iter_mut()
            .zip(feature)
            .for_each(|(s, f)| *s += f);
    }

    /// Mean then renormalize every observed cell.
    fn finish(&mut self) {
        let ch = self.channels;
        for (cell, &h) in self.data.chunks_exact_mut(ch).zip(&self.hits) {
            if h == 0 {
                continue;
            }
            cell.iter_mut().for_each(|v| *v /= h as f64);
            let n = math::norm_slice(cell);
            if n > 0.0 {
                cell.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    /// Argmax label of a cell over the registry prototypes.
    pub fn cell_label(&self, row: usize, col: usize, registry: &LabelRegistry) -> Result<Option<usize>> {
        if self.hits(row, col) == 0 {
            return Ok(None);
        }
        let protos = registry.calibrated()?;
        Ok(Some(pixel_label(self.feature(row, col), &protos).0))
    }
}

/// A view contributing to a semantic map: its camera, rendering (for depth
/// and coverage), and the image the agent actually sees.
pub struct MapObservation<'a> {
    pub view: &'a CameraView,
    pub rendered: &'a RenderedView,
    pub image: &'a Image,
}

/// Back-project every covered pixel's feature to its ground-plane cell.
pub fn build_semantic_map(
    observations: &[MapObservation<'_>],
    encoder: &dyn Encoder,
    cloud: &PointCloud,
    cell_size: f64,
) -> Result<SemanticMap> {
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for p in cloud.positions() {
        min = [min[0].min(p[0]), min[1].min(p[1])];
        max = [max[0].max(p[0]), max[1].max(p[1])];
    }
    let mut map = SemanticMap::new(min, max, cell_size, encoder.channels())?;
    for obs in observations {
        let fmap = encoder.encode_image(obs.image);
        let w = obs.rendered.width();
        let mut pixels = Vec::new();
        let mut depths = Vec::new();
        let mut offsets = Vec::new();
        for (o, &i) in obs.rendered.index.iter().enumerate() {
            if i != EMPTY {
                pixels.push(((o % w) as f64, (o / w) as f64));
                depths.push(obs.rendered.depth[o]);
                offsets.push(o);
            }
        }
        let world = back_project(&pixels, &depths, obs.view)?;
        for (p, o) in world.iter().zip(offsets) {
            map.accumulate(p[0], p[1], fmap.pixel(o));
        }
    }
    map.finish();
    Ok(map)
}

/// Cell whose feature is most similar to `label`'s prototype; ties go to
/// the first cell in row-major order.
pub fn localize(map: &SemanticMap, registry: &LabelRegistry, label: &str) -> Result<(usize, usize)> {
    let proto = registry.prototype(label)?;
    let mut best: Option<((usize, usize), f64)> = None;
    for r in 0..map.rows {
        for c in 0..map.cols {
            if map.hits(r, c) == 0 {
                continue;
            }
            let s = cosine(map.feature(r, c), proto.as_slice());
            if best.is_none_or(|(_, b)| s > b) {
                best = Some(((r, c), s));
            }
        }
    }
    best.map(|(cell, _)| cell)
        .ok_or_else(|| Error::NotFound("the semantic map has no observed cell".into()))
}
