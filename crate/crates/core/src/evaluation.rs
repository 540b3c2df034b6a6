//! Attack metrics over held-out views, the localization proxy, and the image
//! defenses used in robustness sweeps.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::alignment::VictimObject;
use crate::error::{Error, Result};
use crate::geometry::{self, ObjectMask, RenderedView, EMPTY};
use crate::image::Image;
use crate::losses::AttackMode;
use crate::math::{floor, round, sqrt, tan};
use crate::optimizer::Perturbation;
use crate::perception::{self, classify_object, Classification, Encoder, MapObservation};
use crate::scene::{CameraView, LabelRegistry, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DefenseKind {
    Shear,
    Scale,
    GaussianNoise,
    BrightnessUp,
    BrightnessDown,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 5] = [
        DefenseKind::Shear,
        DefenseKind::Scale,
        DefenseKind::GaussianNoise,
        DefenseKind::BrightnessUp,
        DefenseKind::BrightnessDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::Shear => "shear",
            DefenseKind::Scale => "scale",
            DefenseKind::GaussianNoise => "gaussian",
            DefenseKind::BrightnessUp => "brightness-up",
            DefenseKind::BrightnessDown => "brightness-down",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown defense kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefenseTransform {
    pub kind: DefenseKind,
    /// Shear angle range in degrees.
    pub shear_range: (f64, f64),
    pub scale: f64,
    pub sigma: f64,
    /// Brightness multiplier.
    pub factor: f64,
    pub seed: u64,
}

impl DefenseTransform {
    /// The standard parameters of each defense.
    pub fn standard(kind: DefenseKind, seed: u64) -> Self {
        Self {
            kind,
            shear_range: (-16.0, 16.0),
            scale: 0.8,
            sigma: 0.1,
            factor: match kind {
                DefenseKind::BrightnessDown => 0.5,
                _ => 1.5,
            },
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Shear angle in degrees drawn from the range.
    pub fn shear_angle(&self) -> f64 {
        let (lo, hi) = self.shear_range;
        if lo == hi {
            return lo;
        }
        ChaCha8Rng::seed_from_u64(self.seed).random_range(lo..hi)
    }

    fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            DefenseKind::Shear => self.shear_range.0 <= self.shear_range.1 && self.shear_range.0 > -89.0 && self.shear_range.1 < 89.0,
            DefenseKind::Scale => self.scale > 0.0 && self.scale.is_finite(),
            DefenseKind::GaussianNoise => self.sigma >= 0.0 && self.sigma.is_finite(),
            DefenseKind::BrightnessUp | DefenseKind::BrightnessDown => self.factor >= 0.0 && self.factor.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("{} parameters out of range", self.kind.name())))
        }
    }

    /// Source position sampled for output pixel `(x, y)` by the geometric
    /// defenses, or `None` for photometric ones.
    pub fn source_of(&self, x: f64, y: f64, width: usize, height: usize) -> Option<(f64, f64)> {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        match self.kind {
            DefenseKind::Shear => {
                let k = tan(self.shear_angle().to_radians());
                Some((x - k * (y - cy), y))
            }
            DefenseKind::Scale => Some((cx + (x - cx) / self.scale, cy + (y - cy) / self.scale)),
            _ => None,
        }
    }
}

fn bilinear(img: &Image, sx: f64, sy: f64) -> [f64; 3] {
    let (w, h) = (img.width(), img.height());
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (floor(sx) as usize, floor(sy) as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
    let (a, b, c, d) = (img.get(x0, y0), img.get(x1, y0), img.get(x0, y1), img.get(x1, y1));
    let mut out = [0.0; 3];
    for k in 0..3 {
        let top = a[k] * (1.0 - tx) + b[k] * tx;
        let bottom = c[k] * (1.0 - tx) + d[k] * tx;
        out[k] = top * (1.0 - ty) + bottom * ty;
    }
    out
}

fn warp(img: &Image, t: &DefenseTransform) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = t.source_of(x as f64, y as f64, w, h).expect("geometric");
            out.set(x, y, bilinear(img, sx, sy));
        }
    }
    out
}

/// Apply a defense to an image in `[0, 1]`.
pub fn apply_defense(image: &Image, t: &DefenseTransform) -> Result<Image> {
    t.validate()?;
    if image.pixel_count() == 0 {
        return Ok(image.clone());
    }
    Ok(match t.kind {
        DefenseKind::Shear | DefenseKind::Scale => warp(image, t),
        DefenseKind::GaussianNoise => {
            let normal = Normal::new(0.0, t.sigma).map_err(|_| Error::invalid("noise sigma"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
            let mut out = image.clone();
            for v in out.data_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
            out
        }
        DefenseKind::BrightnessUp | DefenseKind::BrightnessDown => {
            let mut out = image.clone();
            for v in out.data_mut() {
                *v = (*v * t.factor).clamp(0.0, 1.0);
            }
            out
        }
    })
}

/// Move a mask along with the image under a geometric defense
/// (nearest-neighbor, edge-replicate).
pub fn warp_mask(mask: &ObjectMask, t: &DefenseTransform) -> Result<ObjectMask> {
    let (w, h) = (mask.width(), mask.height());
    if matches!(t.kind, DefenseKind::Shear | DefenseKind::Scale) && w > 0 && h > 0 {
        let mut bits = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = t.source_of(x as f64, y as f64, w, h).expect("geometric");
                let sx = round(sx).clamp(0.0, (w - 1) as f64) as usize;
                let sy = round(sy).clamp(0.0, (h - 1) as f64) as usize;
                bits[y * w + x] = mask.get(sy * w + sx);
            }
        }
        ObjectMask::new(w, h, bits, mask.object_id, mask.score)
    } else {
        Ok(mask.clone())
    }
}

/// Benign and attacked classification of one object in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEvaluation {
    pub object_id: u32,
    pub true_label: String,
    pub benign: Classification,
    pub attacked: Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewEvaluation {
    pub view_id: u32,
    pub victim: ObjectEvaluation,
    pub background: Vec<ObjectEvaluation>,
    pub defense: Option<DefenseKind>,
}

/// Evaluation inputs shared by every held-out view.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub cloud: &'a PointCloud,
    pub delta: &'a Perturbation,
    pub victim: &'a VictimObject,
    /// Victim membership per cloud point.
    pub membership: &'a [bool],
    pub encoder: &'a dyn Encoder,
    pub registry: &'a LabelRegistry,
    pub defense: Option<&'a DefenseTransform>,
}

/// Classify the victim and every visible background object in one view;
/// `None` when the victim is not visible.
pub fn evaluate_view(ctx: &EvalContext<'_>, rendered: &RenderedView) -> Result<Option<ViewEvaluation>> {
    let victim_mask = ObjectMask::from_points(rendered, 0, 1.0, |i| ctx.membership[i])?;
    if victim_mask.is_empty() {
        return Ok(None);
    }
    let delta_img = geometry::render_perturbation(ctx.delta, rendered)?;
    let mut benign = rendered.color.clone();
    let mut attacked = geometry::adversarial_image(rendered, &delta_img)?;
    // Per-view seed so noise and shear differ between views.
    let defense = ctx.defense.map(|d| d.with_seed(d.seed ^ (rendered.view_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    if let Some(d) = &defense {
        benign = apply_defense(&benign, d)?;
        attacked = apply_defense(&attacked, d)?;
    }
    let fb = ctx.encoder.encode_image(&benign);
    let fa = ctx.encoder.encode_image(&attacked);

    let classify = |mask: &ObjectMask, id: u32, label: &str| -> Result<Option<ObjectEvaluation>> {
        let mask = match &defense {
            Some(d) => warp_mask(mask, d)?,
            None => mask.clone(),
        };
        if mask.is_empty() {
            return Ok(None);
        }
        Ok(Some(ObjectEvaluation {
            object_id: id,
            true_label: label.into(),
            benign: classify_object(&fb, &mask, ctx.registry)?,
            attacked: classify_object(&fa, &mask, ctx.registry)?,
        }))
    };

    let Some(victim) = classify(&victim_mask, 0, &ctx.victim.label)? else {
        return Ok(None);
    };

    let ids = ctx.cloud.object_ids();
    let mut present: BTreeMap<u32, ()> = BTreeMap::new();
    for &i in &rendered.index {
        if i != EMPTY && !ctx.membership[i as usize] {
            present.insert(ids[i as usize], ());
        }
    }
    let mut background = Vec::new();
    for &id in present.keys() {
        let Some(label) = ctx.registry.label_of(id) else {
            continue;
        };
        if !ctx.registry.contains_label(label) || ctx.registry.prototype(label).is_err() {
            continue;
        }
        let mask = ObjectMask::from_points(rendered, id, 1.0, |i| ids[i] == id && !ctx.membership[i])?;
        if let Some(e) = classify(&mask, id, label)? {
            background.push(e);
        }
    }
    Ok(Some(ViewEvaluation {
        view_id: rendered.view_id,
        victim,
        background,
        defense: ctx.defense.map(|d| d.kind),
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundDelta {
    pub object_id: u32,
    pub label: String,
    pub views: usize,
    pub benign_acc: f64,
    pub attacked_acc: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub victim_label: String,
    pub mode: AttackMode,
    pub target_label: Option<String>,
    pub defense: Option<DefenseKind>,
    pub benign_acc: f64,
    pub attacked_acc: f64,
    pub untargeted_asr: f64,
    pub targeted_asr: Option<f64>,
    pub background: Vec<BackgroundDelta>,
    pub mean_background_delta: f64,
    pub sr: Option<LocalizationOutcome>,
    pub records: Vec<ViewEvaluation>,
    /// Held-out views where the victim was not visible.
    pub excluded_views: Vec<u32>,
}

impl AttackReport {
    /// Aggregate per-view evaluations.
    pub fn summarize(
        victim_label: &str,
        mode: AttackMode,
        target_label: Option<&str>,
        defense: Option<DefenseKind>,
        records: Vec<ViewEvaluation>,
        excluded_views: Vec<u32>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::domain("the victim is visible in no evaluation view"));
        }
        let n = records.len() as f64;
        let count = |f: &dyn Fn(&ViewEvaluation) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n;
        let benign_acc = count(&|r| r.victim.benign.label == victim_label);
        let attacked_acc = count(&|r| r.victim.attacked.label == victim_label);
        let targeted_asr = target_label.map(|t| count(&|r| r.victim.attacked.label == t));

        let mut per_object: BTreeMap<u32, (String, usize, usize, usize)> = BTreeMap::new();
        for r in &records {
            for b in &r.background {
                let e = per_object.entry(b.object_id).or_insert((b.true_label.clone(), 0, 0, 0));
                e.1 += 1;
                e.2 += (b.benign.label == b.true_label) as usize;
                e.3 += (b.attacked.label == b.true_label) as usize;
            }
        }
        let background: Vec<BackgroundDelta> = per_object
            .into_iter()
            .map(|(object_id, (label, views, ok_b, ok_a))| {
                let benign_acc = ok_b as f64 / views as f64;
                let attacked_acc = ok_a as f64 / views as f64;
                BackgroundDelta {
                    object_id,
                    label,
                    views,
                    benign_acc,
                    attacked_acc,
                    delta: attacked_acc - benign_acc,
                }
            })
            .collect();
        let mean_background_delta = if background.is_empty() {
            0.0
        } else {
            background.iter().map(|b| b.delta.abs()).sum::<f64>() / background.len() as f64
        };
        Ok(Self {
            victim_label: victim_label.into(),
            mode,
            target_label: target_label.map(Into::into),
            defense,
            benign_acc,
            attacked_acc,
            untargeted_asr: 1.0 - attacked_acc,
            targeted_asr,
            background,
            mean_background_delta,
            sr: None,
            records,
            excluded_views,
        })
    }

    /// One row per view and object.
    pub fn csv(&self) -> String {
        let mut s = String::from("view_id,object_id,role,true_label,benign_label,attacked_label,benign_conf,attacked_conf,defense\n");
        let defense = self.defense.map_or("none", |d| d.name());
        for r in &self.records {
            let rows = core::iter::once(("victim", &r.victim)).chain(r.background.iter().map(|b| ("background", b)));
            for (role, e) in rows {
                s += &format!(
                    "{},{},{},{},{},{},{:.9},{:.9},{}\n",
                    r.view_id,
                    e.object_id,
                    role,
                    e.true_label,
                    e.benign.label,
                    e.attacked.label,
                    e.benign.confidence,
                    e.attacked.confidence,
                    defense
                );
            }
        }
        s
    }
}

impl fmt::Display for AttackReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "attack-report v1")?;
        writeln!(f, "victim {}", self.victim_label)?;
        writeln!(f, "mode {}", self.mode.name())?;
        writeln!(f, "target {}", self.target_label.as_deref().unwrap_or("-"))?;
        writeln!(f, "defense {}", self.defense.map_or("none", |d| d.name()))?;
        writeln!(f, "views {} excluded {}", self.records.len(), self.excluded_views.len())?;
        writeln!(f, "benign_acc {:.6}", self.benign_acc)?;
        writeln!(f, "attacked_acc {:.6}", self.attacked_acc)?;
        writeln!(f, "untargeted_asr {:.6}", self.untargeted_asr)?;
        match self.targeted_asr {
            Some(t) => writeln!(f, "targeted_asr {t:.6}")?,
            None => writeln!(f, "targeted_asr -")?,
        }
        writeln!(f, "mean_background_delta {:.6}", self.mean_background_delta)?;
        for b in &self.background {
            writeln!(
                f,
                "background {} {} views {} benign {:.6} attacked {:.6} delta {:+.6}",
                b.object_id, b.label, b.views, b.benign_acc, b.attacked_acc, b.delta
            )?;
        }
        if let Some(sr) = &self.sr {
            writeln!(
                f,
                "sr benign {} attacked {} no_true_cell {}",
                sr.benign as u8, sr.attacked as u8, sr.no_true_cell as u8
            )?;
        }
        for id in &self.excluded_views {
            writeln!(f, "excluded {id}")?;
        }
        for r in &self.records {
            writeln!(
                f,
                "view {} benign {} {:.6} attacked {} {:.6}",
                r.view_id, r.victim.benign.label, r.victim.benign.confidence, r.victim.attacked.label, r.victim.attacked.confidence
            )?;
        }
        Ok(())
    }
}

/// Evaluate `ctx` on every held-out rendering.
pub fn evaluate_attack(
    ctx: &EvalContext<'_>,
    heldout: &[RenderedView],
    mode: AttackMode,
    target_label: Option<&str>,
) -> Result<AttackReport> {
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for rv in heldout {
        match evaluate_view(ctx, rv)? {
            Some(r) => records.push(r),
            None => excluded.push(rv.view_id),
        }
    }
    AttackReport::summarize(
        &ctx.victim.label,
        mode,
        target_label,
        ctx.defense.map(|d| d.kind),
        records,
        excluded,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationOutcome {
    pub benign: bool,
    pub attacked: bool,
    /// The attacked map has no cell whose nearest prototype is the label.
    pub no_true_cell: bool,
    pub benign_cell: (usize, usize),
    pub attacked_cell: (usize, usize),
    pub benign_distance: f64,
    pub attacked_distance: f64,
}

fn observations<'a>(cameras: &'a [CameraView], rendered: &'a [RenderedView], images: &[&'a Image]) -> Vec<MapObservation<'a>> {
    cameras
        .iter()
        .zip(rendered)
        .zip(images)
        .map(|((view, rv), image)| MapObservation {
            view,
            rendered: rv,
            image,
        })
        .collect()
}

/// Localize the victim label on semantic maps built from benign and
/// perturbed renderings; success means the chosen cell's center lies within
/// `threshold` meters of the victim centroid on the ground plane.
#[allow(clippy::too_many_arguments)]
pub fn localization_success(
    cloud: &PointCloud,
    delta: &Perturbation,
    victim: &VictimObject,
    cameras: &[CameraView],
    rendered: &[RenderedView],
    encoder: &dyn Encoder,
    registry: &LabelRegistry,
    threshold: f64,
    cell_size: f64,
) -> Result<LocalizationOutcome> {
    if !(cell_size > 0.0) || cell_size > threshold / 2.0 {
        return Err(Error::invalid("semantic map cell size must be in (0, threshold/2]"));
    }
    if cameras.len() != rendered.len() {
        return Err(Error::contract("camera and rendering lists differ in length"));
    }
    let attacked: Vec<Image> = rendered
        .iter()
        .map(|rv| geometry::adversarial_image(rv, &geometry::render_perturbation(delta, rv)?))
        .collect::<Result<_>>()?;
    let benign_imgs: Vec<&Image> = rendered.iter().map(|rv| &rv.color).collect();
    let attacked_imgs: Vec<&Image> = attacked.iter().collect();
    let benign_map = perception::build_semantic_map(&observations(cameras, rendered, &benign_imgs), encoder, cloud, cell_size)?;
    let attacked_map = perception::build_semantic_map(&observations(cameras, rendered, &attacked_imgs), encoder, cloud, cell_size)?;

    let label = &victim.label;
    let target = registry
        .label_index(label)
        .ok_or_else(|| Error::NotFound(format!("label {label:?}")))?;
    let dist = |map: &perception::SemanticMap, cell: (usize, usize)| {
        let c = map.cell_center(cell.0, cell.1);
        let (dx, dy) = (c[0] - victim.centroid[0], c[1] - victim.centroid[1]);
        sqrt(dx * dx + dy * dy)
    };
    let benign_cell = perception::localize(&benign_map, registry, label)?;
    let attacked_cell = perception::localize(&attacked_map, registry, label)?;
    let mut no_true_cell = true;
    for r in 0..attacked_map.rows {
        for c in 0..attacked_map.cols {
            if attacked_map.cell_label(r, c, registry)? == Some(target) {
                no_true_cell = false;
            }
        }
    }
    let (bd, ad) = (dist(&benign_map, benign_cell), dist(&attacked_map, attacked_cell));
    Ok(LocalizationOutcome {
        benign: bd <= threshold,
        attacked: ad <= threshold && !no_true_cell,
        no_true_cell,
        benign_cell,
        attacked_cell,
        benign_distance: bd,
        attacked_distance: ad,
    })
}
