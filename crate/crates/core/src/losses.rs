//! 3D regularizers and masked feature losses.
//!
//! Every 2D term is a cosine similarity between flattened, mask-gated feature
//! maps (or a pooled feature against a label embedding). [`l_2d`] returns the
//! composite value together with its cotangent with respect to the
//! adversarial feature map, ready for the encoder's vector-Jacobian product.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::ObjectMask;
use crate::image::Image;
use crate::math::{self, dist2, Vec3};
use crate::perception::{Embedding, FeatureMap};
use crate::scene::Rgb;

/// Floor of the cosine denominator.
pub const COSINE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    Untargeted,
    Targeted,
}

impl AttackMode {
    pub fn name(self) -> &'static str {
        match self {
            AttackMode::Untargeted => "untargeted",
            AttackMode::Targeted => "targeted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "untargeted" => Some(AttackMode::Untargeted),
            "targeted" => Some(AttackMode::Targeted),
            _ => None,
        }
    }
}

/// Whether the image-to-image term is restricted to the object mask.
///
/// `WholeImage` compares unmasked feature maps and only exists for
/// diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum I2iScope {
    #[default]
    Masked,
    WholeImage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// The 2D composite.
    pub total: f64,
    pub color: f64,
    pub chamfer: f64,
    pub i2i: f64,
    pub i2t: f64,
    pub b2b: f64,
    pub mode: AttackMode,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    /// The 2D composite recomputed from the components.
    pub fn composite(&self) -> f64 {
        compose(self.mode, self.i2i, self.i2t, self.b2b, self.alpha, self.beta)
    }
}

fn compose(mode: AttackMode, i2i: f64, i2t: f64, b2b: f64, alpha: f64, beta: f64) -> f64 {
    match mode {
        AttackMode::Untargeted => i2i + alpha * i2t - beta * b2b,
        AttackMode::Targeted => -i2i - alpha * i2t - beta * b2b,
    }
}

/// Reference rendering of the target label for targeted attacks.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetExemplar {
    pub image: Image,
    pub mask: ObjectMask,
    pub label: String,
}

impl TargetExemplar {
    pub fn new(image: Image, mask: ObjectMask, label: String) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::invalid("target exemplar mask is empty"));
        }
        if mask.width() != image.width() || mask.height() != image.height() {
            return Err(Error::contract("target exemplar image and mask shapes differ"));
        }
        Ok(Self { image, mask, label })
    }
}

/// Sum of squared RGB differences.
pub fn l_color(adv: &[Rgb], orig: &[Rgb]) -> Result<f64> {
    Ok(l_color_with_grad(adv, orig)?.0)
}

/// Value and gradient `2(adv - orig)`.
pub fn l_color_with_grad(adv: &[Rgb], orig: &[Rgb]) -> Result<(f64, Vec<Rgb>)> {
    if adv.len() != orig.len() {
        return Err(Error::contract("color arrays differ in length"));
    }
    let mut value = 0.0;
    let grad = adv
        .iter()
        .zip(orig)
        .map(|(a, o)| {
            let d = [a[0] - o[0], a[1] - o[1], a[2] - o[2]];
            value += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            [2.0 * d[0], 2.0 * d[1], 2.0 * d[2]]
        })
        .collect();
    Ok((value, grad))
}

/// Symmetric Chamfer distance with squared Euclidean terms.
pub fn l_chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    Ok(chamfer_minima(a, b)?.value)
}

/// Value and gradient with respect to `a`, nearest-neighbor assignments held
/// fixed.
pub fn l_chamfer_with_grad(a: &[Vec3], b: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    let m = chamfer_minima(a, b)?;
    let mut grad = vec![[0.0; 3]; a.len()];
    for (i, x) in a.iter().enumerate() {
        let y = b[m.nearest_in_b[i]];
        grad[i] = math::add(grad[i], math::scale(math::sub(*x, y), 2.0));
    }
    for (j, y) in b.iter().enumerate() {
        let i = m.nearest_in_a[j];
        grad[i] = math::add(grad[i], math::scale(math::sub(a[i], *y), 2.0));
    }
    Ok((m.value, grad))
}

struct ChamferMinima {
    value: f64,
    nearest_in_b: Vec<usize>,
    nearest_in_a: Vec<usize>,
}

/// One pass over the distance matrix tracking row and column minima; ties
/// resolve to the lower index.
fn chamfer_minima(a: &[Vec3], b: &[Vec3]) -> Result<ChamferMinima> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("Chamfer distance of an empty set"));
    }
    let mut row = vec![(f64::INFINITY, 0usize); a.len()];
    let mut col = vec![(f64::INFINITY, 0usize); b.len()];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            let d = dist2(*x, *y);
            if d < row[i].0 {
                row[i] = (d, j);
            }
            if d < col[j].0 {
                col[j] = (d, i);
            }
        }
    }
    let forward: f64 = row.iter().map(|r| r.0).sum();
    let backward: f64 = col.iter().map(|c| c.0).sum();
    Ok(ChamferMinima {
        value: forward + backward,
        nearest_in_b: row.iter().map(|r| r.1).collect(),
        nearest_in_a: col.iter().map(|c| c.1).collect(),
    })
}

/// Positions and colors of an object's points.
#[derive(Debug, Clone, Copy)]
pub struct ObjectPoints<'a> {
    pub positions: &'a [Vec3],
    pub colors: &'a [Rgb],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loss3d {
    pub color: f64,
    pub chamfer: f64,
    pub total: f64,
    pub grad_color: Vec<Rgb>,
    pub grad_position: Vec<Vec3>,
}

/// Color similarity plus Chamfer shape similarity.
pub fn l_3d(adv: ObjectPoints<'_>, orig: ObjectPoints<'_>) -> Result<Loss3d> {
    let (color, grad_color) = l_color_with_grad(adv.colors, orig.colors)?;
    let (chamfer, grad_position) = l_chamfer_with_grad(adv.positions, orig.positions)?;
    Ok(Loss3d {
        color,
        chamfer,
        total: color + chamfer,
        grad_color,
        grad_position,
    })
}

/// Cosine of two flattened, mask-gated feature maps.
///
/// When `grad` is given, `coeff · ∂cos/∂a` is added into it (only at pixels
/// selected by `sel_a`).
fn masked_cosine(
    a: &FeatureMap,
    sel_a: &dyn Fn(usize) -> bool,
    b: &FeatureMap,
    sel_b: &dyn Fn(usize) -> bool,
    grad: Option<(&mut FeatureMap, f64)>,
) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for o in 0..a.pixel_count() {
        let (ia, ib) = (sel_a(o), sel_b(o));
        if ia {
            let fa = a.pixel(o);
            aa += math::dot_slice(fa, fa);
            if ib {
                ab += math::dot_slice(fa, b.pixel(o));
            }
        }
        if ib {
            let fb = b.pixel(o);
            bb += math::dot_slice(fb, fb);
        }
    }
    let (na, nb) = (math::sqrt(aa), math::sqrt(bb));
    let raw = na * nb;
    let denom = raw.max(COSINE_FLOOR);
    let value = ab / denom;
    if let Some((g, coeff)) = grad {
        let floored = raw <= COSINE_FLOOR;
        for o in 0..a.pixel_count() {
            if !sel_a(o) {
                continue;
            }
            let fa = a.pixel(o);
            let fb = if sel_b(o) { Some(b.pixel(o)) } else { None };
            let out = g.pixel_mut(o);
            for k in 0..out.len() {
                let bk = fb.map_or(0.0, |f| f[k]);
                let d = if floored {
                    bk / denom
                } else {
                    bk / denom - value * fa[k] / aa
                };
                out[k] += coeff * d;
            }
        }
    }
    value
}

/// Cosine of the mean masked feature with an embedding; optionally adds
/// `coeff · ∂/∂a` into `grad`.
fn pooled_cosine(
    a: &FeatureMap,
    mask: &ObjectMask,
    emb: &Embedding,
    grad: Option<(&mut FeatureMap, f64)>,
) -> f64 {
    let c = a.channels();
    let n = mask.pixel_count() as f64;
    let mut pooled = vec![0.0; c];
    for o in 0..a.pixel_count() {
        if mask.get(o) {
            pooled.iter_mut().zip(a.pixel(o)).for_each(|(p, f)| *p += f);
        }
    }
    pooled.iter_mut().for_each(|p| *p /= n);
    let e = emb.as_slice();
    let pp = math::dot_slice(&pooled, &pooled);
    let raw = math::sqrt(pp) * math::norm_slice(e);
    let denom = raw.max(COSINE_FLOOR);
    let value = math::dot_slice(&pooled, e) / denom;
    if let Some((g, coeff)) = grad {
        let dp: Vec<f64> = (0..c)
            .map(|k| {
                if raw <= COSINE_FLOOR {
                    e[k] / denom
                } else {
                    e[k] / denom - value * pooled[k] / pp
                }
            })
            .collect();
        for o in 0..a.pixel_count() {
            if mask.get(o) {
                g.pixel_mut(o)
                    .iter_mut()
                    .zip(&dp)
                    .for_each(|(gv, d)| *gv += coeff * d / n);
            }
        }
    }
    value
}

/// Everything [`l_2d`] needs besides the adversarial features.
#[derive(Debug, Clone, Copy)]
pub struct L2dInputs<'a> {
    /// Benign features of the same view.
    pub benign: &'a FeatureMap,
    /// Victim object mask in this view.
    pub mask: &'a ObjectMask,
    /// Embedding of the victim label (untargeted) or target label (targeted).
    pub label_embedding: &'a Embedding,
    /// Target exemplar features and mask; required in targeted mode.
    pub exemplar: Option<(&'a FeatureMap, &'a ObjectMask)>,
    pub mode: AttackMode,
    pub alpha: f64,
    pub beta: f64,
    pub scope: I2iScope,
}

/// Composite 2D loss and its cotangent with respect to `adv`.
pub fn l_2d(adv: &FeatureMap, inp: &L2dInputs<'_>) -> Result<(LossBreakdown, FeatureMap)> {
    let mut cot = FeatureMap::zeros(adv.width(), adv.height(), adv.channels());
    let b = l_2d_impl(adv, inp, Some(&mut cot))?;
    Ok((b, cot))
}

/// Composite 2D loss without the gradient.
pub fn l_2d_value(adv: &FeatureMap, inp: &L2dInputs<'_>) -> Result<LossBreakdown> {
    l_2d_impl(adv, inp, None)
}

fn l_2d_impl(
    adv: &FeatureMap,
    inp: &L2dInputs<'_>,
    mut cot: Option<&mut FeatureMap>,
) -> Result<LossBreakdown> {
    let mask = inp.mask;
    if !adv.same_shape(inp.benign) || mask.width() != adv.width() || mask.height() != adv.height() {
        return Err(Error::contract("feature maps and mask shapes differ"));
    }
    if mask.is_empty() {
        return Err(Error::domain("2D loss needs a non-empty object mask"));
    }
    if inp.label_embedding.dim() != adv.channels() {
        return Err(Error::contract("label embedding dimension differs from features"));
    }
    let (sign_i2i, sign_i2t) = match inp.mode {
        AttackMode::Untargeted => (1.0, inp.alpha),
        AttackMode::Targeted => (-1.0, -inp.alpha),
    };

    let in_mask = |o: usize| mask.get(o);
    let out_mask = |o: usize| !mask.get(o);
    let all = |_: usize| true;

    let i2i = match inp.mode {
        AttackMode::Untargeted => {
            let sel: &dyn Fn(usize) -> bool = match inp.scope {
                I2iScope::Masked => &in_mask,
                I2iScope::WholeImage => &all,
            };
            masked_cosine(adv, sel, inp.benign, sel, cot.as_deref_mut().map(|g| (g, sign_i2i)))
        }
        AttackMode::Targeted => {
            let (ex, ex_mask) = inp
                .exemplar
                .ok_or_else(|| Error::contract("targeted mode needs a target exemplar"))?;
            if !ex.same_shape(adv) || ex_mask.width() != adv.width() || ex_mask.height() != adv.height() {
                return Err(Error::contract("target exemplar does not match the view shape"));
            }
            let ex_sel = |o: usize| ex_mask.get(o);
            match inp.scope {
                I2iScope::Masked => masked_cosine(
                    adv,
                    &in_mask,
                    ex,
                    &ex_sel,
                    cot.as_deref_mut().map(|g| (g, sign_i2i)),
                ),
                I2iScope::WholeImage => {
                    masked_cosine(adv, &all, ex, &all, cot.as_deref_mut().map(|g| (g, sign_i2i)))
                }
            }
        }
    };
    let i2t = pooled_cosine(
        adv,
        mask,
        inp.label_embedding,
        cot.as_deref_mut().map(|g| (g, sign_i2t)),
    );
    let b2b = masked_cosine(
        adv,
        &out_mask,
        inp.benign,
        &out_mask,
        cot.map(|g| (g, -inp.beta)),
    );

    Ok(LossBreakdown {
        total: compose(inp.mode, i2i, i2t, b2b, inp.alpha, inp.beta),
        color: 0.0,
        chamfer: 0.0,
        i2i,
        i2t,
        b2b,
        mode: inp.mode,
        alpha: inp.alpha,
        beta: inp.beta,
    })
}

/// Plain cosine of two vectors with the floored denominator.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let d = (math::norm_slice(a) * math::norm_slice(b)).max(COSINE_FLOOR);
    math::dot_slice(a, b) / d
}
