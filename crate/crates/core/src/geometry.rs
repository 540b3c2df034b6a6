//! Pinhole projection, z-buffered point splatting, and the rendering of
//! per-point perturbations into image space.
//!
//! Rendering of a perturbation is linear in the per-point deltas once the
//! point-index map of a view is fixed: every pixel copies the delta of its
//! frontmost point. [`scatter`] is the exact adjoint of that gather.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{self, Vec3};
use crate::optimizer::Perturbation;
use crate::scene::{CameraView, PointCloud, Rgb};

/// Point-index value for pixels no point covers.
pub const EMPTY: u32 = u32::MAX;

/// Depths closer than this are treated as ties and resolved by point index.
pub const DEPTH_TIE: f64 = 1e-12;

/// Projects a world point; `None` when it is not strictly in front of the
/// camera. Returns continuous pixel coordinates and camera-space depth.
pub fn project(view: &CameraView, p: Vec3) -> Option<(f64, f64, f64)> {
    let c = view.to_camera(p);
    if !(c[2] > 0.0) {
        return None;
    }
    let k = &view.intrinsics;
    Some((k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy, c[2]))
}

/// Inverse of [`project`] given the depth of each pixel.
pub fn back_project(pixels: &[(f64, f64)], depths: &[f64], view: &CameraView) -> Result<Vec<Vec3>> {
    if pixels.len() != depths.len() {
        return Err(Error::contract("pixel and depth lists differ in length"));
    }
    let k = &view.intrinsics;
    pixels
        .iter()
        .zip(depths)
        .map(|(&(u, v), &d)| {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::domain("back-projection needs a positive depth"));
            }
            let cam = [(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d];
            Ok(view.to_world(cam))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub view_id: u32,
    pub color: Image,
    /// Camera-space depth, `+inf` where empty.
    pub depth: Vec<f64>,
    /// Frontmost point per pixel, [`EMPTY`] where empty.
    pub index: Vec<u32>,
    /// Number of points in the source cloud.
    pub source_len: usize,
}

impl RenderedView {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }

    pub fn pixel_count(&self) -> usize {
        self.index.len()
    }

    /// Sorted distinct point indices owning at least one pixel.
    pub fn visible_points(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .index
            .iter()
            .filter(|&&i| i != EMPTY)
            .map(|&i| i as usize)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Splat every point as a disc of `splat_radius` pixels; per pixel the point
/// with the smallest positive depth wins, ties (within [`DEPTH_TIE`]) going to
/// the lower point index.
pub fn rasterize(cloud: &PointCloud, view: &CameraView, splat_radius: u32) -> RenderedView {
    let (w, h) = (view.width, view.height);
    let mut color = Image::zeros(w, h);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut index = vec![EMPTY; w * h];
    let r = splat_radius as i64;
    let r2 = r * r;

    for (i, (&p, rgb)) in cloud.positions().iter().zip(cloud.colors()).enumerate() {
        let Some((u, v, z)) = project(view, p) else {
            continue;
        };
        let (pu, pv) = (math::round(u), math::round(v));
        if !(pu > -1.0 - r as f64 && pu < (w as i64 + r) as f64)
            || !(pv > -1.0 - r as f64 && pv < (h as i64 + r) as f64)
        {
            continue;
        }
        let (pu, pv) = (pu as i64, pv as i64);
        for dv in -r..=r {
            for du in -r..=r {
                if du * du + dv * dv > r2 {
                    continue;
                }
                let (x, y) = (pu + du, pv + dv);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                let o = y as usize * w + x as usize;
                let current = depth[o];
                let wins = z < current - DEPTH_TIE
                    || ((z - current).abs() <= DEPTH_TIE && (i as u32) < index[o]);
                if wins {
                    depth[o] = z;
                    index[o] = i as u32;
                    color.set(x as usize, y as usize, *rgb);
                }
            }
        }
    }

    RenderedView {
        view_id: view.id,
        color,
        depth,
        index,
        source_len: cloud.len(),
    }
}

/// Gather per-point RGB deltas through the point-index map.
pub fn render_perturbation(delta: &Perturbation, rendered: &RenderedView) -> Result<Image> {
    render_rgb(delta.rgb(), rendered)
}

pub(crate) fn render_rgb(rgb: &[Rgb], rendered: &RenderedView) -> Result<Image> {
    if rgb.len() != rendered.source_len {
        return Err(Error::contract(alloc::format!(
            "perturbation covers {} points but the view was rendered from {}",
            rgb.len(),
            rendered.source_len
        )));
    }
    let mut out = Image::zeros(rendered.width(), rendered.height());
    let data = out.data_mut();
    for (o, &i) in rendered.index.iter().enumerate() {
        if i != EMPTY {
            data[o * 3..o * 3 + 3].copy_from_slice(&rgb[i as usize]);
        }
    }
    Ok(out)
}

/// Adjoint of [`render_perturbation`]: accumulate a pixel-space cotangent
/// onto the points that own each pixel.
pub fn scatter(grad: &Image, rendered: &RenderedView) -> Result<Vec<Rgb>> {
    if grad.width() != rendered.width() || grad.height() != rendered.height() {
        return Err(Error::contract("cotangent image does not match the view"));
    }
    let mut out = vec![[0.0; 3]; rendered.source_len];
    let data = grad.data();
    for (o, &i) in rendered.index.iter().enumerate() {
        if i != EMPTY {
            let acc = &mut out[i as usize];
            acc[0] += data[o * 3];
            acc[1] += data[o * 3 + 1];
            acc[2] += data[o * 3 + 2];
        }
    }
    Ok(out)
}

/// `clamp(color + delta_image, 0, 1)`, the adversarial view image.
pub fn adversarial_image(rendered: &RenderedView, delta_image: &Image) -> Result<Image> {
    rendered.color.add_clamped(delta_image)
}

/// Binary mask of a single object in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
    pub object_id: u32,
    pub score: f64,
    pixel_count: usize,
}

impl ObjectMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>, object_id: u32, score: f64) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::contract("mask size does not match its dimensions"));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid("mask score outside [0, 1]"));
        }
        let pixel_count = bits.iter().filter(|b| **b).count();
        Ok(Self {
            width,
            height,
            bits,
            object_id,
            score,
            pixel_count,
        })
    }

    /// Pixels owned by any point whose index satisfies `keep`.
    pub fn from_points(
        rendered: &RenderedView,
        object_id: u32,
        score: f64,
        keep: impl Fn(usize) -> bool,
    ) -> Result<Self> {
        let bits = rendered
            .index
            .iter()
            .map(|&i| i != EMPTY && keep(i as usize))
            .collect();
        Self::new(rendered.width(), rendered.height(), bits, object_id, score)
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![true; width * height], 0, 1.0).expect("consistent")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, pixel: usize) -> bool {
        self.bits[pixel]
    }

    pub fn pixel_count(&self) -> usize {
        self.pixel_count
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_count == 0
    }

    pub fn complement(&self) -> Self {
        let bits = self.bits.iter().map(|b| !b).collect();
        Self::new(self.width, self.height, bits, self.object_id, self.score).expect("consistent")
    }

    /// Set pixels as `(x, y)` coordinates in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(o, _)| (o % w, o / w))
    }

    /// Whether every set pixel is covered by some point of `rendered`.
    pub fn within_coverage(&self, rendered: &RenderedView) -> bool {
        self.bits
            .iter()
            .zip(&rendered.index)
            .all(|(b, &i)| !*b || i != EMPTY)
    }
}
