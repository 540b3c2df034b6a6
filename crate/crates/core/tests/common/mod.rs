#![allow(dead_code)]

pub mod fusion_stub;
pub mod oracles;

use advof_core::geometry::{rasterize, ObjectMask, RenderedView};
use advof_core::perception::{pooled_feature, Embedding, Encoder, FeatureMap, ToyEncoder};
use advof_core::scene::{CameraView, Intrinsics, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn camera(id: u32, eye: [f64; 3], target: [f64; 3], size: usize) -> CameraView {
    let half = (size / 2) as f64;
    let k = Intrinsics {
        fx: size as f64,
        fy: size as f64,
        cx: half,
        cy: half,
    };
    CameraView::look_at(id, eye, target, k, size, size).unwrap()
}

/// A `victim_points` patch (object 1) in front of a wider backdrop (object 2),
/// seen by one `size`×`size` camera.
pub struct Fixture {
    pub cloud: PointCloud,
    pub camera: CameraView,
    pub rendered: RenderedView,
    pub victim: Vec<bool>,
    pub mask: ObjectMask,
    pub encoder: ToyEncoder,
    pub benign: FeatureMap,
    pub embedding: Embedding,
}

pub fn fixture(seed: u64, size: usize, victim_points: usize) -> Fixture {
    let mut r = rng(seed);
    let mut pos = Vec::new();
    let mut col = Vec::new();
    let mut ids = Vec::new();
    let base = [r.random_range(0.3..0.7), r.random_range(0.3..0.7), r.random_range(0.3..0.7)];
    for _ in 0..victim_points {
        pos.push([r.random_range(-0.6..0.6), r.random_range(-0.05..0.05), r.random_range(-0.6..0.6)]);
        col.push(base.map(|c: f64| c + r.random_range(-0.1..0.1)));
        ids.push(1);
    }
    for _ in 0..2 * victim_points {
        pos.push([r.random_range(-1.2..1.2), 0.6, r.random_range(-1.2..1.2)]);
        col.push([r.random_range(0.2..0.8), r.random_range(0.2..0.8), r.random_range(0.2..0.8)]);
        ids.push(2);
    }
    let cloud = PointCloud::new(pos, col, ids).unwrap();
    let camera = camera(0, [0.0, -2.0, 0.0], [0.0, 0.0, 0.0], size);
    let rendered = rasterize(&cloud, &camera, 1);
    let victim: Vec<bool> = cloud.object_ids().iter().map(|&i| i == 1).collect();
    let mask = ObjectMask::from_points(&rendered, 1, 1.0, |i| victim[i]).unwrap();
    assert!(!mask.is_empty(), "victim not visible in fixture");
    let encoder = ToyEncoder::with_defaults(seed);
    let benign = encoder.encode_image(&rendered.color);
    let embedding = Embedding::from_vector(pooled_feature(&benign, &mask).unwrap()).unwrap();
    Fixture {
        cloud,
        camera,
        rendered,
        victim,
        mask,
        encoder,
        benign,
        embedding,
    }
}

/// Uniform random vector in `[-a, a]^3` per entry.
pub fn random_rgb(r: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<[f64; 3]> {
    (0..n).map(|_| [r.random_range(-a..=a), r.random_range(-a..=a), r.random_range(-a..=a)]).collect()
}
