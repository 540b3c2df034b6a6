//! Brute-force references shared by the core tests and the acceptance run.

use std::collections::BTreeMap;

use advof_core::alignment::NOISE;
use rand::Rng;

/// Double-loop Chamfer distance.
pub fn chamfer_oracle(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let d2 = |x: &[f64; 3], y: &[f64; 3]| {
        let (dx, dy, dz) = (x[0] - y[0], x[1] - y[1], x[2] - y[2]);
        dx * dx + dy * dy + dz * dz
    };
    let mut forward = 0.0;
    for x in a {
        let mut m = f64::INFINITY;
        for y in b {
            m = m.min(d2(x, y));
        }
        forward += m;
    }
    let mut backward = 0.0;
    for y in b {
        let mut m = f64::INFINITY;
        for x in a {
            m = m.min(d2(y, x));
        }
        backward += m;
    }
    forward + backward
}

fn d2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let (x, y, z) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    x * x + y * y + z * z
}

/// O(n²) density reachability: union-find over core points that lie within
/// eps of each other; a border point takes the component of its nearest core
/// neighbor (smallest coordinates on distance ties).
pub fn dbscan_oracle(points: &[[f64; 3]], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let near = |i: usize, j: usize| d2(points[i], points[j]) <= eps * eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && near(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    (0..n)
        .map(|i| {
            if core[i] {
                return Some(find(&mut parent, i));
            }
            let mut best: Option<usize> = None;
            for j in (0..n).filter(|&j| core[j] && near(i, j)) {
                best = match best {
                    None => Some(j),
                    Some(b) => {
                        let (dj, db) = (d2(points[i], points[j]), d2(points[i], points[b]));
                        let lex_less = points[j].partial_cmp(&points[b]) == Some(std::cmp::Ordering::Less);
                        if dj < db || (dj == db && lex_less) { Some(j) } else { Some(b) }
                    }
                };
            }
            best.map(|b| find(&mut parent, b))
        })
        .collect()
}

/// Equal partitions up to a bijective relabeling, noise matching noise.
pub fn same_partition(a: &[i32], b: &[Option<usize>]) -> bool {
    let mut ab: BTreeMap<i32, usize> = BTreeMap::new();
    let mut ba: BTreeMap<usize, i32> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        match (x, y) {
            (NOISE, None) => {}
            (NOISE, Some(_)) | (_, None) => return false,
            (x, Some(y)) => {
                if *ab.entry(x).or_insert(y) != y || *ba.entry(y).or_insert(x) != x {
                    return false;
                }
            }
        }
    }
    true
}

pub fn dbscan_instance(seed: u64) -> (Vec<[f64; 3]>, f64, usize) {
    let mut r = super::rng(seed);
    let n = r.random_range(1..=300);
    let blobs = r.random_range(1..=5);
    let centers: Vec<[f64; 3]> = (0..blobs).map(|_| [r.random_range(0.0..4.0), r.random_range(0.0..4.0), r.random_range(0.0..4.0)]).collect();
    let points = (0..n)
        .map(|_| {
            if r.random_bool(0.2) {
                [r.random_range(0.0..4.0), r.random_range(0.0..4.0), r.random_range(0.0..4.0)]
            } else {
                let c = centers[r.random_range(0..blobs)];
                c.map(|v| v + r.random_range(-0.4..0.4))
            }
        })
        .collect();
    (points, r.random_range(0.1..0.5), r.random_range(1..=8))
}

