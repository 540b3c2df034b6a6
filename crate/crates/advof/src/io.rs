//! Text and image file formats.
//!
//! Every writer produces LF-terminated UTF-8 (or binary Netpbm) with a fixed
//! float formatting, so equal inputs always give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use advof_core::alignment::VictimObject;
use advof_core::geometry::RenderedView;
use advof_core::image::Image;
use advof_core::optimizer::{Perturbation, TraceEntry};
use advof_core::perception::Embedding;
use advof_core::scene::{LabelRegistry, PointCloud};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Core(#[from] advof_core::Error),
}

fn bad(line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Parse {
        line,
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T, FormatError> {
    let tok = tok.ok_or_else(|| bad(line, format!("missing {what}")))?;
    tok.parse().map_err(|_| bad(line, format!("bad {what} `{tok}`")))
}

fn header<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, magic: &str) -> Result<Vec<&'a str>, FormatError> {
    let (_, first) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    let toks: Vec<&str> = first.split_whitespace().collect();
    let want: Vec<&str> = magic.split_whitespace().collect();
    if toks.len() < want.len() || toks[..want.len()] != want[..] {
        return Err(bad(1, format!("expected header `{magic}`")));
    }
    Ok(toks[want.len()..].to_vec())
}

fn numbered(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l))
}

/// Full round-trip precision: 17 significant digits.
fn f(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn scene_to_text(cloud: &PointCloud) -> String {
    let mut s = format!("advof-scene v1 {}\n", cloud.len());
    for ((p, c), id) in cloud.positions().iter().zip(cloud.colors()).zip(cloud.object_ids()) {
        let _ = writeln!(s, "{} {} {} {} {} {} {id}", f(p[0]), f(p[1]), f(p[2]), f(c[0]), f(c[1]), f(c[2]));
    }
    s
}

pub fn scene_from_text(text: &str) -> Result<PointCloud, FormatError> {
    let mut lines = numbered(text);
    let rest = header(&mut lines, "advof-scene v1")?;
    let n: usize = num(rest.first().copied(), 1, "point count")?;
    let mut pos = Vec::with_capacity(n);
    let mut col = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut t = line.split_whitespace();
        let mut v = [0.0; 6];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = num(t.next(), ln, ["x", "y", "z", "r", "g", "b"][k])?;
        }
        ids.push(num(t.next(), ln, "object id")?);
        if t.next().is_some() {
            return Err(bad(ln, "trailing fields"));
        }
        pos.push([v[0], v[1], v[2]]);
        col.push([v[3], v[4], v[5]]);
    }
    if pos.len() != n {
        return Err(bad(1, format!("header says {n} points, found {}", pos.len())));
    }
    Ok(PointCloud::new(pos, col, ids)?)
}

pub fn labels_to_text(registry: &LabelRegistry) -> String {
    let mut s = String::new();
    for (id, label) in registry.entries() {
        let _ = writeln!(s, "{id}\t{label}");
    }
    s
}

pub fn labels_from_text(text: &str) -> Result<LabelRegistry, FormatError> {
    let mut reg = LabelRegistry::new();
    for (ln, line) in numbered(text) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line.split_once('\t').ok_or_else(|| bad(ln, "expected `id<TAB>label`"))?;
        let id: u32 = num(Some(id.trim()), ln, "object id")?;
        reg.insert(id, label.trim()).map_err(|e| bad(ln, e.to_string()))?;
    }
    Ok(reg)
}

/// Calibrated prototypes, in registry label order.
pub fn protos_to_text(registry: &LabelRegistry) -> Result<String, FormatError> {
    let protos = registry.calibrated()?;
    let dim = protos.first().map_or(0, |e| e.dim());
    let mut s = format!("protos v1 C={dim}\n");
    for (label, e) in registry.labels().iter().zip(protos) {
        s += label;
        for (k, x) in e.as_slice().iter().enumerate() {
            s.push(if k == 0 { '\t' } else { ' ' });
            s += &f(*x);
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn protos_from_text(text: &str) -> Result<Vec<(String, Embedding)>, FormatError> {
    let mut lines = numbered(text);
    let rest = header(&mut lines, "protos v1")?;
    let dim: usize = num(rest.first().and_then(|t| t.strip_prefix("C=")), 1, "dimension")?;
    let mut out = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (label, vals) = line.split_once('\t').ok_or_else(|| bad(ln, "expected `label<TAB>values`"))?;
        let v = vals
            .split_whitespace()
            .map(|t| num(Some(t), ln, "component"))
            .collect::<Result<Vec<f64>, _>>()?;
        if v.len() != dim {
            return Err(bad(ln, format!("expected {dim} components, found {}", v.len())));
        }
        out.push((label.to_string(), Embedding::from_vector(v).map_err(|e| bad(ln, e.to_string()))?));
    }
    Ok(out)
}

pub fn victim_to_text(victim: &VictimObject) -> String {
    let mut s = format!("victim v1\n{}\n", victim.label);
    for i in &victim.indices {
        let _ = writeln!(s, "{i}");
    }
    s
}

/// The label and point indices of a victim file.
pub fn victim_from_text(text: &str) -> Result<(String, Vec<usize>), FormatError> {
    let mut lines = numbered(text);
    header(&mut lines, "victim v1")?;
    let (_, label) = lines.next().ok_or_else(|| bad(2, "missing label line"))?;
    let label = label.trim();
    if label.is_empty() {
        return Err(bad(2, "empty label"));
    }
    let mut idx = Vec::new();
    for (ln, line) in lines {
        if !line.trim().is_empty() {
            idx.push(num(Some(line.trim()), ln, "point index")?);
        }
    }
    Ok((label.to_string(), idx))
}

/// One line per point; positional columns only when the perturbation has them.
pub fn delta_to_text(delta: &Perturbation) -> String {
    let mut s = format!("advof-delta v1 {}\n", delta.len());
    for (i, c) in delta.rgb().iter().enumerate() {
        let _ = write!(s, "{i} {} {} {}", f(c[0]), f(c[1]), f(c[2]));
        if let Some(p) = delta.positions() {
            let p = p[i];
            let _ = write!(s, " {} {} {}", f(p[0]), f(p[1]), f(p[2]));
        }
        s.push('\n');
    }
    s
}

/// Parse a delta file. Points not listed are zero.
pub fn delta_from_text(text: &str, bound: f64) -> Result<Perturbation, FormatError> {
    let mut lines = numbered(text);
    let rest = header(&mut lines, "advof-delta v1")?;
    let n: usize = num(rest.first().copied(), 1, "point count")?;
    let mut rgb = vec![[0.0; 3]; n];
    let mut xyz: Option<Vec<[f64; 3]>> = None;
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 && toks.len() != 7 {
            return Err(bad(ln, "expected `index dr dg db [dx dy dz]`"));
        }
        let i: usize = num(Some(toks[0]), ln, "point index")?;
        if i >= n {
            return Err(bad(ln, format!("index {i} out of range")));
        }
        for k in 0..3 {
            rgb[i][k] = num(Some(toks[1 + k]), ln, "color delta")?;
        }
        if toks.len() == 7 {
            let xyz = xyz.get_or_insert_with(|| vec![[0.0; 3]; n]);
            for k in 0..3 {
                xyz[i][k] = num(Some(toks[4 + k]), ln, "position delta")?;
            }
        }
    }
    Ok(Perturbation::from_parts(rgb, xyz, bound)?)
}

pub fn trace_record(e: &TraceEntry) -> String {
    let b = &e.breakdown;
    format!(
        "iteration={} view={} weight={} objective={} total={} color={} chamfer={} i2i={} i2t={} b2b={} mode={}\n",
        e.iteration,
        e.view_id,
        f(e.weight),
        f(e.objective),
        f(b.total),
        f(b.color),
        f(b.chamfer),
        f(b.i2i),
        f(b.i2t),
        f(b.b2b),
        b.mode.name()
    )
}

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6, maxval 255).
pub fn ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&x| to_u8(x)));
    out
}

/// 16-bit PGM (P5) of depth in millimeters; empty pixels and far depths clamp to 65535.
pub fn depth_pgm(view: &RenderedView) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", view.width(), view.height()).into_bytes();
    for &d in &view.depth {
        let mm = if d.is_finite() { (d * 1000.0).round().clamp(0.0, 65535.0) as u16 } else { u16::MAX };
        out.extend_from_slice(&mm.to_be_bytes());
    }
    out
}

pub fn read_text(path: &Path) -> std::io::Result<String> {
    fs::read_to_string(path)
}
