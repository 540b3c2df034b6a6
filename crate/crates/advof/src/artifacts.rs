//! Output-directory artifacts and the hash manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use advof_core::alignment::VictimObject;
use advof_core::evaluation::AttackReport;
use advof_core::fusion::FusionResult;
use advof_core::geometry::{rasterize, RenderedView};
use advof_core::scene::{CameraView, LabelRegistry, PointCloud};

use crate::config::RunConfig;
use crate::io;
use crate::pipeline::{PipelineError, Result, RunOutputs, Stage};

pub const MANIFEST: &str = "MANIFEST";

/// File name → contents, in name order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Artifacts(pub BTreeMap<String, Vec<u8>>);

impl Artifacts {
    pub fn insert(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.0.insert(name.to_string(), bytes.into());
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.0.iter().map(|(k, v)| (k.clone(), sha256_hex(v))).collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn report_text(report: &AttackReport, config: &RunConfig) -> String {
    let ablation = config.ablation.map_or("none", |a| a.name());
    format!("ablation {ablation}\n{report}")
}

pub fn scene_artifacts(cloud: &PointCloud, registry: &LabelRegistry) -> Artifacts {
    let mut a = Artifacts::default();
    a.insert("scene.txt", io::scene_to_text(cloud));
    a.insert("labels.txt", io::labels_to_text(registry));
    a
}

pub fn protos_artifacts(registry: &LabelRegistry) -> Result<Artifacts> {
    let mut a = Artifacts::default();
    let text = io::protos_to_text(registry).map_err(|e| PipelineError::new(Stage::Calibration, "encoder.seed", e))?;
    a.insert("protos.txt", text);
    Ok(a)
}

pub fn victim_artifacts(victim: &VictimObject) -> Artifacts {
    let mut a = Artifacts::default();
    a.insert("victim.txt", io::victim_to_text(victim));
    a
}

/// Delta, fusion report, loss traces and before/after renderings of the
/// highest-weight fusion view.
pub fn fusion_artifacts(
    cloud: &PointCloud,
    fusion: &FusionResult,
    cams: &[CameraView],
    rendered: &[RenderedView],
    splat: u32,
) -> Result<Artifacts> {
    let mut a = Artifacts::default();
    a.insert("delta.txt", io::delta_to_text(&fusion.delta));
    a.insert("fusion_report.txt", fusion.report.to_string());
    let mut traces = String::new();
    for r in &fusion.report.records {
        for e in &r.trace {
            traces += &io::trace_record(e);
        }
    }
    a.insert("traces.txt", traces);

    let top = fusion
        .report
        .final_weights
        .iter()
        .fold(None::<(u32, f64)>, |best, &(id, w)| match best {
            Some((_, bw)) if bw >= w => best,
            _ => Some((id, w)),
        });
    if let Some((id, _)) = top {
        if let Some(k) = rendered.iter().position(|r| r.view_id == id) {
            let adv = fusion.delta.apply(cloud).map_err(|e| PipelineError::new(Stage::Fusion, "attack.epsilon", e))?;
            let after = rasterize(&adv, &cams[k], splat);
            a.insert("view_before.ppm", io::ppm(&rendered[k].color));
            a.insert("view_after.ppm", io::ppm(&after.color));
            a.insert("view_depth.pgm", io::depth_pgm(&rendered[k]));
        }
    }
    Ok(a)
}

pub fn report_artifacts(config: &RunConfig, report: &AttackReport, defenses: &[AttackReport]) -> Artifacts {
    let mut a = Artifacts::default();
    a.insert("attack_report.txt", report_text(report, config));
    a.insert("attack_report.csv", report.csv());
    for r in defenses {
        let name = r.defense.map_or("none", |d| d.name());
        a.insert(&format!("defense_{name}.txt"), report_text(r, config));
        a.insert(&format!("defense_{name}.csv"), r.csv());
    }
    a
}

/// Every artifact of an end-to-end run.
pub fn run_artifacts(config: &RunConfig, out: &RunOutputs, generated: bool) -> Result<Artifacts> {
    let mut a = Artifacts::default();
    a.insert("config.txt", config.to_text());
    if generated {
        a.0.extend(scene_artifacts(&out.cloud, &out.registry).0);
    }
    a.0.extend(protos_artifacts(&out.registry)?.0);
    a.0.extend(victim_artifacts(&out.victim).0);
    a.0.extend(fusion_artifacts(&out.cloud, &out.fusion, &out.fusion_cams, &out.fusion_rendered, config.views.splat)?.0);
    a.0.extend(report_artifacts(config, &out.report, &out.defense_reports).0);
    Ok(a)
}

pub fn manifest_text(hashes: &BTreeMap<String, String>) -> String {
    let mut s = String::from("advof-manifest v1\n");
    for (name, h) in hashes {
        s += &format!("{h}  {name}\n");
    }
    s
}

pub fn parse_manifest(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut lines = text.lines();
    if lines.next() != Some("advof-manifest v1") {
        return Err("missing `advof-manifest v1` header".into());
    }
    let mut out = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (h, name) = line.split_once("  ").ok_or_else(|| format!("line {}: expected `hash  name`", n + 2))?;
        out.insert(name.to_string(), h.to_string());
    }
    Ok(out)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::new(Stage::Io, &path.display().to_string(), e)
}

pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(MANIFEST);
    match fs::read_to_string(&path) {
        Ok(text) => parse_manifest(&text).map_err(|e| io_err(&path, e)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeMap::new()),
        Err(e) => Err(io_err(&path, e)),
    }
}

/// Write the artifacts and merge their hashes into the directory manifest.
pub fn write(dir: &Path, artifacts: &Artifacts) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (name, bytes) in &artifacts.0 {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    }
    let mut manifest = read_manifest(dir)?;
    manifest.extend(artifacts.hashes());
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest_text(&manifest)).map_err(|e| io_err(&path, e))
}

/// One line per disagreement between two manifests.
pub fn compare(expected: &BTreeMap<String, String>, actual: &BTreeMap<String, String>) -> Vec<String> {
    let mut out = Vec::new();
    for (name, h) in expected {
        match actual.get(name) {
            None => out.push(format!("{name}: missing")),
            Some(a) if a != h => out.push(format!("{name}: hash mismatch")),
            _ => {}
        }
    }
    for name in actual.keys().filter(|n| !expected.contains_key(*n)) {
        out.push(format!("{name}: not in manifest"));
    }
    out
}

/// Rehash the files listed in the manifest of `dir`.
pub fn verify_dir(dir: &Path) -> Result<Vec<String>> {
    let manifest = read_manifest(dir)?;
    if manifest.is_empty() {
        return Err(io_err(&dir.join(MANIFEST), "no manifest"));
    }
    let mut actual = BTreeMap::new();
    for name in manifest.keys() {
        if let Ok(bytes) = fs::read(dir.join(name)) {
            actual.insert(name.clone(), sha256_hex(&bytes));
        }
    }
    Ok(compare(&manifest, &actual))
}
