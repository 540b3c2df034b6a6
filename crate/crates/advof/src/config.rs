//! Run configuration: a flat, sectioned `key = value` text file.
//!
//! ```text
//! threads = 0
//!
//! [attack]
//! mode = targeted
//! victim = chair
//! target = ball
//! epsilon = 32/255
//! ```
//!
//! Keys are addressed as `section.key`. Unknown sections or keys are errors
//! so that typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use advof_core::alignment::ClusterSelection;
use advof_core::evaluation::DefenseKind;
use advof_core::losses::AttackMode;
use advof_core::scene::{ObjectSpec, Shape};

#[derive(Debug, thiserror::Error)]
#[error("config key `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

fn err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    /// Scene file to load instead of generating one.
    pub scene: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSection {
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
    pub extent: f64,
    pub clearance: f64,
    pub points: usize,
    pub floor_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSection {
    pub mode: AttackMode,
    pub victim: String,
    pub target: Option<String>,
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub max_retries: usize,
    /// Total inner iterations, split evenly across the fusion views.
    pub iterations: usize,
    /// Overrides the split when nonzero.
    pub view_iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub lambda_3d: f64,
    pub positional: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewsSection {
    pub fusion: usize,
    pub heldout: usize,
    pub calibration: usize,
    pub policy: String,
    pub radius: f64,
    pub height: f64,
    pub heldout_radius: f64,
    pub heldout_height: f64,
    /// Azimuth offset of the held-out ring in degrees.
    pub heldout_phase: f64,
    pub width: usize,
    pub focal: f64,
    pub splat: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSection {
    pub seed: u64,
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSection {
    pub eps: f64,
    pub min_pts: usize,
    pub selection: ClusterSelection,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSection {
    pub defenses: Vec<DefenseKind>,
    pub sr_threshold: f64,
    pub cell_size: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Alignment,
    L2d,
    L3d,
    Fusion,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Alignment => "alignment",
            Ablation::L2d => "l2d",
            Ablation::L3d => "l3d",
            Ablation::Fusion => "fusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Ablation::Alignment, Ablation::L2d, Ablation::L3d, Ablation::Fusion]
            .into_iter()
            .find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub paths: Paths,
    pub scene: SceneSection,
    pub attack: AttackSection,
    pub views: ViewsSection,
    pub encoder: EncoderSection,
    pub alignment: AlignmentSection,
    pub evaluation: EvaluationSection,
    pub ablation: Option<Ablation>,
    /// Worker threads for per-view evaluation; 0 picks automatically.
    pub threads: usize,
}

pub fn default_objects() -> Vec<ObjectSpec> {
    vec![
        ObjectSpec::new("chair", Shape::Box),
        ObjectSpec::new("ball", Shape::Sphere),
        ObjectSpec::new("lamp", Shape::Cylinder),
        ObjectSpec::new("table", Shape::Box),
        ObjectSpec::new("vase", Shape::Cylinder),
    ]
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths {
                scene: None,
                labels: None,
                out: PathBuf::from("out"),
            },
            scene: SceneSection {
                seed: 7,
                objects: default_objects(),
                extent: 6.0,
                clearance: 0.3,
                points: 1200,
                floor_points: 0,
            },
            attack: AttackSection {
                mode: AttackMode::Untargeted,
                victim: "chair".into(),
                target: None,
                epsilon: 32.0 / 255.0,
                alpha: 0.5,
                beta: 0.01,
                mu1: 0.01,
                mu2: 0.05,
                max_retries: 5,
                iterations: 200,
                view_iterations: 0,
                lr: 0.01,
                seed: 0,
                lambda_3d: 1.0,
                positional: false,
            },
            views: ViewsSection {
                fusion: 8,
                heldout: 20,
                calibration: 4,
                policy: "ring".into(),
                radius: 1.6,
                height: 0.6,
                heldout_radius: 1.6,
                heldout_height: 0.8,
                heldout_phase: 4.5,
                width: 64,
                focal: 64.0,
                splat: 1,
                seed: 0,
            },
            encoder: EncoderSection {
                seed: 0,
                channels: 16,
                kernel: 5,
            },
            alignment: AlignmentSection {
                eps: 0.1,
                min_pts: 5,
                selection: ClusterSelection::Largest,
                threshold: 0.40,
            },
            evaluation: EvaluationSection {
                defenses: Vec::new(),
                sr_threshold: 1.0,
                cell_size: 0.25,
                seed: 0,
            },
            ablation: None,
            threads: 0,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64, ConfigError> {
    // `a/b` fractions are accepted, e.g. `32/255`.
    let x = match v.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| err(key, format!("not a number: {v:?}")))?;
            let b: f64 = b.trim().parse().map_err(|_| err(key, format!("not a number: {v:?}")))?;
            a / b
        }
        None => v.parse().map_err(|_| err(key, format!("not a number: {v:?}")))?,
    };
    if !x.is_finite() {
        return Err(err(key, "must be finite"));
    }
    Ok(x)
}

fn parse_int<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| err(key, format!("not a non-negative integer: {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(err(key, format!("not a boolean: {v:?}"))),
    }
}

fn parse_objects(key: &str, v: &str, points: usize) -> Result<Vec<ObjectSpec>, ConfigError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (label, shape) = item
                .split_once(':')
                .ok_or_else(|| err(key, format!("expected label:shape, got {item:?}")))?;
            let shape = Shape::parse(shape.trim()).ok_or_else(|| err(key, format!("unknown shape {shape:?}")))?;
            let mut spec = ObjectSpec::new(label.trim(), shape);
            spec.points = points;
            Ok(spec)
        })
        .collect()
}

/// Raw `section.key -> value` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(&format!("line {}", n + 1), "unterminated section header"))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(&format!("line {}", n + 1), "expected `key = value`"))?;
        let key = if section.is_empty() {
            k.trim().to_string()
        } else {
            format!("{section}.{}", k.trim())
        };
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err("--config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let pairs = parse_pairs(text)?;
        let mut c = RunConfig::default();
        let lookup: BTreeMap<&str, &str> = pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        // Object point counts depend on `scene.points`, so apply it first.
        if let Some(v) = lookup.get("scene.points") {
            c.set("scene.points", v)?;
        }
        for (key, v) in &pairs {
            c.set(key, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let opt_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "threads" => self.threads = parse_int(key, v)?,
            "ablate" => {
                self.ablation = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(Ablation::parse(v).ok_or_else(|| err(key, format!("unknown ablation {v:?}")))?)
                }
            }
            "paths.scene" => self.paths.scene = opt_path(v),
            "paths.labels" => self.paths.labels = opt_path(v),
            "paths.out" => self.paths.out = PathBuf::from(v),

            "scene.seed" => self.scene.seed = parse_int(key, v)?,
            "scene.objects" => self.scene.objects = parse_objects(key, v, self.scene.points)?,
            "scene.extent" => self.scene.extent = parse_f64(key, v)?,
            "scene.clearance" => self.scene.clearance = parse_f64(key, v)?,
            "scene.points" => {
                self.scene.points = parse_int(key, v)?;
                for o in &mut self.scene.objects {
                    o.points = self.scene.points;
                }
            }
            "scene.floor_points" => self.scene.floor_points = parse_int(key, v)?,

            "attack.mode" => {
                self.attack.mode = AttackMode::parse(v).ok_or_else(|| err(key, format!("unknown mode {v:?}")))?
            }
            "attack.victim" => self.attack.victim = v.into(),
            "attack.target" => self.attack.target = (!v.is_empty()).then(|| v.to_string()),
            "attack.epsilon" => self.attack.epsilon = parse_f64(key, v)?,
            "attack.alpha" => self.attack.alpha = parse_f64(key, v)?,
            "attack.beta" => self.attack.beta = parse_f64(key, v)?,
            "attack.mu1" => self.attack.mu1 = parse_f64(key, v)?,
            "attack.mu2" => self.attack.mu2 = parse_f64(key, v)?,
            "attack.max_retries" => self.attack.max_retries = parse_int(key, v)?,
            "attack.iterations" => self.attack.iterations = parse_int(key, v)?,
            "attack.view_iterations" => self.attack.view_iterations = parse_int(key, v)?,
            "attack.lr" => self.attack.lr = parse_f64(key, v)?,
            "attack.seed" => self.attack.seed = parse_int(key, v)?,
            "attack.lambda_3d" => self.attack.lambda_3d = parse_f64(key, v)?,
            "attack.positional" => self.attack.positional = parse_bool(key, v)?,

            "views.fusion" => self.views.fusion = parse_int(key, v)?,
            "views.heldout" => self.views.heldout = parse_int(key, v)?,
            "views.calibration" => self.views.calibration = parse_int(key, v)?,
            "views.policy" => self.views.policy = v.into(),
            "views.radius" => self.views.radius = parse_f64(key, v)?,
            "views.height" => self.views.height = parse_f64(key, v)?,
            "views.heldout_radius" => self.views.heldout_radius = parse_f64(key, v)?,
            "views.heldout_height" => self.views.heldout_height = parse_f64(key, v)?,
            "views.heldout_phase" => self.views.heldout_phase = parse_f64(key, v)?,
            "views.width" => self.views.width = parse_int(key, v)?,
            "views.focal" => self.views.focal = parse_f64(key, v)?,
            "views.splat" => self.views.splat = parse_int(key, v)?,
            "views.seed" => self.views.seed = parse_int(key, v)?,

            "encoder.seed" => self.encoder.seed = parse_int(key, v)?,
            "encoder.channels" => self.encoder.channels = parse_int(key, v)?,
            "encoder.kernel" => self.encoder.kernel = parse_int(key, v)?,

            "alignment.eps" => self.alignment.eps = parse_f64(key, v)?,
            "alignment.min_pts" => self.alignment.min_pts = parse_int(key, v)?,
            "alignment.threshold" => self.alignment.threshold = parse_f64(key, v)?,
            "alignment.selection" => {
                self.alignment.selection = match v {
                    "largest" => ClusterSelection::Largest,
                    _ => match v.strip_prefix("random:") {
                        Some(seed) => ClusterSelection::SeededRandom(parse_int(key, seed)?),
                        None => return Err(err(key, "expected `largest` or `random:<seed>`")),
                    },
                }
            }

            "evaluation.defenses" => {
                self.evaluation.defenses = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty() && *s != "none")
                    .map(|s| DefenseKind::parse(s).map_err(|_| err(key, format!("unknown defense {s:?}"))))
                    .collect::<Result<_, _>>()?
            }
            "evaluation.sr_threshold" => self.evaluation.sr_threshold = parse_f64(key, v)?,
            "evaluation.cell_size" => self.evaluation.cell_size = parse_f64(key, v)?,
            "evaluation.seed" => self.evaluation.seed = parse_int(key, v)?,
            _ => return Err(err(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("attack.epsilon", self.attack.epsilon),
            ("attack.mu1", self.attack.mu1),
            ("attack.mu2", self.attack.mu2),
            ("attack.lr", self.attack.lr),
            ("views.radius", self.views.radius),
            ("views.heldout_radius", self.views.heldout_radius),
            ("views.focal", self.views.focal),
            ("scene.extent", self.scene.extent),
            ("alignment.eps", self.alignment.eps),
            ("evaluation.sr_threshold", self.evaluation.sr_threshold),
            ("evaluation.cell_size", self.evaluation.cell_size),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(err(k, "must be positive"));
            }
        }
        for (k, v) in [
            ("attack.alpha", self.attack.alpha),
            ("attack.beta", self.attack.beta),
            ("attack.lambda_3d", self.attack.lambda_3d),
        ] {
            if !(v >= 0.0) {
                return Err(err(k, "must be non-negative"));
            }
        }
        if self.attack.mode == AttackMode::Targeted {
            match &self.attack.target {
                None => return Err(err("attack.target", "targeted mode requires a target label")),
                Some(t) if *t == self.attack.victim => {
                    return Err(err("attack.target", "target label equals the victim label"))
                }
                _ => {}
            }
        }
        if self.views.fusion == 0 {
            return Err(err("views.fusion", "must be at least 1"));
        }
        if self.views.heldout == 0 {
            return Err(err("views.heldout", "must be at least 1"));
        }
        if self.views.calibration == 0 {
            return Err(err("views.calibration", "must be at least 1"));
        }
        if self.views.width < 8 {
            return Err(err("views.width", "must be at least 8"));
        }
        if self.views.policy != "ring" && self.views.policy != "random" {
            return Err(err("views.policy", "expected `ring` or `random`"));
        }
        if self.alignment.min_pts == 0 {
            return Err(err("alignment.min_pts", "must be at least 1"));
        }
        if self.encoder.channels == 0 {
            return Err(err("encoder.channels", "must be at least 1"));
        }
        if self.encoder.kernel.is_multiple_of(2) {
            return Err(err("encoder.kernel", "must be odd"));
        }
        if self.evaluation.cell_size > self.evaluation.sr_threshold / 2.0 {
            return Err(err("evaluation.cell_size", "must be at most half of evaluation.sr_threshold"));
        }
        if self.paths.scene.is_some() != self.paths.labels.is_some() {
            return Err(err("paths.labels", "a loaded scene needs both paths.scene and paths.labels"));
        }
        if self.paths.scene.is_none() && self.scene.objects.len() < 2 {
            return Err(err("scene.objects", "a scene needs at least two objects"));
        }
        Ok(())
    }

    /// Inner iterations per fusion view.
    pub fn iterations_per_view(&self) -> usize {
        if self.attack.view_iterations > 0 {
            self.attack.view_iterations
        } else {
            self.attack.iterations / self.views.fusion
        }
    }

    /// The configuration as text that [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let a = &self.attack;
        let v = &self.views;
        let objects: Vec<String> = self
            .scene
            .objects
            .iter()
            .map(|o| format!("{}:{}", o.label, o.shape.name()))
            .collect();
        let defenses: Vec<&str> = self.evaluation.defenses.iter().map(|d| d.name()).collect();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let selection = match self.alignment.selection {
            ClusterSelection::Largest => "largest".to_string(),
            ClusterSelection::SeededRandom(s) => format!("random:{s}"),
        };
        format!(
            "threads = {}\nablate = {}\n\n[paths]\nscene = {}\nlabels = {}\nout = {}\n\n\
             [scene]\nseed = {}\nobjects = {}\nextent = {}\nclearance = {}\npoints = {}\nfloor_points = {}\n\n\
             [attack]\nmode = {}\nvictim = {}\ntarget = {}\nepsilon = {}\nalpha = {}\nbeta = {}\nmu1 = {}\nmu2 = {}\n\
             max_retries = {}\niterations = {}\nview_iterations = {}\nlr = {}\nseed = {}\nlambda_3d = {}\npositional = {}\n\n\
             [views]\nfusion = {}\nheldout = {}\ncalibration = {}\npolicy = {}\nradius = {}\nheight = {}\n\
             heldout_radius = {}\nheldout_height = {}\nheldout_phase = {}\nwidth = {}\nfocal = {}\nsplat = {}\nseed = {}\n\n\
             [encoder]\nseed = {}\nchannels = {}\nkernel = {}\n\n\
             [alignment]\neps = {}\nmin_pts = {}\nselection = {}\nthreshold = {}\n\n\
             [evaluation]\ndefenses = {}\nsr_threshold = {}\ncell_size = {}\nseed = {}\n",
            self.threads,
            self.ablation.map_or("none", |x| x.name()),
            path(&self.paths.scene),
            path(&self.paths.labels),
            self.paths.out.display(),
            self.scene.seed,
            objects.join(", "),
            self.scene.extent,
            self.scene.clearance,
            self.scene.points,
            self.scene.floor_points,
            a.mode.name(),
            a.victim,
            a.target.as_deref().unwrap_or(""),
            a.epsilon,
            a.alpha,
            a.beta,
            a.mu1,
            a.mu2,
            a.max_retries,
            a.iterations,
            a.view_iterations,
            a.lr,
            a.seed,
            a.lambda_3d,
            a.positional,
            v.fusion,
            v.heldout,
            v.calibration,
            v.policy,
            v.radius,
            v.height,
            v.heldout_radius,
            v.heldout_height,
            v.heldout_phase,
            v.width,
            v.focal,
            v.splat,
            v.seed,
            self.encoder.seed,
            self.encoder.channels,
            self.encoder.kernel,
            self.alignment.eps,
            self.alignment.min_pts,
            selection,
            self.alignment.threshold,
            if defenses.is_empty() { "none".to_string() } else { defenses.join(", ") },
            self.evaluation.sr_threshold,
            self.evaluation.cell_size,
            self.evaluation.seed,
        )
    }
}
