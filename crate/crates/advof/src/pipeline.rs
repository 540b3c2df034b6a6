//! The end-to-end stages: scene, calibration, alignment, fusion, evaluation.

use rayon::prelude::*;

use advof_core::alignment::{align_victim, AlignConfig, OracleSegmenter, VictimObject};
use advof_core::evaluation::{
    self, localization_success, AttackReport, DefenseTransform, EvalContext, ViewEvaluation,
};
use advof_core::fusion::{fuse, CollaborativeOptimizer, FusionConfig, FusionResult, ViewEvidence};
use advof_core::geometry::{rasterize, ObjectMask, RenderedView};
use advof_core::losses::AttackMode;
use advof_core::optimizer::{
    AdamConfig, ExemplarFeatures, OptimizeConfig, Perturbation, PositionalConfig, ViewProblem,
};
use advof_core::perception::{calibrate_prototypes, Encoder, FeatureMap, ToyEncoder};
use advof_core::scene::{
    generate_scene, sample_views, CameraView, LabelRegistry, PointCloud, SceneSpec, ViewPolicy,
    ViewSampling,
};
use advof_core::Error;

use crate::config::{Ablation, RunConfig};
use crate::io;

/// Pipeline stage, used for error messages and exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Scene,
    Calibration,
    Alignment,
    Fusion,
    Evaluation,
    Io,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Scene => "scene",
            Stage::Calibration => "calibration",
            Stage::Alignment => "alignment",
            Stage::Fusion => "fusion",
            Stage::Evaluation => "evaluation",
            Stage::Io => "io",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Alignment => 3,
            Stage::Fusion => 4,
            Stage::Evaluation => 5,
            Stage::Scene | Stage::Calibration => 6,
            Stage::Io => 7,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{} stage failed ({key}): {message}", stage.name())]
pub struct PipelineError {
    pub stage: Stage,
    /// The config key or path most related to the failure.
    pub key: String,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, key: &str, message: impl ToString) -> Self {
        Self {
            stage,
            key: key.into(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.stage.exit_code()
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage, key: &str) -> std::result::Result<T, PipelineError>;
}

impl<T, E: ToString> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: Stage, key: &str) -> std::result::Result<T, PipelineError> {
        self.map_err(|e| PipelineError::new(stage, key, e))
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub fn scene_spec(config: &RunConfig) -> SceneSpec {
    SceneSpec {
        extent: config.scene.extent,
        objects: config.scene.objects.clone(),
        clearance: config.scene.clearance,
        floor_points: config.scene.floor_points,
        seed: config.scene.seed,
    }
}

pub fn generate(config: &RunConfig) -> Result<(PointCloud, LabelRegistry)> {
    generate_scene(&scene_spec(config)).stage(Stage::Scene, "scene.seed")
}

/// The configured scene files, or a generated scene. The flag tells
/// whether the scene was generated.
pub fn load_scene(config: &RunConfig) -> Result<(PointCloud, LabelRegistry, bool)> {
    let (Some(scene), Some(labels)) = (&config.paths.scene, &config.paths.labels) else {
        let (cloud, registry) = generate(config)?;
        return Ok((cloud, registry, true));
    };
    let read = |p: &std::path::Path, key: &str| io::read_text(p).map_err(|e| PipelineError::new(Stage::Io, key, format!("{}: {e}", p.display())));
    let cloud = io::scene_from_text(&read(scene, "paths.scene")?).stage(Stage::Scene, "paths.scene")?;
    let registry = io::labels_from_text(&read(labels, "paths.labels")?).stage(Stage::Scene, "paths.labels")?;
    Ok((cloud, registry, false))
}

pub fn encoder(config: &RunConfig) -> Result<ToyEncoder> {
    ToyEncoder::new(config.encoder.seed, config.encoder.channels, config.encoder.kernel)
        .stage(Stage::Config, "encoder.kernel")
}

fn sampling(config: &RunConfig, radius: f64, height: f64, phase_deg: f64, first_id: u32) -> ViewSampling {
    let mut s = ViewSampling::ring(radius, height)
        .with_phase(phase_deg.to_radians())
        .with_first_id(first_id);
    s.width = config.views.width;
    s.height = config.views.width;
    s.focal = config.views.focal;
    if config.views.policy == "random" {
        s.policy = ViewPolicy::Random {
            radius: (0.85 * radius, 1.15 * radius),
            height: (0.5 * height, 1.5 * height),
        };
    }
    s
}

/// Id of the object the fusion and held-out cameras aim at: the first one
/// carrying the victim label.
pub fn anchor_object(registry: &LabelRegistry, label: &str) -> Result<u32> {
    registry
        .ids_with_label(label)
        .first()
        .copied()
        .ok_or_else(|| PipelineError::new(Stage::Config, "attack.victim", format!("no object labeled {label:?}")))
}

/// Fusion views (ids from 0) and held-out views (ids from 1000).
pub fn attack_views(
    config: &RunConfig,
    cloud: &PointCloud,
    anchor: u32,
) -> Result<(Vec<CameraView>, Vec<CameraView>)> {
    let v = &config.views;
    let fusion = sample_views(cloud, anchor, v.fusion, &sampling(config, v.radius, v.height, 0.0, 0), v.seed)
        .stage(Stage::Config, "views.radius")?;
    let heldout = sample_views(
        cloud,
        anchor,
        v.heldout,
        &sampling(config, v.heldout_radius, v.heldout_height, v.heldout_phase, 1000),
        v.seed.wrapping_add(1),
    )
    .stage(Stage::Config, "views.heldout_radius")?;
    Ok((fusion, heldout))
}

/// Calibration views: a small ring around every object (ids from 2000).
pub fn calibration_views(config: &RunConfig, cloud: &PointCloud) -> Result<Vec<CameraView>> {
    let v = &config.views;
    let mut out = Vec::new();
    for (k, id) in cloud.distinct_ids().into_iter().filter(|&id| id != 0).enumerate() {
        let first = 2000 + (k * v.calibration) as u32;
        let s = sampling(config, v.radius, v.height, 22.5, first);
        out.extend(sample_views(cloud, id, v.calibration, &s, v.seed.wrapping_add(2 + k as u64)).stage(Stage::Calibration, "views.calibration")?);
    }
    Ok(out)
}

pub fn render_all(cloud: &PointCloud, views: &[CameraView], splat: u32) -> Vec<RenderedView> {
    views.par_iter().map(|v| rasterize(cloud, v, splat)).collect()
}

pub fn calibrate(
    config: &RunConfig,
    cloud: &PointCloud,
    registry: &mut LabelRegistry,
    encoder: &dyn Encoder,
) -> Result<()> {
    let views = calibration_views(config, cloud)?;
    let rendered = render_all(cloud, &views, config.views.splat);
    calibrate_prototypes(cloud, registry, &rendered, encoder).stage(Stage::Calibration, "views.calibration")
}

pub fn align_config(config: &RunConfig) -> AlignConfig {
    AlignConfig {
        eps: config.alignment.eps,
        min_pts: config.alignment.min_pts,
        selection: config.alignment.selection,
        threshold: config.alignment.threshold,
        cluster: config.ablation != Some(Ablation::Alignment),
    }
}

pub fn align(
    config: &RunConfig,
    cloud: &PointCloud,
    registry: &LabelRegistry,
    cameras: &[CameraView],
    rendered: &[RenderedView],
) -> Result<VictimObject> {
    let segmenter = OracleSegmenter::new(cloud, registry);
    align_victim(
        cloud,
        registry,
        cameras,
        rendered,
        &config.attack.victim,
        &segmenter,
        &align_config(config),
    )
    .map_err(|e| match e {
        Error::NotFound(_) => PipelineError::new(Stage::Config, "attack.victim", e),
        e => PipelineError::new(Stage::Alignment, "alignment.eps", e),
    })
}

/// Rendering of a target-label object seen from the fusion ring geometry,
/// used as the reference exemplar of targeted attacks.
pub fn target_exemplar(
    config: &RunConfig,
    cloud: &PointCloud,
    registry: &LabelRegistry,
    encoder: &dyn Encoder,
) -> Result<Option<ExemplarFeatures>> {
    if config.attack.mode != AttackMode::Targeted {
        return Ok(None);
    }
    let target = config.attack.target.as_deref().unwrap_or_default();
    let Some(&id) = registry.ids_with_label(target).first() else {
        return Err(PipelineError::new(Stage::Config, "attack.target", format!("no object labeled {target:?}")));
    };
    let v = &config.views;
    let cams = sample_views(cloud, id, 1, &sampling(config, v.radius, v.height, 0.0, 3000), v.seed)
        .stage(Stage::Config, "attack.target")?;
    let rv = rasterize(cloud, &cams[0], v.splat);
    let ids = cloud.object_ids();
    let mask = ObjectMask::from_points(&rv, id, 1.0, |i| ids[i] == id).stage(Stage::Fusion, "attack.target")?;
    if mask.is_empty() {
        return Err(PipelineError::new(Stage::Fusion, "attack.target", "target object not visible for its exemplar"));
    }
    Ok(Some(ExemplarFeatures {
        features: encoder.encode_image(&rv.color),
        mask,
    }))
}

pub fn optimize_config(config: &RunConfig) -> OptimizeConfig {
    let a = &config.attack;
    OptimizeConfig {
        iterations: config.iterations_per_view(),
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        alpha: a.alpha,
        beta: a.beta,
        mode: a.mode,
        lambda_3d: if config.ablation == Some(Ablation::L3d) { 0.0 } else { a.lambda_3d },
        use_l2d: config.ablation != Some(Ablation::L2d),
        scope: Default::default(),
        positional: a.positional.then(|| PositionalConfig {
            seed: a.seed,
            splat_radius: config.views.splat,
            ..PositionalConfig::default()
        }),
    }
}

pub fn fusion_config(config: &RunConfig) -> FusionConfig {
    let a = &config.attack;
    let base = FusionConfig {
        epsilon: a.epsilon,
        mu1: a.mu1,
        mu2: a.mu2,
        max_retries: a.max_retries,
        ..FusionConfig::default()
    };
    if config.ablation == Some(Ablation::Fusion) {
        base.without_fusion()
    } else {
        base
    }
}

/// Everything fusion needs that outlives the optimizer borrow.
pub struct AttackInputs {
    pub membership: Vec<bool>,
    pub benign: Vec<FeatureMap>,
    pub masks: Vec<ObjectMask>,
    pub slots: Vec<usize>,
    pub evidence: Vec<ViewEvidence>,
    pub label_embedding: advof_core::perception::Embedding,
    pub exemplar: Option<ExemplarFeatures>,
}

pub fn attack_inputs(
    config: &RunConfig,
    cloud: &PointCloud,
    registry: &LabelRegistry,
    victim: &VictimObject,
    rendered: &[RenderedView],
    encoder: &dyn Encoder,
) -> Result<AttackInputs> {
    let label = match config.attack.mode {
        AttackMode::Untargeted => config.attack.victim.as_str(),
        AttackMode::Targeted => config.attack.target.as_deref().unwrap_or_default(),
    };
    let label_embedding = registry.prototype(label).stage(Stage::Calibration, "attack.target")?.clone();
    let exemplar = target_exemplar(config, cloud, registry, encoder)?;
    let mut inputs = AttackInputs {
        membership: victim.membership(cloud.len()),
        benign: Vec::new(),
        masks: Vec::new(),
        slots: Vec::new(),
        evidence: Vec::new(),
        label_embedding,
        exemplar,
    };
    for (slot, rv) in rendered.iter().enumerate() {
        if let Some(mask) = victim.mask_for(rv.view_id) {
            inputs.evidence.push(ViewEvidence {
                view_id: rv.view_id,
                score: mask.score,
                pixels: mask.pixel_count(),
            });
            inputs.masks.push(mask.clone());
            inputs.benign.push(encoder.encode_image(&rv.color));
            inputs.slots.push(slot);
        }
    }
    if inputs.evidence.is_empty() {
        return Err(PipelineError::new(Stage::Fusion, "views.fusion", "the victim is visible in no fusion view"));
    }
    Ok(inputs)
}

pub fn attack(
    config: &RunConfig,
    cloud: &PointCloud,
    cameras: &[CameraView],
    rendered: &[RenderedView],
    inputs: &AttackInputs,
    encoder: &dyn Encoder,
) -> Result<FusionResult> {
    let problems: Vec<ViewProblem<'_>> = inputs
        .slots
        .iter()
        .enumerate()
        .map(|(k, &slot)| ViewProblem {
            cloud,
            camera: &cameras[slot],
            victim: &inputs.membership,
            rendered: &rendered[slot],
            mask: &inputs.masks[k],
            benign: &inputs.benign[k],
            label_embedding: &inputs.label_embedding,
            exemplar: inputs.exemplar.as_ref(),
        })
        .collect();
    let mut optimizer = CollaborativeOptimizer {
        problems,
        encoder,
        config: optimize_config(config),
    };
    let initial = if config.attack.positional {
        Perturbation::zeros_with_positions(cloud.len(), config.attack.epsilon)
    } else {
        Perturbation::zeros(cloud.len(), config.attack.epsilon)
    };
    fuse(&mut optimizer, &inputs.evidence, initial, &fusion_config(config)).stage(Stage::Fusion, "attack.max_retries")
}

/// Evaluate on held-out views; per-view work runs on the rayon pool.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    config: &RunConfig,
    cloud: &PointCloud,
    registry: &LabelRegistry,
    victim: &VictimObject,
    delta: &Perturbation,
    heldout_cams: &[CameraView],
    heldout: &[RenderedView],
    encoder: &(dyn Encoder + Sync),
    defense: Option<&DefenseTransform>,
) -> Result<AttackReport> {
    let membership = victim.membership(cloud.len());
    let per_view: Vec<advof_core::Result<Option<ViewEvaluation>>> = heldout
        .par_iter()
        .map(|rv| {
            let ctx = EvalContext {
                cloud,
                delta,
                victim,
                membership: &membership,
                encoder,
                registry,
                defense,
            };
            evaluation::evaluate_view(&ctx, rv)
        })
        .collect();
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for (rv, r) in heldout.iter().zip(per_view) {
        match r.stage(Stage::Evaluation, "views.heldout")? {
            Some(r) => records.push(r),
            None => excluded.push(rv.view_id),
        }
    }
    let mut report = AttackReport::summarize(
        &victim.label,
        config.attack.mode,
        config.attack.target.as_deref().filter(|_| config.attack.mode == AttackMode::Targeted),
        defense.map(|d| d.kind),
        records,
        excluded,
    )
    .stage(Stage::Evaluation, "views.heldout")?;
    if defense.is_none() {
        report.sr = Some(
            localization_success(
                cloud,
                delta,
                victim,
                heldout_cams,
                heldout,
                encoder,
                registry,
                config.evaluation.sr_threshold,
                config.evaluation.cell_size,
            )
            .stage(Stage::Evaluation, "evaluation.cell_size")?,
        );
    }
    Ok(report)
}

/// All in-memory products of a run.
pub struct RunOutputs {
    pub cloud: PointCloud,
    pub registry: LabelRegistry,
    pub victim: VictimObject,
    pub fusion: FusionResult,
    pub fusion_cams: Vec<CameraView>,
    pub fusion_rendered: Vec<RenderedView>,
    pub report: AttackReport,
    pub defense_reports: Vec<AttackReport>,
}

pub fn defense_seed(config: &RunConfig) -> u64 {
    config.evaluation.seed
}

/// Calibrate, align, fuse and evaluate on an already loaded scene.
pub fn run_on_scene(config: &RunConfig, cloud: PointCloud, mut registry: LabelRegistry) -> Result<RunOutputs> {
    cloud.check_registry(&registry).stage(Stage::Scene, "paths.labels")?;
    let enc = encoder(config)?;
    calibrate(config, &cloud, &mut registry, &enc)?;
    let anchor = anchor_object(&registry, &config.attack.victim)?;
    let (fusion_cams, heldout_cams) = attack_views(config, &cloud, anchor)?;
    let fusion_rendered = render_all(&cloud, &fusion_cams, config.views.splat);
    let victim = align(config, &cloud, &registry, &fusion_cams, &fusion_rendered)?;
    let inputs = attack_inputs(config, &cloud, &registry, &victim, &fusion_rendered, &enc)?;
    let fusion = attack(config, &cloud, &fusion_cams, &fusion_rendered, &inputs, &enc)?;
    let heldout = render_all(&cloud, &heldout_cams, config.views.splat);
    let report = evaluate(config, &cloud, &registry, &victim, &fusion.delta, &heldout_cams, &heldout, &enc, None)?;
    let defense_reports = config
        .evaluation
        .defenses
        .iter()
        .map(|&k| {
            let t = DefenseTransform::standard(k, defense_seed(config));
            evaluate(config, &cloud, &registry, &victim, &fusion.delta, &heldout_cams, &heldout, &enc, Some(&t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunOutputs {
        cloud,
        registry,
        victim,
        fusion,
        fusion_cams,
        fusion_rendered,
        report,
        defense_reports,
    })
}

pub fn run(config: &RunConfig) -> Result<RunOutputs> {
    let (cloud, registry) = generate(config)?;
    run_on_scene(config, cloud, registry)
}
