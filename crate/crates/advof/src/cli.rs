//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use advof_core::alignment::VictimObject;
use advof_core::evaluation::{DefenseKind, DefenseTransform};

use crate::artifacts::{self, Artifacts};
use crate::config::{Ablation, RunConfig};
use crate::io;
use crate::pipeline::{self, PipelineError, Result, Stage};

/// Exit status when `--verify` or `verify` finds a mismatch.
pub const EXIT_VERIFY: i32 = 8;

#[derive(Debug, Parser)]
#[command(name = "advof", version, about = "Multi-view adversarial point-cloud attacks on a toy perception stack")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scene and write scene.txt and labels.txt.
    SceneGen(Common),
    /// Calibrate label prototypes and write protos.txt.
    Calibrate(Common),
    /// Align the victim object and write victim.txt.
    Align(Common),
    /// Align and run the fused multi-view attack.
    Attack(Common),
    /// Evaluate a stored perturbation on held-out views.
    Eval(EvalArgs),
    /// The whole pipeline.
    Run(Common),
    /// Rehash the artifacts listed in an output directory's manifest.
    Verify {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the scene, view, attack and evaluation seeds.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Defense applied at evaluation; repeatable, `all` for every kind.
    #[arg(long, value_name = "KIND")]
    pub defense: Vec<String>,
    #[arg(long, value_name = "COMPONENT", value_parser = ["alignment", "l2d", "l3d", "fusion"])]
    pub ablate: Option<String>,
    /// Recompute the artifacts and compare them with the manifest instead of writing.
    #[arg(long)]
    pub verify: bool,
    /// Extra `section.key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Defaults to `<out>/delta.txt`.
    #[arg(long, value_name = "PATH")]
    pub delta: Option<PathBuf>,
    /// Defaults to `<out>/victim.txt`.
    #[arg(long, value_name = "PATH")]
    pub victim: Option<PathBuf>,
}

fn config_err(key: &str, message: impl ToString) -> PipelineError {
    PipelineError::new(Stage::Config, key, message)
}

/// The effective configuration of a subcommand.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(p) => RunConfig::from_file(p).map_err(|e| config_err(&e.key, e.message))?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| config_err("--set", format!("expected KEY=VALUE, got {kv:?}")))?;
        config.set(k.trim(), v.trim()).map_err(|e| config_err(&e.key, e.message))?;
    }
    if let Some(seed) = common.seed {
        config.scene.seed = seed;
        config.views.seed = seed;
        config.attack.seed = seed;
        config.evaluation.seed = seed;
    }
    if let Some(out) = &common.out {
        config.paths.out = out.clone();
    }
    for d in &common.defense {
        if d == "all" {
            config.evaluation.defenses = DefenseKind::ALL.to_vec();
        } else {
            let kind = DefenseKind::parse(d).map_err(|e| config_err("--defense", e))?;
            if !config.evaluation.defenses.contains(&kind) {
                config.evaluation.defenses.push(kind);
            }
        }
    }
    if let Some(a) = &common.ablate {
        config.ablation = Some(Ablation::parse(a).ok_or_else(|| config_err("--ablate", format!("unknown component {a:?}")))?);
    }
    if let Ok(v) = std::env::var("ADVOF_THREADS") {
        config.threads = v.trim().parse().map_err(|_| config_err("ADVOF_THREADS", format!("not a thread count: {v:?}")))?;
    }
    config.validate().map_err(|e| config_err(&e.key, e.message))?;
    Ok(config)
}

fn init_threads(threads: usize) {
    // A second initialization in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

/// Write `artifacts`, or with `verify` compare them to the manifest.
fn emit(dir: &Path, artifacts: &Artifacts, verify: bool) -> Result<Vec<String>> {
    if !verify {
        artifacts::write(dir, artifacts)?;
        return Ok(Vec::new());
    }
    let manifest = artifacts::read_manifest(dir)?;
    let expected = manifest
        .into_iter()
        .filter(|(k, _)| artifacts.get(k).is_some())
        .collect();
    Ok(artifacts::compare(&expected, &artifacts.hashes()))
}

fn stage_artifacts(command: &Command) -> Result<(RunConfig, Artifacts, bool, String)> {
    match command {
        Command::SceneGen(c) => {
            let config = resolve_config(c)?;
            init_threads(config.threads);
            let (cloud, registry) = pipeline::generate(&config)?;
            let summary = format!("scene: {} points, {} objects", cloud.len(), registry.entries().count());
            Ok((config, artifacts::scene_artifacts(&cloud, &registry), c.verify, summary))
        }
        Command::Calibrate(c) => {
            let config = resolve_config(c)?;
            init_threads(config.threads);
            let (cloud, mut registry, generated) = pipeline::load_scene(&config)?;
            let enc = pipeline::encoder(&config)?;
            pipeline::calibrate(&config, &cloud, &mut registry, &enc)?;
            let mut a = artifacts::protos_artifacts(&registry)?;
            if generated {
                a.0.extend(artifacts::scene_artifacts(&cloud, &registry).0);
            }
            Ok((config, a, c.verify, format!("calibrated {} labels", registry.labels().len())))
        }
        Command::Align(c) => {
            let config = resolve_config(c)?;
            init_threads(config.threads);
            let (cloud, registry, _) = pipeline::load_scene(&config)?;
            let anchor = pipeline::anchor_object(&registry, &config.attack.victim)?;
            let (cams, _) = pipeline::attack_views(&config, &cloud, anchor)?;
            let rendered = pipeline::render_all(&cloud, &cams, config.views.splat);
            let victim = pipeline::align(&config, &cloud, &registry, &cams, &rendered)?;
            let summary = format!("victim {}: {} points in {} views", victim.label, victim.indices.len(), victim.views.len());
            Ok((config, artifacts::victim_artifacts(&victim), c.verify, summary))
        }
        Command::Attack(c) => {
            let config = resolve_config(c)?;
            init_threads(config.threads);
            let (cloud, mut registry, _) = pipeline::load_scene(&config)?;
            let enc = pipeline::encoder(&config)?;
            pipeline::calibrate(&config, &cloud, &mut registry, &enc)?;
            let anchor = pipeline::anchor_object(&registry, &config.attack.victim)?;
            let (cams, _) = pipeline::attack_views(&config, &cloud, anchor)?;
            let rendered = pipeline::render_all(&cloud, &cams, config.views.splat);
            let victim = pipeline::align(&config, &cloud, &registry, &cams, &rendered)?;
            let inputs = pipeline::attack_inputs(&config, &cloud, &registry, &victim, &rendered, &enc)?;
            let fusion = pipeline::attack(&config, &cloud, &cams, &rendered, &inputs, &enc)?;
            let mut a = artifacts::victim_artifacts(&victim);
            a.0.extend(artifacts::fusion_artifacts(&cloud, &fusion, &cams, &rendered, config.views.splat)?.0);
            let summary = format!(
                "fused {} views, {} rejected, linf {:.6}",
                fusion.report.records.len(),
                fusion.state.rejected.len(),
                fusion.delta.linf()
            );
            Ok((config, a, c.verify, summary))
        }
        Command::Eval(e) => {
            let config = resolve_config(&e.common)?;
            init_threads(config.threads);
            let (cloud, mut registry, _) = pipeline::load_scene(&config)?;
            let enc = pipeline::encoder(&config)?;
            pipeline::calibrate(&config, &cloud, &mut registry, &enc)?;
            let out = &config.paths.out;
            let victim_path = e.victim.clone().unwrap_or_else(|| out.join("victim.txt"));
            let delta_path = e.delta.clone().unwrap_or_else(|| out.join("delta.txt"));
            let read = |p: &Path| io::read_text(p).map_err(|err| PipelineError::new(Stage::Io, &p.display().to_string(), err));
            let (label, indices) = io::victim_from_text(&read(&victim_path)?)
                .map_err(|err| PipelineError::new(Stage::Io, &victim_path.display().to_string(), err))?;
            if label != config.attack.victim {
                return Err(config_err("attack.victim", format!("victim file is for {label:?}")));
            }
            let victim = VictimObject::from_indices(&cloud, indices, &label)
                .map_err(|err| PipelineError::new(Stage::Io, &victim_path.display().to_string(), err))?;
            let delta = io::delta_from_text(&read(&delta_path)?, config.attack.epsilon)
                .map_err(|err| PipelineError::new(Stage::Io, &delta_path.display().to_string(), err))?;
            if delta.len() != cloud.len() {
                return Err(PipelineError::new(Stage::Io, &delta_path.display().to_string(), "delta and scene differ in length"));
            }
            let anchor = pipeline::anchor_object(&registry, &config.attack.victim)?;
            let (_, heldout_cams) = pipeline::attack_views(&config, &cloud, anchor)?;
            let heldout = pipeline::render_all(&cloud, &heldout_cams, config.views.splat);
            let report = pipeline::evaluate(&config, &cloud, &registry, &victim, &delta, &heldout_cams, &heldout, &enc, None)?;
            let defenses = config
                .evaluation
                .defenses
                .iter()
                .map(|&k| {
                    let t = DefenseTransform::standard(k, pipeline::defense_seed(&config));
                    pipeline::evaluate(&config, &cloud, &registry, &victim, &delta, &heldout_cams, &heldout, &enc, Some(&t))
                })
                .collect::<Result<Vec<_>>>()?;
            let summary = summary_line(&report);
            Ok((config.clone(), artifacts::report_artifacts(&config, &report, &defenses), e.common.verify, summary))
        }
        Command::Run(c) => {
            if c.config.is_none() {
                return Err(config_err("--config", "`run` requires --config"));
            }
            let config = resolve_config(c)?;
            init_threads(config.threads);
            let (cloud, registry, generated) = pipeline::load_scene(&config)?;
            let out = pipeline::run_on_scene(&config, cloud, registry)?;
            let a = artifacts::run_artifacts(&config, &out, generated)?;
            Ok((config, a, c.verify, summary_line(&out.report)))
        }
        Command::Verify { .. } => unreachable!("handled by run_command"),
    }
}

fn summary_line(r: &advof_core::evaluation::AttackReport) -> String {
    let t = r.targeted_asr.map_or("-".to_string(), |t| format!("{t:.3}"));
    format!(
        "benign acc {:.3}  untargeted asr {:.3}  targeted asr {t}  background delta {:.3}",
        r.benign_acc, r.untargeted_asr, r.mean_background_delta
    )
}

/// Execute a parsed command; returns the process exit status.
pub fn run_command(command: &Command) -> i32 {
    if let Command::Verify { out } = command {
        return match artifacts::verify_dir(out) {
            Ok(p) if p.is_empty() => {
                println!("verify: all artifacts match");
                0
            }
            Ok(p) => {
                for line in p {
                    eprintln!("verify: {line}");
                }
                EXIT_VERIFY
            }
            Err(e) => {
                eprintln!("advof: {e}");
                e.exit_code()
            }
        };
    }
    let outcome = stage_artifacts(command).and_then(|(config, a, verify, summary)| {
        let problems = emit(&config.paths.out, &a, verify)?;
        Ok((summary, verify, problems))
    });
    match outcome {
        Ok((summary, verify, problems)) => {
            println!("{summary}");
            if !verify {
                return 0;
            }
            if problems.is_empty() {
                println!("verify: all artifacts match");
                0
            } else {
                for line in problems {
                    eprintln!("verify: {line}");
                }
                EXIT_VERIFY
            }
        }
        Err(e) => {
            eprintln!("advof: {e}");
            e.exit_code()
        }
    }
}

/// Parse arguments and run; returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run_command(&cli.command),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}
