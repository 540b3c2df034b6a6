//! Multi-view fusion of per-view updates into one global perturbation.
//!
//! Views are visited by descending importance weight. Each candidate update
//! is checked against the previously accepted view: its re-rendered
//! perturbation must stay close to the accepted one (consistency) and its 2D
//! loss there must not drift too far (fusion). Failures lower the view's
//! weight or its working bound and retry from the pre-view snapshot.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::LossBreakdown;
use crate::optimizer::{self, evaluate_objective, OptimizeConfig, Perturbation, TraceEntry, ViewProblem, ViewRun};
use crate::perception::Encoder;
use crate::geometry;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewWeight {
    pub view_id: u32,
    pub score: f64,
    pub pixels: usize,
    /// Largest pixel count over all views.
    pub base: usize,
    pub weight: f64,
}

/// Segmenter score and victim pixel count of one candidate view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewEvidence {
    pub view_id: u32,
    pub score: f64,
    pub pixels: usize,
}

/// `w = score + N_v / N` with `N = max N_v`, normalized to sum to one and
/// sorted by descending weight (ties by view id). Views without victim
/// pixels are dropped.
pub fn importance_weights(views: &[ViewEvidence]) -> Result<Vec<ViewWeight>> {
    let base = views.iter().map(|v| v.pixels).max().unwrap_or(0);
    if base == 0 {
        return Err(Error::FusionPrecondition("every victim mask is empty".into()));
    }
    let mut out: Vec<ViewWeight> = views
        .iter()
        .filter(|v| v.pixels > 0)
        .map(|v| ViewWeight {
            view_id: v.view_id,
            score: v.score,
            pixels: v.pixels,
            base,
            weight: v.score + v.pixels as f64 / base as f64,
        })
        .collect();
    let total: f64 = out.iter().map(|w| w.weight).sum();
    for w in &mut out {
        w.weight /= total;
    }
    out.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.view_id.cmp(&b.view_id)));
    Ok(out)
}

/// Passes iff the MSE between the accepted and the re-rendered perturbation
/// images is below `mu1`.
pub fn consistency_check(prev_accepted: &Image, prev_rerendered: &Image, mu1: f64) -> Result<bool> {
    Ok(prev_accepted.mse(prev_rerendered)? < mu1)
}

/// Passes iff the 2D loss moved by less than `mu2`.
pub fn fusion_check(accepted: f64, now: f64, mu2: f64) -> bool {
    (accepted - now).abs() < mu2
}

/// What fusion needs from a per-view optimizer. `slot` indexes the views
/// handed to [`fuse`].
pub trait ViewOptimizer {
    /// `None` when the victim is not visible in the view.
    fn optimize(&mut self, slot: usize, delta: &Perturbation, weight: f64, bound: f64) -> Result<Option<ViewRun>>;
    /// The 2D perturbation image of `delta` in the view.
    fn render(&self, slot: usize, delta: &Perturbation) -> Result<Image>;
    /// 2D loss components of `delta` in the view.
    fn evaluate(&self, slot: usize, delta: &Perturbation) -> Result<LossBreakdown>;
}

/// The real optimizer over a set of prepared view problems.
pub struct CollaborativeOptimizer<'a> {
    pub problems: Vec<ViewProblem<'a>>,
    pub encoder: &'a dyn Encoder,
    pub config: OptimizeConfig,
}

impl ViewOptimizer for CollaborativeOptimizer<'_> {
    fn optimize(&mut self, slot: usize, delta: &Perturbation, weight: f64, bound: f64) -> Result<Option<ViewRun>> {
        optimizer::optimize_view(delta, &self.problems[slot], self.encoder, weight, bound, &self.config)
    }

    fn render(&self, slot: usize, delta: &Perturbation) -> Result<Image> {
        geometry::render_perturbation(delta, self.problems[slot].rendered)
    }

    fn evaluate(&self, slot: usize, delta: &Perturbation) -> Result<LossBreakdown> {
        Ok(evaluate_objective(delta, &self.problems[slot], self.encoder, 1.0, &self.config)?.breakdown)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub epsilon: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub max_retries: usize,
    pub weight_factor: f64,
    pub bound_factor: f64,
    /// Run the consistency and fusion checks.
    pub checks: bool,
    /// Ignore importance and weight every view equally.
    pub uniform_weights: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            epsilon: 32.0 / 255.0,
            mu1: 0.01,
            mu2: 0.05,
            max_retries: 5,
            weight_factor: 0.5,
            bound_factor: 0.8,
            checks: true,
            uniform_weights: false,
        }
    }
}

impl FusionConfig {
    /// Uniform weights and no checks.
    pub fn without_fusion(self) -> Self {
        Self {
            checks: false,
            uniform_weights: true,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Accepted,
    Rejected,
    /// The victim was not visible.
    Skipped,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Accepted => "accepted",
            Outcome::Rejected => "rejected",
            Outcome::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub view_id: u32,
    /// Normalized weight of the view before each attempt.
    pub weights: Vec<f64>,
    /// Working bound of each attempt.
    pub bounds: Vec<f64>,
    pub retries: usize,
    pub consistency_failures: usize,
    pub fusion_failures: usize,
    pub outcome: Outcome,
    /// 2D loss of the view at acceptance.
    pub final_loss: Option<LossBreakdown>,
    /// Trace of the accepted attempt.
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FusionReport {
    pub records: Vec<ViewRecord>,
    /// Final normalized weights in processing order.
    pub final_weights: Vec<(u32, f64)>,
    pub checks: bool,
}

impl FusionReport {
    pub fn accepted(&self) -> impl Iterator<Item = &ViewRecord> {
        self.records.iter().filter(|r| r.outcome == Outcome::Accepted)
    }

    pub fn record(&self, view_id: u32) -> Option<&ViewRecord> {
        self.records.iter().find(|r| r.view_id == view_id)
    }
}

impl fmt::Display for FusionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "fusion-report v1")?;
        writeln!(f, "checks {}", if self.checks { "on" } else { "off" })?;
        for r in &self.records {
            writeln!(f, "view {}", r.view_id)?;
            writeln!(f, "  outcome {}", r.outcome.name())?;
            write!(f, "  weights")?;
            for w in &r.weights {
                write!(f, " {w:.12}")?;
            }
            writeln!(f)?;
            write!(f, "  bounds")?;
            for b in &r.bounds {
                write!(f, " {b:.12}")?;
            }
            writeln!(f)?;
            writeln!(
                f,
                "  retries {} consistency_failures {} fusion_failures {}",
                r.retries, r.consistency_failures, r.fusion_failures
            )?;
            if let Some(l) = &r.final_loss {
                writeln!(
                    f,
                    "  l2d total {:.12} i2i {:.12} i2t {:.12} b2b {:.12}",
                    l.total, l.i2i, l.i2t, l.b2b
                )?;
            }
        }
        write!(f, "final_weights")?;
        for (id, w) in &self.final_weights {
            write!(f, " {id}:{w:.12}")?;
        }
        writeln!(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcceptedView {
    /// `render_perturbation(δ, v)` at acceptance.
    pub image: Image,
    pub l2d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionState {
    pub delta: Perturbation,
    pub accepted: BTreeMap<u32, AcceptedView>,
    /// Current normalized weights in processing order.
    pub weights: Vec<(u32, f64)>,
    pub retries: BTreeMap<u32, usize>,
    pub rejected: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub delta: Perturbation,
    pub report: FusionReport,
    pub state: FusionState,
}

fn renormalize(weights: &mut [(u32, f64)]) {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    for w in weights {
        w.1 /= total;
    }
}

/// Fuse per-view updates. `views[k]` describes optimizer slot `k`.
pub fn fuse(
    optimizer: &mut dyn ViewOptimizer,
    views: &[ViewEvidence],
    initial: Perturbation,
    config: &FusionConfig,
) -> Result<FusionResult> {
    if !(config.epsilon > 0.0) || !(config.mu1 > 0.0) || !(config.mu2 > 0.0) {
        return Err(Error::invalid("fusion bound and thresholds must be positive"));
    }
    let ranked = importance_weights(views)?;
    let slot_of: BTreeMap<u32, usize> = views.iter().enumerate().map(|(k, v)| (v.view_id, k)).collect();

    let mut state = FusionState {
        delta: initial,
        accepted: BTreeMap::new(),
        weights: ranked
            .iter()
            .map(|w| {
                let weight = if config.uniform_weights { 1.0 / ranked.len() as f64 } else { w.weight };
                (w.view_id, weight)
            })
            .collect(),
        retries: BTreeMap::new(),
        rejected: Vec::new(),
    };
    let mut report = FusionReport {
        checks: config.checks,
        ..FusionReport::default()
    };
    let mut previous: Option<(u32, usize)> = None;

    for pos in 0..state.weights.len() {
        let view_id = state.weights[pos].0;
        let slot = slot_of[&view_id];
        let snapshot = state.delta.clone();
        let mut bound = config.epsilon;
        let mut record = ViewRecord {
            view_id,
            weights: Vec::new(),
            bounds: Vec::new(),
            retries: 0,
            consistency_failures: 0,
            fusion_failures: 0,
            outcome: Outcome::Rejected,
            final_loss: None,
            trace: Vec::new(),
        };

        loop {
            let weight = state.weights[pos].1;
            record.weights.push(weight);
            record.bounds.push(bound);
            let Some(run) = optimizer.optimize(slot, &snapshot, weight, bound)? else {
                record.outcome = Outcome::Skipped;
                break;
            };

            let mut passed = true;
            if let (true, Some((prev_id, prev_slot))) = (config.checks, previous) {
                let accepted = &state.accepted[&prev_id];
                let rerendered = optimizer.render(prev_slot, &run.delta)?;
                if !consistency_check(&accepted.image, &rerendered, config.mu1)? {
                    record.consistency_failures += 1;
                    state.weights[pos].1 *= config.weight_factor;
                    renormalize(&mut state.weights);
                    passed = false;
                } else {
                    let now = optimizer.evaluate(prev_slot, &run.delta)?.total;
                    if !fusion_check(accepted.l2d, now, config.mu2) {
                        record.fusion_failures += 1;
                        bound *= config.bound_factor;
                        passed = false;
                    }
                }
            }

            if passed {
                state.delta = run.delta;
                let image = optimizer.render(slot, &state.delta)?;
                let loss = optimizer.evaluate(slot, &state.delta)?;
                state.accepted.insert(view_id, AcceptedView { image, l2d: loss.total });
                record.final_loss = Some(loss);
                record.trace = run.trace;
                record.outcome = Outcome::Accepted;
                previous = Some((view_id, slot));
                break;
            }
            if record.retries == config.max_retries {
                // Rejected: the global perturbation stays at the snapshot.
                state.delta = snapshot;
                state.rejected.push(view_id);
                break;
            }
            record.retries += 1;
        }
        state.retries.insert(view_id, record.retries);
        report.records.push(record);
    }

    report.final_weights = state.weights.clone();
    if report.accepted().next().is_none() {
        return Err(Error::FusionFailed(alloc::boxed::Box::new(report)));
    }
    Ok(FusionResult {
        delta: state.delta.clone(),
        report,
        state,
    })
}
