//! Scripted per-view optimizer for driving the fusion loop.

use advof_core::fusion::{ViewEvidence, ViewOptimizer};
use advof_core::image::Image;
use advof_core::losses::{AttackMode, LossBreakdown};
use advof_core::optimizer::{Perturbation, ViewRun};

pub const EPS: f64 = 32.0 / 255.0;

#[derive(Clone, Copy)]
pub enum Script {
    Clean,
    /// Flip the sign of view 0's delta: a large re-render change.
    Inconsistent,
    /// Nudge view 0's red channel: tiny image change, large loss change.
    LossShift,
}

/// View `k` owns point `k`. Attempts follow `scripts[k]`, the last entry
/// repeating.
pub struct Stub {
    pub scripts: Vec<Vec<Script>>,
    pub calls: Vec<usize>,
    pub visible: Vec<bool>,
}

impl Stub {
    pub fn new(scripts: Vec<Vec<Script>>) -> Self {
        let n = scripts.len();
        Self {
            scripts,
            calls: vec![0; n],
            visible: vec![true; n],
        }
    }
}

impl ViewOptimizer for Stub {
    fn optimize(&mut self, slot: usize, delta: &Perturbation, _weight: f64, bound: f64) -> advof_core::Result<Option<ViewRun>> {
        if !self.visible[slot] {
            return Ok(None);
        }
        let script = &self.scripts[slot];
        let step = script[self.calls[slot].min(script.len() - 1)];
        self.calls[slot] += 1;
        let mut rgb = delta.rgb().to_vec();
        rgb[slot] = [bound; 3];
        match step {
            Script::Clean => {}
            Script::Inconsistent => rgb[0] = rgb[0].map(|v| -v),
            Script::LossShift => rgb[0][0] -= 0.01,
        }
        Ok(Some(ViewRun {
            delta: Perturbation::from_parts(rgb, None, delta.bound()).unwrap(),
            initial: None,
            trace: Vec::new(),
        }))
    }

    fn render(&self, slot: usize, delta: &Perturbation) -> advof_core::Result<Image> {
        Ok(Image::filled(1, 1, delta.rgb()[slot]))
    }

    fn evaluate(&self, slot: usize, delta: &Perturbation) -> advof_core::Result<LossBreakdown> {
        let v = 10.0 * delta.rgb()[slot][0];
        Ok(LossBreakdown {
            total: v,
            color: 0.0,
            chamfer: 0.0,
            i2i: v,
            i2t: 0.0,
            b2b: 0.0,
            mode: AttackMode::Untargeted,
            alpha: 0.5,
            beta: 0.01,
        })
    }
}

pub fn evidence() -> Vec<ViewEvidence> {
    vec![
        ViewEvidence { view_id: 10, score: 0.9, pixels: 100 },
        ViewEvidence { view_id: 20, score: 0.5, pixels: 50 },
    ]
}

pub fn start() -> Perturbation {
    Perturbation::zeros(2, EPS)
}

