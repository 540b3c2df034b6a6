//! Per-view collaborative optimization.
//!
//! The optimized variable is the RGB delta of every victim point visible in
//! the view. Gradients of the 2D loss flow feature map → encoder VJP → clamp
//! → pixel-to-point scatter over the view's frozen point-index map; the 3D
//! color term is differentiated in point space directly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, rasterize, ObjectMask, RenderedView};
use crate::losses::{self, AttackMode, I2iScope, L2dInputs, LossBreakdown};
use crate::math::{self, sqrt, Vec3};
use crate::perception::{Embedding, Encoder, FeatureMap};
use crate::scene::{CameraView, PointCloud, Rgb};

/// Per-point adversarial deltas over a whole cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    rgb: Vec<Rgb>,
    xyz: Option<Vec<Vec3>>,
    bound: f64,
}

impl Perturbation {
    pub fn zeros(len: usize, bound: f64) -> Self {
        Self {
            rgb: vec![[0.0; 3]; len],
            xyz: None,
            bound,
        }
    }

    /// Also carries zero positional deltas.
    pub fn zeros_with_positions(len: usize, bound: f64) -> Self {
        Self {
            xyz: Some(vec![[0.0; 3]; len]),
            ..Self::zeros(len, bound)
        }
    }

    pub fn from_parts(rgb: Vec<Rgb>, xyz: Option<Vec<Vec3>>, bound: f64) -> Result<Self> {
        if let Some(x) = &xyz {
            if x.len() != rgb.len() {
                return Err(Error::contract("positional and color deltas differ in length"));
            }
        }
        let p = Self { rgb, xyz, bound };
        if !(p.linf() <= bound) {
            return Err(Error::invalid(format!(
                "perturbation L∞ norm {} exceeds bound {bound}",
                p.linf()
            )));
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn rgb(&self) -> &[Rgb] {
        &self.rgb
    }

    pub(crate) fn rgb_mut(&mut self) -> &mut [Rgb] {
        &mut self.rgb
    }

    pub fn positions(&self) -> Option<&[Vec3]> {
        self.xyz.as_deref()
    }

    /// L∞ norm of the color deltas.
    pub fn linf(&self) -> f64 {
        self.rgb.iter().flatten().fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// The adversarial cloud: colors `clamp(c + δ, 0, 1)`, positions shifted.
    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        if cloud.len() != self.len() {
            return Err(Error::contract("perturbation and cloud differ in length"));
        }
        let colors = cloud
            .colors()
            .iter()
            .zip(&self.rgb)
            .map(|(c, d)| {
                [
                    (c[0] + d[0]).clamp(0.0, 1.0),
                    (c[1] + d[1]).clamp(0.0, 1.0),
                    (c[2] + d[2]).clamp(0.0, 1.0),
                ]
            })
            .collect();
        let adv = cloud.with_colors(colors)?;
        match &self.xyz {
            Some(x) => adv.with_positions(
                adv.positions()
                    .iter()
                    .zip(x)
                    .map(|(p, d)| math::add(*p, *d))
                    .collect(),
            ),
            None => Ok(adv),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
    beta1_t: f64,
    beta2_t: f64,
    view: u32,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            config,
            beta1_t: 1.0,
            beta2_t: 1.0,
            view: 0,
        }
    }

    /// View id reported in optimization errors.
    pub fn for_view(mut self, view: u32) -> Self {
        self.view = view;
        self
    }

    /// One bias-corrected Adam update followed by projection onto
    /// `[-bound, bound]`.
    pub fn step(&mut self, var: &mut [f64], grad: &[f64], bound: f64) -> Result<()> {
        if var.len() != grad.len() || var.len() != self.m.len() {
            return Err(Error::contract("Adam variable, gradient and state differ in length"));
        }
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Optimization {
                view: self.view,
                iteration: self.step as usize,
                reason: format!("non-finite gradient at entry {k}"),
            });
        }
        let c = self.config;
        self.step += 1;
        self.beta1_t *= c.beta1;
        self.beta2_t *= c.beta2;
        let (bc1, bc2) = (1.0 - self.beta1_t, 1.0 - self.beta2_t);
        for i in 0..var.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            var[i] = (var[i] - c.lr * m_hat / (sqrt(v_hat) + c.eps)).clamp(-bound, bound);
        }
        Ok(())
    }
}

/// Settings of the optional positional-delta mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionalConfig {
    /// L∞ bound on positional deltas in meters.
    pub bound: f64,
    /// Probe size of the simultaneous-perturbation difference.
    pub probe: f64,
    pub lr: f64,
    pub splat_radius: u32,
    pub seed: u64,
}

impl Default for PositionalConfig {
    fn default() -> Self {
        Self {
            bound: 0.02,
            probe: 1e-3,
            lr: 1e-3,
            splat_radius: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeConfig {
    pub iterations: usize,
    pub adam: AdamConfig,
    pub alpha: f64,
    pub beta: f64,
    pub mode: AttackMode,
    /// Weight of the 3D loss in the per-view objective.
    pub lambda_3d: f64,
    /// Whether the 2D loss drives the update.
    pub use_l2d: bool,
    pub scope: I2iScope,
    pub positional: Option<PositionalConfig>,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            iterations: 25,
            adam: AdamConfig::default(),
            alpha: 0.5,
            beta: 0.01,
            mode: AttackMode::Untargeted,
            lambda_3d: 1.0,
            use_l2d: true,
            scope: I2iScope::Masked,
            positional: None,
        }
    }
}

/// Features and mask of the target exemplar, encoded once.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarFeatures {
    pub features: FeatureMap,
    pub mask: ObjectMask,
}

/// Everything fixed about one view during its optimization.
#[derive(Clone, Copy)]
pub struct ViewProblem<'a> {
    pub cloud: &'a PointCloud,
    pub camera: &'a CameraView,
    /// Victim membership per cloud point.
    pub victim: &'a [bool],
    pub rendered: &'a RenderedView,
    pub mask: &'a ObjectMask,
    /// Cached benign features of this view.
    pub benign: &'a FeatureMap,
    /// Victim label (untargeted) or target label (targeted) embedding.
    pub label_embedding: &'a Embedding,
    pub exemplar: Option<&'a ExemplarFeatures>,
}

impl ViewProblem<'_> {
    pub fn view_id(&self) -> u32 {
        self.rendered.view_id
    }

    /// Sorted victim points owning at least one pixel in this view.
    pub fn visible_victims(&self) -> Vec<usize> {
        self.rendered
            .visible_points()
            .into_iter()
            .filter(|&i| self.victim[i])
            .collect()
    }

    fn l2d_inputs(&self, config: &OptimizeConfig) -> L2dInputs<'_> {
        L2dInputs {
            benign: self.benign,
            mask: self.mask,
            label_embedding: self.label_embedding,
            exemplar: self.exemplar.map(|e| (&e.features, &e.mask)),
            mode: config.mode,
            alpha: config.alpha,
            beta: config.beta,
            scope: config.scope,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub view_id: u32,
    pub weight: f64,
    /// `λ₃·L_3D + w·L_2D` (the 2D term only when enabled).
    pub objective: f64,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRun {
    pub delta: Perturbation,
    /// Objective at the starting perturbation, when any step ran.
    pub initial: Option<TraceEntry>,
    /// One entry per step, evaluated after that step.
    pub trace: Vec<TraceEntry>,
}

struct Evaluation {
    entry: TraceEntry,
    /// Objective gradient per cloud point (zero off the victim).
    grad: Option<Vec<Rgb>>,
}

fn victim_points<'a, T: Copy>(values: &'a [T], victim: &'a [bool]) -> impl Iterator<Item = T> + 'a {
    values.iter().zip(victim).filter(|(_, v)| **v).map(|(x, _)| *x)
}

/// 3D loss of the victim under `delta`, with its color gradient folded into
/// `grad` when provided.
fn loss_3d(
    delta: &Perturbation,
    problem: &ViewProblem<'_>,
    lambda: f64,
    grad: Option<&mut [Rgb]>,
) -> Result<(f64, f64)> {
    // Color: O^adv - O = δ on every victim point.
    let color: f64 = victim_points(delta.rgb(), problem.victim)
        .map(|d| d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
        .sum();
    if let Some(g) = grad {
        for ((gi, d), v) in g.iter_mut().zip(delta.rgb()).zip(problem.victim) {
            if *v {
                for k in 0..3 {
                    gi[k] += lambda * 2.0 * d[k];
                }
            }
        }
    }
    let chamfer = match delta.positions() {
        Some(xyz) if xyz.iter().any(|d| *d != [0.0; 3]) => {
            let orig: Vec<Vec3> = victim_points(problem.cloud.positions(), problem.victim).collect();
            let adv: Vec<Vec3> = problem
                .cloud
                .positions()
                .iter()
                .zip(xyz)
                .zip(problem.victim)
                .filter(|(_, v)| **v)
                .map(|((p, d), _)| math::add(*p, *d))
                .collect();
            losses::l_chamfer(&adv, &orig)?
        }
        _ => 0.0,
    };
    Ok((color, chamfer))
}

fn evaluate(
    delta: &Perturbation,
    problem: &ViewProblem<'_>,
    encoder: &dyn Encoder,
    weight: f64,
    config: &OptimizeConfig,
    iteration: usize,
    want_grad: bool,
) -> Result<Evaluation> {
    let rendered = problem.rendered;
    let delta_img = geometry::render_perturbation(delta, rendered)?;
    let adv = geometry::adversarial_image(rendered, &delta_img)?;
    let fmap = encoder.encode_image(&adv);
    let inputs = problem.l2d_inputs(config);

    let mut grad = if want_grad {
        Some(vec![[0.0; 3]; problem.cloud.len()])
    } else {
        None
    };

    let mut breakdown = if want_grad && config.use_l2d {
        let (b, mut cot) = losses::l_2d(&fmap, &inputs)?;
        cot.data_mut().iter_mut().for_each(|v| *v *= weight);
        let mut g_img = encoder.vjp_image(&adv, &cot);
        // Clamp subgradient: zero outside [0, 1].
        let base = rendered.color.data();
        for ((g, b), d) in g_img.data_mut().iter_mut().zip(base).zip(delta_img.data()) {
            let raw = b + d;
            if !(0.0..=1.0).contains(&raw) {
                *g = 0.0;
            }
        }
        let per_point = geometry::scatter(&g_img, rendered)?;
        let acc = grad.as_mut().expect("allocated");
        for ((a, p), v) in acc.iter_mut().zip(per_point).zip(problem.victim) {
            if *v {
                *a = p;
            }
        }
        b
    } else {
        losses::l_2d_value(&fmap, &inputs)?
    };

    let (color, chamfer) = loss_3d(delta, problem, config.lambda_3d, grad.as_deref_mut())?;
    breakdown.color = color;
    breakdown.chamfer = chamfer;
    let l2d_term = if config.use_l2d { weight * breakdown.total } else { 0.0 };
    let objective = config.lambda_3d * (color + chamfer) + l2d_term;
    if !objective.is_finite() {
        return Err(Error::Optimization {
            view: problem.view_id(),
            iteration,
            reason: "non-finite objective".into(),
        });
    }
    Ok(Evaluation {
        entry: TraceEntry {
            iteration,
            view_id: problem.view_id(),
            weight,
            objective,
            breakdown,
        },
        grad,
    })
}

/// Objective of `delta` on one view, as recorded in traces.
pub fn evaluate_objective(
    delta: &Perturbation,
    problem: &ViewProblem<'_>,
    encoder: &dyn Encoder,
    weight: f64,
    config: &OptimizeConfig,
) -> Result<TraceEntry> {
    Ok(evaluate(delta, problem, encoder, weight, config, 0, false)?.entry)
}

/// Objective of `delta` on one view and its gradient with respect to every
/// point's color delta (zero off the victim).
pub fn objective_gradient(
    delta: &Perturbation,
    problem: &ViewProblem<'_>,
    encoder: &dyn Encoder,
    weight: f64,
    config: &OptimizeConfig,
) -> Result<(TraceEntry, Vec<Rgb>)> {
    let e = evaluate(delta, problem, encoder, weight, config, 0, true)?;
    Ok((e.entry, e.grad.expect("gradient requested")))
}

/// Run `config.iterations` Adam steps on the victim points visible in the
/// view; `bound` caps the updated deltas. Returns `None` when the victim is
/// not visible.
pub fn optimize_view(
    delta: &Perturbation,
    problem: &ViewProblem<'_>,
    encoder: &dyn Encoder,
    weight: f64,
    bound: f64,
    config: &OptimizeConfig,
) -> Result<Option<ViewRun>> {
    if delta.len() != problem.cloud.len() || problem.victim.len() != problem.cloud.len() {
        return Err(Error::contract("perturbation, victim set and cloud differ in length"));
    }
    let visible = problem.visible_victims();
    if visible.is_empty() || problem.mask.is_empty() {
        return Ok(None);
    }
    let mut current = delta.clone();
    if config.iterations == 0 {
        return Ok(Some(ViewRun {
            delta: current,
            initial: None,
            trace: Vec::new(),
        }));
    }

    let mut adam = AdamState::new(visible.len() * 3, config.adam).for_view(problem.view_id());
    let mut var: Vec<f64> = visible
        .iter()
        .flat_map(|&i| current.rgb()[i])
        .collect();
    let mut flat_grad = vec![0.0; var.len()];

    let mut positional = match (config.positional, current.positions()) {
        (Some(pc), Some(_)) => Some(PositionalRun::new(pc, &visible)),
        _ => None,
    };

    let mut eval = evaluate(&current, problem, encoder, weight, config, 0, true)?;
    let initial = Some(eval.entry);
    let mut trace = Vec::with_capacity(config.iterations);

    for it in 1..=config.iterations {
        let grad = eval.grad.take().expect("gradient requested");
        for (k, &i) in visible.iter().enumerate() {
            flat_grad[3 * k..3 * k + 3].copy_from_slice(&grad[i]);
        }
        adam.step(&mut var, &flat_grad, bound)?;
        for (k, &i) in visible.iter().enumerate() {
            current.rgb_mut()[i] = [var[3 * k], var[3 * k + 1], var[3 * k + 2]];
        }
        if let Some(pos) = positional.as_mut() {
            pos.step(&mut current, problem, encoder, weight, config, it)?;
        }
        let last = it == config.iterations;
        eval = evaluate(&current, problem, encoder, weight, config, it, !last)?;
        trace.push(eval.entry);
    }

    Ok(Some(ViewRun {
        delta: current,
        initial,
        trace,
    }))
}

/// Positional deltas driven by simultaneous-perturbation differences of the
/// 2D loss (re-rasterizing the displaced cloud) plus the analytic Chamfer
/// gradient.
struct PositionalRun {
    config: PositionalConfig,
    adam: AdamState,
    visible: Vec<usize>,
    rng: ChaCha8Rng,
}

impl PositionalRun {
    fn new(config: PositionalConfig, visible: &[usize]) -> Self {
        let adam = AdamState::new(
            visible.len() * 3,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        Self {
            config,
            adam,
            visible: visible.to_vec(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        }
    }

    fn l2d_displaced(
        &self,
        delta: &Perturbation,
        xyz: &[Vec3],
        problem: &ViewProblem<'_>,
        encoder: &dyn Encoder,
        config: &OptimizeConfig,
    ) -> Result<f64> {
        let mut d = delta.clone();
        d.xyz = Some(xyz.to_vec());
        let adv_cloud = d.apply(problem.cloud)?;
        let rendered = rasterize(&adv_cloud, problem.camera, self.config.splat_radius);
        let mask = ObjectMask::from_points(&rendered, problem.mask.object_id, 1.0, |i| {
            problem.victim[i]
        })?;
        if mask.is_empty() {
            return Ok(0.0);
        }
        let fmap = encoder.encode_image(&rendered.color);
        let mut inputs = problem.l2d_inputs(config);
        inputs.mask = &mask;
        Ok(losses::l_2d_value(&fmap, &inputs)?.total)
    }

    fn step(
        &mut self,
        delta: &mut Perturbation,
        problem: &ViewProblem<'_>,
        encoder: &dyn Encoder,
        weight: f64,
        config: &OptimizeConfig,
        iteration: usize,
    ) -> Result<()> {
        let base: Vec<Vec3> = delta.positions().expect("positional mode").to_vec();
        let h = self.config.probe;
        let signs: Vec<[f64; 3]> = self
            .visible
            .iter()
            .map(|_| {
                let mut s = [0.0; 3];
                for v in &mut s {
                    *v = if self.rng.random::<bool>() { 1.0 } else { -1.0 };
                }
                s
            })
            .collect();
        let shifted = |sign: f64| {
            let mut x = base.clone();
            for (k, &i) in self.visible.iter().enumerate() {
                x[i] = math::add(x[i], math::scale(signs[k], sign * h));
            }
            x
        };
        let plus = self.l2d_displaced(delta, &shifted(1.0), problem, encoder, config)?;
        let minus = self.l2d_displaced(delta, &shifted(-1.0), problem, encoder, config)?;
        let slope = weight * (plus - minus) / (2.0 * h);

        let victim_idx: Vec<usize> = (0..problem.cloud.len()).filter(|&i| problem.victim[i]).collect();
        let orig: Vec<Vec3> = victim_idx.iter().map(|&i| problem.cloud.positions()[i]).collect();
        let adv: Vec<Vec3> = victim_idx
            .iter()
            .map(|&i| math::add(problem.cloud.positions()[i], base[i]))
            .collect();
        let (_, chamfer_grad) = losses::l_chamfer_with_grad(&adv, &orig)?;
        let mut chamfer_full = vec![[0.0; 3]; problem.cloud.len()];
        for (g, &i) in chamfer_grad.iter().zip(&victim_idx) {
            chamfer_full[i] = *g;
        }

        let mut var: Vec<f64> = self.visible.iter().flat_map(|&i| base[i]).collect();
        let grad: Vec<f64> = self
            .visible
            .iter()
            .enumerate()
            .flat_map(|(k, &i)| {
                let c = chamfer_full[i];
                let lambda = config.lambda_3d;
                [
                    lambda * c[0] + slope * signs[k][0],
                    lambda * c[1] + slope * signs[k][1],
                    lambda * c[2] + slope * signs[k][2],
                ]
            })
            .collect();
        self.adam.view = problem.view_id();
        self.adam.step(&mut var, &grad, self.config.bound).map_err(|e| match e {
            Error::Optimization { view, reason, .. } => Error::Optimization {
                view,
                iteration,
                reason,
            },
            other => other,
        })?;
        let xyz = delta.xyz.as_mut().expect("positional mode");
        for (k, &i) in self.visible.iter().enumerate() {
            xyz[i] = [var[3 * k], var[3 * k + 1], var[3 * k + 2]];
        }
        Ok(())
    }
}

