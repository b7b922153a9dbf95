//! Turning a malicious gradient into data points.
//!
//! Poison inputs are optimized so that the gradient they induce at the
//! current parameters minimizes one of three objectives (one per gradient
//! attack). The input gradient of an objective needs the derivative of a
//! model gradient, which the tape provides by differentiating its own
//! backward pass: first the per-poison gradients `g_i` are computed, then
//! the outer derivative `u = df/dg_i` in closed form, and finally
//! `d<u, g_i>/dx_i` by a second backward sweep.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::AuxiliaryStats;
use crate::datasets::{pixel_bytes, write_pfds, Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::gradient::GradientVector;
use crate::models::Model;
use crate::optimizers::{Optimizer, OptimizerSpec};
use crate::par;
use crate::tensor::Tensor;

const LEVELS: f64 = 255.0;
const GRID_SLACK: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Feasible sets

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborhoodNorm {
    L1,
    Linf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FeasibleSet {
    Free,
    /// 256 levels `k / 255` in `[0, 1]`.
    ImageEncoding,
    /// 8-bit images within `epsilon` of an anchor image.
    Neighborhood {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "default_norm")]
        norm: NeighborhoodNorm,
    },
}

fn default_epsilon() -> f64 {
    32.0 / 255.0
}

fn default_norm() -> NeighborhoodNorm {
    NeighborhoodNorm::L1
}

impl FeasibleSet {
    pub fn neighborhood(epsilon: f64, norm: NeighborhoodNorm) -> Self {
        FeasibleSet::Neighborhood { epsilon, norm }
    }

    pub fn validate(&self) -> Result<()> {
        if let FeasibleSet::Neighborhood { epsilon, .. } = *self {
            if !(epsilon > 0.0 && epsilon.is_finite()) {
                return Err(Error::config(format!("neighborhood epsilon must be > 0, got {epsilon}")));
            }
        }
        Ok(())
    }

    pub fn needs_anchor(&self) -> bool {
        matches!(self, FeasibleSet::Neighborhood { .. })
    }

    /// Projects `x` onto the set. Members are returned unchanged, so the
    /// projection is idempotent.
    pub fn project(&self, x: &Tensor, anchor: Option<&Tensor>) -> Result<Tensor> {
        let anchor = self.check_anchor(x, anchor)?;
        if self.is_member(x, anchor)? {
            return Ok(x.clone());
        }
        let data = match *self {
            FeasibleSet::Free => x.data().to_vec(),
            FeasibleSet::ImageEncoding => x.data().iter().map(|&v| quantize(v)).collect(),
            FeasibleSet::Neighborhood { epsilon, norm } => {
                let anchor = anchor.expect("checked");
                let levels: Vec<f64> = anchor.data().iter().map(|&a| grid_level(a)).collect();
                match norm {
                    NeighborhoodNorm::Linf => {
                        let budget = grid_budget(epsilon);
                        x.data()
                            .iter()
                            .zip(&levels)
                            .map(|(&v, &a)| {
                                let k = (v * LEVELS).clamp(a - budget, a + budget).clamp(0.0, LEVELS);
                                finite_or(k, a).round() / LEVELS
                            })
                            .collect()
                    }
                    NeighborhoodNorm::L1 => {
                        let delta: Vec<f64> = x
                            .data()
                            .iter()
                            .zip(&levels)
                            .map(|(&v, &a)| finite_or(v * LEVELS - a, 0.0))
                            .collect();
                        let delta = project_l1_ball(&delta, epsilon * LEVELS);
                        // Clamping moves toward the anchor and truncation
                        // rounds toward it, so the L1 budget is never exceeded.
                        delta
                            .iter()
                            .zip(&levels)
                            .map(|(&d, &a)| ((a + d).clamp(0.0, LEVELS) - a).trunc() + a)
                            .map(|k| k / LEVELS)
                            .collect()
                    }
                }
            }
        };
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn is_member(&self, x: &Tensor, anchor: Option<&Tensor>) -> Result<bool> {
        let anchor = self.check_anchor(x, anchor)?;
        let on_grid = |v: f64| (0.0..=1.0).contains(&v) && quantize(v) == v;
        Ok(match *self {
            FeasibleSet::Free => x.all_finite(),
            FeasibleSet::ImageEncoding => x.data().iter().all(|&v| on_grid(v)),
            FeasibleSet::Neighborhood { epsilon, norm } => {
                if !x.data().iter().all(|&v| on_grid(v)) {
                    return Ok(false);
                }
                let budget = grid_budget(epsilon);
                let steps = x
                    .data()
                    .iter()
                    .zip(anchor.expect("checked").data())
                    .map(|(&v, &a)| (v * LEVELS).round() - grid_level(a));
                match norm {
                    NeighborhoodNorm::Linf => steps.map(f64::abs).fold(0.0, f64::max) <= budget,
                    NeighborhoodNorm::L1 => steps.map(f64::abs).sum::<f64>() <= budget,
                }
            }
        })
    }

    fn check_anchor<'a>(&self, x: &Tensor, anchor: Option<&'a Tensor>) -> Result<Option<&'a Tensor>> {
        match (self.needs_anchor(), anchor) {
            (true, None) => Err(Error::config("neighborhood projection needs an anchor")),
            (true, Some(a)) if a.shape() != x.shape() => Err(Error::ShapeMismatch {
                op: "projection anchor",
                left: x.shape().to_vec(),
                right: a.shape().to_vec(),
            }),
            (true, Some(a)) => Ok(Some(a)),
            (false, _) => Ok(None),
        }
    }
}

fn finite_or(v: f64, fallback: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        fallback
    }
}

/// Nearest of the 256 levels after clamping to `[0, 1]`.
pub fn quantize(v: f64) -> f64 {
    (finite_or(v, 0.0).clamp(0.0, 1.0) * LEVELS).round() / LEVELS
}

/// Grid index (as a real) of the level nearest to `v`.
fn grid_level(v: f64) -> f64 {
    (finite_or(v, 0.0).clamp(0.0, 1.0) * LEVELS).round()
}

/// Whole grid steps that fit in a radius of `epsilon`.
fn grid_budget(epsilon: f64) -> f64 {
    (epsilon * LEVELS + GRID_SLACK).floor()
}

/// Coordinate-wise clamp into `[anchor - epsilon, anchor + epsilon]`.
pub fn clamp_linf(x: &[f64], anchor: &[f64], epsilon: f64) -> Vec<f64> {
    x.iter().zip(anchor).map(|(&v, &a)| v.clamp(a - epsilon, a + epsilon)).collect()
}

/// Euclidean projection onto `{w : |w|_1 <= radius}` by sort-based
/// thresholding.
pub fn project_l1_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= radius {
        return v.to_vec();
    }
    if radius <= 0.0 {
        return vec![0.0; v.len()];
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &m) in mags.iter().enumerate() {
        cumsum += m;
        let t = (cumsum - radius) / (k + 1) as f64;
        if m > t {
            theta = t;
        } else {
            break;
        }
    }
    v.iter().map(|&x| x.signum() * (x.abs() - theta).max(0.0)).collect()
}

// ---------------------------------------------------------------------------
// Models the inversion can differentiate through

/// A classifier-like model whose per-example gradient can be differentiated
/// with respect to the example's input.
pub trait Invertible: Sync {
    fn dim(&self) -> usize;
    fn classes(&self) -> usize;
    fn gradient(&self, input: &Tensor, label: usize) -> Result<GradientVector>;
    /// The model gradient and `d<direction, gradient>/d input`.
    fn gradient_and_input_vjp(&self, input: &Tensor, label: usize, direction: &GradientVector)
        -> Result<(GradientVector, Tensor)>;
}

impl Invertible for Model {
    fn dim(&self) -> usize {
        Model::dim(self)
    }

    fn classes(&self) -> usize {
        self.config().classes
    }

    fn gradient(&self, input: &Tensor, label: usize) -> Result<GradientVector> {
        Ok(self
            .sample_gradient(&LabeledExample {
                input: input.clone(),
                label,
            })?
            .gradient)
    }

    fn gradient_and_input_vjp(
        &self,
        input: &Tensor,
        label: usize,
        direction: &GradientVector,
    ) -> Result<(GradientVector, Tensor)> {
        let (g, gx) = Model::gradient_and_input_vjp(self, input, label, direction)?;
        Ok((g.gradient, gx))
    }
}

/// Least squares `0.5 (w.x - y)^2` with parameters `w`. The label picks the
/// response `y = responses[label]`; handy for closed-form checks.
#[derive(Clone, Debug)]
pub struct LinearRegression {
    pub weights: Vec<f64>,
    pub responses: Vec<f64>,
}

impl LinearRegression {
    fn residual(&self, input: &Tensor, label: usize) -> Result<f64> {
        if input.numel() != self.weights.len() {
            return Err(Error::DimMismatch {
                expected: self.weights.len(),
                actual: input.numel(),
            });
        }
        let y = *self.responses.get(label).ok_or(Error::LabelOutOfRange {
            label,
            classes: self.responses.len(),
        })?;
        Ok(self.weights.iter().zip(input.data()).map(|(w, x)| w * x).sum::<f64>() - y)
    }
}

impl Invertible for LinearRegression {
    fn dim(&self) -> usize {
        self.weights.len()
    }

    fn classes(&self) -> usize {
        self.responses.len()
    }

    fn gradient(&self, input: &Tensor, label: usize) -> Result<GradientVector> {
        let r = self.residual(input, label)?;
        Ok(GradientVector::new(input.data().iter().map(|x| r * x).collect()))
    }

    fn gradient_and_input_vjp(
        &self,
        input: &Tensor,
        label: usize,
        direction: &GradientVector,
    ) -> Result<(GradientVector, Tensor)> {
        let r = self.residual(input, label)?;
        let g = self.gradient(input, label)?;
        // d/dx <u, r x> = (u.x) w + r u
        let ux: f64 = direction.as_slice().iter().zip(input.data()).map(|(u, x)| u * x).sum();
        let gx = self
            .weights
            .iter()
            .zip(direction.as_slice())
            .map(|(w, u)| ux * w + r * u)
            .collect();
        Ok((g, Tensor::new(input.shape().to_vec(), gx)?))
    }
}

// ---------------------------------------------------------------------------
// Objectives

#[derive(Clone, Debug, PartialEq)]
pub enum ObjectiveKind {
    /// `cos(g_mix, g_a)`: pushes the poisoned mean against `g_a`.
    GradientAscent,
    /// `cos(g_mix, g_a)^2`: pushes the poisoned mean orthogonal to `g_a`.
    Orthogonal,
    /// `|g_p - target|^2`, with `target = g_a - z sigma`.
    LittleIsEnough { target: GradientVector },
}

/// A poisoning objective at fixed parameters. `g_p` is the mean poison
/// gradient and `g_mix = (n_a g_a + n_p g_p) / (n_a + n_p)`.
#[derive(Clone, Debug)]
pub struct Objective {
    pub kind: ObjectiveKind,
    pub aux_mean: GradientVector,
    pub n_a: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    /// A cosine involved a zero vector and was taken as 0.
    pub degenerate: bool,
}

impl Objective {
    pub fn new(kind: ObjectiveKind, stats: &AuxiliaryStats) -> Self {
        Objective {
            kind,
            aux_mean: stats.mean.clone(),
            n_a: stats.n_a(),
        }
    }

    fn mix(&self, g_p: &GradientVector, n_p: usize) -> Result<(GradientVector, f64)> {
        let (na, np) = (self.n_a as f64, n_p as f64);
        let c = np / (na + np);
        Ok((self.aux_mean.lin_comb(na / (na + np), g_p, c)?, c))
    }

    /// Value and derivative with respect to the mean poison gradient.
    pub fn outer(&self, g_p: &GradientVector, n_p: usize) -> Result<(ObjectiveValue, GradientVector)> {
        match &self.kind {
            ObjectiveKind::LittleIsEnough { target } => {
                let diff = g_p.sub(target)?;
                let value = ObjectiveValue {
                    value: diff.norm_sq(),
                    degenerate: false,
                };
                Ok((value, diff.scaled(2.0)))
            }
            kind => {
                let (m, c) = self.mix(g_p, n_p)?;
                let a = &self.aux_mean;
                let (nm, na) = (m.norm(), a.norm());
                if nm == 0.0 || na == 0.0 {
                    let value = ObjectiveValue {
                        value: 0.0,
                        degenerate: true,
                    };
                    return Ok((value, GradientVector::zeros(g_p.dim())));
                }
                let cos = m.dot(a)? / (nm * na);
                // d cos / d m = a / (|m||a|) - cos m / |m|^2
                let dcos = a.lin_comb(1.0 / (nm * na), &m, -cos / (nm * nm))?;
                let (value, scale) = match kind {
                    ObjectiveKind::GradientAscent => (cos, c),
                    _ => (cos * cos, 2.0 * cos * c),
                };
                let value = ObjectiveValue {
                    value,
                    degenerate: false,
                };
                Ok((value, dcos.scaled(scale)))
            }
        }
    }

    pub fn value(&self, model: &dyn Invertible, poisons: &[LabeledExample]) -> Result<ObjectiveValue> {
        let grads = poison_gradients(model, poisons)?;
        let g_p = GradientVector::mean(&grads)?;
        Ok(self.outer(&g_p, poisons.len())?.0)
    }

    /// Objective value and its gradient with respect to every poison input.
    pub fn value_and_input_grads(
        &self,
        model: &dyn Invertible,
        poisons: &[LabeledExample],
    ) -> Result<(ObjectiveValue, Vec<Tensor>)> {
        let grads = poison_gradients(model, poisons)?;
        let g_p = GradientVector::mean(&grads)?;
        let (value, u) = self.outer(&g_p, poisons.len())?;
        let u = u.scaled(1.0 / poisons.len() as f64);
        let input_grads = par::map(poisons, |p| {
            model
                .gradient_and_input_vjp(&p.input, p.label, &u)
                .map(|(_, gx)| gx)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok((value, input_grads))
    }
}

pub fn poison_gradients(model: &dyn Invertible, poisons: &[LabeledExample]) -> Result<Vec<GradientVector>> {
    if poisons.is_empty() {
        return Err(Error::config("objective over an empty poison batch"));
    }
    par::map(poisons, |p| model.gradient(&p.input, p.label)).into_iter().collect()
}

// ---------------------------------------------------------------------------
// Poison batches

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    UniformNoise,
    AuxClone,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    /// Index into the auxiliary split.
    pub index: usize,
    pub input: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoisonBatch {
    pub examples: Vec<LabeledExample>,
    pub anchors: Vec<Option<Anchor>>,
}

impl PoisonBatch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn anchor(&self, i: usize) -> Option<&Tensor> {
        self.anchors[i].as_ref().map(|a| &a.input)
    }

    pub fn all_members(&self, feasible: &FeasibleSet) -> Result<bool> {
        for (i, ex) in self.examples.iter().enumerate() {
            if !feasible.is_member(&ex.input, self.anchor(i))? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn to_dataset(&self, classes: usize) -> Dataset {
        let input_shape = self.examples.first().map(|e| e.input.shape().to_vec()).unwrap_or_default();
        Dataset {
            examples: self.examples.clone(),
            classes,
            input_shape,
        }
    }

    pub fn write_pfds(&self, classes: usize, path: &Path) -> Result<()> {
        let flat = self.to_dataset(classes).reshape_inputs(&[self.examples.first().map_or(0, |e| e.input.numel())])?;
        write_pfds(&flat, path)
    }

    /// One label byte then one byte per input value (the CIFAR record
    /// layout for 3x32x32 inputs).
    pub fn write_bytes(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for ex in &self.examples {
            let label = u8::try_from(ex.label).map_err(|_| Error::LabelOutOfRange {
                label: ex.label,
                classes: 256,
            })?;
            out.push(label);
            out.extend(pixel_bytes(ex.input.data()));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

pub fn init_poisons(
    policy: InitPolicy,
    n_p: usize,
    feasible: &FeasibleSet,
    aux: &[LabeledExample],
    classes: usize,
    rng: &mut impl Rng,
) -> Result<PoisonBatch> {
    if n_p == 0 {
        return Err(Error::config("need at least one poison"));
    }
    if feasible.needs_anchor() && policy != InitPolicy::AuxClone {
        return Err(Error::config("the neighborhood set requires aux_clone initialization"));
    }
    let first = aux.first().ok_or_else(|| Error::config("poison initialization needs auxiliary data"))?;
    let mut examples = Vec::with_capacity(n_p);
    let mut anchors = Vec::with_capacity(n_p);
    for _ in 0..n_p {
        let (raw, label, anchor) = match policy {
            InitPolicy::UniformNoise => {
                let data = (0..first.input.numel()).map(|_| rng.random_range(0.0..1.0)).collect();
                let label = rng.random_range(0..classes);
                (Tensor::new(first.input.shape().to_vec(), data)?, label, None)
            }
            InitPolicy::AuxClone => {
                let index = rng.random_range(0..aux.len());
                let src = &aux[index];
                let anchor = feasible.needs_anchor().then(|| Anchor {
                    index,
                    input: src.input.clone(),
                });
                (src.input.clone(), src.label, anchor)
            }
        };
        let input = feasible.project(&raw, anchor.as_ref().map(|a| &a.input))?;
        examples.push(LabeledExample { input, label });
        anchors.push(anchor);
    }
    Ok(PoisonBatch { examples, anchors })
}

// ---------------------------------------------------------------------------
// Inversion

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub init: InitPolicy,
    /// Search every label for each poison on a short budget first.
    pub try_all_labels: bool,
    pub label_budget: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            steps: 200,
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            init: InitPolicy::AuxClone,
            try_all_labels: false,
            label_budget: 20,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("inversion needs at least one step"));
        }
        if self.try_all_labels && self.label_budget == 0 {
            return Err(Error::config("label search needs a positive budget"));
        }
        self.inner_spec().validate()
    }

    fn inner_spec(&self) -> OptimizerSpec {
        OptimizerSpec::Adam {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InversionResult {
    /// The iterate with the lowest objective seen.
    pub batch: PoisonBatch,
    pub initial: f64,
    pub best: f64,
    /// Objective at every evaluated iterate, starting with the initial one.
    pub trace: Vec<f64>,
    pub degenerate: bool,
    /// The inner rate underflowed while recovering from non-finite values.
    pub diverged: bool,
}

fn flatten_inputs(batch: &PoisonBatch) -> Vec<f64> {
    batch.examples.iter().flat_map(|e| e.input.data().iter().copied()).collect()
}

fn set_inputs(batch: &mut PoisonBatch, flat: &[f64]) {
    let mut offset = 0;
    for ex in &mut batch.examples {
        let n = ex.input.numel();
        ex.input.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
}

/// Minimizes `objective` over the poison inputs with Adam, projecting onto
/// `feasible` after every step. Labels stay fixed.
pub fn invert(
    objective: &Objective,
    init: PoisonBatch,
    feasible: &FeasibleSet,
    cfg: &InversionConfig,
    model: &dyn Invertible,
) -> Result<InversionResult> {
    cfg.validate()?;
    if !init.all_members(feasible)? {
        return Err(Error::config("initial poisons lie outside the feasible set"));
    }
    let mut batch = init;
    if cfg.try_all_labels {
        search_labels(objective, &mut batch, feasible, cfg, model)?;
    }
    run_inversion(objective, batch, feasible, cfg, cfg.steps, model)
}

fn run_inversion(
    objective: &Objective,
    init: PoisonBatch,
    feasible: &FeasibleSet,
    cfg: &InversionConfig,
    steps: usize,
    model: &dyn Invertible,
) -> Result<InversionResult> {
    let mut x = init;
    let mut flat = flatten_inputs(&x);
    let mut opt = Optimizer::new(cfg.inner_spec(), flat.len());
    let mut rate = cfg.lr;
    let mut previous: Option<PoisonBatch> = None;
    let mut best: Option<(f64, PoisonBatch)> = None;
    let mut trace = Vec::with_capacity(steps + 1);
    let (mut initial, mut degenerate, mut diverged) = (f64::NAN, false, false);

    for step in 0..=steps {
        let (value, grads) = if step < steps {
            objective.value_and_input_grads(model, &x.examples)?
        } else {
            (objective.value(model, &x.examples)?, Vec::new())
        };
        let finite = value.value.is_finite() && grads.iter().all(Tensor::all_finite);
        if !finite {
            rate /= 2.0;
            debug!("non-finite poisoning objective at step {step}; rate now {rate:e}");
            if rate < 1e-12 {
                diverged = true;
                break;
            }
            opt.set_lr(rate);
            if let Some(prev) = previous.take() {
                x = prev;
                flat = flatten_inputs(&x);
            }
            continue;
        }
        if step == 0 {
            initial = value.value;
        }
        degenerate |= value.degenerate;
        trace.push(value.value);
        if best.as_ref().is_none_or(|(b, _)| value.value < *b) {
            best = Some((value.value, x.clone()));
        }
        if step == steps {
            break;
        }
        previous = Some(x.clone());
        let g: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();
        opt.step_slice(&mut flat, &g)?;
        set_inputs(&mut x, &flat);
        for i in 0..x.len() {
            let projected = feasible.project(&x.examples[i].input, x.anchor(i))?;
            x.examples[i].input = projected;
        }
        flat = flatten_inputs(&x);
    }

    let (best_value, batch) = match best {
        Some(b) => b,
        None => {
            // Never saw a finite objective; hand back the start point.
            let start = previous.unwrap_or(x);
            (f64::NAN, start)
        }
    };
    Ok(InversionResult {
        batch,
        initial,
        best: best_value,
        trace,
        degenerate,
        diverged,
    })
}

/// Greedy per-poison label choice: each label gets a short inversion run
/// and the one with the lowest objective is kept.
fn search_labels(
    objective: &Objective,
    batch: &mut PoisonBatch,
    feasible: &FeasibleSet,
    cfg: &InversionConfig,
    model: &dyn Invertible,
) -> Result<()> {
    for i in 0..batch.len() {
        let mut best: Option<(f64, usize)> = None;
        for label in 0..model.classes() {
            let mut trial = batch.clone();
            trial.examples[i].label = label;
            let r = run_inversion(objective, trial, feasible, cfg, cfg.label_budget, model)?;
            if r.best.is_finite() && best.is_none_or(|(b, _)| r.best < b) {
                best = Some((r.best, label));
            }
        }
        if let Some((_, label)) = best {
            batch.examples[i].label = label;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, ModelConfig};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_oneof, proptest, Just, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    fn ex(v: &[f64], label: usize) -> LabeledExample {
        LabeledExample { input: t(v), label }
    }

    fn batch(examples: Vec<LabeledExample>) -> PoisonBatch {
        let anchors = vec![None; examples.len()];
        PoisonBatch { examples, anchors }
    }

    fn mlp(input: usize, classes: usize, seed: u64) -> Model {
        Model::init(ModelConfig {
            architecture: Architecture::Mlp { hidden: vec![6] },
            input_shape: vec![input],
            classes,
            seed,
        })
        .unwrap()
    }

    fn stats_of(model: &dyn Invertible, aux: &[LabeledExample]) -> AuxiliaryStats {
        AuxiliaryStats::from_gradients(poison_gradients(model, aux).unwrap()).unwrap()
    }

    #[test]
    fn image_encoding_examples() {
        let p = FeasibleSet::ImageEncoding.project(&t(&[0.5034, -0.2, 1.7]), None).unwrap();
        assert_eq!(p.data(), &[128.0 / 255.0, 0.0, 1.0]);
        assert!((p.data()[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn linf_clamp_before_quantization() {
        assert!((clamp_linf(&[0.75], &[0.5], 0.1)[0] - 0.6).abs() < 1e-15);
        let set = FeasibleSet::neighborhood(0.1, NeighborhoodNorm::Linf);
        let anchor = t(&[0.5]);
        let p = set.project(&t(&[0.75]), Some(&anchor)).unwrap();
        assert!(set.is_member(&p, Some(&anchor)).unwrap());
        assert!((p.data()[0] - 0.6).abs() <= 1.0 / 255.0);
    }

    #[test]
    fn l1_ball_example() {
        assert_eq!(project_l1_ball(&[1.0, 1.0], 1.0), vec![0.5, 0.5]);
        assert_eq!(project_l1_ball(&[0.2, -0.3], 1.0), vec![0.2, -0.3]);
        assert_eq!(project_l1_ball(&[3.0, -1.0], 1.0), vec![1.0, 0.0]);
    }

    #[test]
    fn l1_ball_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let step = 1e-3;
        for _ in 0..30 {
            let v = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let r = rng.random_range(0.1..2.0);
            let p = project_l1_ball(&v, r);
            // brute force over a fine grid of the ball
            let n = (r / step) as i64;
            let mut best = (f64::INFINITY, [0.0, 0.0]);
            for i in -n..=n {
                let a = i as f64 * step;
                let room = r - a.abs();
                for b in [-room, room, v[1].clamp(-room, room)] {
                    let d = (a - v[0]).powi(2) + (b - v[1]).powi(2);
                    if d < best.0 {
                        best = (d, [a, b]);
                    }
                }
            }
            assert!((p[0] - best.1[0]).abs() < 2e-3 && (p[1] - best.1[1]).abs() < 2e-3, "{p:?} vs {:?}", best.1);
            assert!(p.iter().map(|x| x.abs()).sum::<f64>() <= r + 1e-12);
        }
    }

    #[test]
    fn neighborhood_requires_anchor() {
        let set = FeasibleSet::neighborhood(0.1, NeighborhoodNorm::L1);
        assert!(set.project(&t(&[0.5]), None).is_err());
        assert!(FeasibleSet::neighborhood(0.0, NeighborhoodNorm::L1).validate().is_err());
    }

    fn any_set() -> impl Strategy<Value = FeasibleSet> {
        prop_oneof![
            Just(FeasibleSet::Free),
            Just(FeasibleSet::ImageEncoding),
            (0.001f64..0.5).prop_map(|e| FeasibleSet::neighborhood(e, NeighborhoodNorm::L1)),
            (0.001f64..0.5).prop_map(|e| FeasibleSet::neighborhood(e, NeighborhoodNorm::Linf)),
        ]
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_feasible(
            set in any_set(),
            x in proptest::collection::vec(-1.0f64..2.0, 1..40),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let anchor = t(&(0..x.len()).map(|_| rng.random_range(-0.2..1.2)).collect::<Vec<_>>());
            let x = t(&x);
            let p = set.project(&x, Some(&anchor)).unwrap();
            prop_assert!(set.is_member(&p, Some(&anchor)).unwrap());
            let pp = set.project(&p, Some(&anchor)).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&p), bits(&pp));
        }

        #[test]
        fn l1_projection_stays_in_ball(v in proptest::collection::vec(-5.0f64..5.0, 1..30), r in 0.01f64..4.0) {
            let p = project_l1_ball(&v, r);
            prop_assert!(p.iter().map(|x| x.abs()).sum::<f64>() <= r * (1.0 + 1e-12));
        }
    }

    #[test]
    fn lie_objective_is_zero_at_its_target() {
        let m = mlp(4, 3, 1);
        let poisons = vec![ex(&[0.1, 0.2, 0.3, 0.4], 1), ex(&[0.9, 0.1, 0.5, 0.2], 2)];
        let target = GradientVector::mean(&poison_gradients(&m, &poisons).unwrap()).unwrap();
        let stats = stats_of(&m, &poisons);
        let obj = Objective::new(ObjectiveKind::LittleIsEnough { target }, &stats);
        assert_eq!(obj.value(&m, &poisons).unwrap().value, 0.0);
    }

    #[test]
    fn ga_objective_is_one_when_poisons_copy_aux() {
        let m = mlp(4, 3, 2);
        let aux = vec![ex(&[0.1, 0.2, 0.3, 0.4], 1), ex(&[0.9, 0.1, 0.5, 0.2], 0)];
        let obj = Objective::new(ObjectiveKind::GradientAscent, &stats_of(&m, &aux));
        assert!((obj.value(&m, &aux).unwrap().value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn og_objective_zero_on_linear_construction() {
        // w = 0: the gradient is -y x. Aux (1,0) with y = -1 gives g_a = (1,0);
        // a poison (1,-1) with y = 1 gives (-1,1), so g_mix = (0, 0.5).
        let lr = LinearRegression {
            weights: vec![0.0, 0.0],
            responses: vec![-1.0, 1.0],
        };
        let stats = stats_of(&lr, &[ex(&[1.0, 0.0], 0)]);
        assert_eq!(stats.mean, GradientVector::new(vec![1.0, 0.0]));
        let obj = Objective::new(ObjectiveKind::Orthogonal, &stats);
        let v = obj.value(&lr, &[ex(&[1.0, -1.0], 1)]).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(!v.degenerate);
    }

    #[test]
    fn cosine_objectives_flag_zero_vectors() {
        let lr = LinearRegression {
            weights: vec![0.0, 0.0],
            responses: vec![0.0],
        };
        let stats = stats_of(&lr, &[ex(&[1.0, 0.0], 0)]);
        let obj = Objective::new(ObjectiveKind::GradientAscent, &stats);
        let (v, g) = obj.value_and_input_grads(&lr, &[ex(&[1.0, 2.0], 0)]).unwrap();
        assert!(v.degenerate && v.value == 0.0);
        assert!(g[0].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn objective_input_gradients_match_finite_differences() {
        let m = mlp(3, 3, 5);
        let aux = vec![ex(&[0.3, -0.2, 0.8], 0), ex(&[-0.5, 0.4, 0.1], 1), ex(&[0.9, 0.9, -0.3], 2)];
        let stats = stats_of(&m, &aux);
        let target = stats.mean.lin_comb(1.0, &stats.std, -1.5).unwrap();
        let poisons = vec![ex(&[0.2, 0.7, -0.4], 2), ex(&[-0.6, 0.1, 0.5], 0)];
        for kind in [
            ObjectiveKind::GradientAscent,
            ObjectiveKind::Orthogonal,
            ObjectiveKind::LittleIsEnough { target: target.clone() },
        ] {
            let obj = Objective::new(kind.clone(), &stats);
            let (_, grads) = obj.value_and_input_grads(&m, &poisons).unwrap();
            let h = 1e-5;
            for (i, gx) in grads.iter().enumerate() {
                for j in 0..3 {
                    let at = |d: f64| {
                        let mut p = poisons.clone();
                        p[i].input.data_mut()[j] += d;
                        obj.value(&m, &p).unwrap().value
                    };
                    let fd = (at(h) - at(-h)) / (2.0 * h);
                    let an = gx.data()[j];
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                    assert!(rel <= 1e-3, "{kind:?} poison {i} coord {j}: {an} vs {fd}");
                }
            }
        }
    }

    fn regression_toy() -> (LinearRegression, Objective) {
        let lr = LinearRegression {
            weights: vec![0.0, 0.0],
            responses: vec![-2.0],
        };
        let stats = AuxiliaryStats::from_gradients(vec![GradientVector::new(vec![1.0, 1.0])]).unwrap();
        let target = GradientVector::new(vec![2.0, 0.0]);
        (lr, Objective::new(ObjectiveKind::LittleIsEnough { target }, &stats))
    }

    #[test]
    fn regression_closed_form_solution() {
        let (lr, obj) = regression_toy();
        assert_eq!(lr.gradient(&t(&[1.0, 0.0]), 0).unwrap().as_slice(), &[2.0, 0.0]);
        assert_eq!(obj.value(&lr, &[ex(&[1.0, 0.0], 0)]).unwrap().value, 0.0);
    }

    #[test]
    fn inversion_recovers_achievable_regression_target() {
        let (lr, obj) = regression_toy();
        let cfg = InversionConfig {
            steps: 500,
            ..InversionConfig::default()
        };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = batch(vec![ex(&[rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)], 0)]);
            let r = invert(&obj, init, &FeasibleSet::Free, &cfg, &lr).unwrap();
            assert!(r.best <= 1e-6, "seed {seed}: {}", r.best);
            assert!(r.best <= r.initial);
            assert_eq!(r.trace.len(), 501);
        }
    }

    #[test]
    fn inversion_from_the_solution_returns_it() {
        let m = mlp(4, 3, 7);
        let point = ex(&[0.2, 0.4, 0.6, 0.8], 1);
        let target = m.gradient(&point.input, point.label).unwrap();
        let stats = stats_of(&m, std::slice::from_ref(&point));
        let obj = Objective::new(ObjectiveKind::LittleIsEnough { target }, &stats);
        let cfg = InversionConfig {
            steps: 20,
            ..InversionConfig::default()
        };
        let r = invert(&obj, batch(vec![point.clone()]), &FeasibleSet::Free, &cfg, &m).unwrap();
        assert_eq!(r.initial, 0.0);
        assert_eq!(r.best, 0.0);
        assert_eq!(r.batch.examples[0], point);
    }

    #[test]
    fn inversion_best_never_worse_than_init_and_stays_feasible() {
        let m = mlp(4, 3, 9);
        let aux: Vec<_> = (0..6)
            .map(|i| ex(&[0.1 * i as f64, 0.5, 0.9 - 0.1 * i as f64, 0.3], i % 3))
            .collect();
        let stats = stats_of(&m, &aux);
        let sets = [
            FeasibleSet::Free,
            FeasibleSet::ImageEncoding,
            FeasibleSet::neighborhood(32.0 / 255.0, NeighborhoodNorm::L1),
            FeasibleSet::neighborhood(32.0 / 255.0, NeighborhoodNorm::Linf),
        ];
        for set in sets {
            for kind in [ObjectiveKind::GradientAscent, ObjectiveKind::Orthogonal] {
                let obj = Objective::new(kind, &stats);
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let init = init_poisons(InitPolicy::AuxClone, 3, &set, &aux, 3, &mut rng).unwrap();
                let cfg = InversionConfig {
                    steps: 15,
                    ..InversionConfig::default()
                };
                let r = invert(&obj, init, &set, &cfg, &m).unwrap();
                assert!(r.best <= r.initial);
                assert!(r.batch.all_members(&set).unwrap());
                assert_eq!(r.best, r.trace.iter().cloned().fold(f64::INFINITY, f64::min));
            }
        }
    }

    #[test]
    fn init_policies() {
        let aux: Vec<_> = (0..5).map(|i| ex(&[0.1 * i as f64, 0.2], i % 2)).collect();
        let nei = FeasibleSet::neighborhood(0.1, NeighborhoodNorm::Linf);
        assert!(init_poisons(InitPolicy::UniformNoise, 2, &nei, &aux, 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());

        let a = init_poisons(InitPolicy::AuxClone, 4, &nei, &aux, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = init_poisons(InitPolicy::AuxClone, 4, &nei, &aux, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a, b);
        for (e, anchor) in a.examples.iter().zip(&a.anchors) {
            let anchor = anchor.as_ref().unwrap();
            assert_eq!(aux[anchor.index].input, anchor.input);
            assert_eq!(aux[anchor.index].label, e.label);
        }
        assert!(a.all_members(&nei).unwrap());

        for set in [FeasibleSet::Free, FeasibleSet::ImageEncoding] {
            let u = init_poisons(InitPolicy::UniformNoise, 8, &set, &aux, 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            assert!(u.all_members(&set).unwrap());
            assert!(u.examples.iter().all(|e| e.label < 2 && e.input.data().iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }

    /// Gradient is NaN once the first input coordinate exceeds 1.
    struct Cliff;

    impl Invertible for Cliff {
        fn dim(&self) -> usize {
            1
        }
        fn classes(&self) -> usize {
            1
        }
        fn gradient(&self, input: &Tensor, _: usize) -> Result<GradientVector> {
            let x = input.data()[0];
            Ok(GradientVector::new(vec![if x > 1.0 { f64::NAN } else { x }]))
        }
        fn gradient_and_input_vjp(&self, input: &Tensor, label: usize, u: &GradientVector) -> Result<(GradientVector, Tensor)> {
            Ok((self.gradient(input, label)?, t(&[u.as_slice()[0]])))
        }
    }

    #[test]
    fn non_finite_objective_reverts_and_halves_the_rate() {
        // Minimizing |x - 5|^2 walks into the cliff and must back off.
        let stats = AuxiliaryStats::from_gradients(vec![GradientVector::new(vec![0.0])]).unwrap();
        let obj = Objective::new(
            ObjectiveKind::LittleIsEnough {
                target: GradientVector::new(vec![5.0]),
            },
            &stats,
        );
        let cfg = InversionConfig {
            steps: 400,
            lr: 0.5,
            ..InversionConfig::default()
        };
        let r = invert(&obj, batch(vec![ex(&[0.0], 0)]), &FeasibleSet::Free, &cfg, &Cliff).unwrap();
        assert!(r.best.is_finite() && r.best < r.initial);
        assert!(r.batch.examples[0].input.data()[0] <= 1.0);
        assert!(r.trace.iter().all(|v| v.is_finite()));
        assert!(r.diverged);
    }

    #[test]
    fn label_search_picks_the_better_label() {
        // Only label 1 can reach the target (2,0) since response 0 is zero.
        let lr = LinearRegression {
            weights: vec![0.0, 0.0],
            responses: vec![0.0, -2.0],
        };
        let stats = AuxiliaryStats::from_gradients(vec![GradientVector::new(vec![1.0, 1.0])]).unwrap();
        let obj = Objective::new(
            ObjectiveKind::LittleIsEnough {
                target: GradientVector::new(vec![2.0, 0.0]),
            },
            &stats,
        );
        let cfg = InversionConfig {
            steps: 300,
            try_all_labels: true,
            ..InversionConfig::default()
        };
        let r = invert(&obj, batch(vec![ex(&[0.3, 0.3], 0)]), &FeasibleSet::Free, &cfg, &lr).unwrap();
        assert_eq!(r.batch.examples[0].label, 1);
        assert!(r.best < 1e-4);
    }

    #[test]
    fn dumps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = batch(vec![ex(&[0.0, 1.0, 128.0 / 255.0], 2)]);
        b.write_bytes(&dir.path().join("p.bin")).unwrap();
        assert_eq!(fs::read(dir.path().join("p.bin")).unwrap(), vec![2, 0, 255, 128]);
        b.write_pfds(3, &dir.path().join("p.pfds")).unwrap();
        let back = crate::datasets::read_pfds(&dir.path().join("p.pfds")).unwrap();
        assert_eq!(back.examples, b.examples);
    }
}
