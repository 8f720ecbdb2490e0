//! Variational depth completion: gradient descent on the multi-scale loss over a
//! per-pixel normalized-disparity field.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::geometry::{depth_to_normalized_disparity, DepthMap, DISPARITY_MAX, DISPARITY_MIN};
use crate::image::{lattice_cell, Image, Mask};
use crate::landmarks::SparseDepthImage;
use crate::losses::{total_loss_with, LossBreakdown, LossError, LossInputs, LossWeights, PhotoMaps, PhotoMode};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("non-finite loss; components: {0}")]
    NonFinite(String),
    #[error("schedule has {got} entries, expected {expected}")]
    Schedule { expected: usize, got: usize },
    #[error("initialization is {got:?}, expected {expected:?}")]
    InitSize { expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T> = std::result::Result<T, RefineError>;

/// Optimizer state at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineState {
    /// Normalized disparity in `[0, 1]`.
    pub d_hat: Image,
    pub iteration: usize,
    /// Totals of accepted iterates, starting with the initial one.
    pub history: Vec<f64>,
    /// Initial per-pixel step length.
    pub step_size: f64,
    pub converged: bool,
    /// Per-pixel step lengths and the gradient signs of the last accepted step.
    steps: Option<(Vec<f64>, Vec<i8>)>,
}

pub const DEFAULT_STEP: f64 = 0.005;
const MAX_STEP: f64 = 0.05;
const MIN_STEP: f64 = 1e-12;
const MAX_HALVINGS: usize = 20;
const STEP_GROWTH: f64 = 1.2;
const STEP_SHRINK: f64 = 0.5;
const GRAD_TOL: f64 = 1e-10;

impl RefineState {
    pub fn new(d_hat: Image) -> Self {
        Self { d_hat, iteration: 0, history: Vec::new(), step_size: DEFAULT_STEP, converged: false, steps: None }
    }

    pub fn depth(&self) -> DepthMap {
        normalized_to_depth(&self.d_hat)
    }
}

/// Metric depth of a normalized-disparity field; every pixel is valid.
pub fn normalized_to_depth(d_hat: &Image) -> DepthMap {
    let depth = d_hat.map(|d| 1.0 / (DISPARITY_MIN + (DISPARITY_MAX - DISPARITY_MIN) * d.clamp(0.0, 1.0)));
    let (w, h) = depth.dims();
    DepthMap::with_mask(depth, Mask::filled(w, h, true))
}

/// Fills every pixel with the value of the nearest valid pixel (Euclidean distance,
/// ties to the earliest pixel in raster order). `None` when nothing is valid.
pub fn nearest_fill(values: &Image, valid: &Mask) -> Option<Image> {
    let (w, h) = values.dims();
    if valid.count() == 0 {
        return None;
    }
    let mut out = values.clone();
    for y in 0..h {
        for x in 0..w {
            if valid.get(x, y) {
                continue;
            }
            // Grow square rings until no unexplored pixel can beat the best distance.
            let mut best: Option<(usize, usize)> = None;
            let mut r = 1usize;
            loop {
                let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
                let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        if xx.abs_diff(x).max(yy.abs_diff(y)) != r || !valid.get(xx, yy) {
                            continue;
                        }
                        let d2 = xx.abs_diff(x).pow(2) + yy.abs_diff(y).pow(2);
                        let idx = yy * w + xx;
                        if best.map_or(true, |(bd, bi)| (d2, idx) < (bd, bi)) {
                            best = Some((d2, idx));
                        }
                    }
                }
                if let Some((d2, _)) = best {
                    if r * r >= d2 {
                        break;
                    }
                }
                if r > w.max(h) {
                    break;
                }
                r += 1;
            }
            let (_, idx) = best.expect("a valid pixel exists");
            out.set(x, y, values.data()[idx]);
        }
    }
    Some(out)
}

/// Normalized-disparity initialization from semi-dense and sparse depth.
///
/// Valid semi-dense pixels keep their value; sparse pixels fill semi-dense holes; the
/// rest take the nearest of either. Empty inputs give a constant 0.5.
pub fn initialize(d_sd: &DepthMap, d_s: &SparseDepthImage) -> RefineState {
    let (w, h) = (d_sd.width(), d_sd.height());
    let mut values = Image::zeros(w, h);
    let mut valid = Mask::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if d_sd.valid.get(x, y) {
                values.set(x, y, depth_to_normalized_disparity(d_sd.image.get(x, y)));
                valid.set(x, y, true);
            } else if d_s.image.get(x, y) > 0.0 {
                values.set(x, y, depth_to_normalized_disparity(d_s.image.get(x, y)));
                valid.set(x, y, true);
            }
        }
    }
    let d_hat = nearest_fill(&values, &valid).unwrap_or_else(|| Image::filled(w, h, 0.5));
    RefineState::new(d_hat)
}

/// Baseline: semi-dense depth with holes filled by the nearest valid pixel.
pub fn nearest_fill_baseline(d_sd: &DepthMap) -> Option<DepthMap> {
    let filled = nearest_fill(&d_sd.image, &d_sd.valid)?;
    let (w, h) = filled.dims();
    Some(DepthMap::with_mask(filled, Mask::filled(w, h, true)))
}

/// Loss inputs and weights for one optimization stage.
pub struct Objective<'a> {
    pub inputs: &'a LossInputs,
    pub weights: LossWeights,
    pub mode: PhotoMode,
}

impl<'a> Objective<'a> {
    pub fn new(inputs: &'a LossInputs, weights: LossWeights) -> Self {
        Self { inputs, weights, mode: PhotoMode::Split }
    }

    fn pyramid<'t>(&self, d_hat: Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut pyramid = Vec::with_capacity(self.weights.n_scales);
        let mut level = d_hat;
        for l in 0..self.weights.n_scales {
            if l > 0 {
                level = level.avg_pool2().map_err(LossError::from)?;
            }
            let depth = level
                .mul_scalar(DISPARITY_MAX - DISPARITY_MIN)
                .and_then(|v| v.add_scalar(DISPARITY_MIN))
                .and_then(|v| v.recip())
                .map_err(LossError::from)?;
            pyramid.push(depth);
        }
        Ok(pyramid)
    }

    /// Taped total for a normalized-disparity var at the stage's finest resolution.
    pub fn evaluate<'t>(&self, tape: &'t Tape, d_hat: Var<'t>) -> Result<(Var<'t>, LossBreakdown)> {
        let pyramid = self.pyramid(d_hat)?;
        let eval = total_loss_with(tape, self.inputs, &pyramid, &[], &self.weights, self.mode)?;
        let value = eval.total.item();
        if !value.is_finite() {
            return Err(RefineError::NonFinite(format!("{:?}", eval.breakdown)));
        }
        Ok((eval.total, eval.breakdown))
    }

    pub fn value(&self, d_hat: &Image) -> Result<(f64, LossBreakdown)> {
        let tape = Tape::new();
        let (total, breakdown) = self.evaluate(&tape, tape.constant(d_hat.to_tensor()))?;
        Ok((total.item(), breakdown))
    }

    /// Finest-level photometric maps at `d_hat`.
    pub fn maps(&self, d_hat: &Image) -> Result<PhotoMaps> {
        let tape = Tape::new();
        let pyramid = self.pyramid(tape.constant(d_hat.to_tensor()))?;
        Ok(total_loss_with(&tape, self.inputs, &pyramid, &[], &self.weights, self.mode)?.maps)
    }

    pub fn value_and_gradient(&self, d_hat: &Image) -> Result<(f64, Image)> {
        let tape = Tape::new();
        let v = tape.var(d_hat.to_tensor());
        let (total, _) = self.evaluate(&tape, v)?;
        let grads = total.backward().map_err(LossError::from)?;
        let g = Image::from_tensor(&grads.wrt(v)).expect("rank 2");
        Ok((total.item(), g))
    }
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// One backtracking step with per-pixel step lengths.
///
/// Each pixel moves against the sign of its gradient by its own step length, which
/// grows while the gradient sign persists and shrinks when it flips. The whole move is
/// scaled down by halving until the total strictly decreases; after 20 halvings the
/// state is marked converged. Candidates are clamped to `[0, 1]`.
pub fn step(state: &RefineState, objective: &Objective<'_>) -> Result<RefineState> {
    let mut next = state.clone();
    if state.converged {
        return Ok(next);
    }
    let (value, grad) = objective.value_and_gradient(&state.d_hat)?;
    let g = grad.data();
    if next.history.is_empty() {
        next.history.push(value);
    }
    let current = *next.history.last().expect("non-empty");
    if g.iter().all(|v| v.abs() < GRAD_TOL) {
        next.converged = true;
        return Ok(next);
    }
    let signs: Vec<i8> = g.iter().map(|&v| sign(v)).collect();
    let mut eta = match next.steps.take() {
        Some((mut eta, prev)) => {
            for ((e, &s), &p) in eta.iter_mut().zip(&signs).zip(&prev) {
                match s * p {
                    1 => *e = (*e * STEP_GROWTH).min(MAX_STEP),
                    -1 => *e = (*e * STEP_SHRINK).max(MIN_STEP),
                    _ => {}
                }
            }
            eta
        }
        None => vec![state.step_size; g.len()],
    };
    let (w, h) = state.d_hat.dims();
    let x = state.d_hat.data();
    let mut scale = 1.0;
    for _ in 0..=MAX_HALVINGS {
        let candidate = Image::new(
            w,
            h,
            x.iter().zip(&signs).zip(&eta).map(|((d, &s), e)| (d - scale * e * s as f64).clamp(0.0, 1.0)).collect(),
        );
        let (v, _) = objective.value(&candidate)?;
        if v < current {
            if scale < 1.0 {
                eta.iter_mut().for_each(|e| *e = (*e * scale).max(MIN_STEP));
            }
            next.d_hat = candidate;
            next.iteration += 1;
            next.history.push(v);
            next.steps = Some((eta, signs));
            return Ok(next);
        }
        scale *= 0.5;
    }
    next.converged = true;
    Ok(next)
}

/// Coarse-to-fine iteration budget, finest scale first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub iters_per_scale: Vec<usize>,
}

impl Schedule {
    pub fn uniform(n_scales: usize, iters: usize) -> Self {
        Self { iters_per_scale: vec![iters; n_scales] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// 1-based pyramid level optimized in this stage.
    pub level: usize,
    pub iterations: usize,
    pub history: Vec<f64>,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct RefineResult {
    pub depth: DepthMap,
    pub d_hat: Image,
    pub stages: Vec<StageReport>,
    pub breakdown: LossBreakdown,
}

/// Bilinear 2× upsampling consistent with 2×2 pooling: fine pixel `x` sits at coarse
/// coordinate `(x − 0.5) / 2`, clamped to the coarse grid.
pub fn upsample2(coarse: &Image, width: usize, height: usize) -> Image {
    let (cw, ch) = coarse.dims();
    Image::from_fn(width, height, |x, y| {
        let u = ((x as f64 - 0.5) / 2.0).clamp(0.0, (cw - 1) as f64);
        let v = ((y as f64 - 0.5) / 2.0).clamp(0.0, (ch - 1) as f64);
        let (x0, x1, fx) = lattice_cell(u, cw).expect("clamped");
        let (y0, y1, fy) = lattice_cell(v, ch).expect("clamped");
        let top = coarse.get(x0, y0) * (1.0 - fx) + coarse.get(x1, y0) * fx;
        let bot = coarse.get(x0, y1) * (1.0 - fx) + coarse.get(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

fn pool_to(image: &Image, times: usize) -> Image {
    (0..times).fold(image.clone(), |acc, _| acc.pool2())
}

/// Runs the schedule from the coarsest stage to the finest.
///
/// Stage `k` optimizes the field at level `k` against the loss over levels `k..=n`,
/// reindexed so its finest level has weight 1. Each stage starts from the
/// initialization pooled to its resolution plus the bilinearly upsampled update of the
/// previous stage, so fine detail of the initialization is kept.
pub fn run(
    init: &RefineState,
    inputs: &LossInputs,
    weights: &LossWeights,
    schedule: &Schedule,
) -> Result<RefineResult> {
    run_with(init, inputs, weights, schedule, PhotoMode::Split)
}

pub fn run_with(
    init: &RefineState,
    inputs: &LossInputs,
    weights: &LossWeights,
    schedule: &Schedule,
    mode: PhotoMode,
) -> Result<RefineResult> {
    let n = weights.n_scales;
    if schedule.iters_per_scale.len() != n {
        return Err(RefineError::Schedule { expected: n, got: schedule.iters_per_scale.len() });
    }
    let dims = inputs.scales[0].active_left.dims();
    if init.d_hat.dims() != dims {
        return Err(RefineError::InitSize { expected: dims, got: init.d_hat.dims() });
    }
    let mut stages = Vec::with_capacity(n);
    let mut update: Option<Image> = None;
    let mut d_hat = init.d_hat.clone();
    let mut last_breakdown = None;
    for k in (1..=n).rev() {
        let stage_inputs = inputs.suffix(k - 1);
        let stage_weights = LossWeights { n_scales: n - k + 1, ..*weights };
        let objective = Objective { inputs: &stage_inputs, weights: stage_weights, mode };
        let base = pool_to(&init.d_hat, k - 1);
        let (w, h) = base.dims();
        let start = match &update {
            Some(u) => {
                let up = upsample2(u, w, h);
                Image::new(w, h, base.data().iter().zip(up.data()).map(|(b, d)| (b + d).clamp(0.0, 1.0)).collect())
            }
            None => base.clone(),
        };
        let mut state = RefineState { step_size: init.step_size, ..RefineState::new(start) };
        for _ in 0..schedule.iters_per_scale[k - 1] {
            state = step(&state, &objective)?;
            if state.converged {
                break;
            }
        }
        if k == 1 {
            last_breakdown = Some(objective.value(&state.d_hat)?.1);
        }
        update = Some(Image::new(w, h, state.d_hat.data().iter().zip(base.data()).map(|(d, b)| d - b).collect()));
        stages.push(StageReport {
            level: k,
            iterations: state.iteration,
            history: state.history.clone(),
            converged: state.converged,
        });
        d_hat = state.d_hat;
    }
    Ok(RefineResult {
        depth: normalized_to_depth(&d_hat),
        d_hat,
        stages,
        breakdown: last_breakdown.expect("finest stage ran"),
    })
}
