//! Batch-norm channel exchange between parallel branches, with mean and max routing,
//! and softmax fusion of branch outputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ExchangeError {
    #[error("need at least 2 branches, got {0}")]
    TooFewBranches(usize),
    #[error("channel mismatch: tensor has {tensor}, parameters have {params}")]
    ChannelMismatch { tensor: usize, params: usize },
    #[error("branch shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("expected a [C, H, W] tensor, got {0:?}")]
    NotChw(Vec<usize>),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ExchangeError>;

/// Per-channel batch-norm statistics and affine parameters of one branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnBranchParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BnBranchParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Shape and sign checks; `eps = 0` is accepted when every variance is positive.
    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(ExchangeError::InvalidParams("per-channel vectors differ in length".into()));
        }
        if !(self.eps >= 0.0) || self.var.iter().any(|v| !(*v >= 0.0) || *v + self.eps <= 0.0) {
            return Err(ExchangeError::InvalidParams("need var >= 0 and var + eps > 0".into()));
        }
        Ok(())
    }

    #[inline]
    fn apply(&self, c: usize, x: f64) -> f64 {
        self.gamma[c] * (x - self.mean[c]) / (self.var[c] + self.eps).sqrt() + self.beta[c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeMode {
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExchangeConfig {
    pub theta: f64,
    pub mode: ExchangeMode,
}

impl Default for ExchangeConfig {
    fn default() -> Self {
        Self { theta: 2e-2, mode: ExchangeMode::Max }
    }
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(ExchangeError::NotChw(s.to_vec())),
    }
}

/// `γ (x − μ) / sqrt(σ² + ε) + β` per channel of a `[C, H, W]` tensor.
pub fn bn_normalize(x: &Tensor, params: &BnBranchParams) -> Result<Tensor> {
    params.validate()?;
    let (c, h, w) = chw(x)?;
    if c != params.channels() {
        return Err(ExchangeError::ChannelMismatch { tensor: c, params: params.channels() });
    }
    let hw = h * w;
    let data = x.data().iter().enumerate().map(|(i, &v)| params.apply(i / hw, v)).collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

/// Where an output value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// The branch's own BN output.
    Own,
    /// Copied from another branch (max mode).
    Branch(usize),
    /// Average of the other branches (mean mode).
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExchangeOutput {
    pub outputs: Vec<Tensor>,
    /// Per branch, `[C, H, W]` sources in row-major order.
    pub routing: Vec<Vec<Source>>,
    /// Per branch, which channels were exchanged.
    pub exchanged: Vec<Vec<bool>>,
}

fn check_branches(xs: &[Tensor], params: &[BnBranchParams], config: &ExchangeConfig) -> Result<(usize, usize, usize)> {
    if xs.len() < 2 {
        return Err(ExchangeError::TooFewBranches(xs.len()));
    }
    if xs.len() != params.len() {
        return Err(ExchangeError::InvalidParams(format!("{} tensors but {} parameter sets", xs.len(), params.len())));
    }
    if !(config.theta > 0.0) {
        return Err(ExchangeError::InvalidParams("theta must be positive".into()));
    }
    let dims = chw(&xs[0])?;
    for x in &xs[1..] {
        if x.shape() != xs[0].shape() {
            return Err(ExchangeError::ShapeMismatch(xs[0].shape().to_vec(), x.shape().to_vec()));
        }
    }
    for p in params {
        p.validate()?;
        if p.channels() != dims.0 {
            return Err(ExchangeError::ChannelMismatch { tensor: dims.0, params: p.channels() });
        }
    }
    Ok(dims)
}

/// A channel keeps its own output when `|γ| > θ`; otherwise it takes the mean or the
/// elementwise max of the other branches' BN outputs. Max ties go to the lower branch index.
pub fn exchange(xs: &[Tensor], params: &[BnBranchParams], config: &ExchangeConfig) -> Result<ExchangeOutput> {
    let (c, h, w) = check_branches(xs, params, config)?;
    let bn: Vec<Tensor> = xs.iter().zip(params).map(|(x, p)| bn_normalize(x, p)).collect::<Result<_>>()?;
    let m = xs.len();
    let hw = h * w;
    let mut outputs = Vec::with_capacity(m);
    let mut routing = Vec::with_capacity(m);
    let mut exchanged = Vec::with_capacity(m);
    for b in 0..m {
        let swap: Vec<bool> = (0..c).map(|ch| params[b].gamma[ch].abs() <= config.theta).collect();
        let mut data = Vec::with_capacity(c * hw);
        let mut route = Vec::with_capacity(c * hw);
        for i in 0..c * hw {
            if !swap[i / hw] {
                data.push(bn[b].data()[i]);
                route.push(Source::Own);
                continue;
            }
            match config.mode {
                ExchangeMode::Mean => {
                    let sum: f64 = (0..m).filter(|&o| o != b).map(|o| bn[o].data()[i]).sum();
                    data.push(sum / (m - 1) as f64);
                    route.push(Source::Mixed);
                }
                ExchangeMode::Max => {
                    let mut best: Option<(usize, f64)> = None;
                    for o in (0..m).filter(|&o| o != b) {
                        let v = bn[o].data()[i];
                        if best.map_or(true, |(_, bv)| v > bv) {
                            best = Some((o, v));
                        }
                    }
                    let (o, v) = best.expect("at least one other branch");
                    data.push(v);
                    route.push(Source::Branch(o));
                }
            }
        }
        outputs.push(Tensor::new(vec![c, h, w], data)?);
        routing.push(route);
        exchanged.push(swap);
    }
    Ok(ExchangeOutput { outputs, routing, exchanged })
}

/// Taped BN of one channel with a differentiable `γ`.
fn bn_channel_var<'t>(x: Var<'t>, gamma: Var<'t>, params: &BnBranchParams, c: usize) -> Result<Var<'t>> {
    let xc = x.channel(c)?;
    let g = gamma.element(c)?;
    let inv_std = 1.0 / (params.var[c] + params.eps).sqrt();
    Ok(xc.add_scalar(-params.mean[c])?.mul(g)?.mul_scalar(inv_std)?.add_scalar(params.beta[c])?)
}

/// Taped [`exchange`]: inputs are `[C, H, W]` vars, `gammas` are `[C]` vars whose values
/// override `params[m].gamma`. Routing decisions are taken on the current `γ` values.
pub fn exchange_var<'t>(
    tape: &'t Tape,
    xs: &[Var<'t>],
    gammas: &[Var<'t>],
    params: &[BnBranchParams],
    config: &ExchangeConfig,
) -> Result<Vec<Var<'t>>> {
    if gammas.len() != xs.len() {
        return Err(ExchangeError::InvalidParams("one gamma vector per branch".into()));
    }
    let values: Vec<Tensor> = xs.iter().map(|x| (*x.value()).clone()).collect();
    let params: Vec<BnBranchParams> = params
        .iter()
        .zip(gammas)
        .map(|(p, g)| BnBranchParams { gamma: g.value().data().to_vec(), ..p.clone() })
        .collect();
    let (c, _, _) = check_branches(&values, &params, config)?;
    let m = xs.len();
    let mut bn = Vec::with_capacity(m);
    for b in 0..m {
        let chans: Vec<Var<'t>> =
            (0..c).map(|ch| bn_channel_var(xs[b], gammas[b], &params[b], ch)).collect::<Result<_>>()?;
        bn.push(chans);
    }
    let mut out = Vec::with_capacity(m);
    for b in 0..m {
        let mut chans = Vec::with_capacity(c);
        for ch in 0..c {
            if params[b].gamma[ch].abs() > config.theta {
                chans.push(bn[b][ch]);
                continue;
            }
            let others: Vec<Var<'t>> = (0..m).filter(|&o| o != b).map(|o| bn[o][ch]).collect();
            let mut acc = others[0];
            for &v in &others[1..] {
                acc = match config.mode {
                    ExchangeMode::Mean => acc.add(v)?,
                    ExchangeMode::Max => acc.max(v)?,
                };
            }
            if config.mode == ExchangeMode::Mean {
                acc = acc.mul_scalar(1.0 / (m - 1) as f64)?;
            }
            chans.push(acc);
        }
        out.push(tape.stack(&chans)?);
    }
    Ok(out)
}

/// Softmax fusion weights over branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionHead {
    pub alpha_logits: Vec<f64>,
}

impl FusionHead {
    pub fn new(alpha_logits: Vec<f64>) -> Self {
        Self { alpha_logits }
    }

    /// Numerically stable softmax of the logits.
    pub fn alpha(&self) -> Vec<f64> {
        let max = self.alpha_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.alpha_logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    /// `Σ_m α_m f_m`.
    pub fn fuse(&self, outputs: &[Tensor]) -> Result<Tensor> {
        if outputs.len() != self.alpha_logits.len() || outputs.is_empty() {
            return Err(ExchangeError::InvalidParams("one logit per branch output".into()));
        }
        for o in &outputs[1..] {
            if o.shape() != outputs[0].shape() {
                return Err(ExchangeError::ShapeMismatch(outputs[0].shape().to_vec(), o.shape().to_vec()));
            }
        }
        let alpha = self.alpha();
        let mut data = vec![0.0; outputs[0].len()];
        for (a, o) in alpha.iter().zip(outputs) {
            for (d, v) in data.iter_mut().zip(o.data()) {
                *d += a * v;
            }
        }
        Ok(Tensor::new(outputs[0].shape().to_vec(), data)?)
    }

    pub fn fuse_var<'t>(&self, outputs: &[Var<'t>]) -> Result<Var<'t>> {
        if outputs.len() != self.alpha_logits.len() || outputs.is_empty() {
            return Err(ExchangeError::InvalidParams("one logit per branch output".into()));
        }
        let alpha = self.alpha();
        let mut acc = outputs[0].mul_scalar(alpha[0])?;
        for (a, o) in alpha.iter().zip(outputs).skip(1) {
            acc = acc.add(o.mul_scalar(*a)?)?;
        }
        Ok(acc)
    }
}

/// Raster codes of [`routing_mosaic`].
pub const ROUTE_SELF: u8 = 0;
pub const ROUTE_MIXED: u8 = 255;

/// Tiles routing sources into a `(M·H) × (C·W)` code raster: row block `m` is branch
/// `m`, column block `c` its channel `c`. Codes: 0 own output, `k + 1` copied from
/// branch `k`, 255 mean of the others.
pub fn routing_mosaic(out: &ExchangeOutput, shape: (usize, usize, usize)) -> (usize, usize, Vec<u8>) {
    let (c, h, w) = shape;
    let m = out.routing.len();
    let (width, height) = (c * w, m * h);
    let mut codes = vec![ROUTE_SELF; width * height];
    for (b, route) in out.routing.iter().enumerate() {
        for (i, src) in route.iter().enumerate() {
            let (ch, rem) = (i / (h * w), i % (h * w));
            let (y, x) = (rem / w, rem % w);
            codes[(b * h + y) * width + ch * w + x] = match src {
                Source::Own => ROUTE_SELF,
                Source::Branch(k) => (*k + 1) as u8,
                Source::Mixed => ROUTE_MIXED,
            };
        }
    }
    (width, height, codes)
}

/// Branch names of the three-modality demo, in order.
pub const DEMO_BRANCHES: [&str; 3] = ["disparity", "ir", "sparse"];

/// Toy feature stack from a single-channel `[H, W]` raster: raw values, horizontal and
/// vertical central differences, and a 3×3 box average.
pub fn toy_features(raster: &Tensor) -> Result<Tensor> {
    let (h, w) = match raster.shape() {
        [h, w] => (*h, *w),
        s => return Err(ExchangeError::NotChw(s.to_vec())),
    };
    let at = |x: isize, y: isize| {
        raster.data()[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize]
    };
    let mut data = Vec::with_capacity(4 * h * w);
    data.extend_from_slice(raster.data());
    for y in 0..h as isize {
        for x in 0..w as isize {
            data.push(0.5 * (at(x + 1, y) - at(x - 1, y)));
        }
    }
    for y in 0..h as isize {
        for x in 0..w as isize {
            data.push(0.5 * (at(x, y + 1) - at(x, y - 1)));
        }
    }
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += at(x + dx, y + dy);
                }
            }
            data.push(s / 9.0);
        }
    }
    Ok(Tensor::new(vec![4, h, w], data)?)
}

/// Exchange over the disparity / IR / sparse demo stack; returns the exchange result and
/// its routing mosaic.
pub fn exchange_demo(
    branches: [&Tensor; 3],
    params: &[BnBranchParams; 3],
    config: &ExchangeConfig,
) -> Result<(ExchangeOutput, (usize, usize, Vec<u8>))> {
    let xs: Vec<Tensor> = branches.iter().map(|t| (*t).clone()).collect();
    let out = exchange(&xs, params, config)?;
    let shape = chw(&xs[0])?;
    let mosaic = routing_mosaic(&out, shape);
    Ok((out, mosaic))
}
