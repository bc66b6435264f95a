//! Rectified-flow objective and the training loops for the base video model
//! and the grid model.
//!
//! Convention: `x_σ = (1 − σ) x0 + σ ε`, target velocity `ε − x0`. Pixels in
//! `[0, 1]` are mapped to `[-1, 1]` before corruption.

use rand::Rng;

use crate::dit::{ContextMode, VideoModel};
use crate::error::{Error, Result};
use crate::grid::{FrameGrid, GridMask, Video};
use crate::nn::{zeros_like, Params};
use crate::optim::{clip_grad_norm, cosine_lr, AdamW};
use crate::real::Real;
use crate::rng::{normal_vec, rng_for};
use crate::sync::{four_d_backward, four_d_forward, four_d_forward_cached, FourDGrads, SyncStack, SyncVariant};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip: f64,
    pub weight_decay: f64,
    /// Per-frame probability of being given (base training).
    pub rho: f64,
    /// Probability of the all-unknown mask (base training).
    pub q: f64,
    /// Restrict learned hard-sync weights to diagonals.
    pub sync_diagonal: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            lr: 3e-4,
            warmup: 50,
            min_lr_ratio: 0.1,
            clip: 1.0,
            weight_decay: 0.0,
            rho: 0.2,
            q: 0.3,
            sync_diagonal: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |x: f64| (0.0..=1.0).contains(&x);
        if self.batch == 0 || !(self.lr > 0.0) || !prob(self.rho) || !prob(self.q) || !(self.min_lr_ratio >= 0.0) {
            return Err(Error::Invalid(format!("bad training config {self:?}")));
        }
        Ok(())
    }
}

#[inline]
pub fn to_diffusion<T: Real>(p: T) -> T {
    p * T::c(2.0) - T::one()
}

#[inline]
pub fn from_diffusion<T: Real>(x: T) -> T {
    ((x + T::one()) * T::c(0.5)).max(T::zero()).min(T::one())
}

/// `(1 − σ) x0 + σ ε`.
pub fn corrupt<T: Real>(x0: &[T], eps: &[T], sigma: T) -> Result<Vec<T>> {
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("x0 has {} values, eps {}", x0.len(), eps.len())));
    }
    if !(sigma >= T::zero() && sigma <= T::one()) {
        return Err(Error::ValueRange {
            coord: "sigma".into(),
            value: sigma.f64(),
        });
    }
    Ok(x0.iter().zip(eps).map(|(&a, &e)| (T::one() - sigma) * a + sigma * e).collect())
}

/// Sum of squared errors over frames not marked given, and the number of terms.
pub fn masked_sse<T: Real>(pred: &[T], target: &[T], frame_len: usize, given: &[bool]) -> (f64, usize) {
    let mut sse = 0.0;
    let mut n = 0;
    for (f, &g) in given.iter().enumerate() {
        if g {
            continue;
        }
        let r = f * frame_len..(f + 1) * frame_len;
        sse += pred[r.clone()]
            .iter()
            .zip(&target[r])
            .map(|(&p, &t)| (p.f64() - t.f64()).powi(2))
            .sum::<f64>();
        n += frame_len;
    }
    (sse, n)
}

/// Gradient of `masked_sse / denom` with respect to `pred`.
fn masked_sse_grad<T: Real>(pred: &[T], target: &[T], frame_len: usize, given: &[bool], denom: usize) -> Vec<T> {
    let s = T::c(2.0 / denom.max(1) as f64);
    let mut g = vec![T::zero(); pred.len()];
    for (f, &gv) in given.iter().enumerate() {
        if gv {
            continue;
        }
        for i in f * frame_len..(f + 1) * frame_len {
            g[i] = s * (pred[i] - target[i]);
        }
    }
    g
}

/// Noise level and noise for one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDraw<T> {
    pub sigma: T,
    pub eps: Vec<T>,
}

pub fn draw_flow<T: Real>(rng: &mut impl Rng, len: usize) -> FlowDraw<T> {
    let sigma = T::c(rng.gen::<f64>());
    FlowDraw {
        sigma,
        eps: normal_vec(rng, len),
    }
}

/// All-unknown with probability `q`; otherwise each frame given independently with probability `rho`.
pub fn sample_frame_mask(rng: &mut impl Rng, frames: usize, rho: f64, q: f64) -> Vec<bool> {
    let none = rng.gen::<f64>() < q;
    (0..frames).map(|_| !none && rng.gen::<f64>() < rho).collect()
}

fn video_in_diffusion_space<T: Real>(x0: &Video<T>) -> Video<T> {
    Video {
        frame: x0.frame,
        len: x0.len,
        data: x0.data.iter().map(|&p| to_diffusion(p)).collect(),
    }
}

/// Velocity-matching loss for one video. `x0` is in diffusion space.
/// Parameter gradients of `loss * count / denom` are accumulated into `grads`
/// when given. Returns `(sse, count)`.
#[allow(clippy::too_many_arguments)]
pub fn video_flow_terms<T: Real>(
    model: &VideoModel<T>,
    x0: &Video<T>,
    mask: &[bool],
    mode: ContextMode,
    draw: &FlowDraw<T>,
    denom: Option<usize>,
    grads: Option<&mut VideoModel<T>>,
) -> Result<(f64, usize)> {
    let x = corrupt(&x0.data, &draw.eps, draw.sigma)?;
    let noisy = Video { data: x, ..x0.clone() };
    let target: Vec<T> = draw.eps.iter().zip(&x0.data).map(|(&e, &a)| e - a).collect();
    let fl = x0.frame.len();
    match grads {
        None => {
            let pred = model.video_forward(&noisy, x0, mask, draw.sigma, mode)?;
            Ok(masked_sse(&pred.data, &target, fl, mask))
        }
        Some(g) => {
            let (pred, cache) = model.video_forward_cached(&noisy, x0, mask, draw.sigma, mode)?;
            let (sse, n) = masked_sse(&pred.data, &target, fl, mask);
            if n > 0 {
                let d = masked_sse_grad(&pred.data, &target, fl, mask, denom.unwrap_or(n));
                model.video_backward(&cache, &Video { data: d, ..pred }, g);
            }
            Ok((sse, n))
        }
    }
}

/// Grid counterpart of [`video_flow_terms`].
#[allow(clippy::too_many_arguments)]
pub fn grid_flow_terms<T: Real>(
    model: &VideoModel<T>,
    syncs: &SyncStack<T>,
    x0: &FrameGrid<T>,
    mask: &GridMask,
    draw: &FlowDraw<T>,
    denom: Option<usize>,
    grads: Option<FourDGrads<'_, T>>,
) -> Result<(f64, usize)> {
    let x = corrupt(&x0.data, &draw.eps, draw.sigma)?;
    let noisy = FrameGrid { data: x, ..x0.clone() };
    let target: Vec<T> = draw.eps.iter().zip(&x0.data).map(|(&e, &a)| e - a).collect();
    let fl = x0.frame.len();
    match grads {
        None => {
            let pred = four_d_forward(model, syncs, &noisy, x0, mask, draw.sigma)?;
            Ok(masked_sse(&pred.velocity.data, &target, fl, &mask.given))
        }
        Some(g) => {
            let (pred, cache) = four_d_forward_cached(model, syncs, &noisy, x0, mask, draw.sigma)?;
            let (sse, n) = masked_sse(&pred.velocity.data, &target, fl, &mask.given);
            if n > 0 {
                let d = masked_sse_grad(&pred.velocity.data, &target, fl, &mask.given, denom.unwrap_or(n));
                four_d_backward(model, syncs, &cache, &FrameGrid { data: d, ..pred.velocity }, g);
            }
            Ok((sse, n))
        }
    }
}

fn mean(sse: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sse / n as f64
    }
}

/// Flow-matching loss of the base model on one pixel-space video: draws σ and
/// ε from `rng`; MSE over frames not marked given (0 when all are given).
pub fn flow_loss_video<T: Real>(
    model: &VideoModel<T>,
    x0: &Video<T>,
    mask: &[bool],
    mode: ContextMode,
    rng: &mut impl Rng,
) -> Result<f64> {
    let xd = video_in_diffusion_space(x0);
    let draw = draw_flow(rng, xd.data.len());
    let (sse, n) = video_flow_terms(model, &xd, mask, mode, &draw, None, None)?;
    Ok(mean(sse, n))
}

/// Flow-matching loss of the grid model on one pixel-space grid.
pub fn flow_loss_grid<T: Real>(
    model: &VideoModel<T>,
    syncs: &SyncStack<T>,
    x0: &FrameGrid<T>,
    mask: &GridMask,
    rng: &mut impl Rng,
) -> Result<f64> {
    let xd = x0.map(to_diffusion);
    let draw = draw_flow(rng, xd.data.len());
    let (sse, n) = grid_flow_terms(model, syncs, &xd, mask, &draw, None, None)?;
    Ok(mean(sse, n))
}

/// A base-model training example.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVideo {
    pub video: Video<f32>,
    pub mode: ContextMode,
}

fn check_finite_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, loss })
    }
}

/// Train the base model on labeled videos with random frame masks. Returns
/// the per-step batch loss.
pub fn train_base(
    model: &mut VideoModel<f32>,
    data: &[LabeledVideo],
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("empty training dataset".into()));
    }
    for (i, s) in data.iter().enumerate() {
        if s.video.frame != model.cfg.frame || s.video.len == 0 || s.video.len > model.cfg.max_frames {
            return Err(Error::Shape(format!(
                "training video {i}: {} frames of {:?} for a model of {:?} and up to {} frames",
                s.video.len, s.video.frame, model.cfg.frame, model.cfg.max_frames
            )));
        }
    }
    let prepared: Vec<Video<f32>> = data.iter().map(|s| video_in_diffusion_space(&s.video)).collect();
    let mut params = model.flatten();
    let mut opt = AdamW::new(params.len(), cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = rng_for(seed, "train_base", step as u64);
        let batch: Vec<(usize, Vec<bool>, FlowDraw<f32>)> = (0..cfg.batch)
            .map(|_| {
                let i = rng.gen_range(0..data.len());
                let mask = sample_frame_mask(&mut rng, prepared[i].len, cfg.rho, cfg.q);
                let draw = draw_flow(&mut rng, prepared[i].data.len());
                (i, mask, draw)
            })
            .collect();
        let denom: usize = batch
            .iter()
            .map(|(i, m, _)| m.iter().filter(|&&g| !g).count() * prepared[*i].frame.len())
            .sum();
        let mut grads = VideoModel::<f32>::new_zeroed(model.cfg);
        let mut sse = 0.0;
        for (i, mask, draw) in &batch {
            let (s, _) = video_flow_terms(model, &prepared[*i], mask, data[*i].mode, draw, Some(denom), Some(&mut grads))?;
            sse += s;
        }
        let loss = mean(sse, denom);
        check_finite_loss(step, loss)?;
        losses.push(loss);
        on_step(step, loss);
        if denom == 0 {
            continue;
        }
        let mut g = grads.flatten();
        clip_grad_norm(&mut g, cfg.clip);
        let lr = cosine_lr(cfg.lr, step, cfg.steps, cfg.warmup, cfg.min_lr_ratio);
        opt.step(&mut params, &g, lr);
        model.unflatten(&params);
    }
    Ok(losses)
}

/// The two grid-training stages: pseudo-4D affine grids, then renderer grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FourDStage {
    Pseudo,
    Render,
}

impl FourDStage {
    pub fn label(self) -> &'static str {
        match self {
            FourDStage::Pseudo => "pseudo",
            FourDStage::Render => "render",
        }
    }
}

/// One grid-training stage. Row 0 and column 0 are always given.
///
/// The pseudo stage may start from fresh sync layers (`syncs = None`); the
/// render stage requires the sync layers produced by the pseudo stage. With
/// `freeze_base` only sync parameters change.
#[allow(clippy::too_many_arguments)]
pub fn train_4d_stage(
    model: &mut VideoModel<f32>,
    syncs: Option<SyncStack<f32>>,
    variant: SyncVariant,
    grids: &[FrameGrid<f32>],
    stage: FourDStage,
    cfg: &TrainConfig,
    freeze_base: bool,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(SyncStack<f32>, Vec<f64>)> {
    cfg.validate()?;
    let mut syncs = match (syncs, stage) {
        (Some(s), _) => s,
        (None, FourDStage::Pseudo) => SyncStack::new(variant, model, cfg.sync_diagonal),
        (None, FourDStage::Render) => {
            return Err(Error::Precondition(
                "render-stage fine-tuning needs the sync parameters produced by the pseudo stage".into(),
            ))
        }
    };
    if syncs.variant != variant {
        return Err(Error::Invalid(format!(
            "sync parameters are {} but variant {} was requested",
            syncs.variant.label(),
            variant.label()
        )));
    }
    syncs.check(model)?;
    if freeze_base && !variant.is_trained() {
        return Err(Error::Invalid(format!(
            "variant {} has no trainable sync parameters and the base is frozen",
            variant.label()
        )));
    }
    if grids.is_empty() {
        return Err(Error::Invalid("empty training dataset".into()));
    }
    let prepared: Vec<FrameGrid<f32>> = grids.iter().map(|g| g.map(to_diffusion)).collect();
    let n_sync = syncs.param_count();
    let mut params = syncs.flatten();
    if !freeze_base {
        params.extend(model.flatten());
    }
    let mut opt = AdamW::new(params.len(), cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    let stream = format!("train_4d_{}_{}", variant.label(), stage.label());
    for step in 0..cfg.steps {
        let mut rng = rng_for(seed, &stream, step as u64);
        let batch: Vec<(usize, FlowDraw<f32>)> = (0..cfg.batch)
            .map(|_| {
                let i = rng.gen_range(0..prepared.len());
                let draw = draw_flow(&mut rng, prepared[i].data.len());
                (i, draw)
            })
            .collect();
        let masks: Vec<GridMask> = batch
            .iter()
            .map(|(i, _)| GridMask::first_row_and_column(prepared[*i].v, prepared[*i].t))
            .collect();
        let denom: usize = batch
            .iter()
            .zip(&masks)
            .map(|((i, _), m)| (m.given.len() - m.count_given()) * prepared[*i].frame.len())
            .sum();
        let mut gs = zeros_like(&syncs);
        let mut gb = (!freeze_base).then(|| VideoModel::<f32>::new_zeroed(model.cfg));
        let mut sse = 0.0;
        for ((i, draw), mask) in batch.iter().zip(&masks) {
            let g = FourDGrads {
                syncs: Some(&mut gs),
                base: gb.as_mut(),
            };
            let (s, _) = grid_flow_terms(model, &syncs, &prepared[*i], mask, draw, Some(denom), Some(g))?;
            sse += s;
        }
        let loss = mean(sse, denom);
        check_finite_loss(step, loss)?;
        losses.push(loss);
        on_step(step, loss);
        if denom == 0 {
            continue;
        }
        let mut g = gs.flatten();
        if let Some(gb) = &gb {
            g.extend(gb.flatten());
        }
        clip_grad_norm(&mut g, cfg.clip);
        let lr = cosine_lr(cfg.lr, step, cfg.steps, cfg.warmup, cfg.min_lr_ratio);
        opt.step(&mut params, &g, lr);
        syncs.unflatten(&params[..n_sync]);
        if !freeze_base {
            model.unflatten(&params[n_sync..]);
        }
    }
    Ok((syncs, losses))
}

/// Both grid-training stages in order.
#[allow(clippy::too_many_arguments)]
pub fn train_4d(
    model: &mut VideoModel<f32>,
    variant: SyncVariant,
    pseudo: &[FrameGrid<f32>],
    render: &[FrameGrid<f32>],
    cfg_pseudo: &TrainConfig,
    cfg_render: &TrainConfig,
    freeze_base: bool,
    seed: u64,
) -> Result<(SyncStack<f32>, Vec<f64>, Vec<f64>)> {
    let (s, la) = train_4d_stage(model, None, variant, pseudo, FourDStage::Pseudo, cfg_pseudo, freeze_base, seed, |_, _| {})?;
    let (s, lb) = train_4d_stage(model, Some(s), variant, render, FourDStage::Render, cfg_render, freeze_base, seed, |_, _| {})?;
    Ok((s, la, lb))
}
