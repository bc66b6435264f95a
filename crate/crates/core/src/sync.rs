//! Two-stream grid transformer.
//!
//! The grid's tokens are split into a view stream `x_v` (updated column by
//! column in freeze-time mode) and a temporal stream `x_t` (updated row by row
//! in dynamic mode). After every block a synchronization layer exchanges
//! information between the two streams. The sequential-interleaving baseline
//! keeps a single stream and applies the column and row updates one after the
//! other.

use rayon::prelude::*;

use crate::dit::{BlockCache, BlockGrads, Conditioning, ContextMode, DiTBlock, HeadCache, VideoModel};
use crate::error::{Error, Result};
use crate::grid::{FrameGrid, GridMask, TokenGrid, Video};
use crate::nn::{accumulate, join, sigma_features, zeros_like, Linear, Params};
use crate::real::{gemm, MatRef, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyncVariant {
    Hard,
    Soft,
    FreeHard,
    FreeSoft,
    Sequential,
}

impl SyncVariant {
    pub const ALL: [SyncVariant; 5] = [
        SyncVariant::Hard,
        SyncVariant::Soft,
        SyncVariant::FreeHard,
        SyncVariant::FreeSoft,
        SyncVariant::Sequential,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SyncVariant::Hard => "hard",
            SyncVariant::Soft => "soft",
            SyncVariant::FreeHard => "free_hard",
            SyncVariant::FreeSoft => "free_soft",
            SyncVariant::Sequential => "sequential",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.label() == s)
    }

    /// Whether the variant has trainable synchronization parameters.
    pub fn is_trained(self) -> bool {
        matches!(self, SyncVariant::Hard | SyncVariant::Soft | SyncVariant::Sequential)
    }
}

/// Scale/shift of a sync layer's input, produced from sinusoidal σ features.
/// Output layout is `[scale | shift]`; zero-initialized so it starts inert.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaModulation<T> {
    pub map: Linear<T>,
}

impl<T: Real> SigmaModulation<T> {
    pub fn new(freq_dim: usize, width: usize) -> Self {
        Self {
            map: Linear::zeros(freq_dim, 2 * width),
        }
    }

    pub fn width(&self) -> usize {
        self.map.out / 2
    }

    fn params(&self, feats: &[T]) -> Vec<T> {
        self.map.forward(feats, 1)
    }

    fn apply(m: &[T], u: &[T]) -> Vec<T> {
        let w = m.len() / 2;
        let (scale, shift) = m.split_at(w);
        let mut out = u.to_vec();
        for r in out.chunks_exact_mut(w) {
            for j in 0..w {
                r[j] = r[j] * (T::one() + scale[j]) + shift[j];
            }
        }
        out
    }

    /// Returns the input gradient and accumulates the gradient of `m` into `dm`.
    fn apply_backward(m: &[T], u: &[T], d_out: &[T], dm: &mut [T]) -> Vec<T> {
        let w = m.len() / 2;
        let scale = &m[..w];
        let mut du = d_out.to_vec();
        for ((dr, ur), gr) in du.chunks_exact_mut(w).zip(u.chunks_exact(w)).zip(d_out.chunks_exact(w)) {
            for j in 0..w {
                dm[j] += gr[j] * ur[j];
                dm[w + j] += gr[j];
                dr[j] *= T::one() + scale[j];
            }
        }
        du
    }
}

impl<T: Real> Params<T> for SigmaModulation<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.map.for_each_param(prefix, f);
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.map.for_each_param_mut(prefix, f);
    }
}

/// `x = mod_v(y_v) W_v + mod_t(y_t) W_t`, per token. `W` is `[in][out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HardSync<T> {
    pub mod_v: SigmaModulation<T>,
    pub mod_t: SigmaModulation<T>,
    pub w_v: Vec<T>,
    pub w_t: Vec<T>,
    /// Restrict `W_v`, `W_t` to their diagonals during training.
    pub diagonal: bool,
}

impl<T: Real> HardSync<T> {
    pub fn new(dim: usize, freq_dim: usize, diagonal: bool) -> Self {
        let half = Linear::<T>::identity(dim).w.iter().map(|&x| x * T::c(0.5)).collect::<Vec<_>>();
        Self {
            mod_v: SigmaModulation::new(freq_dim, dim),
            mod_t: SigmaModulation::new(freq_dim, dim),
            w_v: half.clone(),
            w_t: half,
            diagonal,
        }
    }

    pub fn dim(&self) -> usize {
        self.mod_v.width()
    }
}

impl<T: Real> Params<T> for HardSync<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        let d = self.dim();
        self.mod_v.for_each_param(&join(prefix, "mod_v"), f);
        self.mod_t.for_each_param(&join(prefix, "mod_t"), f);
        f(&join(prefix, "w_v"), &[d, d], &self.w_v);
        f(&join(prefix, "w_t"), &[d, d], &self.w_t);
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let d = self.dim();
        self.mod_v.for_each_param_mut(&join(prefix, "mod_v"), f);
        self.mod_t.for_each_param_mut(&join(prefix, "mod_t"), f);
        f(&join(prefix, "w_v"), &[d, d], &mut self.w_v);
        f(&join(prefix, "w_t"), &[d, d], &mut self.w_t);
    }
}

/// `(Δy_v, Δy_t) = out(mod([y_v, y_t]))`, with a zero-initialized output map.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSync<T> {
    pub modulation: SigmaModulation<T>,
    pub out: Linear<T>,
}

impl<T: Real> SoftSync<T> {
    pub fn new(dim: usize, freq_dim: usize) -> Self {
        Self {
            modulation: SigmaModulation::new(freq_dim, 2 * dim),
            out: Linear::zeros(2 * dim, 2 * dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.out.inp / 2
    }
}

impl<T: Real> Params<T> for SoftSync<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.modulation.for_each_param(&join(prefix, "mod"), f);
        self.out.for_each_param(&join(prefix, "out"), f);
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.modulation.for_each_param_mut(&join(prefix, "mod"), f);
        self.out.for_each_param_mut(&join(prefix, "out"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SyncLayer<T> {
    Hard(HardSync<T>),
    Soft(SoftSync<T>),
    FreeHard,
    FreeSoft { w: f64 },
    /// Trainable copy of the block's modulation map, used for the view update only.
    Sequential { view_ada: Linear<T> },
}

impl<T: Real> SyncLayer<T> {
    fn variant(&self) -> SyncVariant {
        match self {
            SyncLayer::Hard(_) => SyncVariant::Hard,
            SyncLayer::Soft(_) => SyncVariant::Soft,
            SyncLayer::FreeHard => SyncVariant::FreeHard,
            SyncLayer::FreeSoft { .. } => SyncVariant::FreeSoft,
            SyncLayer::Sequential { .. } => SyncVariant::Sequential,
        }
    }
}

/// Training-free soft weight `w_l = 0.1 + (l / L) * 0.4`.
pub fn free_soft_weight(l: usize, layers: usize) -> f64 {
    0.1 + (l as f64 / layers as f64) * 0.4
}

/// One synchronization layer per block.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncStack<T> {
    pub variant: SyncVariant,
    pub layers: Vec<SyncLayer<T>>,
}

impl<T: Real> SyncStack<T> {
    /// Initial sync layers for `model`. The sync after block `b` (0-based) is
    /// layer `b + 1` of the training-free soft schedule, so the last one uses `w = 0.5`.
    pub fn new(variant: SyncVariant, model: &VideoModel<T>, hard_diagonal: bool) -> Self {
        let cfg = model.cfg;
        let layers = (0..cfg.layers)
            .map(|b| match variant {
                SyncVariant::Hard => SyncLayer::Hard(HardSync::new(cfg.dim, cfg.freq_dim, hard_diagonal)),
                SyncVariant::Soft => SyncLayer::Soft(SoftSync::new(cfg.dim, cfg.freq_dim)),
                SyncVariant::FreeHard => SyncLayer::FreeHard,
                SyncVariant::FreeSoft => SyncLayer::FreeSoft {
                    w: free_soft_weight(b + 1, cfg.layers),
                },
                SyncVariant::Sequential => SyncLayer::Sequential {
                    view_ada: model.blocks[b].ada.clone(),
                },
            })
            .collect();
        Self { variant, layers }
    }

    pub fn check(&self, model: &VideoModel<T>) -> Result<()> {
        let cfg = model.cfg;
        if self.layers.len() != cfg.layers {
            return Err(Error::Invalid(format!(
                "{} sync layers for a {}-block model",
                self.layers.len(),
                cfg.layers
            )));
        }
        for (l, s) in self.layers.iter().enumerate() {
            if s.variant() != self.variant {
                return Err(Error::Invalid(format!(
                    "sync layer {l} is {} inside a {} stack",
                    s.variant().label(),
                    self.variant.label()
                )));
            }
            let ok = match s {
                SyncLayer::Hard(h) => h.dim() == cfg.dim && h.mod_v.map.inp == cfg.freq_dim,
                SyncLayer::Soft(s) => s.dim() == cfg.dim && s.modulation.map.inp == cfg.freq_dim,
                SyncLayer::Sequential { view_ada } => view_ada.inp == cfg.dim && view_ada.out == 6 * cfg.dim,
                _ => true,
            };
            if !ok {
                return Err(Error::Shape(format!("sync layer {l} does not match model width {}", cfg.dim)));
            }
        }
        Ok(())
    }
}

impl<T: Real> Params<T> for SyncStack<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for (l, s) in self.layers.iter().enumerate() {
            let p = join(prefix, &l.to_string());
            match s {
                SyncLayer::Hard(h) => h.for_each_param(&p, f),
                SyncLayer::Soft(s) => s.for_each_param(&p, f),
                SyncLayer::Sequential { view_ada } => view_ada.for_each_param(&join(&p, "view_ada"), f),
                SyncLayer::FreeHard | SyncLayer::FreeSoft { .. } => {}
            }
        }
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        for (l, s) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &l.to_string());
            match s {
                SyncLayer::Hard(h) => h.for_each_param_mut(&p, f),
                SyncLayer::Soft(s) => s.for_each_param_mut(&p, f),
                SyncLayer::Sequential { view_ada } => view_ada.for_each_param_mut(&join(&p, "view_ada"), f),
                SyncLayer::FreeHard | SyncLayer::FreeSoft { .. } => {}
            }
        }
    }
}

/// Token state of both streams entering block `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStreamState<T> {
    pub x_v: TokenGrid<T>,
    pub x_t: TokenGrid<T>,
    pub sigma: T,
    pub layer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Column,
    Row,
}

fn gather<T: Real>(x: &TokenGrid<T>, axis: Axis, i: usize) -> Vec<T> {
    match axis {
        Axis::Column => x.gather_column(i),
        Axis::Row => x.gather_row(i),
    }
}

fn scatter<T: Real>(x: &mut TokenGrid<T>, axis: Axis, i: usize, src: &[T]) {
    match axis {
        Axis::Column => x.scatter_column(i, src),
        Axis::Row => x.scatter_row(i, src),
    }
}

fn axis_dims<T>(x: &TokenGrid<T>, axis: Axis) -> (usize, usize) {
    match axis {
        Axis::Column => (x.t, x.v),
        Axis::Row => (x.v, x.t),
    }
}

/// `x + block(x)` applied independently to every column or row. Each task
/// writes only its own slice, so results do not depend on scheduling.
fn axis_forward<T: Real>(
    model: &VideoModel<T>,
    l: usize,
    x: &TokenGrid<T>,
    axis: Axis,
    mods: &[T],
    keep: bool,
) -> (TokenGrid<T>, Vec<BlockCache<T>>) {
    let (count, frames) = axis_dims(x, axis);
    let block = &model.blocks[l];
    let fpos = model.frame_pos_rows(frames);
    let heads = model.cfg.heads;
    let results: Vec<(Vec<T>, Option<BlockCache<T>>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut seq = gather(x, axis, i);
            let mut cache = keep.then(BlockCache::default);
            let delta = block.forward(&seq, frames, heads, mods, fpos, cache.as_mut());
            for (a, &b) in seq.iter_mut().zip(&delta) {
                *a += b;
            }
            (seq, cache)
        })
        .collect();
    let mut y = x.clone();
    let mut caches = Vec::new();
    for (i, (seq, c)) in results.into_iter().enumerate() {
        scatter(&mut y, axis, i, &seq);
        caches.extend(c);
    }
    (y, caches)
}

struct AxisGrads<T> {
    /// Gradient through the block path only (the identity path is the caller's).
    dx: TokenGrid<T>,
    params: Option<DiTBlock<T>>,
    mods: Option<Vec<T>>,
    fpos: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
fn axis_backward<T: Real>(
    model: &VideoModel<T>,
    l: usize,
    caches: &[BlockCache<T>],
    dy: &TokenGrid<T>,
    axis: Axis,
    mods: &[T],
    want_params: bool,
    want_mods: bool,
    want_fpos: bool,
) -> AxisGrads<T> {
    let (count, frames) = axis_dims(dy, axis);
    let block = &model.blocks[l];
    let d = model.cfg.dim;
    let heads = model.cfg.heads;
    type Part<T> = (Vec<T>, Option<DiTBlock<T>>, Option<Vec<T>>, Option<Vec<T>>);
    let parts: Vec<Part<T>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let d_seq = gather(dy, axis, i);
            let mut pg = want_params.then(|| zeros_like(block));
            let mut dm = want_mods.then(|| vec![T::zero(); 6 * d]);
            let mut dfp = want_fpos.then(|| vec![T::zero(); frames * d]);
            let dx = block.backward(
                &caches[i],
                &d_seq,
                heads,
                mods,
                BlockGrads {
                    params: pg.as_mut(),
                    mods: dm.as_deref_mut(),
                    frame_pos: dfp.as_deref_mut(),
                },
            );
            (dx, pg, dm, dfp)
        })
        .collect();
    let mut out = AxisGrads {
        dx: TokenGrid::zeros(dy.v, dy.t, dy.p, dy.d),
        params: None,
        mods: None,
        fpos: None,
    };
    for (i, (dx, pg, dm, dfp)) in parts.into_iter().enumerate() {
        scatter(&mut out.dx, axis, i, &dx);
        if let Some(pg) = pg {
            match &mut out.params {
                Some(acc) => accumulate(acc, &pg),
                None => out.params = Some(pg),
            }
        }
        add_opt(&mut out.mods, dm);
        add_opt(&mut out.fpos, dfp);
    }
    out
}

fn add_opt<T: Real>(acc: &mut Option<Vec<T>>, v: Option<Vec<T>>) {
    if let Some(v) = v {
        match acc {
            Some(a) => add_into(a, &v),
            None => *acc = Some(v),
        }
    }
}

fn add_into<T: Real>(a: &mut [T], b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn check_layer<T: Real>(model: &VideoModel<T>, l: usize) -> Result<()> {
    if l >= model.cfg.layers {
        return Err(Error::Index {
            axis: "layer",
            index: l,
            len: model.cfg.layers,
        });
    }
    Ok(())
}

fn check_tokens<T: Real>(model: &VideoModel<T>, x: &TokenGrid<T>) -> Result<()> {
    let cfg = model.cfg;
    if x.d != cfg.dim || x.p != cfg.patches() || x.data.len() != x.v * x.t * x.p * x.d {
        return Err(Error::Shape(format!(
            "token grid [{}][{}][{}][{}] does not match model (P={}, D={})",
            x.v,
            x.t,
            x.p,
            x.d,
            cfg.patches(),
            cfg.dim
        )));
    }
    if x.v == 0 || x.t == 0 || x.v > cfg.max_frames || x.t > cfg.max_frames {
        return Err(Error::Shape(format!(
            "grid {}x{} outside 1..={} per axis",
            x.v, x.t, cfg.max_frames
        )));
    }
    Ok(())
}

/// Column update of `x_v` in freeze-time mode and row update of `x_t` in dynamic mode.
pub fn parallel_layer<T: Real>(model: &VideoModel<T>, state: &TwoStreamState<T>) -> Result<(TokenGrid<T>, TokenGrid<T>)> {
    check_layer(model, state.layer)?;
    check_tokens(model, &state.x_v)?;
    state.x_v.ensure_same_shape(&state.x_t)?;
    let cv = model.condition(state.sigma, ContextMode::FreezeTime);
    let ct = model.condition(state.sigma, ContextMode::Dynamic);
    let (y_v, _) = axis_forward(model, state.layer, &state.x_v, Axis::Column, &cv.block_mods[state.layer], false);
    let (y_t, _) = axis_forward(model, state.layer, &state.x_t, Axis::Row, &ct.block_mods[state.layer], false);
    Ok((y_v, y_t))
}

fn hard_forward<T: Real>(h: &HardSync<T>, feats: &[T], y_v: &[T], y_t: &[T]) -> (Vec<T>, SyncCache<T>) {
    let d = h.dim();
    let n = y_v.len() / d;
    let m_v = h.mod_v.params(feats);
    let m_t = h.mod_t.params(feats);
    let yh_v = SigmaModulation::apply(&m_v, y_v);
    let yh_t = SigmaModulation::apply(&m_t, y_t);
    let mut x = vec![T::zero(); n * d];
    gemm(T::one(), MatRef::new(&yh_v, n, d, d), MatRef::new(&h.w_v, d, d, d), T::zero(), &mut x, d);
    gemm(T::one(), MatRef::new(&yh_t, n, d, d), MatRef::new(&h.w_t, d, d, d), T::one(), &mut x, d);
    (x, SyncCache::Hard { m_v, m_t, yh_v, yh_t })
}

fn soft_forward<T: Real>(s: &SoftSync<T>, feats: &[T], y_v: &[T], y_t: &[T]) -> (Vec<T>, Vec<T>, SyncCache<T>) {
    let d = s.dim();
    let n = y_v.len() / d;
    let z = interleave(y_v, y_t, d);
    let m = s.modulation.params(feats);
    let zh = SigmaModulation::apply(&m, &z);
    let o = s.out.forward(&zh, n);
    let (mut x_v, mut x_t) = (y_v.to_vec(), y_t.to_vec());
    for i in 0..n {
        for j in 0..d {
            x_v[i * d + j] += o[i * 2 * d + j];
            x_t[i * d + j] += o[i * 2 * d + d + j];
        }
    }
    (x_v, x_t, SyncCache::Soft { m, zh })
}

/// Per-token concatenation `[a_i, b_i]`.
fn interleave<T: Real>(a: &[T], b: &[T], d: usize) -> Vec<T> {
    let mut z = Vec::with_capacity(2 * a.len());
    for (ar, br) in a.chunks_exact(d).zip(b.chunks_exact(d)) {
        z.extend_from_slice(ar);
        z.extend_from_slice(br);
    }
    z
}

fn sigma_feats<T: Real>(sigma: T, freq_dim: usize) -> Result<Vec<T>> {
    if !sigma.is_finite() {
        return Err(Error::NonFinite("sigma".into()));
    }
    Ok(sigma_features(sigma, freq_dim))
}

fn check_pair<T: Real>(y_v: &TokenGrid<T>, y_t: &TokenGrid<T>, d: usize) -> Result<()> {
    y_v.ensure_same_shape(y_t)?;
    if y_v.d != d {
        return Err(Error::Shape(format!("token width {} but sync layer width {d}", y_v.d)));
    }
    Ok(())
}

/// Learned weighted merge of both streams; the result seeds both streams of the next layer.
pub fn hard_sync<T: Real>(y_v: &TokenGrid<T>, y_t: &TokenGrid<T>, params: &HardSync<T>, sigma: T) -> Result<TokenGrid<T>> {
    check_pair(y_v, y_t, params.dim())?;
    let feats = sigma_feats(sigma, params.mod_v.map.inp)?;
    let (x, _) = hard_forward(params, &feats, &y_v.data, &y_t.data);
    Ok(TokenGrid { data: x, ..y_v.clone() })
}

/// Residual cross-stream updates predicted from both streams jointly.
pub fn soft_sync<T: Real>(
    y_v: &TokenGrid<T>,
    y_t: &TokenGrid<T>,
    params: &SoftSync<T>,
    sigma: T,
) -> Result<(TokenGrid<T>, TokenGrid<T>)> {
    check_pair(y_v, y_t, params.dim())?;
    let feats = sigma_feats(sigma, params.modulation.map.inp)?;
    let (x_v, x_t, _) = soft_forward(params, &feats, &y_v.data, &y_t.data);
    Ok((TokenGrid { data: x_v, ..y_v.clone() }, TokenGrid { data: x_t, ..y_t.clone() }))
}

fn free_hard_raw<T: Real>(y_v: &[T], y_t: &[T]) -> Vec<T> {
    let half = T::c(0.5);
    y_v.iter().zip(y_t).map(|(&a, &b)| half * (a + b)).collect()
}

fn free_soft_raw<T: Real>(y_v: &[T], y_t: &[T], w: f64) -> (Vec<T>, Vec<T>) {
    let (w, u) = (T::c(w), T::c(1.0 - w));
    let x_v = y_v.iter().zip(y_t).map(|(&a, &b)| u * a + w * b).collect();
    let x_t = y_v.iter().zip(y_t).map(|(&a, &b)| u * b + w * a).collect();
    (x_v, x_t)
}

/// Training-free merge `½ (y_v + y_t)`.
pub fn free_hard_sync<T: Real>(y_v: &TokenGrid<T>, y_t: &TokenGrid<T>) -> Result<TokenGrid<T>> {
    y_v.ensure_same_shape(y_t)?;
    Ok(TokenGrid {
        data: free_hard_raw(&y_v.data, &y_t.data),
        ..y_v.clone()
    })
}

/// Training-free weighted exchange with `w_l = 0.1 + (l / L) * 0.4`.
pub fn free_soft_sync<T: Real>(
    y_v: &TokenGrid<T>,
    y_t: &TokenGrid<T>,
    l: usize,
    layers: usize,
) -> Result<(TokenGrid<T>, TokenGrid<T>)> {
    y_v.ensure_same_shape(y_t)?;
    if layers == 0 || l > layers {
        return Err(Error::Index {
            axis: "sync layer",
            index: l,
            len: layers + 1,
        });
    }
    let (a, b) = free_soft_raw(&y_v.data, &y_t.data, free_soft_weight(l, layers));
    Ok((TokenGrid { data: a, ..y_v.clone() }, TokenGrid { data: b, ..y_t.clone() }))
}

/// Sequential interleaving on one stream: column update in freeze-time mode,
/// then row update in dynamic mode. `view_ada` replaces the block's
/// modulation map for the column update when given.
pub fn sequential_layer<T: Real>(
    model: &VideoModel<T>,
    layer: usize,
    x: &TokenGrid<T>,
    sigma: T,
    view_ada: Option<&Linear<T>>,
) -> Result<TokenGrid<T>> {
    check_layer(model, layer)?;
    check_tokens(model, x)?;
    let cv = model.condition(sigma, ContextMode::FreezeTime);
    let ct = model.condition(sigma, ContextMode::Dynamic);
    let view_mods = match view_ada {
        Some(a) => a.forward(&cv.cond_act, 1),
        None => cv.block_mods[layer].clone(),
    };
    let (y, _) = axis_forward(model, layer, x, Axis::Column, &view_mods, false);
    let (x_next, _) = axis_forward(model, layer, &y, Axis::Row, &ct.block_mods[layer], false);
    Ok(x_next)
}

#[derive(Debug, Clone)]
enum SyncCache<T> {
    Hard { m_v: Vec<T>, m_t: Vec<T>, yh_v: Vec<T>, yh_t: Vec<T> },
    Soft { m: Vec<T>, zh: Vec<T> },
    None,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    col: Vec<BlockCache<T>>,
    row: Vec<BlockCache<T>>,
    y_v: TokenGrid<T>,
    y_t: TokenGrid<T>,
    sync: SyncCache<T>,
}

/// Forward record of one grid pass, consumed by [`four_d_backward`].
#[derive(Debug, Clone)]
pub struct FourDCache<T> {
    v: usize,
    t: usize,
    sigma: T,
    patches: Vec<T>,
    cond_v: Conditioning<T>,
    cond_t: Conditioning<T>,
    view_mods: Vec<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    head_v: HeadCache<T>,
    head_t: HeadCache<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourDOutput<T> {
    /// `½ (view_velocity + temporal_velocity)`.
    pub velocity: FrameGrid<T>,
    /// Head applied to the final view stream with the freeze-time conditioning.
    pub view_velocity: FrameGrid<T>,
    /// Head applied to the final temporal stream with the dynamic conditioning.
    pub temporal_velocity: FrameGrid<T>,
}

/// Per-layer synchronization statistics of one grid pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyncTrace {
    /// `‖x_{l+1}^v − y_l^v‖ / ‖y_l^v‖` for each block `l`.
    pub rel_update_v: Vec<f64>,
    pub rel_update_t: Vec<f64>,
    /// Cosine between the flattened streams entering each block, plus after the last sync.
    pub stream_cosine: Vec<f64>,
}

fn norm<T: Real>(a: &[T]) -> f64 {
    a.iter().map(|&x| x.f64() * x.f64()).sum::<f64>().sqrt()
}

fn rel_update<T: Real>(next: &[T], y: &[T]) -> f64 {
    let diff = next.iter().zip(y).map(|(&a, &b)| (a.f64() - b.f64()).powi(2)).sum::<f64>().sqrt();
    let den = norm(y);
    if den == 0.0 {
        0.0
    } else {
        diff / den
    }
}

/// Cosine similarity; exactly 1 for bitwise-identical inputs.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x.f64() * y.f64()).sum();
    let den = norm(a) * norm(b);
    if den == 0.0 {
        0.0
    } else {
        (dot / den).clamp(-1.0, 1.0)
    }
}

fn check_grid_inputs<T: Real>(
    model: &VideoModel<T>,
    syncs: &SyncStack<T>,
    noisy: &FrameGrid<T>,
    given: &FrameGrid<T>,
    mask: &GridMask,
    sigma: T,
) -> Result<()> {
    syncs.check(model)?;
    noisy.ensure_same_shape(given)?;
    if noisy.frame != model.cfg.frame {
        return Err(Error::Shape(format!(
            "grid frame {:?} does not match model frame {:?}",
            noisy.frame, model.cfg.frame
        )));
    }
    if mask.v != noisy.v || mask.t != noisy.t {
        return Err(Error::Shape(format!(
            "mask {}x{} for a {}x{} grid",
            mask.v, mask.t, noisy.v, noisy.t
        )));
    }
    let mf = model.cfg.max_frames;
    if noisy.v == 0 || noisy.t == 0 || noisy.v > mf || noisy.t > mf {
        return Err(Error::Shape(format!(
            "grid {}x{} outside 1..={mf} per axis",
            noisy.v, noisy.t
        )));
    }
    if !sigma.is_finite() {
        return Err(Error::NonFinite("sigma".into()));
    }
    Ok(())
}

fn tokens_to_grid<T: Real>(model: &VideoModel<T>, out: &[T], v: usize, t: usize) -> FrameGrid<T> {
    let vid = model.patches_to_video(out, v * t);
    FrameGrid {
        v,
        t,
        frame: model.cfg.frame,
        data: vid.data,
    }
}

fn forward_impl<T: Real>(
    model: &VideoModel<T>,
    syncs: &SyncStack<T>,
    noisy: &FrameGrid<T>,
    given: &FrameGrid<T>,
    mask: &GridMask,
    sigma: T,
    keep: bool,
    mut trace: Option<&mut SyncTrace>,
) -> Result<(FourDOutput<T>, Option<FourDCache<T>>)> {
    check_grid_inputs(model, syncs, noisy, given, mask, sigma)?;
    let cfg = model.cfg;
    let (nv, nt) = (noisy.v, noisy.t);
    let mut frames = Vec::with_capacity(nv * nt);
    let mut flags = Vec::with_capacity(nv * nt);
    for v in 0..nv {
        for t in 0..nt {
            let g = mask.get(v, t);
            frames.push(if g { given.frame(v, t) } else { noisy.frame(v, t) });
            flags.push(g);
        }
    }
    let patches = model.embed_inputs(&frames, &flags);
    let x0 = TokenGrid {
        v: nv,
        t: nt,
        p: cfg.patches(),
        d: cfg.dim,
        data: model.embed_tokens(&patches, nv * nt),
    };
    let cond_v = model.condition(sigma, ContextMode::FreezeTime);
    let cond_t = model.condition(sigma, ContextMode::Dynamic);
    let view_mods: Vec<Vec<T>> = syncs
        .layers
        .iter()
        .enumerate()
        .map(|(l, s)| match s {
            SyncLayer::Sequential { view_ada } => view_ada.forward(&cond_v.cond_act, 1),
            _ => cond_v.block_mods[l].clone(),
        })
        .collect();
    let feats = sigma_features(sigma, cfg.freq_dim);

    let mut x_v = x0.clone();
    let mut x_t = x0;
    let mut layers = Vec::new();
    for (l, sync) in syncs.layers.iter().enumerate() {
        if let Some(tr) = trace.as_deref_mut() {
            tr.stream_cosine.push(cosine(&x_v.data, &x_t.data));
        }
        if let SyncLayer::Sequential { .. } = sync {
            let (y, col) = axis_forward(model, l, &x_v, Axis::Column, &view_mods[l], keep);
            let (x_next, row) = axis_forward(model, l, &y, Axis::Row, &cond_t.block_mods[l], keep);
            if keep {
                layers.push(LayerCache {
                    col,
                    row,
                    y_v: y.clone(),
                    y_t: y,
                    sync: SyncCache::None,
                });
            }
            x_v = x_next.clone();
            x_t = x_next;
            continue;
        }
        let (y_v, col) = axis_forward(model, l, &x_v, Axis::Column, &view_mods[l], keep);
        let (y_t, row) = axis_forward(model, l, &x_t, Axis::Row, &cond_t.block_mods[l], keep);
        let (nx_v, nx_t, sc) = match sync {
            SyncLayer::Hard(h) => {
                let (x, c) = hard_forward(h, &feats, &y_v.data, &y_t.data);
                (x.clone(), x, c)
            }
            SyncLayer::Soft(s) => soft_forward(s, &feats, &y_v.data, &y_t.data),
            SyncLayer::FreeHard => {
                let x = free_hard_raw(&y_v.data, &y_t.data);
                (x.clone(), x, SyncCache::None)
            }
            SyncLayer::FreeSoft { w } => {
                let (a, b) = free_soft_raw(&y_v.data, &y_t.data, *w);
                (a, b, SyncCache::None)
            }
            SyncLayer::Sequential { .. } => unreachable!(),
        };
        if let Some(tr) = trace.as_deref_mut() {
            tr.rel_update_v.push(rel_update(&nx_v, &y_v.data));
            tr.rel_update_t.push(rel_update(&nx_t, &y_t.data));
        }
        x_v.data = nx_v;
        x_t.data = nx_t;
        if keep {
            layers.push(LayerCache {
                col,
                row,
                y_v,
                y_t,
                sync: sc,
            });
        }
    }
    if let Some(tr) = trace.as_deref_mut() {
        tr.stream_cosine.push(cosine(&x_v.data, &x_t.data));
    }

    let mut head_v = HeadCache::default();
    let mut head_t = HeadCache::default();
    let out_v = model.head_forward(&x_v.data, &cond_v.head_mod, keep.then_some(&mut head_v));
    let out_t = model.head_forward(&x_t.data, &cond_t.head_mod, keep.then_some(&mut head_t));
    let half = T::c(0.5);
    let out: Vec<T> = out_v.iter().zip(&out_t).map(|(&a, &b)| half * (a + b)).collect();
    let output = FourDOutput {
        velocity: tokens_to_grid(model, &out, nv, nt),
        view_velocity: tokens_to_grid(model, &out_v, nv, nt),
        temporal_velocity: tokens_to_grid(model, &out_t, nv, nt),
    };
    let cache = keep.then(|| FourDCache {
        v: nv,
        t: nt,
        sigma,
        patches,
        cond_v,
        cond_t,
        view_mods,
        layers,
        head_v,
        head_t,
    });
    Ok((output, cache))
}

/// Velocity prediction for a whole grid. Given frames are injected clean and
/// flagged; both streams start from the same tokens.
pub fn four_d_forward<T: Real>(
    model: &VideoModel<T>,
    syncs: &SyncStack<T>,
    noisy: &FrameGrid<T>,
    given: &FrameGrid<T>,
    mask: &GridMask,
    sigma: T,
) -> Result<FourDOutput<T>> {
    Ok(forward_impl(model, syncs, noisy, given, mask, sigma, false, None)?.0)
}

/// [`four_d_forward`] plus per-layer synchronization statistics. Not defined
/// for the single-stream sequential baseline.
pub fn four_d_forward_traced<T: Real>(
    model: &VideoModel<T>,
    syncs: &SyncStack<T>,
    noisy: &FrameGrid<T>,
    given: &FrameGrid<T>,
    mask: &GridMask,
    sigma: T,
) -> Result<(FourDOutput<T>, SyncTrace)> {
    if syncs.variant == SyncVariant::Sequential {
        return Err(Error::Invalid("the sequential baseline has no stream pair to trace".into()));
    }
    let mut tr = SyncTrace::default();
    let out = forward_impl(model, syncs, noisy, given, mask, sigma, false, Some(&mut tr))?.0;
    Ok((out, tr))
}

pub fn four_d_forward_cached<T: Real>(
    model: &VideoModel<T>,
    syncs: &SyncStack<T>,
    noisy: &FrameGrid<T>,
    given: &FrameGrid<T>,
    mask: &GridMask,
    sigma: T,
) -> Result<(FourDOutput<T>, FourDCache<T>)> {
    let (out, cache) = forward_impl(model, syncs, noisy, given, mask, sigma, true, None)?;
    Ok((out, cache.expect("cache requested")))
}

/// Gradient destinations for [`four_d_backward`]. `None` skips that parameter set.
pub struct FourDGrads<'a, T> {
    pub syncs: Option<&'a mut SyncStack<T>>,
    pub base: Option<&'a mut VideoModel<T>>,
}

fn hard_backward<T: Real>(
    h: &HardSync<T>,
    cache: &SyncCache<T>,
    feats: &[T],
    y_v: &[T],
    y_t: &[T],
    dx: &[T],
    grad: Option<&mut HardSync<T>>,
) -> (Vec<T>, Vec<T>) {
    let SyncCache::Hard { m_v, m_t, yh_v, yh_t } = cache else {
        unreachable!("hard sync cache")
    };
    let d = h.dim();
    let n = dx.len() / d;
    let mut dyh_v = vec![T::zero(); n * d];
    let mut dyh_t = vec![T::zero(); n * d];
    gemm(T::one(), MatRef::new(dx, n, d, d), MatRef::new(&h.w_v, d, d, d).t(), T::zero(), &mut dyh_v, d);
    gemm(T::one(), MatRef::new(dx, n, d, d), MatRef::new(&h.w_t, d, d, d).t(), T::zero(), &mut dyh_t, d);
    let mut dm_v = vec![T::zero(); 2 * d];
    let mut dm_t = vec![T::zero(); 2 * d];
    let dy_v = SigmaModulation::apply_backward(m_v, y_v, &dyh_v, &mut dm_v);
    let dy_t = SigmaModulation::apply_backward(m_t, y_t, &dyh_t, &mut dm_t);
    if let Some(g) = grad {
        gemm(T::one(), MatRef::new(yh_v, n, d, d).t(), MatRef::new(dx, n, d, d), T::one(), &mut g.w_v, d);
        gemm(T::one(), MatRef::new(yh_t, n, d, d).t(), MatRef::new(dx, n, d, d), T::one(), &mut g.w_t, d);
        if h.diagonal {
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        g.w_v[i * d + j] = T::zero();
                        g.w_t[i * d + j] = T::zero();
                    }
                }
            }
        }
        h.mod_v.map.backward(feats, 1, &dm_v, None, Some(&mut g.mod_v.map));
        h.mod_t.map.backward(feats, 1, &dm_t, None, Some(&mut g.mod_t.map));
    }
    (dy_v, dy_t)
}

#[allow(clippy::too_many_arguments)]
fn soft_backward<T: Real>(
    s: &SoftSync<T>,
    cache: &SyncCache<T>,
    feats: &[T],
    y_v: &[T],
    y_t: &[T],
    dx_v: &[T],
    dx_t: &[T],
    grad: Option<&mut SoftSync<T>>,
) -> (Vec<T>, Vec<T>) {
    let SyncCache::Soft { m, zh } = cache else {
        unreachable!("soft sync cache")
    };
    let d = s.dim();
    let n = dx_v.len() / d;
    let d_out = interleave(dx_v, dx_t, d);
    let mut dzh = vec![T::zero(); n * 2 * d];
    let mut grad = grad;
    s.out.backward(zh, n, &d_out, Some(&mut dzh), grad.as_deref_mut().map(|g| &mut g.out));
    let z = interleave(y_v, y_t, d);
    let mut dm = vec![T::zero(); 4 * d];
    let dz = SigmaModulation::apply_backward(m, &z, &dzh, &mut dm);
    if let Some(g) = grad {
        s.modulation.map.backward(feats, 1, &dm, None, Some(&mut g.modulation.map));
    }
    let (mut dy_v, mut dy_t) = (dx_v.to_vec(), dx_t.to_vec());
    for i in 0..n {
        for j in 0..d {
            dy_v[i * d + j] += dz[i * 2 * d + j];
            dy_t[i * d + j] += dz[i * 2 * d + d + j];
        }
    }
    (dy_v, dy_t)
}

/// Backward of [`four_d_forward_cached`] given the gradient of the combined velocity.
pub fn four_d_backward<T: Real>(
    model: &VideoModel<T>,
    syncs: &SyncStack<T>,
    cache: &FourDCache<T>,
    d_vel: &FrameGrid<T>,
    grads: FourDGrads<'_, T>,
) {
    let FourDGrads {
        syncs: mut sync_grads,
        mut base,
    } = grads;
    let cfg = model.cfg;
    let d = cfg.dim;
    let (nv, nt) = (cache.v, cache.t);
    let want_base = base.is_some();
    let feats = sigma_features(cache.sigma, cfg.freq_dim);
    let half = T::c(0.5);
    let dv = Video {
        frame: cfg.frame,
        len: nv * nt,
        data: d_vel.data.iter().map(|&g| g * half).collect(),
    };
    let d_out = model.video_to_patches(&dv);
    let mut d_head_v = vec![T::zero(); 2 * d];
    let mut d_head_t = vec![T::zero(); 2 * d];
    let mk = |data: Vec<T>| TokenGrid {
        v: nv,
        t: nt,
        p: cfg.patches(),
        d,
        data,
    };
    let mut dx_v = mk(model.head_backward(&cache.head_v, &cache.cond_v.head_mod, &d_out, &mut d_head_v, base.as_deref_mut()));
    let mut dx_t = mk(model.head_backward(&cache.head_t, &cache.cond_t.head_mod, &d_out, &mut d_head_t, base.as_deref_mut()));

    let mut d_mods_v = vec![vec![T::zero(); 6 * d]; cfg.layers];
    let mut d_mods_t = vec![vec![T::zero(); 6 * d]; cfg.layers];
    let mut d_cond_act_v = vec![T::zero(); d];
    let mut d_fpos = vec![T::zero(); cfg.max_frames * d];
    let mut block_grads: Vec<Option<DiTBlock<T>>> = vec![None; cfg.layers];
    let sequential = syncs.variant == SyncVariant::Sequential;
    if sequential {
        add_into(&mut dx_v.data, &dx_t.data);
    }

    for l in (0..cfg.layers).rev() {
        let lc = &cache.layers[l];
        let sg = sync_grads.as_deref_mut().map(|s| &mut s.layers[l]);
        let (dy_v, dy_t) = match &syncs.layers[l] {
            SyncLayer::Sequential { view_ada } => {
                // x_{l+1} = y + row(y), y = x + col(x).
                let gr = axis_backward(model, l, &lc.row, &dx_v, Axis::Row, &cache.cond_t.block_mods[l], want_base, want_base, want_base);
                let mut dy = dx_v.clone();
                add_into(&mut dy.data, &gr.dx.data);
                let want_view = want_base || sg.is_some();
                let gc = axis_backward(model, l, &lc.col, &dy, Axis::Column, &cache.view_mods[l], want_base, want_view, want_base);
                let mut dx = dy;
                add_into(&mut dx.data, &gc.dx.data);
                if let Some(dm) = &gc.mods {
                    let mut tmp = vec![T::zero(); d];
                    let ga = match sg {
                        Some(SyncLayer::Sequential { view_ada: g }) => Some(g),
                        _ => None,
                    };
                    view_ada.backward(&cache.cond_v.cond_act, 1, dm, Some(&mut tmp), ga);
                    add_into(&mut d_cond_act_v, &tmp);
                }
                collect_block(&mut block_grads[l], gr.params);
                collect_block(&mut block_grads[l], gc.params);
                if let Some(m) = gr.mods {
                    add_into(&mut d_mods_t[l], &m);
                }
                if let Some(f) = gr.fpos {
                    add_into(&mut d_fpos[..nt * d], &f);
                }
                if let Some(f) = gc.fpos {
                    add_into(&mut d_fpos[..nv * d], &f);
                }
                dx_v = dx;
                continue;
            }
            SyncLayer::Hard(h) => {
                let mut dx = dx_v.data.clone();
                add_into(&mut dx, &dx_t.data);
                let g = match sg {
                    Some(SyncLayer::Hard(g)) => Some(g),
                    _ => None,
                };
                hard_backward(h, &lc.sync, &feats, &lc.y_v.data, &lc.y_t.data, &dx, g)
            }
            SyncLayer::Soft(s) => {
                let g = match sg {
                    Some(SyncLayer::Soft(g)) => Some(g),
                    _ => None,
                };
                soft_backward(s, &lc.sync, &feats, &lc.y_v.data, &lc.y_t.data, &dx_v.data, &dx_t.data, g)
            }
            SyncLayer::FreeHard => {
                let dy: Vec<T> = dx_v.data.iter().zip(&dx_t.data).map(|(&a, &b)| half * (a + b)).collect();
                (dy.clone(), dy)
            }
            SyncLayer::FreeSoft { w } => {
                let (a, b) = free_soft_raw(&dx_v.data, &dx_t.data, *w);
                (a, b)
            }
        };
        let (dy_v, dy_t) = (mk(dy_v), mk(dy_t));
        let gc = axis_backward(model, l, &lc.col, &dy_v, Axis::Column, &cache.view_mods[l], want_base, want_base, want_base);
        let gr = axis_backward(model, l, &lc.row, &dy_t, Axis::Row, &cache.cond_t.block_mods[l], want_base, want_base, want_base);
        dx_v = dy_v;
        add_into(&mut dx_v.data, &gc.dx.data);
        dx_t = dy_t;
        add_into(&mut dx_t.data, &gr.dx.data);
        collect_block(&mut block_grads[l], gc.params);
        collect_block(&mut block_grads[l], gr.params);
        if let Some(m) = gc.mods {
            add_into(&mut d_mods_v[l], &m);
        }
        if let Some(m) = gr.mods {
            add_into(&mut d_mods_t[l], &m);
        }
        if let Some(f) = gc.fpos {
            add_into(&mut d_fpos[..nv * d], &f);
        }
        if let Some(f) = gr.fpos {
            add_into(&mut d_fpos[..nt * d], &f);
        }
    }

    if let Some(g) = base {
        for (l, bg) in block_grads.into_iter().enumerate() {
            if let Some(bg) = bg {
                accumulate(&mut g.blocks[l], &bg);
            }
        }
        add_into(&mut g.frame_pos, &d_fpos);
        let mut d_tok = dx_v.data;
        if !sequential {
            add_into(&mut d_tok, &dx_t.data);
        }
        model.embed_tokens_backward(&cache.patches, nv * nt, &d_tok, g);
        model.condition_backward(&cache.cond_v, &d_mods_v, &d_head_v, Some(&d_cond_act_v), g);
        model.condition_backward(&cache.cond_t, &d_mods_t, &d_head_t, None, g);
    }
}

fn collect_block<T: Real>(acc: &mut Option<DiTBlock<T>>, g: Option<DiTBlock<T>>) {
    if let Some(g) = g {
        match acc {
            Some(a) => accumulate(a, &g),
            None => *acc = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::perturb_params;
    use crate::dit::tests::tiny_config;
    use crate::grid::FrameShape;
    use crate::rng::normal_vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_grid(vals: &[f64]) -> TokenGrid<f64> {
        TokenGrid {
            v: 1,
            t: vals.len(),
            p: 1,
            d: 1,
            data: vals.to_vec(),
        }
    }

    fn random_tokens(rng: &mut ChaCha8Rng, v: usize, t: usize, p: usize, d: usize) -> TokenGrid<f64> {
        TokenGrid {
            v,
            t,
            p,
            d,
            data: normal_vec(rng, v * t * p * d),
        }
    }

    fn random_model(seed: u64) -> VideoModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = VideoModel::<f64>::new(tiny_config(), &mut rng).unwrap();
        perturb_params(&mut m, &mut rng, 0.2);
        m
    }

    fn random_grid(rng: &mut ChaCha8Rng, v: usize, t: usize, f: FrameShape) -> FrameGrid<f64> {
        FrameGrid {
            v,
            t,
            frame: f,
            data: normal_vec(rng, v * t * f.len()),
        }
    }

    #[test]
    fn hard_sync_init_averages() {
        let h = HardSync::<f64>::new(1, 4, false);
        let x = hard_sync(&scalar_grid(&[2.0]), &scalar_grid(&[4.0]), &h, 0.3).unwrap();
        assert_eq!(x.data, vec![3.0]);
        let u = scalar_grid(&[1.5, -7.0]);
        assert_eq!(hard_sync(&u, &u, &h, 0.9).unwrap().data, u.data);
    }

    #[test]
    fn hard_sync_weighted_scalar() {
        let mut h = HardSync::<f64>::new(1, 4, false);
        h.w_v = vec![0.25];
        h.w_t = vec![0.75];
        let x = hard_sync(&scalar_grid(&[4.0]), &scalar_grid(&[0.0]), &h, 0.5).unwrap();
        assert_eq!(x.data, vec![1.0]);
    }

    #[test]
    fn free_hard_and_soft_endpoints() {
        let a = scalar_grid(&[2.0, 1.0]);
        let b = scalar_grid(&[4.0, 1.0]);
        assert_eq!(free_hard_sync(&a, &b).unwrap().data, vec![3.0, 1.0]);
        assert_eq!(free_hard_sync(&b, &a).unwrap(), free_hard_sync(&a, &b).unwrap());
        assert_eq!(free_soft_weight(0, 8), 0.1);
        assert_eq!(free_soft_weight(8, 8), 0.5);
        assert!((free_soft_weight(4, 8) - 0.3).abs() < 1e-15);
        let (x, y) = free_soft_sync(&a, &b, 8, 8).unwrap();
        assert_eq!(x.data, free_hard_sync(&a, &b).unwrap().data);
        assert_eq!(y.data, x.data);
        let (p, q) = free_soft_sync(&a, &b, 3, 8).unwrap();
        let (q2, p2) = free_soft_sync(&b, &a, 3, 8).unwrap();
        assert_eq!((p, q), (p2, q2));
        assert!(free_soft_sync(&a, &b, 9, 8).is_err());
    }

    #[test]
    fn soft_sync_zero_init_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tokens(&mut rng, 2, 3, 2, 4);
        let b = random_tokens(&mut rng, 2, 3, 2, 4);
        let s = SoftSync::<f64>::new(4, 6);
        let (x, y) = soft_sync(&a, &b, &s, 0.4).unwrap();
        assert_eq!((x, y), (a, b));
    }

    #[test]
    fn sync_rejects_shape_mismatch() {
        let a = scalar_grid(&[1.0]);
        let b = scalar_grid(&[1.0, 2.0]);
        assert!(free_hard_sync(&a, &b).is_err());
        assert!(hard_sync(&a, &b, &HardSync::new(1, 2, false), 0.1).is_err());
        assert!(soft_sync(&a, &a, &SoftSync::new(2, 2), 0.1).is_err());
    }

    #[test]
    fn parallel_layer_with_zero_gates_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = VideoModel::<f64>::new(tiny_config(), &mut rng).unwrap();
        let x = random_tokens(&mut rng, 2, 3, 4, 8);
        let st = TwoStreamState {
            x_v: x.clone(),
            x_t: x.clone(),
            sigma: 0.5,
            layer: 1,
        };
        let (a, b) = parallel_layer(&m, &st).unwrap();
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn parallel_layer_matches_single_video_updates() {
        let m = random_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (v, t) in [(2, 2), (1, 3)] {
            let x = random_tokens(&mut rng, v, t, 4, 8);
            let st = TwoStreamState {
                x_v: x.clone(),
                x_t: x.clone(),
                sigma: 0.3,
                layer: 0,
            };
            let (y_v, y_t) = parallel_layer(&m, &st).unwrap();
            for c in 0..t {
                let col = x.gather_column(c);
                let d = m.block_update(0, &col, v, 0.3, ContextMode::FreezeTime).unwrap();
                let want: Vec<f64> = col.iter().zip(&d).map(|(a, b)| a + b).collect();
                assert_eq!(y_v.gather_column(c), want);
            }
            for r in 0..v {
                let row = x.gather_row(r);
                let d = m.block_update(0, &row, t, 0.3, ContextMode::Dynamic).unwrap();
                let want: Vec<f64> = row.iter().zip(&d).map(|(a, b)| a + b).collect();
                assert_eq!(y_t.gather_row(r), want);
            }
        }
    }

    #[test]
    fn sequential_layer_composes_parallel_halves() {
        let m = random_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tokens(&mut rng, 2, 3, 4, 8);
        let got = sequential_layer(&m, 1, &x, 0.6, None).unwrap();
        let st = TwoStreamState {
            x_v: x.clone(),
            x_t: x.clone(),
            sigma: 0.6,
            layer: 1,
        };
        let (y, _) = parallel_layer(&m, &st).unwrap();
        let st2 = TwoStreamState {
            x_v: y.clone(),
            x_t: y,
            sigma: 0.6,
            layer: 1,
        };
        let (_, want) = parallel_layer(&m, &st2).unwrap();
        assert_eq!(got, want);

        // 1x1 grid: two single-frame block applications.
        let x1 = random_tokens(&mut rng, 1, 1, 4, 8);
        let got = sequential_layer(&m, 0, &x1, 0.2, None).unwrap();
        let d1 = m.block_update(0, &x1.data, 1, 0.2, ContextMode::FreezeTime).unwrap();
        let y: Vec<f64> = x1.data.iter().zip(&d1).map(|(a, b)| a + b).collect();
        let d2 = m.block_update(0, &y, 1, 0.2, ContextMode::Dynamic).unwrap();
        let want: Vec<f64> = y.iter().zip(&d2).map(|(a, b)| a + b).collect();
        assert_eq!(got.data, want);

        let fresh = VideoModel::<f64>::new(tiny_config(), &mut rng).unwrap();
        assert_eq!(sequential_layer(&fresh, 0, &x, 0.2, None).unwrap(), x);
    }

    #[test]
    fn zero_gate_model_outputs_head_of_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = VideoModel::<f64>::new(tiny_config(), &mut rng).unwrap();
        let mut head = m.head_out.clone();
        perturb_params(&mut head, &mut rng, 0.3);
        m.head_out = head;
        let mut ha = m.head_ada.clone();
        perturb_params(&mut ha, &mut rng, 0.3);
        m.head_ada = ha;
        let f = m.cfg.frame;
        let noisy = random_grid(&mut rng, 2, 3, f);
        let mask = GridMask::none(2, 3);
        for variant in SyncVariant::ALL {
            let s = SyncStack::new(variant, &m, false);
            let out = four_d_forward(&m, &s, &noisy, &noisy, &mask, 0.5).unwrap();
            let frames: Vec<&[f64]> = (0..6).map(|i| &noisy.data[i * f.len()..(i + 1) * f.len()]).collect();
            let x0 = m.embed_tokens(&m.embed_inputs(&frames, &[false; 6]), 6);
            let hv = m.head_forward(&x0, &m.condition(0.5, ContextMode::FreezeTime).head_mod, None);
            let ht = m.head_forward(&x0, &m.condition(0.5, ContextMode::Dynamic).head_mod, None);
            let want: Vec<f64> = hv.iter().zip(&ht).map(|(a, b)| 0.5 * (a + b)).collect();
            let want = tokens_to_grid(&m, &want, 2, 3);
            for (a, b) in out.velocity.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12, "{variant:?}");
            }
        }
    }

    #[test]
    fn hard_variants_keep_streams_equal() {
        let m = random_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noisy = random_grid(&mut rng, 2, 2, m.cfg.frame);
        let mask = GridMask::first_row_and_column(2, 2);
        for variant in [SyncVariant::Hard, SyncVariant::FreeHard] {
            let mut s = SyncStack::new(variant, &m, false);
            perturb_params(&mut s, &mut rng, 0.1);
            let (_, tr) = four_d_forward_traced(&m, &s, &noisy, &noisy, &mask, 0.4).unwrap();
            assert!(tr.stream_cosine.iter().all(|&c| c == 1.0), "{variant:?}");
        }
        let s = SyncStack::new(SyncVariant::Soft, &m, false);
        let (_, tr) = four_d_forward_traced(&m, &s, &noisy, &noisy, &mask, 0.4).unwrap();
        assert_eq!(tr.stream_cosine[0], 1.0);
        assert!(tr.rel_update_v.iter().chain(&tr.rel_update_t).all(|&r| r == 0.0));
        let seq = SyncStack::new(SyncVariant::Sequential, &m, false);
        assert!(four_d_forward_traced(&m, &seq, &noisy, &noisy, &mask, 0.4).is_err());
    }

    #[test]
    fn free_hard_equals_hard_at_init() {
        let m = random_model(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noisy = random_grid(&mut rng, 2, 3, m.cfg.frame);
        let mask = GridMask::none(2, 3);
        let a = four_d_forward(&m, &SyncStack::new(SyncVariant::Hard, &m, false), &noisy, &noisy, &mask, 0.7).unwrap();
        let b = four_d_forward(&m, &SyncStack::new(SyncVariant::FreeHard, &m, false), &noisy, &noisy, &mask, 0.7).unwrap();
        for (x, y) in a.velocity.data.iter().zip(&b.velocity.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_sync_stack_is_rejected() {
        let m = random_model(12);
        let mut s = SyncStack::new(SyncVariant::Soft, &m, false);
        s.layers.pop();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = random_grid(&mut rng, 2, 2, m.cfg.frame);
        let mask = GridMask::none(2, 2);
        assert!(matches!(four_d_forward(&m, &s, &g, &g, &mask, 0.5), Err(Error::Invalid(_))));
        let mut s2 = SyncStack::new(SyncVariant::Soft, &m, false);
        s2.layers[0] = SyncLayer::FreeHard;
        assert!(four_d_forward(&m, &s2, &g, &g, &mask, 0.5).is_err());
    }

    fn fd_check(variant: SyncVariant, seed: u64) {
        let m = random_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut s = SyncStack::new(variant, &m, false);
        perturb_params(&mut s, &mut rng, 0.2);
        let f = m.cfg.frame;
        let noisy = random_grid(&mut rng, 2, 2, f);
        let given = random_grid(&mut rng, 2, 2, f);
        let w = random_grid(&mut rng, 2, 2, f);
        let mask = GridMask::first_row_and_column(2, 2);
        let loss = |mm: &VideoModel<f64>, ss: &SyncStack<f64>| -> f64 {
            let o = four_d_forward(mm, ss, &noisy, &given, &mask, 0.45).unwrap();
            o.velocity.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
        };
        let (_, c) = four_d_forward_cached(&m, &s, &noisy, &given, &mask, 0.45).unwrap();
        let mut gm = VideoModel::new_zeroed(m.cfg);
        let mut gs = zeros_like(&s);
        four_d_backward(
            &m,
            &s,
            &c,
            &w,
            FourDGrads {
                syncs: Some(&mut gs),
                base: Some(&mut gm),
            },
        );
        let h = 1e-6;
        let mut worst = 0.0f64;
        let sf = s.flatten();
        let sg = gs.flatten();
        for i in 0..sf.len() {
            let mut p = sf.clone();
            p[i] += h;
            let mut sp = s.clone();
            sp.unflatten(&p);
            p[i] -= 2.0 * h;
            let mut sn = s.clone();
            sn.unflatten(&p);
            let num = (loss(&m, &sp) - loss(&m, &sn)) / (2.0 * h);
            worst = worst.max((num - sg[i]).abs() / (1.0 + num.abs()));
        }
        let mf = m.flatten();
        let mg = gm.flatten();
        // Every 7th base parameter keeps the check fast.
        for i in (0..mf.len()).step_by(7) {
            let mut p = mf.clone();
            p[i] += h;
            let mut mp = m.clone();
            mp.unflatten(&p);
            p[i] -= 2.0 * h;
            let mut mn = m.clone();
            mn.unflatten(&p);
            let num = (loss(&mp, &s) - loss(&mn, &s)) / (2.0 * h);
            worst = worst.max((num - mg[i]).abs() / (1.0 + num.abs()));
        }
        assert!(worst < 1e-6, "{variant:?}: worst error {worst}");
    }

    #[test]
    fn backward_matches_finite_differences_for_every_variant() {
        for (i, v) in SyncVariant::ALL.into_iter().enumerate() {
            fd_check(v, 20 + i as u64);
        }
    }

    #[test]
    fn frozen_base_receives_only_sync_gradients() {
        let m = random_model(30);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let s = SyncStack::new(SyncVariant::Soft, &m, false);
        let g = random_grid(&mut rng, 2, 2, m.cfg.frame);
        let mask = GridMask::first_row_and_column(2, 2);
        let (_, c) = four_d_forward_cached(&m, &s, &g, &g, &mask, 0.5).unwrap();
        let mut gs = zeros_like(&s);
        four_d_backward(
            &m,
            &s,
            &c,
            &g,
            FourDGrads {
                syncs: Some(&mut gs),
                base: None,
            },
        );
        assert!(gs.flatten().iter().any(|&x| x != 0.0));
    }
}
