//! Base video diffusion transformer.
//!
//! Each block produces a residual update over one frame sequence with joint
//! attention across all `F * P` tokens. Blocks are modulated by the
//! diffusion-time embedding plus a per-mode context embedding (adaLN with
//! zero-initialized modulation, so a fresh block's update is exactly zero).
//! The frame-index encoding is added at every block's attention input rather
//! than to the residual stream, which keeps token streams free of any notion
//! of which grid axis they run along.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{extract_patches, place_patches, FrameShape, Video};
use crate::nn::{
    attention, attention_backward, gelu, gelu_grad, join, layer_norm, layer_norm_backward,
    sigma_features, silu, silu_grad, Linear, Params,
};
use crate::real::Real;

/// Generation mode of the base model, each with its own learned context embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContextMode {
    /// Ordinary videos: camera and scene motion over time.
    Dynamic,
    /// Static scenes swept over viewpoints.
    FreezeTime,
}

impl ContextMode {
    pub fn index(self) -> usize {
        match self {
            ContextMode::Dynamic => 0,
            ContextMode::FreezeTime => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ContextMode::Dynamic => "dynamic",
            ContextMode::FreezeTime => "freeze_time",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dynamic" => Some(ContextMode::Dynamic),
            "freeze_time" => Some(ContextMode::FreezeTime),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub frame: FrameShape,
    /// Length of the frame-index encoding table; bounds sequence length.
    pub max_frames: usize,
    pub mlp_ratio: usize,
    pub freq_dim: usize,
}

impl ModelConfig {
    pub fn patches(&self) -> usize {
        (self.frame.h / self.patch) * (self.frame.w / self.patch)
    }

    /// Patch vector width including the appended mask channel.
    pub fn patch_in(&self) -> usize {
        self.patch * self.patch * (self.frame.c + 1)
    }

    pub fn patch_out(&self) -> usize {
        self.patch * self.patch * self.frame.c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.layers == 0 {
            return bad("model needs at least one block".into());
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.freq_dim < 2 || self.freq_dim % 2 != 0 {
            return bad(format!("freq_dim {} must be even and >= 2", self.freq_dim));
        }
        if self.max_frames == 0 || self.mlp_ratio == 0 {
            return bad("max_frames and mlp_ratio must be positive".into());
        }
        self.frame.patches(self.patch)?;
        Ok(())
    }
}

/// One transformer block. `ada` maps the activated conditioning vector to
/// `[shift_a, scale_a, gate_a, shift_m, scale_m, gate_m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiTBlock<T> {
    pub ada: Linear<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Real> Params<T> for DiTBlock<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.ada.for_each_param(&join(prefix, "ada"), f);
        self.qkv.for_each_param(&join(prefix, "qkv"), f);
        self.proj.for_each_param(&join(prefix, "proj"), f);
        self.fc1.for_each_param(&join(prefix, "fc1"), f);
        self.fc2.for_each_param(&join(prefix, "fc2"), f);
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.ada.for_each_param_mut(&join(prefix, "ada"), f);
        self.qkv.for_each_param_mut(&join(prefix, "qkv"), f);
        self.proj.for_each_param_mut(&join(prefix, "proj"), f);
        self.fc1.for_each_param_mut(&join(prefix, "fc1"), f);
        self.fc2.for_each_param_mut(&join(prefix, "fc2"), f);
    }
}

/// Activations kept from a block forward pass.
#[derive(Debug, Clone, Default)]
pub struct BlockCache<T> {
    pub n: usize,
    pub frames: usize,
    n1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    a: Vec<T>,
    n2: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    f1: Vec<T>,
    g1: Vec<T>,
    m: Vec<T>,
}

/// Gradients flowing out of a block backward pass.
pub struct BlockGrads<'a, T> {
    /// Accumulates into `qkv`, `proj`, `fc1`, `fc2`; `ada` is left untouched.
    pub params: Option<&'a mut DiTBlock<T>>,
    /// Accumulates into the 6·D modulation vector.
    pub mods: Option<&'a mut [T]>,
    /// Accumulates into frame-encoding rows `0..frames`.
    pub frame_pos: Option<&'a mut [T]>,
}

impl<T: Real> DiTBlock<T> {
    pub fn new(dim: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        Self {
            ada: Linear::zeros(dim, 6 * dim),
            qkv: Linear::xavier(dim, 3 * dim, rng),
            proj: Linear::xavier(dim, dim, rng),
            fc1: Linear::xavier(dim, mlp_ratio * dim, rng),
            fc2: Linear::xavier(mlp_ratio * dim, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.qkv.inp
    }

    /// Residual update for a sequence of `frames` frames of `x.len() / (frames * D)` tokens each.
    ///
    /// `mods` is this block's modulation vector and `frame_pos` holds at least
    /// `frames` rows of the frame-index encoding.
    pub fn forward(
        &self,
        x: &[T],
        frames: usize,
        heads: usize,
        mods: &[T],
        frame_pos: &[T],
        cache: Option<&mut BlockCache<T>>,
    ) -> Vec<T> {
        let d = self.dim();
        let n = x.len() / d;
        let per_frame = n / frames;
        let hid = self.fc1.out;
        let (shift_a, rest) = mods.split_at(d);
        let (scale_a, rest) = rest.split_at(d);
        let (gate_a, rest) = rest.split_at(d);
        let (shift_m, rest) = rest.split_at(d);
        let (scale_m, gate_m) = rest.split_at(d);

        let mut n1 = vec![T::zero(); n * d];
        let mut rstd1 = vec![T::zero(); n];
        layer_norm(x, d, &mut n1, &mut rstd1);
        let mut h1 = vec![T::zero(); n * d];
        for (i, (hr, nr)) in h1.chunks_exact_mut(d).zip(n1.chunks_exact(d)).enumerate() {
            let fp = &frame_pos[(i / per_frame) * d..(i / per_frame + 1) * d];
            for j in 0..d {
                hr[j] = nr[j] * (T::one() + scale_a[j]) + shift_a[j] + fp[j];
            }
        }
        let qkv = self.qkv.forward(&h1, n);
        let mut attn = vec![T::zero(); n * d];
        let mut probs = vec![T::zero(); heads * n * n];
        attention(&qkv, n, d, heads, &mut attn, &mut probs);
        let a = self.proj.forward(&attn, n);

        let mut x1 = x.to_vec();
        for (xr, ar) in x1.chunks_exact_mut(d).zip(a.chunks_exact(d)) {
            for j in 0..d {
                xr[j] += gate_a[j] * ar[j];
            }
        }
        let mut n2 = vec![T::zero(); n * d];
        let mut rstd2 = vec![T::zero(); n];
        layer_norm(&x1, d, &mut n2, &mut rstd2);
        let mut h2 = n2.clone();
        for hr in h2.chunks_exact_mut(d) {
            for j in 0..d {
                hr[j] = hr[j] * (T::one() + scale_m[j]) + shift_m[j];
            }
        }
        let f1 = self.fc1.forward(&h2, n);
        let g1: Vec<T> = f1.iter().map(|&v| gelu(v)).collect();
        let m = self.fc2.forward(&g1, n);
        debug_assert_eq!(g1.len(), n * hid);

        let mut delta = vec![T::zero(); n * d];
        for ((dr, ar), mr) in delta.chunks_exact_mut(d).zip(a.chunks_exact(d)).zip(m.chunks_exact(d)) {
            for j in 0..d {
                dr[j] = gate_a[j] * ar[j] + gate_m[j] * mr[j];
            }
        }

        if let Some(c) = cache {
            *c = BlockCache {
                n,
                frames,
                n1,
                rstd1,
                h1,
                qkv,
                probs,
                attn,
                a,
                n2,
                rstd2,
                h2,
                f1,
                g1,
                m,
            };
        }
        delta
    }

    /// Backward of [`DiTBlock::forward`] given the gradient of the update.
    /// Returns the gradient with respect to the block input (excluding the
    /// caller's residual identity path).
    pub fn backward(&self, c: &BlockCache<T>, d_delta: &[T], heads: usize, mods: &[T], grads: BlockGrads<'_, T>) -> Vec<T> {
        let d = self.dim();
        let n = c.n;
        let per_frame = n / c.frames;
        let hid = self.fc1.out;
        let gate_a = &mods[2 * d..3 * d];
        let scale_a = &mods[d..2 * d];
        let scale_m = &mods[4 * d..5 * d];
        let gate_m = &mods[5 * d..6 * d];
        let BlockGrads {
            mut params,
            mods: mut d_mods,
            frame_pos: mut d_fpos,
        } = grads;

        // MLP branch.
        let mut dm = vec![T::zero(); n * d];
        for (dmr, ddr) in dm.chunks_exact_mut(d).zip(d_delta.chunks_exact(d)) {
            for j in 0..d {
                dmr[j] = ddr[j] * gate_m[j];
            }
        }
        let mut dg1 = vec![T::zero(); n * hid];
        self.fc2.backward(&c.g1, n, &dm, Some(&mut dg1), params.as_deref_mut().map(|p| &mut p.fc2));
        for (g, &f) in dg1.iter_mut().zip(&c.f1) {
            *g *= gelu_grad(f);
        }
        let mut dh2 = vec![T::zero(); n * d];
        self.fc1.backward(&c.h2, n, &dg1, Some(&mut dh2), params.as_deref_mut().map(|p| &mut p.fc1));
        let mut dn2 = dh2.clone();
        for r in dn2.chunks_exact_mut(d) {
            for j in 0..d {
                r[j] *= T::one() + scale_m[j];
            }
        }
        let mut dx1 = vec![T::zero(); n * d];
        layer_norm_backward(&c.n2, &c.rstd2, &dn2, d, &mut dx1);

        // Attention branch: a feeds both the update and x1.
        let mut da = vec![T::zero(); n * d];
        for ((dar, ddr), d1r) in da.chunks_exact_mut(d).zip(d_delta.chunks_exact(d)).zip(dx1.chunks_exact(d)) {
            for j in 0..d {
                dar[j] = (ddr[j] + d1r[j]) * gate_a[j];
            }
        }
        let mut dattn = vec![T::zero(); n * d];
        self.proj.backward(&c.attn, n, &da, Some(&mut dattn), params.as_deref_mut().map(|p| &mut p.proj));
        let mut dqkv = vec![T::zero(); n * 3 * d];
        attention_backward(&c.qkv, &c.probs, &dattn, n, d, heads, &mut dqkv, &mut Vec::new());
        let mut dh1 = vec![T::zero(); n * d];
        self.qkv.backward(&c.h1, n, &dqkv, Some(&mut dh1), params.as_deref_mut().map(|p| &mut p.qkv));

        if let Some(dmod) = d_mods.as_deref_mut() {
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                let (ddr, d1r, ar, mr) = (&d_delta[r.clone()], &dx1[r.clone()], &c.a[r.clone()], &c.m[r.clone()]);
                let (dh1r, n1r, dh2r, n2r) = (&dh1[r.clone()], &c.n1[r.clone()], &dh2[r.clone()], &c.n2[r]);
                for j in 0..d {
                    dmod[j] += dh1r[j];
                    dmod[d + j] += dh1r[j] * n1r[j];
                    dmod[2 * d + j] += (ddr[j] + d1r[j]) * ar[j];
                    dmod[3 * d + j] += dh2r[j];
                    dmod[4 * d + j] += dh2r[j] * n2r[j];
                    dmod[5 * d + j] += ddr[j] * mr[j];
                }
            }
        }
        if let Some(dfp) = d_fpos.as_deref_mut() {
            for (i, r) in dh1.chunks_exact(d).enumerate() {
                let f = i / per_frame;
                for j in 0..d {
                    dfp[f * d + j] += r[j];
                }
            }
        }

        let mut dn1 = dh1;
        for r in dn1.chunks_exact_mut(d) {
            for j in 0..d {
                r[j] *= T::one() + scale_a[j];
            }
        }
        let mut dx = vec![T::zero(); n * d];
        layer_norm_backward(&c.n1, &c.rstd1, &dn1, d, &mut dx);
        for (o, &g) in dx.iter_mut().zip(&dx1) {
            *o += g;
        }
        dx
    }
}

/// Conditioning for one `(sigma, mode)` pair, with the activations needed for backward.
#[derive(Debug, Clone)]
pub struct Conditioning<T> {
    pub mode: ContextMode,
    feats: Vec<T>,
    s1: Vec<T>,
    s1_act: Vec<T>,
    pub cond: Vec<T>,
    /// `silu(cond)`: input of every adaLN modulation map.
    pub cond_act: Vec<T>,
    pub block_mods: Vec<Vec<T>>,
    pub head_mod: Vec<T>,
}

/// Activations of the output head.
#[derive(Debug, Clone, Default)]
pub struct HeadCache<T> {
    n: usize,
    normed: Vec<T>,
    rstd: Vec<T>,
    h: Vec<T>,
}

/// Full forward record of one base-model pass.
#[derive(Debug, Clone)]
pub struct VideoCache<T> {
    pub cond: Conditioning<T>,
    pub frames: usize,
    patches: Vec<T>,
    /// Token state entering each block, plus the final state.
    pub states: Vec<Vec<T>>,
    /// Residual update produced by each block.
    pub deltas: Vec<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
    head: HeadCache<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoModel<T> {
    pub cfg: ModelConfig,
    pub patch_embed: Linear<T>,
    /// `[P][D]`, added once at embedding.
    pub spatial_pos: Vec<T>,
    /// `[max_frames][D]`, added at each block's attention input.
    pub frame_pos: Vec<T>,
    pub sigma_in: Linear<T>,
    pub sigma_out: Linear<T>,
    /// `[2][D]`, indexed by [`ContextMode::index`].
    pub context: Vec<T>,
    pub blocks: Vec<DiTBlock<T>>,
    pub head_ada: Linear<T>,
    pub head_out: Linear<T>,
}

impl<T: Real> Params<T> for VideoModel<T> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        let d = self.cfg.dim;
        self.patch_embed.for_each_param(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "spatial_pos"), &[self.cfg.patches(), d], &self.spatial_pos);
        f(&join(prefix, "frame_pos"), &[self.cfg.max_frames, d], &self.frame_pos);
        self.sigma_in.for_each_param(&join(prefix, "sigma_in"), f);
        self.sigma_out.for_each_param(&join(prefix, "sigma_out"), f);
        f(&join(prefix, "context"), &[2, d], &self.context);
        for (i, b) in self.blocks.iter().enumerate() {
            b.for_each_param(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head_ada.for_each_param(&join(prefix, "head_ada"), f);
        self.head_out.for_each_param(&join(prefix, "head_out"), f);
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let d = self.cfg.dim;
        let (np, mf) = (self.cfg.patches(), self.cfg.max_frames);
        self.patch_embed.for_each_param_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "spatial_pos"), &[np, d], &mut self.spatial_pos);
        f(&join(prefix, "frame_pos"), &[mf, d], &mut self.frame_pos);
        self.sigma_in.for_each_param_mut(&join(prefix, "sigma_in"), f);
        self.sigma_out.for_each_param_mut(&join(prefix, "sigma_out"), f);
        f(&join(prefix, "context"), &[2, d], &mut self.context);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_param_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.head_ada.for_each_param_mut(&join(prefix, "head_ada"), f);
        self.head_out.for_each_param_mut(&join(prefix, "head_out"), f);
    }
}

fn sincos_table(rows: usize, d: usize, offset: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|r| {
            let pos = r as f64 + offset;
            (0..d)
                .map(|j| {
                    let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
                    if j % 2 == 0 {
                        (pos * freq).sin()
                    } else {
                        (pos * freq).cos()
                    }
                })
                .collect()
        })
        .collect()
}

impl<T: Real> VideoModel<T> {
    /// Fresh model: xavier weights, sinusoidal position tables, zero-initialized
    /// modulation maps and output projection.
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let np = cfg.patches();
        let gw = cfg.frame.w / cfg.patch;
        // 2-D encoding: first half of the channels encodes the patch row, second half the column.
        let half = d / 2;
        let rows = sincos_table(cfg.frame.h / cfg.patch, half, 0.0);
        let cols = sincos_table(gw, d - half, 0.0);
        let mut spatial_pos = Vec::with_capacity(np * d);
        for k in 0..np {
            spatial_pos.extend(rows[k / gw].iter().map(|&x| T::c(x)));
            spatial_pos.extend(cols[k % gw].iter().map(|&x| T::c(x)));
        }
        let frame_pos = sincos_table(cfg.max_frames, d, 0.0)
            .into_iter()
            .flatten()
            .map(T::c)
            .collect();
        let context = (0..2 * d).map(|_| T::c(0.25) * crate::rng::normal::<T>(rng)).collect();
        Ok(Self {
            patch_embed: Linear::xavier(cfg.patch_in(), d, rng),
            spatial_pos,
            frame_pos,
            sigma_in: Linear::xavier(cfg.freq_dim, d, rng),
            sigma_out: Linear::xavier(d, d, rng),
            context,
            blocks: (0..cfg.layers).map(|_| DiTBlock::new(d, cfg.mlp_ratio, rng)).collect(),
            head_ada: Linear::zeros(d, 2 * d),
            head_out: Linear::zeros(d, cfg.patch_out()),
            cfg,
        })
    }

    pub fn cast<U: Real>(&self) -> VideoModel<U> {
        let mut out = VideoModel::<U>::new_zeroed(self.cfg);
        let flat: Vec<U> = self.flatten().into_iter().map(|x| U::c(x.f64())).collect();
        out.unflatten(&flat);
        out
    }

    /// All-zero parameters of the right shapes (gradient accumulators).
    pub fn new_zeroed(cfg: ModelConfig) -> Self {
        let d = cfg.dim;
        let block = DiTBlock {
            ada: Linear::zeros(d, 6 * d),
            qkv: Linear::zeros(d, 3 * d),
            proj: Linear::zeros(d, d),
            fc1: Linear::zeros(d, cfg.mlp_ratio * d),
            fc2: Linear::zeros(cfg.mlp_ratio * d, d),
        };
        Self {
            patch_embed: Linear::zeros(cfg.patch_in(), d),
            spatial_pos: vec![T::zero(); cfg.patches() * d],
            frame_pos: vec![T::zero(); cfg.max_frames * d],
            sigma_in: Linear::zeros(cfg.freq_dim, d),
            sigma_out: Linear::zeros(d, d),
            context: vec![T::zero(); 2 * d],
            blocks: vec![block; cfg.layers],
            head_ada: Linear::zeros(d, 2 * d),
            head_out: Linear::zeros(d, cfg.patch_out()),
            cfg,
        }
    }

    pub fn frame_pos_rows(&self, frames: usize) -> &[T] {
        &self.frame_pos[..frames * self.cfg.dim]
    }

    /// Conditioning vector and every modulation vector for `(sigma, mode)`.
    pub fn condition(&self, sigma: T, mode: ContextMode) -> Conditioning<T> {
        let d = self.cfg.dim;
        let feats = sigma_features(sigma, self.cfg.freq_dim);
        let s1 = self.sigma_in.forward(&feats, 1);
        let s1_act: Vec<T> = s1.iter().map(|&x| silu(x)).collect();
        let mut cond = self.sigma_out.forward(&s1_act, 1);
        let ctx = &self.context[mode.index() * d..(mode.index() + 1) * d];
        for (c, &e) in cond.iter_mut().zip(ctx) {
            *c += e;
        }
        let cond_act: Vec<T> = cond.iter().map(|&x| silu(x)).collect();
        let block_mods = self.blocks.iter().map(|b| b.ada.forward(&cond_act, 1)).collect();
        let head_mod = self.head_ada.forward(&cond_act, 1);
        Conditioning {
            mode,
            feats,
            s1,
            s1_act,
            cond,
            cond_act,
            block_mods,
            head_mod,
        }
    }

    /// Backward of [`VideoModel::condition`]. `d_cond_act_extra` carries gradient
    /// reaching `cond_act` through modulation maps owned elsewhere.
    pub fn condition_backward(
        &self,
        c: &Conditioning<T>,
        d_block_mods: &[Vec<T>],
        d_head_mod: &[T],
        d_cond_act_extra: Option<&[T]>,
        grads: &mut VideoModel<T>,
    ) {
        let d = self.cfg.dim;
        let mut d_act = vec![T::zero(); d];
        if let Some(e) = d_cond_act_extra {
            d_act.copy_from_slice(e);
        }
        let mut tmp = vec![T::zero(); d];
        for ((b, g), dm) in self.blocks.iter().zip(grads.blocks.iter_mut()).zip(d_block_mods) {
            b.ada.backward(&c.cond_act, 1, dm, Some(&mut tmp), Some(&mut g.ada));
            for (a, &t) in d_act.iter_mut().zip(&tmp) {
                *a += t;
            }
        }
        self.head_ada.backward(&c.cond_act, 1, d_head_mod, Some(&mut tmp), Some(&mut grads.head_ada));
        for (a, &t) in d_act.iter_mut().zip(&tmp) {
            *a += t;
        }
        let d_cond: Vec<T> = d_act.iter().zip(&c.cond).map(|(&g, &x)| g * silu_grad(x)).collect();
        let m = c.mode.index();
        for (g, &dc) in grads.context[m * d..(m + 1) * d].iter_mut().zip(&d_cond) {
            *g += dc;
        }
        let mut d_s1 = vec![T::zero(); d];
        self.sigma_out.backward(&c.s1_act, 1, &d_cond, Some(&mut d_s1), Some(&mut grads.sigma_out));
        for (g, &x) in d_s1.iter_mut().zip(&c.s1) {
            *g *= silu_grad(x);
        }
        self.sigma_in.backward(&c.feats, 1, &d_s1, None, Some(&mut grads.sigma_in));
    }

    /// Mask-injected, mask-channel-augmented patch vectors for `frames` frames.
    pub fn embed_inputs(&self, frames: &[&[T]], given: &[bool]) -> Vec<T> {
        let cfg = &self.cfg;
        let np = cfg.patches();
        let pin = cfg.patch_in();
        let aug = FrameShape::new(cfg.frame.h, cfg.frame.w, cfg.frame.c + 1);
        let mut out = vec![T::zero(); frames.len() * np * pin];
        let mut buf = vec![T::zero(); aug.len()];
        for (f, (src, &g)) in frames.iter().zip(given).enumerate() {
            let mval = if g { T::one() } else { T::zero() };
            for (px, dst) in src.chunks_exact(cfg.frame.c).zip(buf.chunks_exact_mut(cfg.frame.c + 1)) {
                dst[..cfg.frame.c].copy_from_slice(px);
                dst[cfg.frame.c] = mval;
            }
            extract_patches(&buf, aug, cfg.patch, &mut out[f * np * pin..(f + 1) * np * pin]);
        }
        out
    }

    /// Token embedding of `frames` frames of patch vectors.
    pub fn embed_tokens(&self, patches: &[T], frames: usize) -> Vec<T> {
        let d = self.cfg.dim;
        let np = self.cfg.patches();
        let mut x = self.patch_embed.forward(patches, frames * np);
        for (i, r) in x.chunks_exact_mut(d).enumerate() {
            let k = i % np;
            for (v, &p) in r.iter_mut().zip(&self.spatial_pos[k * d..(k + 1) * d]) {
                *v += p;
            }
        }
        x
    }

    pub fn embed_tokens_backward(&self, patches: &[T], frames: usize, dx: &[T], grads: &mut VideoModel<T>) {
        let d = self.cfg.dim;
        let np = self.cfg.patches();
        for (i, r) in dx.chunks_exact(d).enumerate() {
            let k = i % np;
            for (g, &v) in grads.spatial_pos[k * d..(k + 1) * d].iter_mut().zip(r) {
                *g += v;
            }
        }
        self.patch_embed.backward(patches, frames * np, dx, None, Some(&mut grads.patch_embed));
    }

    /// Output head on `n` tokens; returns `[n][p*p*C]` patch velocities.
    pub fn head_forward(&self, x: &[T], head_mod: &[T], cache: Option<&mut HeadCache<T>>) -> Vec<T> {
        let d = self.cfg.dim;
        let n = x.len() / d;
        let (shift, scale) = head_mod.split_at(d);
        let mut normed = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        layer_norm(x, d, &mut normed, &mut rstd);
        let mut h = normed.clone();
        for r in h.chunks_exact_mut(d) {
            for j in 0..d {
                r[j] = r[j] * (T::one() + scale[j]) + shift[j];
            }
        }
        let out = self.head_out.forward(&h, n);
        if let Some(c) = cache {
            *c = HeadCache { n, normed, rstd, h };
        }
        out
    }

    /// Backward of the head. Returns the token gradient; accumulates into
    /// `d_head_mod` and, when given, the head projection gradients.
    pub fn head_backward(
        &self,
        c: &HeadCache<T>,
        head_mod: &[T],
        d_out: &[T],
        d_head_mod: &mut [T],
        grads: Option<&mut VideoModel<T>>,
    ) -> Vec<T> {
        let d = self.cfg.dim;
        let n = c.n;
        let scale = &head_mod[d..];
        let mut dh = vec![T::zero(); n * d];
        self.head_out.backward(&c.h, n, d_out, Some(&mut dh), grads.map(|g| &mut g.head_out));
        for (hr, nr) in dh.chunks_exact(d).zip(c.normed.chunks_exact(d)) {
            for j in 0..d {
                d_head_mod[j] += hr[j];
                d_head_mod[d + j] += hr[j] * nr[j];
            }
        }
        for r in dh.chunks_exact_mut(d) {
            for j in 0..d {
                r[j] *= T::one() + scale[j];
            }
        }
        let mut dx = vec![T::zero(); n * d];
        layer_norm_backward(&c.normed, &c.rstd, &dh, d, &mut dx);
        dx
    }

    /// Unpatchify head output for `frames` frames into a video.
    pub fn patches_to_video(&self, out: &[T], frames: usize) -> Video<T> {
        let np = self.cfg.patches();
        let po = self.cfg.patch_out();
        let mut vid = Video::zeros(frames, self.cfg.frame);
        for f in 0..frames {
            place_patches(&out[f * np * po..(f + 1) * np * po], self.cfg.frame, self.cfg.patch, vid.frame_mut(f));
        }
        vid
    }

    /// Inverse of [`VideoModel::patches_to_video`] (used for velocity gradients).
    pub fn video_to_patches(&self, vid: &Video<T>) -> Vec<T> {
        let np = self.cfg.patches();
        let po = self.cfg.patch_out();
        let mut out = vec![T::zero(); vid.len * np * po];
        for f in 0..vid.len {
            extract_patches(vid.frame(f), self.cfg.frame, self.cfg.patch, &mut out[f * np * po..(f + 1) * np * po]);
        }
        out
    }

    /// Residual update of block `l` on a frame sequence of `frames` frames, for `(sigma, mode)`.
    pub fn block_update(&self, l: usize, x: &[T], frames: usize, sigma: T, mode: ContextMode) -> Result<Vec<T>> {
        let d = self.cfg.dim;
        if l >= self.blocks.len() {
            return Err(Error::Index { axis: "layer", index: l, len: self.blocks.len() });
        }
        if frames == 0 || frames > self.cfg.max_frames || x.is_empty() || x.len() % (frames * d) != 0 {
            return Err(Error::Shape(format!(
                "block input of {} values is not [{frames}][P][{d}] with 1 <= frames <= {}",
                x.len(),
                self.cfg.max_frames
            )));
        }
        if !sigma.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("block input or sigma".into()));
        }
        let c = self.condition(sigma, mode);
        Ok(self.blocks[l].forward(x, frames, self.cfg.heads, &c.block_mods[l], self.frame_pos_rows(frames), None))
    }

    fn check_video_inputs(&self, noisy: &Video<T>, clean: &Video<T>, mask: &[bool]) -> Result<()> {
        if noisy.frame != self.cfg.frame || clean.frame != self.cfg.frame {
            return Err(Error::Shape(format!(
                "frames {:?}/{:?} do not match model frame {:?}",
                noisy.frame, clean.frame, self.cfg.frame
            )));
        }
        if noisy.len != clean.len || mask.len() != noisy.len {
            return Err(Error::Shape(format!(
                "noisy has {} frames, clean {}, mask {}",
                noisy.len,
                clean.len,
                mask.len()
            )));
        }
        if noisy.len == 0 || noisy.len > self.cfg.max_frames {
            return Err(Error::Shape(format!(
                "sequence of {} frames outside 1..={}",
                noisy.len, self.cfg.max_frames
            )));
        }
        Ok(())
    }

    /// Velocity prediction for a frame sequence. Given frames are injected clean
    /// and flagged through the mask channel.
    pub fn video_forward(&self, noisy: &Video<T>, clean_given: &Video<T>, mask: &[bool], sigma: T, mode: ContextMode) -> Result<Video<T>> {
        Ok(self.video_forward_cached(noisy, clean_given, mask, sigma, mode)?.0)
    }

    pub fn video_forward_cached(
        &self,
        noisy: &Video<T>,
        clean_given: &Video<T>,
        mask: &[bool],
        sigma: T,
        mode: ContextMode,
    ) -> Result<(Video<T>, VideoCache<T>)> {
        self.check_video_inputs(noisy, clean_given, mask)?;
        let f = noisy.len;
        let heads = self.cfg.heads;
        let frames: Vec<&[T]> = (0..f)
            .map(|i| if mask[i] { clean_given.frame(i) } else { noisy.frame(i) })
            .collect();
        let patches = self.embed_inputs(&frames, mask);
        let cond = self.condition(sigma, mode);
        let mut x = self.embed_tokens(&patches, f);
        let mut states = Vec::with_capacity(self.blocks.len() + 1);
        let mut deltas = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let mut bc = BlockCache::default();
            let delta = b.forward(&x, f, heads, &cond.block_mods[l], self.frame_pos_rows(f), Some(&mut bc));
            states.push(x.clone());
            for (v, &dv) in x.iter_mut().zip(&delta) {
                *v += dv;
            }
            deltas.push(delta);
            caches.push(bc);
        }
        let mut head = HeadCache::default();
        let out = self.head_forward(&x, &cond.head_mod, Some(&mut head));
        states.push(x);
        let vel = self.patches_to_video(&out, f);
        Ok((
            vel,
            VideoCache {
                cond,
                frames: f,
                patches,
                states,
                deltas,
                blocks: caches,
                head,
            },
        ))
    }

    /// Accumulate parameter gradients given the gradient of the velocity output.
    pub fn video_backward(&self, c: &VideoCache<T>, d_vel: &Video<T>, grads: &mut VideoModel<T>) {
        let d = self.cfg.dim;
        let f = c.frames;
        let d_out = self.video_to_patches(d_vel);
        let mut d_head_mod = vec![T::zero(); 2 * d];
        let mut dx = self.head_backward(&c.head, &c.cond.head_mod, &d_out, &mut d_head_mod, Some(grads));
        let mut d_mods: Vec<Vec<T>> = vec![vec![T::zero(); 6 * d]; self.blocks.len()];
        for l in (0..self.blocks.len()).rev() {
            let (gb, fp) = (&mut grads.blocks[l], &mut grads.frame_pos[..f * d]);
            let dxb = self.blocks[l].backward(
                &c.blocks[l],
                &dx,
                self.cfg.heads,
                &c.cond.block_mods[l],
                BlockGrads {
                    params: Some(gb),
                    mods: Some(&mut d_mods[l]),
                    frame_pos: Some(fp),
                },
            );
            for (a, &b) in dx.iter_mut().zip(&dxb) {
                *a += b;
            }
        }
        self.embed_tokens_backward(&c.patches, f, &dx, grads);
        self.condition_backward(&c.cond, &d_mods, &d_head_mod, None, grads);
    }
}

/// Add `std`-scaled Gaussian noise to every parameter.
pub fn perturb_params<T: Real, M: Params<T>>(m: &mut M, rng: &mut impl Rng, std: f64) {
    m.for_each_param_mut("", &mut |_, _, d| {
        for x in d.iter_mut() {
            *x += T::c(std) * crate::rng::normal::<T>(rng);
        }
    });
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::normal_vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            patch: 2,
            frame: FrameShape::new(4, 4, 3),
            max_frames: 4,
            mlp_ratio: 2,
            freq_dim: 8,
        }
    }

    fn random_video(rng: &mut ChaCha8Rng, len: usize, frame: FrameShape) -> Video<f64> {
        Video { frame, len, data: normal_vec(rng, len * frame.len()) }
    }

    #[test]
    fn zero_gate_block_produces_no_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = VideoModel::<f64>::new(tiny_config(), &mut rng).unwrap();
        let x = normal_vec::<f64>(&mut rng, 3 * 4 * 8);
        for l in 0..2 {
            let d = m.block_update(l, &x, 3, 0.3, ContextMode::Dynamic).unwrap();
            assert!(d.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fresh_model_keeps_tokens_constant_across_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = VideoModel::<f64>::new(tiny_config(), &mut rng).unwrap();
        let f = m.cfg.frame;
        let noisy = random_video(&mut rng, 3, f);
        let (_, c) = m
            .video_forward_cached(&noisy, &Video::zeros(3, f), &[false; 3], 0.5, ContextMode::Dynamic)
            .unwrap();
        for s in &c.states {
            assert_eq!(s, &c.states[0]);
        }
    }

    #[test]
    fn block_matches_straight_line_oracle() {
        // D=4, one head, one frame of two tokens, hand-set weights.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = DiTBlock::<f64>::new(4, 2, &mut rng);
        perturb_params(&mut b, &mut rng, 0.3);
        let x: Vec<f64> = vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.8, 0.0, 1.2];
        let mods: Vec<f64> = (0..24).map(|i| ((i as f64) * 0.37).sin() * 0.5).collect();
        let fpos = vec![0.05, -0.1, 0.2, 0.0];
        let got = b.forward(&x, 1, 1, &mods, &fpos, None);
        let want = oracle_block(&b, &x, &mods, &fpos);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    /// Independent scalar-loop implementation of one block update (single head).
    fn oracle_block(b: &DiTBlock<f64>, x: &[f64], mods: &[f64], fpos: &[f64]) -> Vec<f64> {
        let d = 4;
        let n = x.len() / d;
        let lin = |l: &Linear<f64>, v: &[f64]| -> Vec<f64> {
            (0..l.out).map(|o| l.b[o] + (0..l.inp).map(|i| v[i] * l.w[i * l.out + o]).sum::<f64>()).collect()
        };
        let ln = |v: &[f64]| -> Vec<f64> {
            let mu = v.iter().sum::<f64>() / d as f64;
            let var = v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / d as f64;
            v.iter().map(|a| (a - mu) / (var + 1e-6).sqrt()).collect()
        };
        let m = |k: usize, j: usize| mods[k * d + j];
        let toks: Vec<&[f64]> = x.chunks(d).collect();
        let h: Vec<Vec<f64>> = toks
            .iter()
            .map(|t| ln(t).iter().enumerate().map(|(j, v)| v * (1.0 + m(1, j)) + m(0, j) + fpos[j]).collect())
            .collect();
        let qkv: Vec<Vec<f64>> = h.iter().map(|v| lin(&b.qkv, v)).collect();
        let mut out = Vec::new();
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|k| (0..d).map(|j| qkv[i][j] * qkv[k][d + j]).sum::<f64>() / 2.0)
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let o: Vec<f64> = (0..d).map(|j| (0..n).map(|k| e[k] / z * qkv[k][2 * d + j]).sum()).collect();
            let a = lin(&b.proj, &o);
            let x1: Vec<f64> = (0..d).map(|j| toks[i][j] + m(2, j) * a[j]).collect();
            let h2: Vec<f64> = ln(&x1).iter().enumerate().map(|(j, v)| v * (1.0 + m(4, j)) + m(3, j)).collect();
            let g: Vec<f64> = lin(&b.fc1, &h2)
                .iter()
                .map(|&u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh()))
                .collect();
            let mm = lin(&b.fc2, &g);
            out.extend((0..d).map(|j| m(2, j) * a[j] + m(5, j) * mm[j]));
        }
        out
    }

    #[test]
    fn block_is_equivariant_to_spatial_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = DiTBlock::<f64>::new(8, 2, &mut rng);
        perturb_params(&mut b, &mut rng, 0.2);
        let (frames, p, d) = (2, 4, 8);
        let x = normal_vec::<f64>(&mut rng, frames * p * d);
        let mods = normal_vec::<f64>(&mut rng, 6 * d);
        let fpos = normal_vec::<f64>(&mut rng, frames * d);
        let perm = [2usize, 0, 3, 1];
        let mut xp = x.clone();
        for f in 0..frames {
            for (k, &src) in perm.iter().enumerate() {
                let dst = (f * p + k) * d;
                xp[dst..dst + d].copy_from_slice(&x[(f * p + src) * d..(f * p + src + 1) * d]);
            }
        }
        let y = b.forward(&x, frames, 2, &mods, &fpos, None);
        let yp = b.forward(&xp, frames, 2, &mods, &fpos, None);
        for f in 0..frames {
            for (k, &src) in perm.iter().enumerate() {
                for j in 0..d {
                    let a = yp[(f * p + k) * d + j];
                    let e = y[(f * p + src) * d + j];
                    assert!((a - e).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn swapping_frames_and_their_encodings_swaps_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = VideoModel::<f64>::new(tiny_config(), &mut rng).unwrap();
        perturb_params(&mut m, &mut rng, 0.2);
        let f = m.cfg.frame;
        let noisy = random_video(&mut rng, 3, f);
        let clean = Video::zeros(3, f);
        let out = m.video_forward(&noisy, &clean, &[false; 3], 0.4, ContextMode::Dynamic).unwrap();

        let d = m.cfg.dim;
        let mut ms = m.clone();
        for j in 0..d {
            ms.frame_pos.swap(d + j, 2 * d + j);
        }
        let mut ns = noisy.clone();
        let (a, b) = (noisy.frame(1).to_vec(), noisy.frame(2).to_vec());
        ns.frame_mut(1).copy_from_slice(&b);
        ns.frame_mut(2).copy_from_slice(&a);
        let outs = ms.video_forward(&ns, &clean, &[false; 3], 0.4, ContextMode::Dynamic).unwrap();
        for (i, j) in [(0, 0), (1, 2), (2, 1)] {
            for (x, y) in outs.frame(i).iter().zip(out.frame(j)) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn context_modes_change_the_output_of_a_random_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = VideoModel::<f32>::new(tiny_config(), &mut rng).unwrap();
        perturb_params(&mut m, &mut rng, 0.2);
        let f = m.cfg.frame;
        let noisy = Video { frame: f, len: 2, data: normal_vec(&mut rng, 2 * f.len()) };
        let clean = Video::zeros(2, f);
        let a = m.video_forward(&noisy, &clean, &[false, false], 0.7, ContextMode::Dynamic).unwrap();
        let b = m.video_forward(&noisy, &clean, &[false, false], 0.7, ContextMode::FreezeTime).unwrap();
        assert_ne!(a.data, b.data);
        // Repeated calls are bit-identical.
        let a2 = m.video_forward(&noisy, &clean, &[false, false], 0.7, ContextMode::Dynamic).unwrap();
        assert_eq!(a.data, a2.data);
    }

    #[test]
    fn residual_stream_is_sum_of_block_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = VideoModel::<f64>::new(tiny_config(), &mut rng).unwrap();
        perturb_params(&mut m, &mut rng, 0.2);
        let f = m.cfg.frame;
        let noisy = random_video(&mut rng, 2, f);
        let (_, c) = m
            .video_forward_cached(&noisy, &noisy, &[true, false], 0.2, ContextMode::FreezeTime)
            .unwrap();
        let mut acc = c.states[0].clone();
        for dl in &c.deltas {
            for (a, &b) in acc.iter_mut().zip(dl) {
                *a += b;
            }
        }
        assert_eq!(&acc, c.states.last().unwrap());
        assert!(c.deltas.iter().any(|dl| dl.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn given_frames_are_injected_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = VideoModel::<f64>::new(tiny_config(), &mut rng).unwrap();
        perturb_params(&mut m, &mut rng, 0.2);
        let f = m.cfg.frame;
        let noisy = random_video(&mut rng, 2, f);
        let clean = random_video(&mut rng, 2, f);
        let mut other_noise = noisy.clone();
        other_noise.frame_mut(0).iter_mut().for_each(|x| *x += 3.0);
        let a = m.video_forward(&noisy, &clean, &[true, false], 0.5, ContextMode::Dynamic).unwrap();
        let b = m.video_forward(&other_noise, &clean, &[true, false], 0.5, ContextMode::Dynamic).unwrap();
        assert_eq!(a, b);
        // All-true and all-false masks both produce a full-size output.
        let all = m.video_forward(&noisy, &clean, &[true, true], 0.5, ContextMode::Dynamic).unwrap();
        assert_eq!(all.len, 2);
    }

    #[test]
    fn video_forward_rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = VideoModel::<f64>::new(tiny_config(), &mut rng).unwrap();
        let f = m.cfg.frame;
        let v = Video::zeros(2, f);
        assert!(matches!(m.video_forward(&v, &v, &[false], 0.5, ContextMode::Dynamic), Err(Error::Shape(_))));
        let long = Video::zeros(5, f);
        assert!(m.video_forward(&long, &long, &[false; 5], 0.5, ContextMode::Dynamic).is_err());
        assert!(m.block_update(0, &[f64::NAN; 32], 1, 0.5, ContextMode::Dynamic).is_err());
    }

    #[test]
    fn video_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut m = VideoModel::<f64>::new(tiny_config(), &mut rng).unwrap();
        perturb_params(&mut m, &mut rng, 0.3);
        let f = m.cfg.frame;
        let noisy = random_video(&mut rng, 2, f);
        let clean = random_video(&mut rng, 2, f);
        let w = random_video(&mut rng, 2, f);
        let mask = [true, false];
        let loss = |mm: &VideoModel<f64>| -> f64 {
            let out = mm.video_forward(&noisy, &clean, &mask, 0.37, ContextMode::FreezeTime).unwrap();
            out.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
        };
        let (_, c) = m.video_forward_cached(&noisy, &clean, &mask, 0.37, ContextMode::FreezeTime).unwrap();
        let mut g = VideoModel::new_zeroed(m.cfg);
        m.video_backward(&c, &w, &mut g);
        let flat = m.flatten();
        let ga = g.flatten();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += h;
            let mut mp = m.clone();
            mp.unflatten(&p);
            p[i] -= 2.0 * h;
            let mut mn = m.clone();
            mn.unflatten(&p);
            let num = (loss(&mp) - loss(&mn)) / (2.0 * h);
            worst = worst.max((num - ga[i]).abs() / (1.0 + num.abs()));
        }
        assert!(worst < 1e-6, "worst error {worst}");
    }
}
