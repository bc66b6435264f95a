//! Synthetic training data.
//!
//! * pseudo-4D grids: a toy video warped by a smooth per-view 2D affine trajectory;
//! * a procedural ring-camera renderer with depth-dependent horizontal parallax;
//! * labeled dynamic and freeze-time videos for the base model.

use rand::Rng;

use crate::dit::ContextMode;
use crate::error::{Error, Result};
use crate::flow::LabeledVideo;
use crate::grid::{FrameGrid, FrameShape, Video};
use crate::rng::rng_for;

/// Per-view-step limits on the trajectory increments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryBounds {
    pub theta_max_deg: f64,
    pub s_max: f64,
    /// Pixels.
    pub t_max: f64,
}

impl Default for TrajectoryBounds {
    fn default() -> Self {
        Self {
            theta_max_deg: 4.0,
            s_max: 0.03,
            t_max: 2.0,
        }
    }
}

/// `dest = M (src − c) + c + tr` with `M = exp(log_scale) · R(angle)` and `c` the frame centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub angle: f64,
    pub log_scale: f64,
    pub tr: [f64; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        angle: 0.0,
        log_scale: 0.0,
        tr: [0.0, 0.0],
    };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            tr: [tx, ty],
            ..Self::IDENTITY
        }
    }

    /// Row-major `[[a, b], [c, d]]`.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let s = self.log_scale.exp();
        let (sn, cs) = self.angle.sin_cos();
        [[s * cs, -s * sn], [s * sn, s * cs]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineTrajectory {
    pub maps: Vec<Affine>,
}

/// Integrate smoothly varying increments from the identity. Each rate does a
/// bounded random walk and is clamped to its bound, so every consecutive
/// difference stays within `bounds`.
pub fn sample_trajectory(rng: &mut impl Rng, v: usize, bounds: TrajectoryBounds) -> AffineTrajectory {
    let th = bounds.theta_max_deg.to_radians();
    let mut u = |b: f64| if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
    let mut rates = [u(th), u(bounds.s_max), u(bounds.t_max), u(bounds.t_max)];
    let mut cur = Affine::IDENTITY;
    let mut maps = Vec::with_capacity(v);
    for k in 0..v {
        if k > 0 {
            let dr = [u(th * 0.5), u(bounds.s_max * 0.5), u(bounds.t_max * 0.5), u(bounds.t_max * 0.5)];
            rates[0] = (rates[0] + dr[0]).clamp(-th, th);
            rates[1] = (rates[1] + dr[1]).clamp(-bounds.s_max, bounds.s_max);
            rates[2] += dr[2];
            rates[3] += dr[3];
            let n = (rates[2] * rates[2] + rates[3] * rates[3]).sqrt();
            if n > bounds.t_max {
                let s = bounds.t_max / n;
                rates[2] *= s;
                rates[3] *= s;
            }
            cur = Affine {
                angle: cur.angle + rates[0],
                log_scale: cur.log_scale + rates[1],
                tr: [cur.tr[0] + rates[2], cur.tr[1] + rates[3]],
            };
        }
        maps.push(cur);
    }
    AffineTrajectory { maps }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resample {
    #[default]
    Bilinear,
    Nearest,
}

impl Resample {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bilinear" => Some(Resample::Bilinear),
            "nearest" => Some(Resample::Nearest),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Resample::Bilinear => "bilinear",
            Resample::Nearest => "nearest",
        }
    }
}

/// Warp one frame by inverse mapping each destination pixel; samples outside
/// the frame take the nearest edge pixel.
pub fn warp(frame: &[f32], shape: FrameShape, a: &Affine, mode: Resample) -> Vec<f32> {
    let FrameShape { h, w, c } = shape;
    let [[m00, m01], [m10, m11]] = a.matrix();
    let det = m00 * m11 - m01 * m10;
    let (i00, i01, i10, i11) = (m11 / det, -m01 / det, -m10 / det, m00 / det);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let px = |y: isize, x: isize, ch: usize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        frame[(yy * w + xx) * c + ch] as f64
    };
    let mut out = vec![0.0f32; frame.len()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - a.tr[0];
            let dy = y as f64 - cy - a.tr[1];
            let sx = i00 * dx + i01 * dy + cx;
            let sy = i10 * dx + i11 * dy + cy;
            for ch in 0..c {
                let v = match mode {
                    Resample::Nearest => px(sy.round() as isize, sx.round() as isize, ch),
                    Resample::Bilinear => {
                        let (x0, y0) = (sx.floor(), sy.floor());
                        let (fx, fy) = (sx - x0, sy - y0);
                        let (x0, y0) = (x0 as isize, y0 as isize);
                        let top = (1.0 - fx) * px(y0, x0, ch) + fx * px(y0, x0 + 1, ch);
                        let bot = (1.0 - fx) * px(y0 + 1, x0, ch) + fx * px(y0 + 1, x0 + 1, ch);
                        (1.0 - fy) * top + fy * bot
                    }
                };
                out[(y * w + x) * c + ch] = v as f32;
            }
        }
    }
    out
}

/// `grid[v][t] = warp(video[t], traj[v])`.
pub fn pseudo_grid(video: &Video<f32>, traj: &AffineTrajectory, mode: Resample) -> Result<FrameGrid<f32>> {
    if traj.maps.is_empty() || video.len == 0 {
        return Err(Error::Shape("pseudo grid needs at least one view and one frame".into()));
    }
    if video.data.len() != video.len * video.frame.len() {
        return Err(Error::Shape("video storage does not match its shape".into()));
    }
    let mut g = FrameGrid::zeros(traj.maps.len(), video.len, video.frame);
    for (v, a) in traj.maps.iter().enumerate() {
        for t in 0..video.len {
            let f = warp(video.frame(t), video.frame, a, mode);
            g.frame_mut(v, t).copy_from_slice(&f);
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Box,
    Triangle,
}

/// Position and angle as deterministic functions of the frame index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    /// Oscillation amplitude in frame-relative units.
    pub amp: [f64; 2],
    /// Cycles per 8 frames.
    pub freq: f64,
    pub phase: f64,
    /// Radians per frame.
    pub spin: f64,
}

impl Motion {
    pub const STATIC: Motion = Motion {
        amp: [0.0, 0.0],
        freq: 0.0,
        phase: 0.0,
        spin: 0.0,
    };

    fn offset(&self, t: usize) -> [f64; 2] {
        let s = (std::f64::consts::TAU * self.freq * t as f64 / 8.0 + self.phase).sin();
        [self.amp[0] * s, self.amp[1] * s]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub kind: ShapeKind,
    /// Depth relative to the ring's fixation plane; larger is farther.
    pub z: f64,
    /// Centre in frame-relative units `[0, 1]`.
    pub pos: [f64; 2],
    /// Radius in frame-relative units.
    pub size: f64,
    pub angle: f64,
    pub color: [f32; 3],
    pub motion: Motion,
}

/// Weak-perspective ring camera: view `v` sees a horizontal shift of
/// `gain * z * sin(azimuth_v)` (frame-relative), azimuths evenly spaced in
/// `[-max_azimuth, max_azimuth]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraRing {
    pub max_azimuth_deg: f64,
    pub gain: f64,
}

impl Default for CameraRing {
    fn default() -> Self {
        Self {
            max_azimuth_deg: 60.0,
            gain: 0.15,
        }
    }
}

impl CameraRing {
    pub fn azimuth(&self, v: usize, views: usize) -> f64 {
        if views <= 1 {
            return 0.0;
        }
        let m = self.max_azimuth_deg.to_radians();
        -m + 2.0 * m * v as f64 / (views - 1) as f64
    }

    /// Horizontal shift (frame-relative) of a point at depth `z` in view `v`.
    pub fn shift(&self, z: f64, v: usize, views: usize) -> f64 {
        self.gain * z * self.azimuth(v, views).sin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub prims: Vec<Primitive>,
    pub ring: CameraRing,
    /// Vertical gradient from `top` to `bottom`.
    pub top: [f32; 3],
    pub bottom: [f32; 3],
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let mut zs: Vec<f64> = self.prims.iter().map(|p| p.z).collect();
        zs.sort_by(|a, b| a.total_cmp(b));
        if zs.windows(2).any(|w| w[0] == w[1]) || zs.iter().any(|z| !z.is_finite()) {
            return Err(Error::Invalid("primitive depths must be finite and distinct".into()));
        }
        Ok(())
    }

    pub fn is_static(&self) -> bool {
        self.prims.iter().all(|p| p.motion == Motion::STATIC)
    }
}

fn inside(kind: ShapeKind, dx: f64, dy: f64, r: f64, angle: f64) -> bool {
    let (s, c) = angle.sin_cos();
    let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
    match kind {
        ShapeKind::Disc => dx * dx + dy * dy <= r * r,
        ShapeKind::Box => u.abs() <= r && v.abs() <= r,
        ShapeKind::Triangle => {
            // Equilateral, circumradius r, apex up in local coordinates.
            let h = r * 0.5;
            let k = 3f64.sqrt();
            v <= h && k * u - v <= r && -k * u - v <= r
        }
    }
}

const SUPERSAMPLE: usize = 4;

/// Render the `V x T` grid of a scene with painter's-algorithm compositing and
/// 4x4 supersampling.
pub fn render_scene(spec: &SceneSpec, v: usize, t: usize, shape: FrameShape) -> Result<FrameGrid<f32>> {
    spec.validate()?;
    if shape.c != 3 {
        return Err(Error::Shape(format!("renderer produces RGB frames, got {} channels", shape.c)));
    }
    let mut order: Vec<&Primitive> = spec.prims.iter().collect();
    order.sort_by(|a, b| b.z.total_cmp(&a.z));
    let (h, w) = (shape.h as f64, shape.w as f64);
    let mut g = FrameGrid::zeros(v, t, shape);
    for vi in 0..v {
        for ti in 0..t {
            let placed: Vec<(ShapeKind, f64, f64, f64, f64, [f32; 3])> = order
                .iter()
                .map(|p| {
                    let o = p.motion.offset(ti);
                    let cx = (p.pos[0] + o[0] + spec.ring.shift(p.z, vi, v)) * w;
                    let cy = (p.pos[1] + o[1]) * h;
                    let ang = p.angle + p.motion.spin * ti as f64;
                    (p.kind, cx, cy, p.size * w, ang, p.color)
                })
                .collect();
            let frame = g.frame_mut(vi, ti);
            for y in 0..shape.h {
                for x in 0..shape.w {
                    let mut acc = [0.0f64; 3];
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let fx = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                            let fy = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                            let a = (fy / h) as f32;
                            let mut col = [0.0f32; 3];
                            for ch in 0..3 {
                                col[ch] = spec.top[ch] * (1.0 - a) + spec.bottom[ch] * a;
                            }
                            for &(kind, cx, cy, r, ang, pc) in &placed {
                                if inside(kind, fx - cx, fy - cy, r, ang) {
                                    col = pc;
                                }
                            }
                            for ch in 0..3 {
                                acc[ch] += col[ch] as f64;
                            }
                        }
                    }
                    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
                    for ch in 0..3 {
                        frame[(y * shape.w + x) * 3 + ch] = (acc[ch] / n) as f32;
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Random scene with `n` primitives at distinct, evenly stratified depths in `[-1, 1]`.
pub fn random_scene(rng: &mut impl Rng, n: usize, dynamic: bool, ring: CameraRing) -> SceneSpec {
    let kinds = [ShapeKind::Disc, ShapeKind::Box, ShapeKind::Triangle];
    let color = |rng: &mut dyn rand::RngCore| -> [f32; 3] {
        [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
    };
    let top = color(rng);
    let bottom = color(rng);
    let prims = (0..n)
        .map(|i| {
            let z = -1.0 + 2.0 * (i as f64 + rng.gen_range(0.1..0.9)) / n as f64;
            let motion = if dynamic {
                Motion {
                    amp: [rng.gen_range(-0.15..0.15), rng.gen_range(-0.1..0.1)],
                    freq: rng.gen_range(0.25..0.75),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    spin: rng.gen_range(-0.2..0.2),
                }
            } else {
                Motion::STATIC
            };
            Primitive {
                kind: kinds[rng.gen_range(0..3)],
                z,
                pos: [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)],
                size: rng.gen_range(0.12..0.25),
                angle: rng.gen_range(0.0..std::f64::consts::TAU),
                color: color(rng),
                motion,
            }
        })
        .collect();
    SceneSpec {
        prims,
        ring,
        top,
        bottom,
    }
}

/// Sizes and knobs for dataset generation.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub frame: FrameShape,
    pub views: usize,
    pub frames: usize,
    pub primitives: usize,
    pub ring: CameraRing,
    pub bounds: TrajectoryBounds,
    pub resample: Resample,
}

fn check_data_spec(spec: &DataSpec) -> Result<()> {
    if spec.views == 0 || spec.frames == 0 || spec.frame.is_empty() || spec.primitives == 0 {
        return Err(Error::Invalid(format!("degenerate data spec {spec:?}")));
    }
    Ok(())
}

/// Dynamic videos (one view of a moving scene) and freeze-time videos (one
/// instant of a static scene swept across views), labeled with their mode.
pub fn make_base_datasets(seed: u64, dynamic: usize, freeze: usize, spec: &DataSpec) -> Result<(Vec<LabeledVideo>, Vec<LabeledVideo>)> {
    check_data_spec(spec)?;
    let dyn_set = (0..dynamic)
        .map(|i| {
            let mut rng = rng_for(seed, "base_dynamic", i as u64);
            let scene = random_scene(&mut rng, spec.primitives, true, spec.ring);
            let v = rng.gen_range(0..spec.views);
            let g = render_scene(&scene, spec.views, spec.frames, spec.frame)?;
            Ok(LabeledVideo {
                video: g.row_video(v)?,
                mode: ContextMode::Dynamic,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let frz_set = (0..freeze)
        .map(|i| {
            let mut rng = rng_for(seed, "base_freeze", i as u64);
            let scene = random_scene(&mut rng, spec.primitives, false, spec.ring);
            let g = render_scene(&scene, spec.views, 1, spec.frame)?;
            Ok(LabeledVideo {
                video: g.column_video(0)?,
                mode: ContextMode::FreezeTime,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dyn_set, frz_set))
}

/// Pseudo-4D grids: a rendered fixed-view video warped along a random trajectory.
pub fn make_pseudo_grids(seed: u64, count: usize, spec: &DataSpec) -> Result<Vec<FrameGrid<f32>>> {
    check_data_spec(spec)?;
    (0..count)
        .map(|i| {
            let mut rng = rng_for(seed, "pseudo_grid", i as u64);
            let scene = random_scene(&mut rng, spec.primitives, true, spec.ring);
            let video = render_scene(&scene, 1, spec.frames, spec.frame)?.row_video(0)?;
            let traj = sample_trajectory(&mut rng, spec.views, spec.bounds);
            pseudo_grid(&video, &traj, spec.resample)
        })
        .collect()
}

/// Ground-truth renderer grids; `stream` separates training and held-out sets.
pub fn make_render_grids(seed: u64, stream: &str, count: usize, spec: &DataSpec) -> Result<Vec<FrameGrid<f32>>> {
    check_data_spec(spec)?;
    (0..count)
        .map(|i| {
            let mut rng = rng_for(seed, stream, i as u64);
            let scene = random_scene(&mut rng, spec.primitives, true, spec.ring);
            render_scene(&scene, spec.views, spec.frames, spec.frame)
        })
        .collect()
}
