//! Conditional grid sampler and sliding-window extension.
//!
//! Euler integration of the predicted velocity from σ = 1 to σ = 0 on a
//! uniform grid. Given frames are re-injected clean at every step and copied
//! bit-exactly into the output.

use crate::error::{Error, Result};
use crate::flow::{from_diffusion, to_diffusion};
use crate::grid::{FrameGrid, FrameShape, GridMask, Video};
use crate::rng::{normal_vec, rng_for};
use crate::sync::{four_d_forward, four_d_forward_traced, SyncStack, SyncTrace};
use crate::dit::VideoModel;

/// Anything that predicts a velocity field for a partially given grid.
pub trait GridDenoiser {
    fn frame(&self) -> FrameShape;

    /// Longest supported sequence along either grid axis.
    fn max_frames(&self) -> usize;

    fn predict(
        &self,
        x: &FrameGrid<f32>,
        given: &FrameGrid<f32>,
        mask: &GridMask,
        sigma: f32,
        trace: bool,
    ) -> Result<(FrameGrid<f32>, Option<SyncTrace>)>;
}

/// Base model plus sync layers.
pub struct FourDModel<'a> {
    pub model: &'a VideoModel<f32>,
    pub syncs: &'a SyncStack<f32>,
}

impl GridDenoiser for FourDModel<'_> {
    fn frame(&self) -> FrameShape {
        self.model.cfg.frame
    }

    fn max_frames(&self) -> usize {
        self.model.cfg.max_frames
    }

    fn predict(
        &self,
        x: &FrameGrid<f32>,
        given: &FrameGrid<f32>,
        mask: &GridMask,
        sigma: f32,
        trace: bool,
    ) -> Result<(FrameGrid<f32>, Option<SyncTrace>)> {
        if trace {
            let (o, t) = four_d_forward_traced(self.model, self.syncs, x, given, mask, sigma)?;
            Ok((o.velocity, Some(t)))
        } else {
            Ok((four_d_forward(self.model, self.syncs, x, given, mask, sigma)?.velocity, None))
        }
    }
}

/// Per-step sampler record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleRecord {
    /// `(step, sigma, residual_norm)`: RMS of the predicted velocity over unknown frames.
    pub steps: Vec<(usize, f64, f64)>,
    /// Sync statistics per step when tracing was requested.
    pub traces: Vec<SyncTrace>,
}

fn inject(x: &mut FrameGrid<f32>, given: &FrameGrid<f32>, mask: &GridMask) {
    for v in 0..x.v {
        for t in 0..x.t {
            if mask.get(v, t) {
                x.frame_mut(v, t).copy_from_slice(given.frame(v, t));
            }
        }
    }
}

/// Euler integration in diffusion space from `init` at σ = 1 down to σ = 0.
pub fn euler_integrate(
    net: &dyn GridDenoiser,
    init: &FrameGrid<f32>,
    given: &FrameGrid<f32>,
    mask: &GridMask,
    steps: usize,
    mut record: Option<&mut SampleRecord>,
    trace: bool,
) -> Result<FrameGrid<f32>> {
    if steps == 0 {
        return Err(Error::Invalid("sampler needs at least one step".into()));
    }
    let mut x = init.clone();
    inject(&mut x, given, mask);
    let fl = x.frame.len();
    for k in 0..steps {
        let sigma = 1.0 - k as f64 / steps as f64;
        let next = 1.0 - (k + 1) as f64 / steps as f64;
        let (vel, tr) = net.predict(&x, given, mask, sigma as f32, trace)?;
        let dt = (next - sigma) as f32;
        for (a, &u) in x.data.iter_mut().zip(&vel.data) {
            *a += dt * u;
        }
        inject(&mut x, given, mask);
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplerNonFinite { step: k });
        }
        if let Some(r) = record.as_deref_mut() {
            let (mut ss, mut n) = (0.0, 0usize);
            for (f, &g) in mask.given.iter().enumerate() {
                if !g {
                    ss += vel.data[f * fl..(f + 1) * fl].iter().map(|&u| (u as f64).powi(2)).sum::<f64>();
                    n += fl;
                }
            }
            r.steps.push((k, sigma, if n == 0 { 0.0 } else { (ss / n as f64).sqrt() }));
            r.traces.extend(tr);
        }
    }
    Ok(x)
}

/// Fill every frame not marked in `mask`; frames marked given are taken from
/// `given` (pixel space) and returned bit-exactly.
pub fn sample_masked(
    net: &dyn GridDenoiser,
    given: &FrameGrid<f32>,
    mask: &GridMask,
    steps: usize,
    seed: u64,
    record: Option<&mut SampleRecord>,
    trace: bool,
) -> Result<FrameGrid<f32>> {
    if given.frame != net.frame() {
        return Err(Error::Shape(format!(
            "frames {:?} do not match model frame {:?}",
            given.frame,
            net.frame()
        )));
    }
    let mf = net.max_frames();
    if given.v > mf || given.t > mf {
        return Err(Error::Precondition(format!(
            "window {}x{} exceeds the supported {mf} frames per axis",
            given.v, given.t
        )));
    }
    let mut rng = rng_for(seed, "sample", 0);
    let init = FrameGrid {
        data: normal_vec(&mut rng, given.data.len()),
        ..given.clone()
    };
    let given_d = given.map(to_diffusion);
    let x = euler_integrate(net, &init, &given_d, mask, steps, record, trace)?;
    let mut out = x.map(from_diffusion);
    inject(&mut out, given, mask);
    Ok(out)
}

/// Fill a `V x T` grid from its first row (`T` frames) and first column (`V` frames).
pub fn sample_grid(
    net: &dyn GridDenoiser,
    first_row: &Video<f32>,
    first_col: &Video<f32>,
    steps: usize,
    seed: u64,
    record: Option<&mut SampleRecord>,
    trace: bool,
) -> Result<FrameGrid<f32>> {
    if first_row.len == 0 || first_col.len == 0 {
        return Err(Error::Invalid("first row and first column must be non-empty".into()));
    }
    if first_row.frame != first_col.frame {
        return Err(Error::Shape(format!(
            "row frames {:?} vs column frames {:?}",
            first_row.frame, first_col.frame
        )));
    }
    let corner = first_row
        .frame(0)
        .iter()
        .zip(first_col.frame(0))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    if corner > 1e-6 {
        return Err(Error::Precondition(format!(
            "first row and first column disagree on the shared corner frame (max difference {corner})"
        )));
    }
    let (v, t) = (first_col.len, first_row.len);
    let mut given = FrameGrid::zeros(v, t, first_row.frame);
    for ti in 0..t {
        given.frame_mut(0, ti).copy_from_slice(first_row.frame(ti));
    }
    for vi in 1..v {
        given.frame_mut(vi, 0).copy_from_slice(first_col.frame(vi));
    }
    sample_masked(net, &given, &GridMask::first_row_and_column(v, t), steps, seed, record, trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtendAxis {
    /// Append columns (new timesteps).
    Time,
    /// Append rows (new viewpoints).
    View,
}

impl ExtendAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "time" => Some(ExtendAxis::Time),
            "view" => Some(ExtendAxis::View),
            _ => None,
        }
    }
}

/// Append `new_count` columns (time) or rows (view) to `grid`, conditioning on
/// the last `overlap` of them. `edge`, when given, supplies the new frames of
/// row 0 (time) or column 0 (view) as additional conditioning.
#[allow(clippy::too_many_arguments)]
pub fn extend_grid(
    net: &dyn GridDenoiser,
    grid: &FrameGrid<f32>,
    axis: ExtendAxis,
    new_count: usize,
    overlap: usize,
    edge: Option<&Video<f32>>,
    steps: usize,
    seed: u64,
) -> Result<FrameGrid<f32>> {
    if new_count == 0 {
        return Ok(grid.clone());
    }
    let along = match axis {
        ExtendAxis::Time => grid.t,
        ExtendAxis::View => grid.v,
    };
    if overlap == 0 || overlap > along {
        return Err(Error::Invalid(format!("overlap {overlap} must be in 1..={along}")));
    }
    let window = overlap + new_count;
    if window > net.max_frames() {
        return Err(Error::Precondition(format!(
            "extension window of {window} frames exceeds the trained maximum of {}",
            net.max_frames()
        )));
    }
    if let Some(e) = edge {
        if e.len != new_count || e.frame != grid.frame {
            return Err(Error::Shape(format!(
                "edge video has {} frames of {:?}, expected {new_count} of {:?}",
                e.len, e.frame, grid.frame
            )));
        }
    }
    let start = along - overlap;
    // (window coordinate) -> (source coordinate) along the extended axis.
    let (wv, wt) = match axis {
        ExtendAxis::Time => (grid.v, window),
        ExtendAxis::View => (window, grid.t),
    };
    let mut given = FrameGrid::zeros(wv, wt, grid.frame);
    let mut mask = GridMask::none(wv, wt);
    for v in 0..wv {
        for t in 0..wt {
            let (k, other) = match axis {
                ExtendAxis::Time => (t, v),
                ExtendAxis::View => (v, t),
            };
            let src = if k < overlap {
                let (sv, st) = match axis {
                    ExtendAxis::Time => (v, start + k),
                    ExtendAxis::View => (start + k, t),
                };
                Some(grid.frame(sv, st))
            } else if other == 0 {
                edge.map(|e| e.frame(k - overlap))
            } else {
                None
            };
            if let Some(s) = src {
                given.frame_mut(v, t).copy_from_slice(s);
                mask.set(v, t, true);
            }
        }
    }
    let win = sample_masked(net, &given, &mask, steps, seed, None, false)?;
    let (ov, ot) = match axis {
        ExtendAxis::Time => (grid.v, grid.t + new_count),
        ExtendAxis::View => (grid.v + new_count, grid.t),
    };
    let mut out = FrameGrid::zeros(ov, ot, grid.frame);
    for v in 0..ov {
        for t in 0..ot {
            let f = if v < grid.v && t < grid.t {
                grid.frame(v, t)
            } else {
                match axis {
                    ExtendAxis::Time => win.frame(v, t - start),
                    ExtendAxis::View => win.frame(v - start, t),
                }
            };
            out.frame_mut(v, t).copy_from_slice(f);
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::normal_vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Velocity `a * x + b`, elementwise.
    pub struct LinearStub {
        pub frame: FrameShape,
        pub a: f32,
        pub b: f32,
    }

    impl GridDenoiser for LinearStub {
        fn frame(&self) -> FrameShape {
            self.frame
        }

        fn max_frames(&self) -> usize {
            8
        }

        fn predict(
            &self,
            x: &FrameGrid<f32>,
            _given: &FrameGrid<f32>,
            _mask: &GridMask,
            _sigma: f32,
            _trace: bool,
        ) -> Result<(FrameGrid<f32>, Option<SyncTrace>)> {
            Ok((x.map(|u| self.a * u + self.b), None))
        }
    }

    fn video(rng: &mut ChaCha8Rng, len: usize, f: FrameShape) -> Video<f32> {
        Video {
            frame: f,
            len,
            data: (0..len * f.len()).map(|_| rand::Rng::gen::<f32>(rng)).collect(),
        }
    }

    #[test]
    fn single_step_is_noise_minus_velocity() {
        let f = FrameShape::new(2, 2, 1);
        let net = LinearStub { frame: f, a: 0.0, b: 0.25 };
        let init = FrameGrid {
            v: 2,
            t: 2,
            frame: f,
            data: normal_vec(&mut ChaCha8Rng::seed_from_u64(1), 16),
        };
        let mask = GridMask::none(2, 2);
        let out = euler_integrate(&net, &init, &init, &mask, 1, None, false).unwrap();
        for (o, e) in out.data.iter().zip(&init.data) {
            assert_eq!(*o, e - 0.25);
        }
    }

    #[test]
    fn euler_converges_to_closed_form() {
        // dx/dσ = a x + b integrated from σ = 1 to 0.
        let f = FrameShape::new(1, 2, 1);
        let (a, b) = (0.7f32, -0.3f32);
        let net = LinearStub { frame: f, a, b };
        let init = FrameGrid {
            v: 1,
            t: 1,
            frame: f,
            data: vec![0.8, -1.2],
        };
        let out = euler_integrate(&net, &init, &init, &GridMask::none(1, 1), 1000, None, false).unwrap();
        for (o, &x1) in out.data.iter().zip(&init.data) {
            let (a, b, x1) = (a as f64, b as f64, x1 as f64);
            let exact = (x1 + b / a) * (-a).exp() - b / a;
            assert!((*o as f64 - exact).abs() < 1e-3, "{o} vs {exact}");
        }
    }

    #[test]
    fn sampled_grid_keeps_given_frames_and_is_deterministic() {
        let f = FrameShape::new(2, 2, 3);
        let net = LinearStub { frame: f, a: 0.5, b: 0.1 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row = video(&mut rng, 3, f);
        let mut col = video(&mut rng, 2, f);
        col.frame_mut(0).copy_from_slice(row.frame(0));
        let g = sample_grid(&net, &row, &col, 4, 9, None, false).unwrap();
        for t in 0..3 {
            assert_eq!(g.frame(0, t), row.frame(t));
        }
        for v in 0..2 {
            assert_eq!(g.frame(v, 0), col.frame(v));
        }
        assert_eq!(g, sample_grid(&net, &row, &col, 4, 9, None, false).unwrap());
        assert_ne!(g, sample_grid(&net, &row, &col, 4, 10, None, false).unwrap());

        let mut bad = col.clone();
        bad.frame_mut(0)[0] += 0.1;
        assert!(matches!(sample_grid(&net, &row, &bad, 4, 9, None, false), Err(Error::Precondition(_))));
        assert!(sample_grid(&net, &row, &col, 0, 9, None, false).is_err());
    }

    #[test]
    fn non_finite_state_reports_step() {
        let f = FrameShape::new(1, 1, 1);
        let net = LinearStub { frame: f, a: f32::INFINITY, b: 0.0 };
        let row = Video { frame: f, len: 2, data: vec![0.5, 0.5] };
        let col = Video { frame: f, len: 2, data: vec![0.5, 0.5] };
        assert!(matches!(sample_grid(&net, &row, &col, 3, 0, None, false), Err(Error::SamplerNonFinite { step: 0 })));
    }

    #[test]
    fn extension_preserves_original_region() {
        let f = FrameShape::new(2, 2, 1);
        let net = LinearStub { frame: f, a: 0.3, b: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = FrameGrid {
            v: 3,
            t: 4,
            frame: f,
            data: (0..48).map(|_| rand::Rng::gen::<f32>(&mut rng)).collect(),
        };
        assert_eq!(extend_grid(&net, &grid, ExtendAxis::Time, 0, 2, None, 3, 0).unwrap(), grid);
        let wide = extend_grid(&net, &grid, ExtendAxis::Time, 3, 2, None, 3, 0).unwrap();
        assert_eq!((wide.v, wide.t), (3, 7));
        for v in 0..3 {
            for t in 0..4 {
                assert_eq!(wide.frame(v, t), grid.frame(v, t));
            }
        }
        let tall = extend_grid(&net, &grid, ExtendAxis::View, 2, 1, None, 3, 0).unwrap();
        assert_eq!((tall.v, tall.t), (5, 4));
        assert_eq!(&tall.data[..grid.data.len()], &grid.data[..]);

        let edge = video(&mut rng, 3, f);
        let e = extend_grid(&net, &grid, ExtendAxis::Time, 3, 2, Some(&edge), 3, 0).unwrap();
        for k in 0..3 {
            assert_eq!(e.frame(0, 4 + k), edge.frame(k));
        }
        assert!(matches!(
            extend_grid(&net, &grid, ExtendAxis::Time, 7, 2, None, 3, 0),
            Err(Error::Precondition(_))
        ));
        assert!(extend_grid(&net, &grid, ExtendAxis::Time, 1, 0, None, 3, 0).is_err());
    }
}
