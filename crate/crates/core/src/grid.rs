//! Frame grids, token grids and masks.
//!
//! A [`FrameGrid`] is indexed `(v, t)`: row `v` is a fixed-view video over time,
//! column `t` is a freeze-time video sweeping the viewpoints.

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl FrameShape {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patches per frame for patch side `p`, or an error if `p` does not divide the frame.
    pub fn patches(&self, p: usize) -> Result<usize> {
        if p == 0 || self.h % p != 0 || self.w % p != 0 {
            return Err(Error::Dimension {
                axis: "patch",
                detail: format!("frame {}x{} is not divisible by patch side {p}", self.h, self.w),
            });
        }
        Ok((self.h / p) * (self.w / p))
    }
}

/// A sequence of frames stored contiguously `[F][H][W][C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Video<T = f32> {
    pub frame: FrameShape,
    pub len: usize,
    pub data: Vec<T>,
}

impl<T: Real> Video<T> {
    pub fn zeros(len: usize, frame: FrameShape) -> Self {
        Self {
            frame,
            len,
            data: vec![T::zero(); len * frame.len()],
        }
    }

    pub fn from_frames(frame: FrameShape, frames: &[&[T]]) -> Self {
        let mut data = Vec::with_capacity(frames.len() * frame.len());
        for f in frames {
            debug_assert_eq!(f.len(), frame.len());
            data.extend_from_slice(f);
        }
        Self {
            frame,
            len: frames.len(),
            data,
        }
    }

    pub fn frame(&self, i: usize) -> &[T] {
        let n = self.frame.len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.frame.len();
        &mut self.data[i * n..(i + 1) * n]
    }
}

/// `V x T` grid of frames, stored `[V][T][H][W][C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGrid<T = f32> {
    pub v: usize,
    pub t: usize,
    pub frame: FrameShape,
    pub data: Vec<T>,
}

impl<T: Real> FrameGrid<T> {
    pub fn zeros(v: usize, t: usize, frame: FrameShape) -> Self {
        Self {
            v,
            t,
            frame,
            data: vec![T::zero(); v * t * frame.len()],
        }
    }

    pub fn from_fn(v: usize, t: usize, frame: FrameShape, mut f: impl FnMut(usize, usize, usize, usize, usize) -> T) -> Self {
        let mut g = Self::zeros(v, t, frame);
        for vi in 0..v {
            for ti in 0..t {
                let fr = g.frame_mut(vi, ti);
                for y in 0..frame.h {
                    for x in 0..frame.w {
                        for c in 0..frame.c {
                            fr[(y * frame.w + x) * frame.c + c] = f(vi, ti, y, x, c);
                        }
                    }
                }
            }
        }
        g
    }

    pub fn frame_index(&self, v: usize, t: usize) -> usize {
        v * self.t + t
    }

    pub fn frame(&self, v: usize, t: usize) -> &[T] {
        let n = self.frame.len();
        let i = self.frame_index(v, t);
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, v: usize, t: usize) -> &mut [T] {
        let n = self.frame.len();
        let i = self.frame_index(v, t);
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn same_shape(&self, other: &FrameGrid<T>) -> bool {
        self.v == other.v && self.t == other.t && self.frame == other.frame
    }

    pub fn ensure_same_shape(&self, other: &FrameGrid<T>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "grid {}x{} of {:?} vs {}x{} of {:?}",
                self.v, self.t, self.frame, other.v, other.t, other.frame
            )))
        }
    }

    /// Fixed-view video of viewpoint `v`, in timestep order.
    pub fn row_video(&self, v: usize) -> Result<Video<T>> {
        if v >= self.v {
            return Err(Error::Index { axis: "view", index: v, len: self.v });
        }
        let frames: Vec<&[T]> = (0..self.t).map(|t| self.frame(v, t)).collect();
        Ok(Video::from_frames(self.frame, &frames))
    }

    /// Freeze-time video of timestep `t`, in viewpoint order.
    pub fn column_video(&self, t: usize) -> Result<Video<T>> {
        if t >= self.t {
            return Err(Error::Index { axis: "time", index: t, len: self.t });
        }
        let frames: Vec<&[T]> = (0..self.v).map(|v| self.frame(v, t)).collect();
        Ok(Video::from_frames(self.frame, &frames))
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> FrameGrid<U> {
        FrameGrid {
            v: self.v,
            t: self.t,
            frame: self.frame,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Copy of the sub-grid of columns `t0..t1`.
    pub fn columns(&self, t0: usize, t1: usize) -> FrameGrid<T> {
        let mut out = FrameGrid::zeros(self.v, t1 - t0, self.frame);
        for v in 0..self.v {
            for t in t0..t1 {
                out.frame_mut(v, t - t0).copy_from_slice(self.frame(v, t));
            }
        }
        out
    }

    /// Copy of the sub-grid of rows `v0..v1`.
    pub fn rows(&self, v0: usize, v1: usize) -> FrameGrid<T> {
        let mut out = FrameGrid::zeros(v1 - v0, self.t, self.frame);
        for v in v0..v1 {
            for t in 0..self.t {
                out.frame_mut(v - v0, t).copy_from_slice(self.frame(v, t));
            }
        }
        out
    }

    /// Swap the view and time axes.
    pub fn transpose(&self) -> FrameGrid<T> {
        let mut out = FrameGrid::zeros(self.t, self.v, self.frame);
        for v in 0..self.v {
            for t in 0..self.t {
                out.frame_mut(t, v).copy_from_slice(self.frame(v, t));
            }
        }
        out
    }

    /// A grid with a single row holding `video`.
    pub fn from_row(video: &Video<T>) -> Self {
        Self {
            v: 1,
            t: video.len,
            frame: video.frame,
            data: video.data.clone(),
        }
    }

    /// A grid with a single column holding `video`.
    pub fn from_column(video: &Video<T>) -> Self {
        Self {
            v: video.len,
            t: 1,
            frame: video.frame,
            data: video.data.clone(),
        }
    }
}

/// Check every [`FrameGrid`] invariant: non-empty axes, matching storage, finite values in `[0, 1]`.
pub fn validate_grid(g: &FrameGrid<f32>) -> Result<()> {
    let axes = [
        ("V", g.v),
        ("T", g.t),
        ("H", g.frame.h),
        ("W", g.frame.w),
        ("C", g.frame.c),
    ];
    for (axis, n) in axes {
        if n == 0 {
            return Err(Error::Dimension {
                axis,
                detail: "axis length must be at least 1".into(),
            });
        }
    }
    let want = g.v * g.t * g.frame.len();
    if g.data.len() != want {
        return Err(Error::Dimension {
            axis: "data",
            detail: format!("storage holds {} values, shape requires {want}", g.data.len()),
        });
    }
    let f = g.frame;
    for (i, &x) in g.data.iter().enumerate() {
        if !x.is_finite() || !(0.0..=1.0).contains(&x) {
            let c = i % f.c;
            let xx = (i / f.c) % f.w;
            let y = (i / (f.c * f.w)) % f.h;
            let fi = i / f.len();
            return Err(Error::ValueRange {
                coord: format!("(v={}, t={}, y={y}, x={xx}, c={c})", fi / g.t, fi % g.t),
                value: x as f64,
            });
        }
    }
    Ok(())
}

/// Marks the frames supplied clean as conditioning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMask {
    pub v: usize,
    pub t: usize,
    pub given: Vec<bool>,
}

impl GridMask {
    pub fn none(v: usize, t: usize) -> Self {
        Self {
            v,
            t,
            given: vec![false; v * t],
        }
    }

    /// Row 0 and column 0 given: the conditioning layout of the grid sampler.
    pub fn first_row_and_column(v: usize, t: usize) -> Self {
        let mut m = Self::none(v, t);
        for ti in 0..t {
            m.set(0, ti, true);
        }
        for vi in 0..v {
            m.set(vi, 0, true);
        }
        m
    }

    pub fn get(&self, v: usize, t: usize) -> bool {
        self.given[v * self.t + t]
    }

    pub fn set(&mut self, v: usize, t: usize, given: bool) {
        self.given[v * self.t + t] = given;
    }

    pub fn any(&self) -> bool {
        self.given.iter().any(|&g| g)
    }

    pub fn all(&self) -> bool {
        self.given.iter().all(|&g| g)
    }

    pub fn count_given(&self) -> usize {
        self.given.iter().filter(|&&g| g).count()
    }
}

/// Per-frame patch tokens, stored `[V][T][P][D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<T> {
    pub v: usize,
    pub t: usize,
    pub p: usize,
    pub d: usize,
    pub data: Vec<T>,
}

impl<T: Real> TokenGrid<T> {
    pub fn zeros(v: usize, t: usize, p: usize, d: usize) -> Self {
        Self {
            v,
            t,
            p,
            d,
            data: vec![T::zero(); v * t * p * d],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.p * self.d
    }

    pub fn frame(&self, v: usize, t: usize) -> &[T] {
        let n = self.frame_len();
        let i = v * self.t + t;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, v: usize, t: usize) -> &mut [T] {
        let n = self.frame_len();
        let i = v * self.t + t;
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn same_shape(&self, o: &TokenGrid<T>) -> bool {
        self.v == o.v && self.t == o.t && self.p == o.p && self.d == o.d
    }

    pub fn ensure_same_shape(&self, o: &TokenGrid<T>) -> Result<()> {
        if self.same_shape(o) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "token grids [{}][{}][{}][{}] vs [{}][{}][{}][{}]",
                self.v, self.t, self.p, self.d, o.v, o.t, o.p, o.d
            )))
        }
    }

    /// Tokens of column `t` (all viewpoints), contiguous `[V*P][D]`.
    pub fn gather_column(&self, t: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.v * self.frame_len());
        for v in 0..self.v {
            out.extend_from_slice(self.frame(v, t));
        }
        out
    }

    /// Tokens of row `v` (all timesteps), contiguous `[T*P][D]`.
    pub fn gather_row(&self, v: usize) -> Vec<T> {
        let n = self.frame_len();
        self.data[v * self.t * n..(v + 1) * self.t * n].to_vec()
    }

    pub fn scatter_column(&mut self, t: usize, src: &[T]) {
        let n = self.frame_len();
        for v in 0..self.v {
            self.frame_mut(v, t).copy_from_slice(&src[v * n..(v + 1) * n]);
        }
    }

    pub fn scatter_row(&mut self, v: usize, src: &[T]) {
        let n = self.frame_len();
        self.data[v * self.t * n..(v + 1) * self.t * n].copy_from_slice(src);
    }
}

/// Raster-ordered `p x p x C` patches of one frame, `[P][p*p*C]`.
pub fn extract_patches<T: Real>(frame: &[T], shape: FrameShape, p: usize, out: &mut [T]) {
    let (h, w, c) = (shape.h, shape.w, shape.c);
    let pd = p * p * c;
    let pw = w / p;
    for py in 0..h / p {
        for px in 0..pw {
            let k = py * pw + px;
            let dst = &mut out[k * pd..(k + 1) * pd];
            for dy in 0..p {
                let y = py * p + dy;
                let src = &frame[(y * w + px * p) * c..(y * w + px * p + p) * c];
                dst[dy * p * c..(dy + 1) * p * c].copy_from_slice(src);
            }
        }
    }
}

/// Inverse of [`extract_patches`].
pub fn place_patches<T: Real>(patches: &[T], shape: FrameShape, p: usize, frame: &mut [T]) {
    let (h, w, c) = (shape.h, shape.w, shape.c);
    let pd = p * p * c;
    let pw = w / p;
    for py in 0..h / p {
        for px in 0..pw {
            let k = py * pw + px;
            let src = &patches[k * pd..(k + 1) * pd];
            for dy in 0..p {
                let y = py * p + dy;
                frame[(y * w + px * p) * c..(y * w + px * p + p) * c]
                    .copy_from_slice(&src[dy * p * c..(dy + 1) * p * c]);
            }
        }
    }
}

/// Tokenize every frame: token `(v, t, k)` is `embed` applied to the `k`-th raster patch.
pub fn patchify<T: Real>(g: &FrameGrid<T>, p: usize, embed: &Linear<T>) -> Result<TokenGrid<T>> {
    let np = g.frame.patches(p)?;
    let pd = p * p * g.frame.c;
    if embed.inp != pd {
        return Err(Error::Shape(format!(
            "embedding expects {} inputs, patch has {pd}",
            embed.inp
        )));
    }
    let mut tg = TokenGrid::zeros(g.v, g.t, np, embed.out);
    let mut patches = vec![T::zero(); np * pd];
    for v in 0..g.v {
        for t in 0..g.t {
            extract_patches(g.frame(v, t), g.frame, p, &mut patches);
            embed.forward_into(&patches, np, tg.frame_mut(v, t));
        }
    }
    Ok(tg)
}

/// Project every token back to a patch and place patches in raster order.
pub fn unpatchify<T: Real>(
    tg: &TokenGrid<T>,
    frame: FrameShape,
    p: usize,
    project: &Linear<T>,
) -> Result<FrameGrid<T>> {
    let np = frame.patches(p)?;
    if np != tg.p || np * p * p != frame.h * frame.w {
        return Err(Error::Shape(format!(
            "{} tokens per frame cannot tile a {}x{} frame with patch side {p}",
            tg.p, frame.h, frame.w
        )));
    }
    let pd = p * p * frame.c;
    if project.inp != tg.d || project.out != pd {
        return Err(Error::Shape(format!(
            "projection {}->{} does not map D={} to patch size {pd}",
            project.inp, project.out, tg.d
        )));
    }
    let mut g = FrameGrid::zeros(tg.v, tg.t, frame);
    let mut patches = vec![T::zero(); np * pd];
    for v in 0..tg.v {
        for t in 0..tg.t {
            project.forward_into(tg.frame(v, t), np, &mut patches);
            place_patches(&patches, frame, p, g.frame_mut(v, t));
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(v: usize, t: usize, frame: FrameShape) -> FrameGrid<f32> {
        let n = (v * t * frame.len()) as f32;
        let mut i = 0.0;
        FrameGrid::from_fn(v, t, frame, |_, _, _, _, _| {
            i += 1.0;
            (i - 1.0) / n
        })
    }

    #[test]
    fn accepts_8x8_grid_of_32px_frames() {
        let g = ramp(8, 8, FrameShape::new(32, 32, 3));
        validate_grid(&g).unwrap();
    }

    #[test]
    fn rejects_nan_and_empty_axes() {
        let mut g = ramp(2, 2, FrameShape::new(4, 4, 3));
        g.data[0] = f32::NAN;
        let err = validate_grid(&g).unwrap_err();
        assert!(matches!(err, Error::ValueRange { .. }), "{err}");
        assert!(err.to_string().contains("v=0, t=0"));

        let mut g = ramp(2, 2, FrameShape::new(4, 4, 3));
        g.data[5] = 1.5;
        assert!(matches!(validate_grid(&g), Err(Error::ValueRange { .. })));

        let g = FrameGrid::<f32>::zeros(0, 3, FrameShape::new(4, 4, 3));
        match validate_grid(&g) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "V"),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn rows_and_columns_are_transposes() {
        let g = ramp(3, 4, FrameShape::new(2, 2, 3));
        for v in 0..3 {
            let row = g.row_video(v).unwrap();
            assert_eq!(row.len, 4);
            for t in 0..4 {
                let col = g.column_video(t).unwrap();
                assert_eq!(col.len, 3);
                assert_eq!(row.frame(t), col.frame(v));
                assert_eq!(row.frame(t), g.frame(v, t));
            }
        }
        assert!(matches!(g.row_video(3), Err(Error::Index { .. })));
        assert!(matches!(g.column_video(4), Err(Error::Index { .. })));
    }

    #[test]
    fn degenerate_axes_return_whole_grid() {
        let g = ramp(1, 5, FrameShape::new(2, 2, 3));
        assert_eq!(g.row_video(0).unwrap().data, g.data);
        let g = ramp(5, 1, FrameShape::new(2, 2, 3));
        assert_eq!(g.column_video(0).unwrap().data, g.data);
    }

    #[test]
    fn patch_count_and_pixel_tokens() {
        assert_eq!(FrameShape::new(32, 32, 3).patches(8).unwrap(), 16);
        assert!(FrameShape::new(30, 32, 3).patches(8).is_err());

        let g = ramp(2, 2, FrameShape::new(3, 2, 3));
        let tg = patchify(&g, 1, &Linear::identity(3)).unwrap();
        assert_eq!(tg.p, 6);
        assert_eq!(tg.data, g.data);
    }

    #[test]
    fn unpatchify_rejects_mismatched_token_count() {
        let tg = TokenGrid::<f32>::zeros(1, 1, 3, 12);
        let err = unpatchify(&tg, FrameShape::new(4, 4, 3), 2, &Linear::identity(12));
        assert!(matches!(err, Err(Error::Shape(_))));

        let tg = TokenGrid::<f32>::zeros(1, 2, 4, 12);
        let g = unpatchify(&tg, FrameShape::new(4, 4, 3), 2, &Linear::identity(12)).unwrap();
        assert!(g.data.iter().all(|&x| x == 0.0));
    }

    proptest! {
        #[test]
        fn identity_patch_round_trip_is_exact(
            v in 1usize..4, t in 1usize..4, hp in 1usize..4, wp in 1usize..4, p in 1usize..4,
            seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let frame = FrameShape::new(hp * p, wp * p, 3);
            let g = FrameGrid::from_fn(v, t, frame, |_, _, _, _, _| rng.gen::<f32>());
            let id = Linear::identity(p * p * 3);
            let back = unpatchify(&patchify(&g, p, &id).unwrap(), frame, p, &id).unwrap();
            prop_assert_eq!(back, g);
        }
    }
}
