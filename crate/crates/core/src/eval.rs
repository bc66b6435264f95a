//! Evaluation against ground-truth grids, consistency proxies and
//! synchronization diagnostics.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::grid::{FrameGrid, GridMask};
use crate::sample::{sample_masked, GridDenoiser, SampleRecord};
use crate::sync::SyncTrace;

/// Reported in place of +inf for identical frames.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PsnrReport {
    pub mean: f64,
    /// `(v, t, psnr)` for every scored frame, row-major.
    pub per_frame: Vec<(usize, usize, f64)>,
}

fn frame_psnr(a: &[f32], b: &[f32]) -> f64 {
    let mse = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Mean per-frame PSNR (peak 1) over the frames not marked in `exclude_given`.
pub fn psnr_grid(gen: &FrameGrid<f32>, gt: &FrameGrid<f32>, exclude_given: &GridMask) -> Result<PsnrReport> {
    gen.ensure_same_shape(gt)?;
    if (exclude_given.v, exclude_given.t) != (gt.v, gt.t) {
        return Err(Error::Shape(format!(
            "mask is {}x{} but grids are {}x{}",
            exclude_given.v, exclude_given.t, gt.v, gt.t
        )));
    }
    let mut per_frame = Vec::new();
    for v in 0..gt.v {
        for t in 0..gt.t {
            if !exclude_given.get(v, t) {
                per_frame.push((v, t, frame_psnr(gen.frame(v, t), gt.frame(v, t))));
            }
        }
    }
    if per_frame.is_empty() {
        return Err(Error::NothingToScore);
    }
    let mean = per_frame.iter().map(|p| p.2).sum::<f64>() / per_frame.len() as f64;
    Ok(PsnrReport { mean, per_frame })
}

fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64
}

/// Mean over rows of the mean absolute difference between consecutive frames.
pub fn row_temporal_smoothness(g: &FrameGrid<f32>) -> Result<f64> {
    if g.t < 2 || g.v == 0 {
        return Err(Error::Dimension {
            axis: "t",
            detail: format!("temporal smoothness needs at least 2 frames per row, got {}", g.t),
        });
    }
    let total: f64 = (0..g.v)
        .map(|v| (1..g.t).map(|t| mean_abs_diff(g.frame(v, t), g.frame(v, t - 1))).sum::<f64>() / (g.t - 1) as f64)
        .sum();
    Ok(total / g.v as f64)
}

/// Mean over columns of the mean absolute difference between consecutive views.
pub fn column_view_smoothness(g: &FrameGrid<f32>) -> Result<f64> {
    if g.v < 2 || g.t == 0 {
        return Err(Error::Dimension {
            axis: "v",
            detail: format!("view smoothness needs at least 2 views per column, got {}", g.v),
        });
    }
    let total: f64 = (0..g.t)
        .map(|t| (1..g.v).map(|v| mean_abs_diff(g.frame(v, t), g.frame(v - 1, t))).sum::<f64>() / (g.v - 1) as f64)
        .sum();
    Ok(total / g.t as f64)
}

/// Fractional ranks, ties averaged.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape(format!("spearman needs two equal series of length >= 2, got {} and {}", x.len(), y.len())));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Synchronization statistics over a sampler run. Layer `l` in `1..=L`
/// refers to the state after the sync of block `l - 1`; layer 0 is the
/// embedding, where no update has been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsTrace {
    pub layers: usize,
    pub steps: Vec<SyncTrace>,
}

/// One CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagRow {
    pub step: usize,
    pub layer: usize,
    pub rel_update_v: f64,
    pub rel_update_t: f64,
    pub stream_cosine: f64,
}

impl DiagnosticsTrace {
    pub fn from_record(record: &SampleRecord) -> Result<Self> {
        let first = record.traces.first().ok_or_else(|| Error::Invalid("sampler record holds no sync traces".into()))?;
        let layers = first.rel_update_v.len();
        for s in &record.traces {
            if s.rel_update_v.len() != layers || s.rel_update_t.len() != layers || s.stream_cosine.len() != layers + 1 {
                return Err(Error::Shape("sync traces disagree on layer count".into()));
            }
        }
        Ok(Self {
            layers,
            steps: record.traces.clone(),
        })
    }

    pub fn rows(&self) -> Vec<DiagRow> {
        let mut out = Vec::with_capacity(self.steps.len() * (self.layers + 1));
        for (step, s) in self.steps.iter().enumerate() {
            for layer in 0..=self.layers {
                let (rv, rt) = if layer == 0 {
                    (0.0, 0.0)
                } else {
                    (s.rel_update_v[layer - 1], s.rel_update_t[layer - 1])
                };
                out.push(DiagRow {
                    step,
                    layer,
                    rel_update_v: rv,
                    rel_update_t: rt,
                    stream_cosine: s.stream_cosine[layer],
                });
            }
        }
        out
    }

    fn mean_over_steps(&self, f: impl Fn(&SyncTrace, usize) -> f64, range: std::ops::RangeInclusive<usize>) -> Vec<f64> {
        let n = self.steps.len().max(1) as f64;
        range.map(|l| self.steps.iter().map(|s| f(s, l)).sum::<f64>() / n).collect()
    }

    /// Step-averaged `½ (rel_update_v + rel_update_t)` for layers `1..=L`.
    pub fn mean_rel_update(&self) -> Vec<f64> {
        self.mean_over_steps(|s, l| 0.5 * (s.rel_update_v[l - 1] + s.rel_update_t[l - 1]), 1..=self.layers)
    }

    /// Step-averaged stream cosine for layers `0..=L`.
    pub fn mean_cosine(&self) -> Vec<f64> {
        self.mean_over_steps(|s, l| s.stream_cosine[l], 0..=self.layers)
    }

    /// Rank correlation between depth and step-averaged update magnitude.
    pub fn depth_correlation(&self) -> Result<f64> {
        let depth: Vec<f64> = (1..=self.layers).map(|l| l as f64).collect();
        spearman(&depth, &self.mean_rel_update())
    }

    /// Cosine starts at 1 and some intermediate layer sits below the final one.
    pub fn drift_then_resync(&self) -> bool {
        let c = self.mean_cosine();
        let last = c[self.layers];
        c[0] == 1.0 && c[1..self.layers].iter().any(|&x| x < last)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,layer,rel_update_v,rel_update_t,stream_cosine\n");
        for r in self.rows() {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.layer, r.rel_update_v, r.rel_update_t, r.stream_cosine);
        }
        s
    }

    /// Writes `diagnostics.csv` and one PNG per series into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("diagnostics.csv"), self.to_csv())?;
        let series: [(&str, fn(&DiagRow) -> f64); 3] = [
            ("rel_update_v", |r| r.rel_update_v),
            ("rel_update_t", |r| r.rel_update_t),
            ("stream_cosine", |r| r.stream_cosine),
        ];
        let rows = self.rows();
        for (name, get) in series {
            let curves: Vec<Vec<f64>> = (0..self.steps.len())
                .map(|k| rows[k * (self.layers + 1)..(k + 1) * (self.layers + 1)].iter().map(get).collect())
                .collect();
            let img = plot_curves(&curves);
            let path = dir.join(format!("{name}.png"));
            img.save(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line plot over layer index: one light curve per sampler step, the step mean in black.
pub fn plot_curves(curves: &[Vec<f64>]) -> RgbImage {
    const W: u32 = 320;
    const H: u32 = 200;
    const M: i64 = 16;
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (M, H as i64 - M), (W as i64 - M, H as i64 - M), axis);
    draw_line(&mut img, (M, M), (M, H as i64 - M), axis);
    let n = curves.first().map_or(0, Vec::len);
    if n == 0 {
        return img;
    }
    let finite = curves.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, lo.max(0.0) + 1.0) };
    let px = |i: usize| M + ((W as i64 - 2 * M) as f64 * i as f64 / (n.max(2) - 1) as f64) as i64;
    let py = |v: f64| (H as i64 - M) - ((H as i64 - 2 * M) as f64 * (v - lo) / (hi - lo)) as i64;
    let mean: Vec<f64> = (0..n).map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64).collect();
    for (c, color) in curves.iter().map(|c| (c, Rgb([170, 190, 230]))).chain([(&mean, Rgb([0, 0, 0]))]) {
        for i in 1..n {
            if c[i - 1].is_finite() && c[i].is_finite() {
                draw_line(&mut img, (px(i - 1), py(c[i - 1])), (px(i), py(c[i])), color);
            }
        }
    }
    img
}

/// Sample the unknown frames of `gt` under `mask` with tracing on and collect the diagnostics.
pub fn trace_diagnostics(
    net: &dyn GridDenoiser,
    gt: &FrameGrid<f32>,
    mask: &GridMask,
    steps: usize,
    seed: u64,
) -> Result<(FrameGrid<f32>, DiagnosticsTrace)> {
    let mut rec = SampleRecord::default();
    let out = sample_masked(net, gt, mask, steps, seed, Some(&mut rec), true)?;
    Ok((out, DiagnosticsTrace::from_record(&rec)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridScore {
    pub psnr: f64,
    pub row_smooth: f64,
    pub col_smooth: f64,
}

pub fn score_grid(gen: &FrameGrid<f32>, gt: &FrameGrid<f32>, mask: &GridMask) -> Result<GridScore> {
    Ok(GridScore {
        psnr: psnr_grid(gen, gt, mask)?.mean,
        row_smooth: row_temporal_smoothness(gen)?,
        col_smooth: column_view_smoothness(gen)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub row_smooth: f64,
    pub col_smooth: f64,
}

/// Mean and sample standard deviation of PSNR, mean smoothness.
pub fn summarize(variant: &str, scores: &[GridScore]) -> Result<ReportRow> {
    if scores.is_empty() {
        return Err(Error::NothingToScore);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().map(|s| s.psnr).sum::<f64>() / n;
    let var = if scores.len() > 1 {
        scores.iter().map(|s| (s.psnr - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(ReportRow {
        variant: variant.to_string(),
        psnr_mean: mean,
        psnr_std: var.sqrt(),
        row_smooth: scores.iter().map(|s| s.row_smooth).sum::<f64>() / n,
        col_smooth: scores.iter().map(|s| s.col_smooth).sum::<f64>() / n,
    })
}

/// Score every variant on the same test grids, once per seed. Seed `k` of
/// grid `i` samples with seed `seeds[k] ^ i`.
pub fn ablation_report(
    variants: &[(String, &dyn GridDenoiser)],
    test: &[FrameGrid<f32>],
    mask: &GridMask,
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<ReportRow>> {
    let first = test.first().ok_or(Error::NothingToScore)?;
    for g in test {
        g.ensure_same_shape(first)?;
    }
    for (name, net) in variants {
        if net.frame() != first.frame {
            return Err(Error::Shape(format!("variant {name} expects {:?} frames, test set has {:?}", net.frame(), first.frame)));
        }
    }
    variants
        .iter()
        .map(|(name, net)| {
            let mut scores = Vec::with_capacity(test.len() * seeds.len());
            for &seed in seeds {
                for (i, gt) in test.iter().enumerate() {
                    let gen = sample_masked(*net, gt, mask, steps, seed ^ i as u64, None, false)?;
                    scores.push(score_grid(&gen, gt, mask)?);
                }
            }
            summarize(name, &scores)
        })
        .collect()
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("variant,psnr_mean,psnr_std,row_smooth,col_smooth\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.variant, r.psnr_mean, r.psnr_std, r.row_smooth, r.col_smooth);
    }
    s
}

pub fn report_table(rows: &[ReportRow]) -> String {
    let head = ["variant", "psnr (dB)", "row_smooth", "col_smooth"];
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.variant.clone(),
                format!("{:.3} ± {:.3}", r.psnr_mean, r.psnr_std),
                format!("{:.5}", r.row_smooth),
                format!("{:.5}", r.col_smooth),
            ]
        })
        .collect();
    let width: Vec<usize> = (0..4)
        .map(|i| cells.iter().map(|c| c[i].chars().count()).chain([head[i].len()]).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    let line = |s: &mut String, c: [&str; 4]| {
        let _ = writeln!(
            s,
            "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}",
            c[0],
            c[1],
            c[2],
            c[3],
            w0 = width[0],
            w1 = width[1],
            w2 = width[2],
            w3 = width[3]
        );
    };
    line(&mut s, head);
    for c in &cells {
        line(&mut s, [&c[0], &c[1], &c[2], &c[3]]);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FrameShape;
    use crate::rng::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(v: usize, t: usize, val: f32) -> FrameGrid<f32> {
        FrameGrid::from_fn(v, t, FrameShape::new(4, 4, 3), |_, _, _, _, _| val)
    }

    #[test]
    fn psnr_trivial_cases() {
        let a = constant(2, 2, 0.3);
        let none = GridMask::none(2, 2);
        assert_eq!(psnr_grid(&a, &a, &none).unwrap().mean, PSNR_CAP);
        assert_eq!(psnr_grid(&constant(2, 2, 0.0), &constant(2, 2, 1.0), &none).unwrap().mean, 0.0);
        let mut all = GridMask::none(2, 2);
        all.given.iter_mut().for_each(|g| *g = true);
        assert!(matches!(psnr_grid(&a, &a, &all), Err(Error::NothingToScore)));
        assert!(psnr_grid(&a, &constant(2, 3, 0.3), &none).is_err());
        let r = psnr_grid(&a, &constant(2, 2, 0.2), &GridMask::first_row_and_column(2, 2)).unwrap();
        assert_eq!(r.per_frame.len(), 1);
        assert_eq!((r.per_frame[0].0, r.per_frame[0].1), (1, 1));
    }

    #[test]
    fn psnr_of_gaussian_noise_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = FrameShape::new(64, 64, 3);
        let gt = FrameGrid::from_fn(2, 2, shape, |_, _, _, _, _| 0.5f32);
        let mut noisy = gt.clone();
        noisy.data.iter_mut().for_each(|x| *x += 0.1 * normal::<f32>(&mut rng));
        let p = psnr_grid(&noisy, &gt, &GridMask::none(2, 2)).unwrap().mean;
        let oracle = 10.0 * (1.0 / 0.01f64).log10();
        assert!((p - oracle).abs() < 0.5, "{p}");
    }

    #[test]
    fn psnr_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = constant(2, 3, 0.0);
        let mut b = a.clone();
        a.data.iter_mut().chain(b.data.iter_mut()).for_each(|x| *x = normal::<f32>(&mut rng));
        let m = GridMask::none(2, 3);
        assert_eq!(psnr_grid(&a, &b, &m).unwrap(), psnr_grid(&b, &a, &m).unwrap());
    }

    #[test]
    fn smoothness_trivial_and_arithmetic() {
        assert_eq!(row_temporal_smoothness(&constant(2, 3, 0.4)).unwrap(), 0.0);
        assert_eq!(column_view_smoothness(&constant(2, 3, 0.4)).unwrap(), 0.0);
        let alt = FrameGrid::from_fn(2, 4, FrameShape::new(2, 2, 1), |v, t, _, _, _| ((v + t) % 2) as f32);
        assert_eq!(row_temporal_smoothness(&alt).unwrap(), 1.0);
        assert_eq!(column_view_smoothness(&alt).unwrap(), 1.0);
        assert!(row_temporal_smoothness(&constant(2, 1, 0.0)).is_err());
        assert!(column_view_smoothness(&constant(1, 2, 0.0)).is_err());

        // 2x2 grid of 1x1 single-channel frames: [[a, b], [c, d]].
        let vals = [[0.1f32, 0.7], [0.4, 0.25]];
        let g = FrameGrid::from_fn(2, 2, FrameShape::new(1, 1, 1), |v, t, _, _, _| vals[v][t]);
        let row = ((0.7f64 - 0.1).abs() + (0.25f64 - 0.4).abs()) / 2.0;
        let col = ((0.4f64 - 0.1).abs() + (0.25f64 - 0.7).abs()) / 2.0;
        assert!((row_temporal_smoothness(&g).unwrap() - row).abs() < 1e-7);
        assert!((column_view_smoothness(&g).unwrap() - col).abs() < 1e-7);
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn diagnostics_rows_and_csv() {
        let tr = SyncTrace {
            rel_update_v: vec![0.1, 0.3],
            rel_update_t: vec![0.2, 0.5],
            stream_cosine: vec![1.0, 0.8, 0.9],
        };
        let d = DiagnosticsTrace {
            layers: 2,
            steps: vec![tr.clone(), tr],
        };
        assert_eq!(d.rows().len(), 6);
        assert!(d.to_csv().starts_with("step,layer,rel_update_v,rel_update_t,stream_cosine\n0,0,0,0,1\n0,1,0.1,0.2,0.8\n"));
        assert_eq!(d.depth_correlation().unwrap(), 1.0);
        assert!(d.drift_then_resync());
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        for f in ["diagnostics.csv", "rel_update_v.png", "rel_update_t.png", "stream_cosine.png"] {
            assert!(dir.path().join(f).exists());
        }
    }

    #[test]
    fn report_single_row_and_duplicates() {
        let s = GridScore {
            psnr: 20.0,
            row_smooth: 0.1,
            col_smooth: 0.2,
        };
        let a = summarize("soft", &[s]).unwrap();
        assert_eq!(a.psnr_std, 0.0);
        let b = summarize("copy", &[s]).unwrap();
        assert_eq!((a.psnr_mean, a.row_smooth, a.col_smooth), (b.psnr_mean, b.row_smooth, b.col_smooth));
        let csv = report_csv(&[a.clone()]);
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(report_table(&[a, b]).lines().count(), 3);
    }
}
