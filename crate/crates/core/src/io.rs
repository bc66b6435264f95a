//! On-disk formats.
//!
//! 4RGF grid container: `"4RGF"`, u32 version, V, T, H, W, C as u32, dtype
//! tag u8 (0 = f32), then the values in `(v, t, h, w, c)` order. All
//! integers and floats are little-endian.
//!
//! Checkpoint: `"4RCK"`, u32 version, length-prefixed UTF-8 config text,
//! stage tag and variant label, u32 tensor count, then per tensor a
//! length-prefixed name, u32 rank, u32 dims and f32 payload.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::config::RunConfig;
use crate::dit::{ContextMode, VideoModel};
use crate::error::{Error, Result};
use crate::flow::LabeledVideo;
use crate::grid::{FrameGrid, FrameShape, Video};
use crate::nn::Params;
use crate::sync::{SyncStack, SyncVariant};

const GRID_MAGIC: &[u8; 4] = b"4RGF";
const GRID_VERSION: u32 = 1;
const CKPT_MAGIC: &[u8; 4] = b"4RCK";
const CKPT_VERSION: u32 = 1;
pub const SYNC_PREFIX: &str = "sync";

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

pub fn encode_grid(g: &FrameGrid<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * 6 + 1 + 4 * g.data.len());
    out.extend_from_slice(GRID_MAGIC);
    for x in [GRID_VERSION, g.v as u32, g.t as u32, g.frame.h as u32, g.frame.w as u32, g.frame.c as u32] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.push(0);
    for x in &g.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<FrameGrid<f32>> {
    const HEADER: usize = 4 + 4 * 6 + 1;
    if bytes.len() < HEADER || &bytes[..4] != GRID_MAGIC {
        return Err(fmt_err(path, "not a 4RGF grid"));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if u(0) != GRID_VERSION as usize {
        return Err(fmt_err(path, format!("unsupported grid version {}", u(0))));
    }
    let (v, t, h, w, c) = (u(1), u(2), u(3), u(4), u(5));
    if bytes[HEADER - 1] != 0 {
        return Err(fmt_err(path, format!("unsupported dtype tag {}", bytes[HEADER - 1])));
    }
    let n = v
        .checked_mul(t)
        .and_then(|x| x.checked_mul(h))
        .and_then(|x| x.checked_mul(w))
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| fmt_err(path, "grid dimensions overflow"))?;
    if bytes.len() - HEADER != n * 4 {
        return Err(fmt_err(path, format!("payload holds {} bytes, header implies {}", bytes.len() - HEADER, n * 4)));
    }
    let data = bytes[HEADER..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(FrameGrid {
        v,
        t,
        frame: FrameShape::new(h, w, c),
        data,
    })
}

pub fn write_grid(path: &Path, g: &FrameGrid<f32>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, encode_grid(g))?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<FrameGrid<f32>> {
    decode_grid(&read_input(path)?, path)
}

fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn frame_image(frame: &[f32], shape: FrameShape) -> RgbImage {
    RgbImage::from_fn(shape.w as u32, shape.h as u32, |x, y| {
        let base = (y as usize * shape.w + x as usize) * shape.c;
        let px = |ch: usize| to_u8(frame[base + ch.min(shape.c - 1)]);
        Rgb([px(0), px(1), px(2)])
    })
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Tiled `V x T` sheet with a one-pixel gutter.
pub fn contact_sheet(g: &FrameGrid<f32>) -> RgbImage {
    let (fw, fh) = (g.frame.w as u32, g.frame.h as u32);
    let mut img = RgbImage::from_pixel((fw + 1) * g.t as u32 + 1, (fh + 1) * g.v as u32 + 1, Rgb([255, 255, 255]));
    for v in 0..g.v {
        for t in 0..g.t {
            let f = frame_image(g.frame(v, t), g.frame);
            image::imageops::replace(&mut img, &f, ((fw + 1) * t as u32 + 1) as i64, ((fh + 1) * v as u32 + 1) as i64);
        }
    }
    img
}

/// `v{v:03}_t{t:03}.png` per frame plus `contact_sheet.png`.
pub fn export_png(g: &FrameGrid<f32>, dir: &Path) -> Result<()> {
    if g.frame.c == 0 {
        return Err(Error::Shape("cannot export frames with zero channels".into()));
    }
    fs::create_dir_all(dir)?;
    for v in 0..g.v {
        for t in 0..g.t {
            save_png(&frame_image(g.frame(v, t), g.frame), &dir.join(format!("v{v:03}_t{t:03}.png")))?;
        }
    }
    save_png(&contact_sheet(g), &dir.join("contact_sheet.png"))
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

pub fn sampler_csv(steps: &[(usize, f64, f64)]) -> String {
    let mut s = String::from("step,sigma,residual_norm\n");
    for (k, sigma, r) in steps {
        s.push_str(&format!("{k},{sigma},{r}\n"));
    }
    s
}

/// A named f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    /// `base` or `4d`.
    pub stage: String,
    /// Sync variant label, empty for base checkpoints.
    pub variant: String,
    pub tensors: Vec<Tensor>,
}

fn collect<M: Params<f32>>(m: &M, prefix: &str, out: &mut Vec<Tensor>) {
    m.for_each_param(prefix, &mut |name, shape, data| {
        out.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: data.to_vec(),
        })
    });
}

impl Checkpoint {
    pub fn from_model(cfg: &RunConfig, model: &VideoModel<f32>, syncs: Option<&SyncStack<f32>>) -> Self {
        let mut tensors = Vec::new();
        collect(model, "", &mut tensors);
        if let Some(s) = syncs {
            collect(s, SYNC_PREFIX, &mut tensors);
        }
        Self {
            config: cfg.to_text(),
            stage: if syncs.is_some() { "4d" } else { "base" }.into(),
            variant: syncs.map_or(String::new(), |s| s.variant.label().to_string()),
            tensors,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_str(&mut out, &self.config);
        put_str(&mut out, &self.stage);
        put_str(&mut out, &self.variant);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CKPT_MAGIC {
            return Err(fmt_err(path, "not a checkpoint"));
        }
        let mut cur = Cursor { bytes, pos: 4, path };
        let version = cur.u32()?;
        if version != CKPT_VERSION as usize {
            return Err(fmt_err(path, format!("unsupported checkpoint version {version}")));
        }
        let config = cur.string()?;
        let stage = cur.string()?;
        let variant = cur.string()?;
        let n = cur.u32()?;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = cur.string()?;
            let rank = cur.u32()?;
            let shape = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product::<usize>();
            let raw = cur.take(len * 4)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            tensors.push(Tensor { name, shape, data });
        }
        if cur.pos != bytes.len() {
            return Err(fmt_err(path, "trailing bytes after checkpoint"));
        }
        Ok(Self {
            config,
            stage,
            variant,
            tensors,
        })
    }

    fn fill<M: Params<f32>>(&self, m: &mut M, prefix: &str, used: &mut [bool], path: &Path) -> Result<()> {
        let mut err = None;
        m.for_each_param_mut(prefix, &mut |name, shape, data| {
            if err.is_some() {
                return;
            }
            match self.tensors.iter().position(|t| t.name == name) {
                Some(i) if self.tensors[i].shape == shape && self.tensors[i].data.len() == data.len() => {
                    data.copy_from_slice(&self.tensors[i].data);
                    used[i] = true;
                }
                Some(i) => err = Some(fmt_err(path, format!("tensor {name}: shape {:?}, expected {shape:?}", self.tensors[i].shape))),
                None => err = Some(fmt_err(path, format!("missing tensor {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Rebuild the model (and syncs for grid checkpoints) from the embedded config.
    pub fn restore(&self, path: &Path) -> Result<(RunConfig, VideoModel<f32>, Option<SyncStack<f32>>)> {
        let cfg = RunConfig::parse(&self.config)?;
        let mut model = VideoModel::new_zeroed(cfg.model_config());
        let mut used = vec![false; self.tensors.len()];
        self.fill(&mut model, "", &mut used, path)?;
        let syncs = match self.stage.as_str() {
            "base" => None,
            "4d" => {
                let variant = SyncVariant::parse(&self.variant).ok_or_else(|| fmt_err(path, format!("unknown sync variant {:?}", self.variant)))?;
                let mut s = SyncStack::new(variant, &model, cfg.flow.hard_diagonal);
                self.fill(&mut s, SYNC_PREFIX, &mut used, path)?;
                Some(s)
            }
            other => return Err(fmt_err(path, format!("unknown stage {other:?}"))),
        };
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(fmt_err(path, format!("unexpected tensor {}", self.tensors[i].name)));
        }
        Ok((cfg, model, syncs))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(fmt_err(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| fmt_err(self.path, "invalid UTF-8 in checkpoint"))
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    ensure_parent(path)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&ck.encode())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    Checkpoint::decode(&bytes, path)
}

/// Label written in dataset manifests for each entry kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryLabel {
    Dynamic,
    FreezeTime,
    Pseudo,
    Render,
    Test,
}

impl EntryLabel {
    pub fn label(self) -> &'static str {
        match self {
            EntryLabel::Dynamic => "dynamic",
            EntryLabel::FreezeTime => "freeze_time",
            EntryLabel::Pseudo => "pseudo4d",
            EntryLabel::Render => "render4d",
            EntryLabel::Test => "test4d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Dynamic, Self::FreezeTime, Self::Pseudo, Self::Render, Self::Test]
            .into_iter()
            .find(|l| l.label() == s)
    }
}

/// Dataset directory: `grids/*.4rgf` plus `manifest.txt` with one
/// `relative/path label` entry per line. Videos are stored as `1 x F` grids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub entries: Vec<(PathBuf, EntryLabel)>,
}

impl Dataset {
    pub fn write(root: &Path, items: &[(EntryLabel, &FrameGrid<f32>)]) -> Result<Self> {
        fs::create_dir_all(root.join("grids"))?;
        let mut manifest = String::new();
        let mut entries = Vec::with_capacity(items.len());
        let mut counters = [0usize; 5];
        for (label, g) in items {
            let k = *label as usize;
            let rel = PathBuf::from(format!("grids/{}_{:05}.4rgf", label.label(), counters[k]));
            counters[k] += 1;
            write_grid(&root.join(&rel), g)?;
            manifest.push_str(&format!("{} {}\n", rel.display(), label.label()));
            entries.push((rel, *label));
        }
        fs::write(root.join("manifest.txt"), manifest)?;
        Ok(Self { entries })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let (p, lab) = l.trim().rsplit_once(' ').ok_or_else(|| fmt_err(&path, format!("line {}: expected `path label`", i + 1)))?;
                let lab = EntryLabel::parse(lab).ok_or_else(|| fmt_err(&path, format!("line {}: unknown label {lab:?}", i + 1)))?;
                Ok((PathBuf::from(p), lab))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    pub fn grids(&self, root: &Path, label: EntryLabel) -> Result<Vec<FrameGrid<f32>>> {
        self.entries.iter().filter(|(_, l)| *l == label).map(|(p, _)| read_grid(&root.join(p))).collect()
    }

    /// Base-model training videos with their context labels.
    pub fn videos(&self, root: &Path) -> Result<Vec<LabeledVideo>> {
        let mut out = Vec::new();
        for (p, l) in &self.entries {
            let mode = match l {
                EntryLabel::Dynamic => ContextMode::Dynamic,
                EntryLabel::FreezeTime => ContextMode::FreezeTime,
                _ => continue,
            };
            let g = read_grid(&root.join(p))?;
            if g.v != 1 {
                return Err(fmt_err(&root.join(p), format!("video entries must be 1 x F grids, got {} x {}", g.v, g.t)));
            }
            out.push(LabeledVideo { video: g.row_video(0)?, mode });
        }
        Ok(out)
    }
}

pub fn video_as_grid(v: &Video<f32>) -> FrameGrid<f32> {
    FrameGrid::from_row(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn sample_grid() -> FrameGrid<f32> {
        FrameGrid::from_fn(2, 3, FrameShape::new(4, 5, 3), |v, t, y, x, c| (v * 7 + t * 5 + y * 3 + x + c) as f32 / 40.0)
    }

    #[test]
    fn grid_round_trip_and_header() {
        let g = sample_grid();
        let b = encode_grid(&g);
        assert_eq!(&b[..4], b"4RGF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(b[28], 0);
        assert_eq!(b.len(), 29 + 4 * g.data.len());
        assert_eq!(decode_grid(&b, Path::new("x")).unwrap(), g);
        let mut bad = b.clone();
        bad.pop();
        assert!(decode_grid(&bad, Path::new("x")).is_err());
        let mut bad = b;
        bad[0] = b'X';
        assert!(decode_grid(&bad, Path::new("x")).is_err());
    }

    #[test]
    fn png_export_names() {
        let dir = tempfile::tempdir().unwrap();
        export_png(&sample_grid(), dir.path()).unwrap();
        assert!(dir.path().join("v001_t002.png").exists());
        let sheet = image::open(dir.path().join("contact_sheet.png")).unwrap();
        assert_eq!((sheet.width(), sheet.height()), (3 * 6 + 1, 2 * 5 + 1));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.model.layers = 2;
        cfg.model.dim = 8;
        cfg.model.heads = 2;
        cfg.model.patch = 2;
        cfg.model.h = 4;
        cfg.model.w = 4;
        cfg.model.v = 2;
        cfg.model.t = 2;
        cfg.model.freq_dim = 8;
        cfg.variant = SyncVariant::Soft;
        let model = VideoModel::<f32>::new(cfg.model_config(), &mut rng_for(0, "t", 0)).unwrap();
        let mut syncs = SyncStack::new(SyncVariant::Soft, &model, false);
        crate::dit::perturb_params(&mut syncs, &mut rng_for(0, "p", 0), 0.1);
        let ck = Checkpoint::from_model(&cfg, &model, Some(&syncs));
        assert!(ck.tensors.iter().any(|t| t.name.starts_with("sync.0.")));
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes, Path::new("c")).unwrap();
        assert_eq!(back, ck);
        let (c2, m2, s2) = back.restore(Path::new("c")).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(m2, model);
        assert_eq!(s2.unwrap(), syncs);
        let base = Checkpoint::from_model(&cfg, &model, None);
        assert!(base.restore(Path::new("c")).unwrap().2.is_none());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1], Path::new("c")).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = sample_grid();
        let v = FrameGrid::from_row(&g.row_video(0).unwrap());
        let ds = Dataset::write(dir.path(), &[(EntryLabel::Dynamic, &v), (EntryLabel::Pseudo, &g), (EntryLabel::FreezeTime, &v)]).unwrap();
        let back = Dataset::open(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.grids(dir.path(), EntryLabel::Pseudo).unwrap(), vec![g]);
        let vids = back.videos(dir.path()).unwrap();
        assert_eq!(vids.len(), 2);
        assert_eq!(vids[1].mode, ContextMode::FreezeTime);
    }

    #[test]
    fn csv_headers() {
        assert_eq!(loss_csv(&[0.5]), "step,loss\n0,0.5\n");
        assert_eq!(sampler_csv(&[(0, 1.0, 0.25)]), "step,sigma,residual_norm\n0,1,0.25\n");
    }
}
