//! Run configuration as flat `section.key = value` text.
//!
//! Lines starting with `#` are comments. A non-empty file must set
//! `version`; an empty file yields the defaults. Manifests are configs with
//! extra comment lines, so they load back as the config that produced them.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::dit::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::TrainConfig;
use crate::grid::FrameShape;
use crate::sync::SyncVariant;
use crate::synth::{CameraRing, DataSpec, Resample, TrajectoryBounds};

pub const CONFIG_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub v: usize,
    pub t: usize,
    pub mlp_ratio: usize,
    pub freq_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSection {
    pub base_steps: usize,
    pub pseudo_steps: usize,
    pub render_steps: usize,
    pub batch: usize,
    pub grid_batch: usize,
    pub lr: f64,
    pub grid_lr: f64,
    pub warmup: usize,
    pub min_lr_ratio: f64,
    pub clip: f64,
    pub weight_decay: f64,
    pub rho: f64,
    pub q: f64,
    pub freeze_base: bool,
    pub hard_diagonal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSection {
    pub steps: usize,
    pub overlap: usize,
    /// Checkpoint used when `--ckpt` is not given.
    pub ckpt: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    /// Sampling seeds per test grid in ablation reports.
    pub runs: usize,
    /// Test grids traced by `diagnose`.
    pub diag_grids: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub root: String,
    pub dynamic: usize,
    pub freeze: usize,
    pub pseudo: usize,
    pub render: usize,
    pub test: usize,
    pub primitives: usize,
    pub theta_max: f64,
    pub s_max: f64,
    pub t_max: f64,
    pub max_azimuth: f64,
    pub parallax: f64,
    pub resample: Resample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: SyncVariant,
    pub out: String,
    pub model: ModelSection,
    pub flow: FlowSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: SyncVariant::Soft,
            out: "runs/default".into(),
            model: ModelSection {
                layers: 8,
                dim: 128,
                heads: 4,
                patch: 8,
                h: 32,
                w: 32,
                c: 3,
                v: 8,
                t: 8,
                mlp_ratio: 4,
                freq_dim: 64,
            },
            flow: FlowSection {
                base_steps: 20_000,
                pseudo_steps: 3_000,
                render_steps: 3_000,
                batch: 8,
                grid_batch: 2,
                lr: 3e-4,
                grid_lr: 3e-4,
                warmup: 200,
                min_lr_ratio: 0.1,
                clip: 1.0,
                weight_decay: 0.0,
                rho: 0.2,
                q: 0.3,
                freeze_base: true,
                hard_diagonal: false,
            },
            sample: SampleSection {
                steps: 32,
                overlap: 1,
                ckpt: String::new(),
            },
            eval: EvalSection { runs: 1, diag_grids: 16 },
            data: DataSection {
                root: "data".into(),
                dynamic: 512,
                freeze: 512,
                pseudo: 256,
                render: 256,
                test: 32,
                primitives: 3,
                theta_max: 4.0,
                s_max: 0.03,
                t_max: 2.0,
                max_azimuth: 60.0,
                parallax: 0.15,
                resample: Resample::Bilinear,
            },
        }
    }
}

fn parse_val<T: FromStr>(line: usize, key: &str, raw: &str, what: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config {
        line,
        msg: format!("{key}: expected {what}, got {raw:?}"),
    })
}

macro_rules! fields {
    ($($key:literal => $($path:ident).+ : $kind:ident),* $(,)?) => {
        impl RunConfig {
            /// Every key in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn set(&mut self, line: usize, key: &str, raw: &str) -> Result<()> {
                match key {
                    $($key => self.$($path).+ = fields!(@parse $kind, line, key, raw),)*
                    _ => return Err(Error::Config { line, msg: format!("unknown key {key:?}") }),
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, fields!(@show $kind, self.$($path).+))),*]
            }
        }
    };
    (@parse usize, $l:expr, $k:expr, $r:expr) => { parse_val::<usize>($l, $k, $r, "a non-negative integer")? };
    (@parse u64, $l:expr, $k:expr, $r:expr) => { parse_val::<u64>($l, $k, $r, "a non-negative integer")? };
    (@parse f64, $l:expr, $k:expr, $r:expr) => { parse_val::<f64>($l, $k, $r, "a number")? };
    (@parse bool, $l:expr, $k:expr, $r:expr) => { parse_val::<bool>($l, $k, $r, "true or false")? };
    (@parse string, $l:expr, $k:expr, $r:expr) => { $r.to_string() };
    (@parse variant, $l:expr, $k:expr, $r:expr) => {
        SyncVariant::parse($r).ok_or_else(|| Error::Config { line: $l, msg: format!("{}: unknown variant {:?}", $k, $r) })?
    };
    (@parse resample, $l:expr, $k:expr, $r:expr) => {
        Resample::parse($r).ok_or_else(|| Error::Config { line: $l, msg: format!("{}: unknown resampling {:?}", $k, $r) })?
    };
    (@show variant, $v:expr) => { $v.label().to_string() };
    (@show resample, $v:expr) => { $v.label().to_string() };
    (@show $other:ident, $v:expr) => { $v.to_string() };
}

fields! {
    "seed" => seed: u64,
    "variant" => variant: variant,
    "out" => out: string,
    "model.L" => model.layers: usize,
    "model.D" => model.dim: usize,
    "model.heads" => model.heads: usize,
    "model.p" => model.patch: usize,
    "model.H" => model.h: usize,
    "model.W" => model.w: usize,
    "model.C" => model.c: usize,
    "model.V" => model.v: usize,
    "model.T" => model.t: usize,
    "model.mlp_ratio" => model.mlp_ratio: usize,
    "model.freq_dim" => model.freq_dim: usize,
    "flow.base_steps" => flow.base_steps: usize,
    "flow.pseudo_steps" => flow.pseudo_steps: usize,
    "flow.render_steps" => flow.render_steps: usize,
    "flow.batch" => flow.batch: usize,
    "flow.grid_batch" => flow.grid_batch: usize,
    "flow.lr" => flow.lr: f64,
    "flow.grid_lr" => flow.grid_lr: f64,
    "flow.warmup" => flow.warmup: usize,
    "flow.min_lr_ratio" => flow.min_lr_ratio: f64,
    "flow.clip" => flow.clip: f64,
    "flow.weight_decay" => flow.weight_decay: f64,
    "flow.rho" => flow.rho: f64,
    "flow.q" => flow.q: f64,
    "flow.freeze_base" => flow.freeze_base: bool,
    "flow.hard_diagonal" => flow.hard_diagonal: bool,
    "sample.steps" => sample.steps: usize,
    "sample.overlap" => sample.overlap: usize,
    "sample.ckpt" => sample.ckpt: string,
    "eval.runs" => eval.runs: usize,
    "eval.diag_grids" => eval.diag_grids: usize,
    "data.root" => data.root: string,
    "data.dynamic" => data.dynamic: usize,
    "data.freeze" => data.freeze: usize,
    "data.pseudo" => data.pseudo: usize,
    "data.render" => data.render: usize,
    "data.test" => data.test: usize,
    "data.primitives" => data.primitives: usize,
    "data.theta_max" => data.theta_max: f64,
    "data.s_max" => data.s_max: f64,
    "data.t_max" => data.t_max: f64,
    "data.max_azimuth" => data.max_azimuth: f64,
    "data.parallax" => data.parallax: f64,
    "data.resample" => data.resample: resample,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut version_line = None;
        let mut seen: Vec<(String, usize)> = Vec::new();
        let mut any = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            any = true;
            let (k, v) = s.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got {s:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if let Some((_, first)) = seen.iter().find(|(name, _)| name == k) {
                return Err(Error::Config {
                    line,
                    msg: format!("{k} already set on line {first}"),
                });
            }
            seen.push((k.to_string(), line));
            if k == "version" {
                if v != CONFIG_VERSION {
                    return Err(Error::Config {
                        line,
                        msg: format!("unsupported config version {v:?}, expected {CONFIG_VERSION:?}"),
                    });
                }
                version_line = Some(line);
            } else {
                cfg.set(line, k, v)?;
            }
        }
        if any && version_line.is_none() {
            return Err(Error::Config {
                line: 1,
                msg: format!("missing `version = {CONFIG_VERSION}`"),
            });
        }
        cfg.validate(&seen)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn validate(&self, seen: &[(String, usize)]) -> Result<()> {
        let line_of = |key: &str| seen.iter().find(|(k, _)| k == key).map_or(0, |(_, l)| *l);
        let fail = |key: &str, msg: String| Err(Error::Config { line: line_of(key), msg });
        let m = &self.model;
        for (key, val) in [
            ("model.L", m.layers),
            ("model.D", m.dim),
            ("model.heads", m.heads),
            ("model.p", m.patch),
            ("model.V", m.v),
            ("model.T", m.t),
            ("model.C", m.c),
            ("model.mlp_ratio", m.mlp_ratio),
            ("model.freq_dim", m.freq_dim),
            ("flow.batch", self.flow.batch),
            ("flow.grid_batch", self.flow.grid_batch),
            ("sample.steps", self.sample.steps),
            ("sample.overlap", self.sample.overlap),
            ("eval.runs", self.eval.runs),
            ("data.primitives", self.data.primitives),
        ] {
            if val == 0 {
                return fail(key, format!("{key} must be positive"));
            }
        }
        if let Err(e) = self.model_config().validate() {
            return fail("model.D", e.to_string());
        }
        for (key, val) in [("flow.rho", self.flow.rho), ("flow.q", self.flow.q)] {
            if !(0.0..=1.0).contains(&val) {
                return fail(key, format!("{key} must lie in [0, 1], got {val}"));
            }
        }
        for (key, val) in [("flow.lr", self.flow.lr), ("flow.grid_lr", self.flow.grid_lr)] {
            if !(val > 0.0 && val.is_finite()) {
                return fail(key, format!("{key} must be positive, got {val}"));
            }
        }
        if self.out.is_empty() {
            return fail("out", "output root must not be empty".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            layers: m.layers,
            dim: m.dim,
            heads: m.heads,
            patch: m.patch,
            frame: FrameShape::new(m.h, m.w, m.c),
            max_frames: m.v.max(m.t),
            mlp_ratio: m.mlp_ratio,
            freq_dim: m.freq_dim,
        }
    }

    fn train_config(&self, steps: usize, batch: usize, lr: f64) -> TrainConfig {
        let f = &self.flow;
        TrainConfig {
            steps,
            batch,
            lr,
            warmup: f.warmup.min(steps / 2),
            min_lr_ratio: f.min_lr_ratio,
            clip: f.clip,
            weight_decay: f.weight_decay,
            rho: f.rho,
            q: f.q,
            sync_diagonal: f.hard_diagonal,
        }
    }

    pub fn base_train(&self) -> TrainConfig {
        self.train_config(self.flow.base_steps, self.flow.batch, self.flow.lr)
    }

    pub fn pseudo_train(&self) -> TrainConfig {
        self.train_config(self.flow.pseudo_steps, self.flow.grid_batch, self.flow.grid_lr)
    }

    pub fn render_train(&self) -> TrainConfig {
        self.train_config(self.flow.render_steps, self.flow.grid_batch, self.flow.grid_lr)
    }

    pub fn data_spec(&self) -> DataSpec {
        let d = &self.data;
        DataSpec {
            frame: FrameShape::new(self.model.h, self.model.w, self.model.c),
            views: self.model.v,
            frames: self.model.t,
            primitives: d.primitives,
            ring: CameraRing {
                max_azimuth_deg: d.max_azimuth,
                gain: d.parallax,
            },
            bounds: TrajectoryBounds {
                theta_max_deg: d.theta_max,
                s_max: d.s_max,
                t_max: d.t_max,
            },
            resample: d.resample,
        }
    }

    /// Canonical text: `version` first, then every key.
    pub fn to_text(&self) -> String {
        let mut s = format!("version = {CONFIG_VERSION}\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// What produced an output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub build: String,
    pub wall_seconds: f64,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# command = {}", self.command);
        let _ = writeln!(s, "# argv = {}", self.argv.join(" "));
        let _ = writeln!(s, "# build = {}", self.build);
        let _ = writeln!(s, "# wall_seconds = {:.3}", self.wall_seconds);
        s.push_str(&self.config.to_text());
        s
    }
}

pub fn save_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, m.to_text())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_line(text: &str) -> usize {
        match RunConfig::parse(text) {
            Err(Error::Config { line, .. }) => line,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(err_line("version = 1\nmodel.L = -1\n"), 2);
        assert_eq!(err_line("version = 1\n\nmodel.L = 0\n"), 3);
        assert_eq!(err_line("version = 1\nmodel.Q = 3\n"), 2);
        assert_eq!(err_line("version = 1\nflow.lr = fast\n"), 2);
        assert_eq!(err_line("version = 1\nflow.freeze_base = yes\n"), 2);
        assert_eq!(err_line("model.L = 2\n"), 1);
        assert_eq!(err_line("version = 2\n"), 1);
        assert_eq!(err_line("version = 1\nseed = 1\nseed = 2\n"), 3);
        assert_eq!(err_line("version = 1\nmodel.D = 30\nmodel.heads = 4\n"), 2);
        assert_eq!(err_line("version = 1\nnot a pair\n"), 2);
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::parse("version = 1\nmodel.L = 3\nvariant = free_soft\ndata.resample = nearest\n").unwrap();
        assert_eq!(c.model.layers, 3);
        assert_eq!(c.variant, SyncVariant::FreeSoft);
        assert_eq!(c.data.resample, Resample::Nearest);
    }

    #[test]
    fn text_and_manifest_round_trip() {
        let mut c = RunConfig::default();
        c.seed = 7;
        c.flow.lr = 1.2345678901234e-4;
        c.flow.freeze_base = true;
        c.variant = SyncVariant::Sequential;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        let m = RunManifest {
            command: "train-base".into(),
            argv: vec!["gridflow".into(), "train-base".into()],
            build: "v0-1-gabc".into(),
            wall_seconds: 1.5,
            config: c.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.txt");
        save_manifest(&p, &m).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), c);
        assert_eq!(RunConfig::KEYS.len(), c.entries().len());
    }
}
