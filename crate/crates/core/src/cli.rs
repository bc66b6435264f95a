//! Command-line front end. Every command writes a run manifest next to its
//! outputs; the manifest loads back as the config that produced them.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::{save_manifest, RunConfig, RunManifest};
use crate::dit::VideoModel;
use crate::error::{Error, Result};
use crate::eval::{ablation_report, report_csv, report_table, trace_diagnostics};
use crate::flow::{train_4d_stage, train_base, FourDStage};
use crate::grid::{FrameGrid, GridMask, Video};
use crate::io::{export_png, load_checkpoint, loss_csv, read_grid, sampler_csv, save_checkpoint, write_grid, Checkpoint, Dataset, EntryLabel};
use crate::rng::rng_for;
use crate::sample::{extend_grid, sample_grid, ExtendAxis, FourDModel, GridDenoiser, SampleRecord};
use crate::sync::{SyncStack, SyncVariant};
use crate::synth::{make_base_datasets, make_pseudo_grids, make_render_grids};

pub const BUILD_ID: &str = env!("GRIDFLOW_BUILD");

#[derive(Debug, Parser)]
#[command(name = "gridflow", version, about = "Frame-grid diffusion with synchronized view and time streams")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run config (`section.key = value`); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the toy datasets.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Dataset root; defaults to `data.root`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the base video model.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add sync layers to a base checkpoint and fine-tune on grids.
    #[command(name = "train-4d")]
    Train4d {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        base_ckpt: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a grid from its first row and column.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        first_row: PathBuf,
        #[arg(long)]
        first_col: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Also write per-frame PNGs and a contact sheet into this directory.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Add rows or columns to a grid with a sliding window.
    Extend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        grid: PathBuf,
        /// `time` or `view`.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        count: usize,
        /// Optional 1 x N grid holding the first frame of each new row or column.
        #[arg(long)]
        edge: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Ablation report over checkpoints on the held-out grids.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sync-layer diagnostics on held-out grids.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::TrainBase { .. } => "train-base",
            Command::Train4d { .. } => "train-4d",
            Command::Sample { .. } => "sample",
            Command::Extend { .. } => "extend",
            Command::Evaluate { .. } => "evaluate",
            Command::Diagnose { .. } => "diagnose",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::SynthData { common, .. }
            | Command::TrainBase { common, .. }
            | Command::Train4d { common, .. }
            | Command::Sample { common, .. }
            | Command::Extend { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Diagnose { common, .. } => common,
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        if !d.as_os_str().is_empty() {
            fs::create_dir_all(d)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// `out.4rgf` -> `out.4rgf.<suffix>`.
fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn progress(label: &str, total: usize) -> impl FnMut(usize, f64) + '_ {
    let every = (total / 20).max(1);
    move |step, loss| {
        if step % every == 0 || step + 1 == total {
            eprintln!("{label}: step {step}/{total} loss {loss:.5}");
        }
    }
}

fn model_from(ckpt_flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<(PathBuf, RunConfig, VideoModel<f32>, SyncStack<f32>)> {
    let path = match ckpt_flag {
        Some(p) => p.clone(),
        None if !cfg.sample.ckpt.is_empty() => PathBuf::from(&cfg.sample.ckpt),
        None => return Err(Error::MissingInput("--ckpt (or sample.ckpt in the config)".into())),
    };
    let ck = load_checkpoint(&path)?;
    let (ck_cfg, model, syncs) = ck.restore(&path)?;
    let syncs = match syncs {
        Some(s) => s,
        None => return Err(Error::Precondition(format!("{} is a base checkpoint; grid sampling needs a train-4d checkpoint", path.display()))),
    };
    Ok((path, ck_cfg, model, syncs))
}

fn data_root(flag: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.clone().unwrap_or_else(|| PathBuf::from(&cfg.data.root))
}

fn out_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.clone().unwrap_or_else(|| PathBuf::from(&cfg.out))
}

/// Run one command. Returns where the run manifest was written.
pub fn execute(command: &Command, argv: &[String]) -> Result<PathBuf> {
    let start = Instant::now();
    let cfg = load_config(command.common())?;
    let manifest_path = match command {
        Command::SynthData { out, .. } => {
            let root = out.clone().unwrap_or_else(|| PathBuf::from(&cfg.data.root));
            synth_data(&cfg, &root)?;
            root.join("run_manifest.txt")
        }
        Command::TrainBase { data, out, .. } => {
            let (data, out) = (data_root(data, &cfg), out_dir(out, &cfg));
            let videos = Dataset::open(&data)?.videos(&data)?;
            let mut model = VideoModel::new(cfg.model_config(), &mut rng_for(cfg.seed, "init", 0))?;
            let tc = cfg.base_train();
            let losses = train_base(&mut model, &videos, &tc, cfg.seed, progress("train-base", tc.steps))?;
            save_checkpoint(&out.join("base.ckpt"), &Checkpoint::from_model(&cfg, &model, None))?;
            write_text(&out.join("loss.csv"), &loss_csv(&losses))?;
            out.join("run_manifest.txt")
        }
        Command::Train4d {
            data,
            base_ckpt,
            variant,
            out,
            ..
        } => {
            let mut cfg = cfg.clone();
            if let Some(v) = variant {
                cfg.variant = SyncVariant::parse(v).ok_or_else(|| Error::Invalid(format!("unknown variant {v:?}")))?;
            }
            let base_path = base_ckpt.as_ref().ok_or_else(|| Error::MissingInput("--base-ckpt".into()))?;
            let (data, out) = (data_root(data, &cfg), out_dir(out, &cfg));
            let (base_cfg, mut model, syncs) = load_checkpoint(base_path)?.restore(base_path)?;
            if syncs.is_some() {
                return Err(Error::Precondition(format!("{} is not a base checkpoint", base_path.display())));
            }
            if base_cfg.model != cfg.model {
                return Err(Error::Precondition(format!(
                    "model section of the config differs from the one stored in {}",
                    base_path.display()
                )));
            }
            let ds = Dataset::open(&data)?;
            let (syncs, la, lb) = if cfg.variant.is_trained() {
                let pseudo = ds.grids(&data, EntryLabel::Pseudo)?;
                let render = ds.grids(&data, EntryLabel::Render)?;
                let (pc, rc) = (cfg.pseudo_train(), cfg.render_train());
                let freeze = cfg.flow.freeze_base;
                let (s, la) = train_4d_stage(&mut model, None, cfg.variant, &pseudo, FourDStage::Pseudo, &pc, freeze, cfg.seed, progress("train-4d pseudo", pc.steps))?;
                let (s, lb) = train_4d_stage(&mut model, Some(s), cfg.variant, &render, FourDStage::Render, &rc, freeze, cfg.seed, progress("train-4d render", rc.steps))?;
                (s, la, lb)
            } else {
                (SyncStack::new(cfg.variant, &model, cfg.flow.hard_diagonal), Vec::new(), Vec::new())
            };
            save_checkpoint(&out.join("4d.ckpt"), &Checkpoint::from_model(&cfg, &model, Some(&syncs)))?;
            write_text(&out.join("loss_pseudo.csv"), &loss_csv(&la))?;
            write_text(&out.join("loss_render.csv"), &loss_csv(&lb))?;
            out.join("run_manifest.txt")
        }
        Command::Sample {
            ckpt,
            first_row,
            first_col,
            out,
            steps,
            png,
            ..
        } => {
            let (_, _, model, syncs) = model_from(ckpt, &cfg)?;
            let row = as_video(&read_grid(first_row)?, first_row)?;
            let col = as_video(&read_grid(first_col)?, first_col)?;
            let net = FourDModel { model: &model, syncs: &syncs };
            let mut rec = SampleRecord::default();
            let g = sample_grid(&net, &row, &col, steps.unwrap_or(cfg.sample.steps), cfg.seed, Some(&mut rec), false)?;
            write_grid(out, &g)?;
            write_text(&sidecar(out, "sampler.csv"), &sampler_csv(&rec.steps))?;
            if let Some(dir) = png {
                export_png(&g, dir)?;
            }
            sidecar(out, "manifest.txt")
        }
        Command::Extend {
            ckpt,
            grid,
            axis,
            count,
            edge,
            out,
            steps,
            ..
        } => {
            let (_, _, model, syncs) = model_from(ckpt, &cfg)?;
            let axis = ExtendAxis::parse(axis).ok_or_else(|| Error::Invalid(format!("axis must be `time` or `view`, got {axis:?}")))?;
            let g = read_grid(grid)?;
            let edge = edge.as_ref().map(|p| read_grid(p).and_then(|e| as_video(&e, p))).transpose()?;
            let net = FourDModel { model: &model, syncs: &syncs };
            let steps = steps.unwrap_or(cfg.sample.steps);
            let ext = extend_grid(&net, &g, axis, *count, cfg.sample.overlap, edge.as_ref(), steps, cfg.seed)?;
            write_grid(out, &ext)?;
            sidecar(out, "manifest.txt")
        }
        Command::Evaluate { ckpt, data, out, .. } => {
            let data = data_root(data, &cfg);
            let test = Dataset::open(&data)?.grids(&data, EntryLabel::Test)?;
            let loaded = ckpt.iter().map(|p| model_from(&Some(p.clone()), &cfg)).collect::<Result<Vec<_>>>()?;
            let nets: Vec<FourDModel> = loaded.iter().map(|(_, _, m, s)| FourDModel { model: m, syncs: s }).collect();
            let named: Vec<(String, &dyn GridDenoiser)> = loaded
                .iter()
                .zip(&nets)
                .map(|((p, _, _, s), n)| (format!("{}:{}", s.variant.label(), p.display()), n as &dyn GridDenoiser))
                .collect();
            let first = test.first().ok_or(Error::NothingToScore)?;
            let mask = GridMask::first_row_and_column(first.v, first.t);
            let seeds: Vec<u64> = (0..cfg.eval.runs as u64).map(|k| crate::rng::derive_seed(cfg.seed, "evaluate", k)).collect();
            let rows = ablation_report(&named, &test, &mask, cfg.sample.steps, &seeds)?;
            write_text(&out.join("report.csv"), &report_csv(&rows))?;
            let table = report_table(&rows);
            write_text(&out.join("report.txt"), &table)?;
            print!("{table}");
            out.join("run_manifest.txt")
        }
        Command::Diagnose { ckpt, data, out, .. } => {
            let data = data_root(data, &cfg);
            let test = Dataset::open(&data)?.grids(&data, EntryLabel::Test)?;
            let (_, _, model, syncs) = model_from(ckpt, &cfg)?;
            let net = FourDModel { model: &model, syncs: &syncs };
            let mut summary = String::from("grid,depth_spearman,drift_then_resync\n");
            for (i, gt) in test.iter().take(cfg.eval.diag_grids).enumerate() {
                let mask = GridMask::first_row_and_column(gt.v, gt.t);
                let (_, tr) = trace_diagnostics(&net, gt, &mask, cfg.sample.steps, cfg.seed ^ i as u64)?;
                tr.write(&out.join(format!("grid_{i:03}")))?;
                summary.push_str(&format!("{i},{},{}\n", tr.depth_correlation()?, tr.drift_then_resync()));
            }
            write_text(&out.join("summary.csv"), &summary)?;
            out.join("run_manifest.txt")
        }
    };
    let mut manifest_cfg = cfg.clone();
    if let Command::Train4d { variant: Some(v), .. } = command {
        if let Some(v) = SyncVariant::parse(v) {
            manifest_cfg.variant = v;
        }
    }
    save_manifest(
        &manifest_path,
        &RunManifest {
            command: command.name().into(),
            argv: argv.to_vec(),
            build: BUILD_ID.into(),
            wall_seconds: start.elapsed().as_secs_f64(),
            config: manifest_cfg,
        },
    )?;
    Ok(manifest_path)
}

fn as_video(g: &FrameGrid<f32>, path: &Path) -> Result<Video<f32>> {
    if g.v == 1 {
        g.row_video(0)
    } else if g.t == 1 {
        g.column_video(0)
    } else {
        Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected a 1 x N or N x 1 grid, got {} x {}", g.v, g.t),
        })
    }
}

/// Writes the dataset directory: base videos, pseudo grids, renderer grids
/// for fine-tuning and held-out renderer grids.
pub fn synth_data(cfg: &RunConfig, root: &Path) -> Result<Dataset> {
    let spec = cfg.data_spec();
    let d = &cfg.data;
    let (dynamic, freeze) = make_base_datasets(cfg.seed, d.dynamic, d.freeze, &spec)?;
    let pseudo = make_pseudo_grids(cfg.seed, d.pseudo, &spec)?;
    let render = make_render_grids(cfg.seed, "render_train", d.render, &spec)?;
    let test = make_render_grids(cfg.seed, "render_test", d.test, &spec)?;
    let videos: Vec<(EntryLabel, FrameGrid<f32>)> = dynamic
        .iter()
        .map(|s| (EntryLabel::Dynamic, FrameGrid::from_row(&s.video)))
        .chain(freeze.iter().map(|s| (EntryLabel::FreezeTime, FrameGrid::from_row(&s.video))))
        .collect();
    let mut items: Vec<(EntryLabel, &FrameGrid<f32>)> = videos.iter().map(|(l, g)| (*l, g)).collect();
    items.extend(pseudo.iter().map(|g| (EntryLabel::Pseudo, g)));
    items.extend(render.iter().map(|g| (EntryLabel::Render, g)));
    items.extend(test.iter().map(|g| (EntryLabel::Test, g)));
    Dataset::write(root, &items)
}

/// Caps rayon's pool when `GRIDFLOW_THREADS` is set.
pub fn init_threads() {
    if let Some(n) = std::env::var("GRIDFLOW_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Parse and run. Usage errors exit 2, failures print
/// `error: <kind>: <message>` and exit 1.
pub fn main_with_args(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_threads();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli.command, &argv) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), e);
            1
        }
    }
}
