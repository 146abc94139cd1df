//! `vaeinfo` subcommands. Each one reads a [`RunConfig`] (optional TOML
//! file), applies flag overrides, and writes its artifacts under `--out`.

pub mod change;
pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use vaeinfo_core::eval::{evaluate_models, write_report};
use vaeinfo_core::latent_edit::{linspace, run_edit_study, write_sweep};
use vaeinfo_core::model::{AttrSource, Model, ModelKind};
use vaeinfo_core::probes::read_jsonl;
use vaeinfo_core::raster::{hcrm_to_crm, rasterize_probes, RasterMode};
use vaeinfo_core::rng::substream;
use vaeinfo_core::sim::{build_dataset, Dataset, Split};
use vaeinfo_core::train::{self, checkpoint, OutputDir, TrainingState};
use vaeinfo_core::{grd, Error, TileCoord};

pub use change::{emit_change_dataset, write_change_dataset, ChangeManifest, Triple};
pub use config::RunConfig;

/// Environment variable naming the compute backend.
pub const DEVICE_VAR: &str = "VAEINFO_DEVICE";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Core(e) => match e {
                Error::Domain(_) => "domain",
                Error::Contract(_) => "contract",
                Error::Format { .. } => "format",
                Error::Numeric(_) => "numeric",
                Error::DegenerateData(_) => "degenerate_data",
                Error::Io { .. } => "io",
                Error::Json(_) => "json",
            },
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "vaeinfo", version, about = "Probe-density raster generation from road networks")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset of road networks and probe rasters.
    Simulate(SimulateArgs),
    /// Rasterize probe records, or collapse an HCRM to a CRM.
    Rasterize(RasterizeArgs),
    /// Train one model kind.
    Train(TrainArgs),
    /// Generate an image for one road raster.
    Generate(GenerateArgs),
    /// Score checkpoints on the test split and write the comparison report.
    Evaluate(EvaluateArgs),
    /// Fit attribute hyperplanes and sweep along their normals.
    Edit(EditArgs),
    /// Emit perturbed-road change triples.
    ChangeDataset(ChangeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub tiles: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    /// Also write the raw probe records.
    #[arg(long)]
    pub probes: bool,
}

#[derive(Debug, Args)]
pub struct RasterizeArgs {
    #[arg(long, value_parser = parse_mode)]
    pub mode: RasterMode,
    /// JSON-lines probe records.
    #[arg(long, conflicts_with = "input")]
    pub probes: Option<PathBuf>,
    /// Window as `zoom/x/y`.
    #[arg(long, value_parser = parse_tile, requires = "probes")]
    pub tile: Option<TileCoord>,
    #[arg(long, default_value = "driving")]
    pub modality: String,
    /// Existing GRD1 raster to convert.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    pub model: Option<ModelKind>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<RasterMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Binary road raster (GRD1, count space).
    #[arg(long)]
    pub roads: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint files; repeatable.
    #[arg(long = "ckpt")]
    pub ckpts: Vec<PathBuf>,
    /// Directory holding one run per kind; `<model>/best.ckpt` is used,
    /// falling back to `<model>/final.ckpt`.
    #[arg(long)]
    pub ckpt_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<RasterMode>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Walk lengths as `start:stop:count`.
    #[arg(long, value_parser = parse_alphas, allow_hyphen_values = true)]
    pub alphas: Option<AlphaList>,
    #[arg(long)]
    pub conditions: Option<usize>,
    /// Attribute samples per condition.
    #[arg(long)]
    pub count: Option<usize>,
    /// Fit one hyperplane over all conditions.
    #[arg(long)]
    pub pooled: bool,
}

#[derive(Debug, Args)]
pub struct ChangeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of test examples to use.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<RasterMode>,
}

fn parse_mode(s: &str) -> Result<RasterMode, String> {
    match s {
        "crm" => Ok(RasterMode::Crm),
        "hcrm" => Ok(RasterMode::Hcrm),
        _ => Err(format!("expected crm or hcrm, got {s:?}")),
    }
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_tile(s: &str) -> Result<TileCoord, String> {
    let parts: Vec<&str> = s.split('/').collect();
    let [z, x, y] = parts.as_slice() else {
        return Err(format!("expected zoom/x/y, got {s:?}"));
    };
    let num = |v: &str| v.parse::<u64>().map_err(|e| format!("{v:?}: {e}"));
    let zoom = u8::try_from(num(z)?).map_err(|e| e.to_string())?;
    TileCoord::new(zoom, num(x)?, num(y)?).map_err(|e| e.to_string())
}

/// Parsed `--alphas` value.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaList(pub Vec<f64>);

/// `start:stop:count` as evenly spaced values.
pub fn parse_alphas(s: &str) -> Result<AlphaList, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, n] = parts.as_slice() else {
        return Err(format!("expected start:stop:count, got {s:?}"));
    };
    let start: f64 = a.parse().map_err(|e| format!("{a:?}: {e}"))?;
    let stop: f64 = b.parse().map_err(|e| format!("{b:?}: {e}"))?;
    let count: usize = n.parse().map_err(|e| format!("{n:?}: {e}"))?;
    if count == 0 || !start.is_finite() || !stop.is_finite() {
        return Err(format!("invalid alpha range {s:?}"));
    }
    Ok(AlphaList(linspace(start, stop, count)))
}

fn check_device() -> Result<(), CliError> {
    match std::env::var(DEVICE_VAR) {
        Ok(v) if !v.is_empty() && !v.eq_ignore_ascii_case("cpu") => {
            Err(CliError::Usage(format!("{DEVICE_VAR}={v} is not available; only cpu is supported")))
        }
        _ => Ok(()),
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn need_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))
}

fn load_data(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<Dataset, CliError> {
    let dir = flag.clone().or_else(|| cfg.data.clone()).ok_or_else(|| CliError::Usage("--data is required".into()))?;
    Ok(Dataset::load(dir)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

/// Runs a parsed command line; progress goes to `log`.
pub fn run(cli: Cli, log: &mut dyn Write) -> Result<(), CliError> {
    check_device()?;
    let mut cfg = resolve_config(&cli)?;
    let seed = cfg.seed;
    match cli.command {
        Command::Simulate(a) => {
            if let Some(n) = a.tiles {
                cfg.dataset.n_tiles = n;
            }
            if let Some(s) = a.size {
                cfg.dataset.size = s;
            }
            let out = need_out(&cfg)?;
            let ds = build_dataset(&cfg.dataset, seed)?;
            ds.save(&out, a.probes)?;
            let _ = writeln!(log, "simulated {} tiles into {}", ds.examples.len(), out.display());
        }
        Command::Rasterize(a) => {
            let out = need_out(&cfg)?;
            let img = match (&a.probes, &a.input) {
                (Some(p), None) => {
                    let tile = a.tile.ok_or_else(|| CliError::Usage("--tile is required with --probes".into()))?;
                    let file = fs::File::open(p).map_err(|e| Error::io(p, e))?;
                    rasterize_probes(&read_jsonl(std::io::BufReader::new(file))?, tile, a.mode, &a.modality)?
                }
                (None, Some(p)) => {
                    let src = grd::read(p)?;
                    match (a.mode, src.c) {
                        (RasterMode::Crm, 12) => hcrm_to_crm(&src)?,
                        (RasterMode::Crm, 1) => src,
                        (mode, c) => {
                            return Err(CliError::Usage(format!("cannot produce {mode:?} from a {c}-channel raster")));
                        }
                    }
                }
                _ => return Err(CliError::Usage("give exactly one of --probes or --input".into())),
            };
            grd::write(&img, &out)?;
            let _ = writeln!(log, "wrote {}×{}×{} raster to {}", img.h, img.w, img.c, out.display());
        }
        Command::Train(a) => {
            if let Some(k) = a.model {
                cfg.train.model_kind = k;
            }
            if let Some(m) = a.mode {
                cfg.train.task = m;
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            let out = need_out(&cfg)?;
            let ds = load_data(&cfg, &a.data)?;
            let outdir = OutputDir(Some(out.clone()));
            let outcome = match &a.ckpt {
                Some(p) => train::resume(p, &ds, a.epochs, &outdir)?,
                None => {
                    let mcfg = cfg.network.model_config(ds.config.size, cfg.train.task.channels());
                    let model = Model::new(mcfg, cfg.train.model_kind, seed)?;
                    train::train(&cfg.train, &ds, TrainingState::new(model), &outdir)?
                }
            };
            let curve = train::val_curve(&outcome.log);
            let _ = writeln!(log, "trained {} to step {}; validation APND per epoch {curve:?}", cfg.train.model_kind, outcome.state.step);
        }
        Command::Generate(a) => {
            let out = need_out(&cfg)?;
            let model = checkpoint::load_model(&a.ckpt)?;
            let roads = grd::read(&a.roads)?;
            let mut rng = substream(seed, "sampling");
            let mut img = model.generate_for_roads(&[&roads], &AttrSource::Uniform, &mut rng)?.remove(0);
            img.georef = roads.georef;
            grd::write(&img.round_to_binary32(), &out)?;
            let _ = writeln!(log, "wrote {}", out.display());
        }
        Command::Evaluate(a) => {
            let out = need_out(&cfg)?;
            let mode = a.mode.unwrap_or(cfg.train.task);
            let ds = load_data(&cfg, &a.data)?;
            let mut paths = a.ckpts.clone();
            if let Some(dir) = &a.ckpt_dir {
                paths.extend(ModelKind::ALL.iter().map(|k| {
                    let best = dir.join(k.slug()).join("best.ckpt");
                    if best.exists() { best } else { dir.join(k.slug()).join("final.ckpt") }
                }));
            }
            let mut models = BTreeMap::new();
            for p in paths {
                if !p.exists() {
                    let _ = writeln!(log, "absent: {}", p.display());
                    continue;
                }
                let m = checkpoint::load_model(&p)?;
                models.insert(m.kind, m);
            }
            let (val, test) = (ds.split(Split::Val), ds.split(Split::Test));
            let (report, generated) = evaluate_models(&models, mode, &val, &test, seed)?;
            write_report(&out, &report, &generated, &test, cfg.eval.figures)?;
            let _ = write!(log, "{}", report.render());
        }
        Command::Edit(a) => {
            if let Some(al) = a.alphas {
                cfg.edit.alphas = al.0;
            }
            if let Some(c) = a.conditions {
                cfg.edit.conditions = c;
            }
            if let Some(c) = a.count {
                cfg.edit.count = c;
            }
            cfg.edit.pooled |= a.pooled;
            let out = need_out(&cfg)?;
            let model = checkpoint::load_model(&a.ckpt)?;
            let ds = load_data(&cfg, &a.data)?;
            let roads: Vec<(usize, &vaeinfo_core::RasterImage)> = ds.split(Split::Test).into_iter().map(|e| (e.id, &e.road)).collect();
            let (study, images) = run_edit_study(&model, &roads, &cfg.edit, seed)?;
            for (c, imgs) in study.conditions.iter().zip(&images) {
                write_sweep(&out.join(format!("condition_{:05}", c.id)), &c.sweep, imgs)?;
            }
            write_json(&out.join("edit.json"), &study)?;
            for c in &study.conditions {
                let _ = writeln!(log, "condition {}: val accuracy {:?}, spearman {:?}", c.id, c.val_accuracy, c.spearman);
            }
        }
        Command::ChangeDataset(a) => {
            if let Some(k) = a.k {
                cfg.change.k = k;
            }
            if a.n.is_some() {
                cfg.change.n = a.n;
            }
            let out = need_out(&cfg)?;
            let mode = a.mode.unwrap_or(cfg.train.task);
            let model = checkpoint::load_model(&a.ckpt)?;
            let ds = load_data(&cfg, &a.data)?;
            let mut test = ds.split(Split::Test);
            if let Some(n) = cfg.change.n {
                test.truncate(n);
            }
            let (manifest, triples) = emit_change_dataset(&model, &test, mode, &cfg.change, seed)?;
            write_change_dataset(&out, &manifest, &triples)?;
            let _ = writeln!(log, "emitted {} triples, skipped {}", manifest.triples.len(), manifest.skipped);
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code. Usage errors
/// exit with 2, other failures with 1 after a JSON error line on `err`.
pub fn main_with<I, T>(args: I, log: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 { write!(log, "{}", e.render()) } else { write!(err, "{}", e.render()) };
            return code;
        }
    };
    match run(cli, log) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", e.to_json_line());
            e.exit_code()
        }
    }
}
