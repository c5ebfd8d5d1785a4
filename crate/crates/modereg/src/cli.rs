//! The `modereg` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use modereg_core::engine::{pairwise_optimize, train, PairLabels};
use modereg_core::gradcheck::{gradient_suite, GradCheckConfig};
use modereg_core::metrics::{evaluate, warp_labels, LabelVolume, MetricSummary};
use modereg_core::model::{Model, ModelConfig};
use modereg_core::optim::{OptimConfig, OptimizerKind};
use modereg_core::synth::{synthetic_pair, SynthConfig};
use modereg_core::{Dims, DisplacementField, Volume};
use serde::{Deserialize, Serialize};

use crate::bench::{run_bench, BenchConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::nifti::{is_nifti, load_nifti};
use crate::raw;

#[derive(Debug, Parser)]
#[command(name = "modereg", version, about = "Motion-decomposition deformable registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic image pair with its ground-truth field and labels.
    Synth(SynthArgs),
    /// Run a model once on a pair.
    Register(RegisterArgs),
    /// Pairwise optimization: fine-tune every parameter on one pair.
    Po(PoArgs),
    /// Train on a directory of pairs.
    Train(TrainArgs),
    /// Overlap and surface-distance metrics between two label maps.
    Metrics(MetricsArgs),
    /// Finite-difference gradient check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Fused versus naive neighborhood attention.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub dims: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2.0)]
    pub max_disp: f64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Start from a checkpoint instead of a fresh model.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_parser = ["small", "large"])]
    pub preset: Option<String>,
    /// Integrate each residual as a velocity by scaling and squaring.
    #[arg(long)]
    pub diff: bool,
    /// JSON file with optional `preset`, `model` and `optim` entries;
    /// command-line flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of a fresh model's initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long, requires = "moving_labels")]
    pub fixed_labels: Option<PathBuf>,
    #[arg(long, requires = "fixed_labels")]
    pub moving_labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
}

#[derive(Debug, Args)]
pub struct PoArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub iters: Option<usize>,
    /// CSV with the loss (and mean Dice, given labels) before each update.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Directory for the final field, warped image and metrics.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Save the fine-tuned parameters.
    #[arg(long)]
    pub out_ckpt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// A pair directory (with `fixed` and `moving` volumes) or a directory of
    /// such directories.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Where to save the trained model; defaults to `model.ckpt` inside the
    /// data directory.
    #[arg(long)]
    pub out_ckpt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Reference label map.
    #[arg(long)]
    pub a: PathBuf,
    /// Label map to compare; warped by `--field` when given.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub field: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 32)]
    pub dims: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 6)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parse `argv`, run the command and return the process exit code. Normal
/// output goes to `out`, diagnostics to stderr.
pub fn main_with_args<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Register(a) => register(a, out),
        Command::Po(a) => po(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Metrics(a) => metrics(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Bench(a) => bench(a, out),
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(text).and_then(|_| out.write_all(b"\n")).map_err(|e| Error::io(Path::new("<stdout>"), e))
}

macro_rules! say {
    ($out:expr, $($t:tt)*) => { say($out, format_args!($($t)*)) };
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    preset: Option<String>,
    model: Option<ModelConfig>,
    optim: Option<OptimConfig>,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(p) = path else { return Ok(ConfigFile::default()) };
    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(p, "config", e.to_string()))
}

fn build_model(args: &ModelArgs, file: &ConfigFile) -> Result<Model<f32>> {
    let mut model = match &args.ckpt {
        Some(p) => load_checkpoint(p)?,
        None => {
            let config = match (&args.preset, &file.model, &file.preset) {
                (Some(name), _, _) => ModelConfig::preset(name)?,
                (None, Some(m), _) => *m,
                (None, None, Some(name)) => ModelConfig::preset(name)?,
                (None, None, None) => ModelConfig::small(),
            };
            Model::new(config, args.seed)?
        }
    };
    if args.diff && !model.config().diffeomorphic {
        let config = model.config().with_diffeomorphic(true);
        model = Model::from_params(config, model.into_params())?;
    }
    Ok(model)
}

fn build_optim(args: &OptimArgs, file: &ConfigFile) -> OptimConfig {
    let mut opt = file.optim.unwrap_or_default();
    if let Some(lr) = args.lr {
        opt.lr_init = lr;
    }
    if let Some(l) = args.lambda {
        opt.lambda = l;
    }
    if let Some(o) = args.optimizer {
        opt.optimizer = match o {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        };
    }
    opt
}

/// Load an image from a `.nii` file or a raw volume.
pub fn load_image(path: &Path) -> Result<Volume<f32>> {
    if is_nifti(path) {
        load_nifti(path)
    } else {
        raw::load_volume(path)
    }
}

struct Pair {
    fixed: Volume<f32>,
    moving: Volume<f32>,
    labels: Option<(LabelVolume, LabelVolume)>,
}

fn load_pair(a: &PairArgs) -> Result<Pair> {
    let fixed = load_image(&a.fixed)?;
    let moving = load_image(&a.moving)?;
    if fixed.dims() != moving.dims() {
        return Err(Error::parse(
            &a.moving,
            "dims",
            format!("moving image is {}, fixed image is {}", moving.dims(), fixed.dims()),
        ));
    }
    let labels = match (&a.fixed_labels, &a.moving_labels) {
        (Some(f), Some(m)) => {
            let (lf, lm) = (raw::load_labels(f)?, raw::load_labels(m)?);
            for (l, p) in [(&lf, f), (&lm, m)] {
                if l.dims() != fixed.dims() {
                    return Err(Error::parse(p, "dims", format!("labels are {}, images are {}", l.dims(), fixed.dims())));
                }
            }
            Some((lf, lm))
        }
        _ => None,
    };
    Ok(Pair { fixed, moving, labels })
}

/// JSON form of a metric report.
#[derive(Debug, Serialize)]
pub struct MetricsJson {
    pub dsc_per_label: BTreeMap<String, f64>,
    pub mean_dsc: f64,
    pub hd95: Option<f64>,
    pub assd: Option<f64>,
    pub folding_pct: Option<f64>,
}

impl From<MetricSummary> for MetricsJson {
    fn from(m: MetricSummary) -> Self {
        MetricsJson {
            dsc_per_label: m.dsc_per_label.into_iter().map(|(l, d)| (l.to_string(), d)).collect(),
            mean_dsc: m.mean_dsc,
            hd95: m.hd95,
            assd: m.assd,
            folding_pct: m.folding_pct,
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Folding of `phi`, plus overlap and distances when labels are known.
fn pair_metrics(pair: &Pair, phi: &DisplacementField<f32>) -> Result<serde_json::Value> {
    let spacing = pair.fixed.spacing();
    let value = match &pair.labels {
        Some((lf, lm)) => {
            let warped = warp_labels(lm, phi)?;
            serde_json::to_value(MetricsJson::from(evaluate(lf, &warped, Some(phi), spacing)?))
        }
        None => {
            let pct = 100.0 * modereg_core::metrics::folding_ratio(&modereg_core::metrics::jacobian_determinant(phi));
            serde_json::to_value(serde_json::json!({ "folding_pct": pct }))
        }
    };
    Ok(value.expect("metrics serialize"))
}

fn write_outputs(dir: &Path, pair: &Pair, phi: &DisplacementField<f32>, warped: &Volume<f32>) -> Result<serde_json::Value> {
    raw::save_field(&dir.join("phi"), phi, pair.fixed.spacing())?;
    raw::save_volume(&dir.join("warped"), warped)?;
    let m = pair_metrics(pair, phi)?;
    write_json(&dir.join("metrics.json"), &m)?;
    Ok(m)
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = SynthConfig { dims: Dims::cube(a.dims), max_disp: a.max_disp, ..SynthConfig::default() };
    let p = synthetic_pair::<f32>(&cfg, a.seed)?;
    let d = &a.out;
    raw::save_volume(&d.join("fixed"), &p.fixed)?;
    raw::save_volume(&d.join("moving"), &p.moving)?;
    raw::save_labels(&d.join("fixed_labels"), &p.fixed_labels)?;
    raw::save_labels(&d.join("moving_labels"), &p.moving_labels)?;
    raw::save_field(&d.join("ground_truth"), &p.ground_truth, p.fixed.spacing())?;
    raw::save_field(&d.join("velocity"), &p.velocity, p.fixed.spacing())?;
    write_json(&d.join("synth.json"), &serde_json::json!({ "seed": a.seed, "config": cfg }))?;
    say!(out, "wrote synthetic pair {} (seed {}) to {}", cfg.dims, a.seed, d.display())
}

fn register(a: RegisterArgs, out: &mut dyn Write) -> Result<()> {
    let file = read_config(a.model.config.as_deref())?;
    let model = build_model(&a.model, &file)?;
    let pair = load_pair(&a.pair)?;
    let r = model.forward(&pair.fixed, &pair.moving)?;
    let m = write_outputs(&a.out, &pair, &r.phi, &r.warped)?;
    say!(out, "{}", serde_json::to_string_pretty(&m).expect("json"))
}

fn po(a: PoArgs, out: &mut dyn Write) -> Result<()> {
    let file = read_config(a.model.config.as_deref())?;
    let mut model = build_model(&a.model, &file)?;
    let mut opt = build_optim(&a.optim, &file);
    if let Some(n) = a.iters {
        opt.po_iters = n;
    }
    let pair = load_pair(&a.pair)?;
    let labels = pair.labels.as_ref().map(|(f, m)| PairLabels { fixed: f, moving: m });
    let t = Instant::now();
    let r = pairwise_optimize(&mut model, &pair.fixed, &pair.moving, &opt, labels)?;
    let elapsed = t.elapsed().as_secs_f64();
    if let Some(path) = &a.trace {
        write_trace(path, &r.loss_trace, &r.dsc_trace)?;
    }
    if let Some(dir) = &a.out {
        write_outputs(dir, &pair, &r.result.phi, &r.result.warped)?;
    }
    if let Some(p) = &a.out_ckpt {
        save_checkpoint(p, &model)?;
    }
    let (first, last) = (r.loss_trace[0], r.loss_trace[r.loss_trace.len() - 1]);
    say!(out, "po: {} iterations in {elapsed:.1}s, loss {first:.6} -> {last:.6}", opt.po_iters)?;
    if let (Some(d0), Some(d1)) = (r.dsc_trace.first(), r.dsc_trace.last()) {
        say!(out, "po: mean dice {d0:.4} -> {d1:.4}")?;
    }
    Ok(())
}

fn write_trace(path: &Path, loss: &[f64], dsc: &[f64]) -> Result<()> {
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, "trace", format!("{other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["iter", "loss"];
    if !dsc.is_empty() {
        header.push("mean_dsc");
    }
    w.write_record(&header).map_err(csv_err)?;
    for (i, l) in loss.iter().enumerate() {
        let mut row = vec![i.to_string(), format!("{l:e}")];
        if let Some(d) = dsc.get(i) {
            row.push(format!("{d:e}"));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pair directories under `dir`: `dir` itself when it holds a pair,
/// otherwise its sub-directories that do, in name order.
pub fn find_pairs(dir: &Path) -> Result<Vec<PathBuf>> {
    let is_pair = |d: &Path| raw::paths(&d.join("fixed")).0.is_file() && raw::paths(&d.join("moving")).0.is_file();
    if is_pair(dir) {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut found = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() && is_pair(&p) {
            found.push(p);
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::parse(dir, "data", "no pair directories with fixed and moving volumes"));
    }
    Ok(found)
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let file = read_config(a.model.config.as_deref())?;
    let mut model = build_model(&a.model, &file)?;
    let mut opt = build_optim(&a.optim, &file);
    if let Some(e) = a.epochs {
        opt.epochs = e;
    }
    let mut pairs = Vec::new();
    for d in find_pairs(&a.data)? {
        let p = load_pair(&PairArgs {
            fixed: d.join("fixed"),
            moving: d.join("moving"),
            fixed_labels: None,
            moving_labels: None,
        })?;
        pairs.push((p.fixed, p.moving));
    }
    let h = train(&mut model, &pairs, &opt)?;
    for (m, (l, lr)) in h.epoch_losses.iter().zip(&h.epoch_lrs).enumerate() {
        say!(out, "epoch {:>3}  lr {lr:.3e}  loss {l:.6}", m + 1)?;
    }
    let ckpt = a.out_ckpt.unwrap_or_else(|| a.data.join("model.ckpt"));
    save_checkpoint(&ckpt, &model)?;
    say!(out, "saved {}", ckpt.display())
}

fn metrics(a: MetricsArgs, out: &mut dyn Write) -> Result<()> {
    let la = raw::load_labels(&a.a)?;
    let mut lb = raw::load_labels(&a.b)?;
    if la.dims() != lb.dims() {
        return Err(Error::parse(&a.b, "dims", format!("{} vs {}", lb.dims(), la.dims())));
    }
    let phi = a.field.as_deref().map(raw::load_field).transpose()?;
    if let Some(phi) = &phi {
        if phi.dims() != la.dims() {
            return Err(Error::parse(a.field.as_deref().unwrap(), "dims", format!("{} vs {}", phi.dims(), la.dims())));
        }
        lb = warp_labels(&lb, phi)?;
    }
    let report = MetricsJson::from(evaluate(&la, &lb, phi.as_ref(), la.spacing())?);
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    say!(out, "{}", serde_json::to_string_pretty(&report).expect("json"))
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = GradCheckConfig { seed: a.seed, ..GradCheckConfig::default() };
    say!(out, "{:<26} {:>9} {:>11} {:>9}  result", "op", "tolerance", "worst_rel", "relocated")?;
    let mut failed = Vec::new();
    for r in gradient_suite(&cfg) {
        let relocated: usize = r.inputs.iter().map(|i| i.relocated).sum();
        let status = if r.passed() { "PASS" } else { "FAIL" };
        say!(out, "{:<26} {:>9.0e} {:>11.3e} {:>9}  {status}", r.op, r.tolerance, r.worst_rel(), relocated)?;
        if let Some(e) = &r.error {
            say!(out, "    error: {e}")?;
        }
        if !r.passed() {
            for i in r.inputs.iter().filter(|i| !(i.worst_rel <= r.tolerance)) {
                say!(out, "    {} entry {}: analytic {:e} numeric {:e}", i.name, i.worst_index, i.analytic, i.numeric)?;
            }
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        say!(out, "all gradient checks passed")
    } else {
        Err(Error::Failed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn bench(a: BenchArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = BenchConfig {
        dims: Dims::cube(a.dims),
        heads: a.heads,
        head_dim: a.head_dim,
        reps: a.reps,
        seed: a.seed,
        ..BenchConfig::default()
    };
    let report = run_bench(&cfg)?;
    say!(out, "{report}")?;
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Failed("fused attention missed the memory or time contract".into()))
    }
}
