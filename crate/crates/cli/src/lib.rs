//! The `svrc` command line: registry management, coding and RD reports.

pub mod config;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use svrc::codec::{
    encode_image, quantize_rho, refine_derivation_logged, train_anchor_logged, write_atomic,
    AnchorModel, Derivation, LayerPair, LayerSource, RefineStart, Registry, StepReport, TrainConfig, TrainingMeta,
    REGISTRY_ENV,
};
use svrc::eval::{
    bd_metrics, interval_report, read_rd_points, rd_sweep, uniform_baseline_sweep, write_bd, write_intervals,
    write_rd_points, AnchorSet, RdPoint,
};
use svrc::image::{load_ppm, synthetic_image, write_ppm, PatchSource, PpmImage};
use svrc::Tensor;

use crate::config::Settings;

#[derive(Parser, Debug)]
#[command(name = "svrc", version, about = "Variable-rate learned image codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an anchor codec and store it in the registry.
    TrainAnchor(TrainAnchorArgs),
    /// Refine quantizers of an anchor for a new lambda.
    Refine(RefineArgs),
    /// Store the convex combination of two derivations as a new one.
    Interpolate(InterpolateArgs),
    /// Compress a PPM image.
    Encode(EncodeArgs),
    /// Decompress a bitstream to PPM.
    Decode(DecodeArgs),
    /// RD points of anchors, derivations and interpolations.
    EvalRd(EvalRdArgs),
    /// Bjøntegaard deltas between two rd_points CSV files.
    BdRate(BdRateArgs),
    /// Quantization interval widths around zero.
    Intervals(IntervalsArgs),
    /// RD points of uniform-step quantization on an anchor.
    BaselineSweep(BaselineArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// `key = value` settings file, applied over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for reports.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Registry root; overrides the config file and $SVRC_REGISTRY.
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub quantizer_learning_rate: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Annealing velocity factor.
    #[arg(long = "K")]
    pub velocity: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataFlags {
    /// Directory of training PPM images.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of generated training images when no --data is given.
    #[arg(long, default_value_t = 16)]
    pub synthetic: usize,
}

#[derive(Args, Debug)]
pub struct TrainAnchorArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataFlags,
    /// Anchor id, e.g. `A1`.
    #[arg(long, default_value = "A1")]
    pub id: String,
    #[arg(long)]
    pub levels_main: Option<usize>,
    #[arg(long)]
    pub levels_hyper: Option<usize>,
    /// `lo,hi` or `r` for `-r,r`.
    #[arg(long, allow_hyphen_values = true)]
    pub init_range: Option<String>,
    #[arg(long = "M")]
    pub m: Option<usize>,
    #[arg(long = "N")]
    pub n: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long)]
    pub anchor: String,
    /// Start from this derivation instead of the anchor's quantizers.
    #[arg(long)]
    pub from: Option<String>,
    /// Id of the new derivation; the next free `D<10a+j>` by default.
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Found from the derivation ids when omitted.
    #[arg(long)]
    pub anchor: Option<String>,
    #[arg(long)]
    pub from: String,
    #[arg(long)]
    pub to: String,
    #[arg(long)]
    pub rho: f64,
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub anchor: Option<String>,
    /// Derivation to code with; the anchor's quantizers when omitted.
    #[arg(long, conflicts_with_all = ["from", "to", "rho"])]
    pub stanh: Option<String>,
    #[arg(long, requires_all = ["to", "rho"])]
    pub from: Option<String>,
    #[arg(long, requires_all = ["from", "rho"])]
    pub to: Option<String>,
    #[arg(long, requires_all = ["from", "to"])]
    pub rho: Option<f64>,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub common: Common,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalImages {
    /// Directory of evaluation PPM images.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Number of generated evaluation images when no --images is given.
    #[arg(long, default_value_t = 2)]
    pub eval_synthetic: usize,
    #[arg(long, default_value_t = 256)]
    pub eval_size: usize,
}

#[derive(Args, Debug)]
pub struct EvalRdArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub images: EvalImages,
    /// Anchors to evaluate; every stored anchor when omitted.
    #[arg(long)]
    pub anchor: Vec<String>,
    /// Interpolation weights between consecutive quantizers.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
    pub rho_grid: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct BdRateArgs {
    #[command(flatten)]
    pub common: Common,
    pub curve_a: PathBuf,
    pub curve_b: PathBuf,
}

#[derive(Args, Debug)]
pub struct IntervalsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub anchor: String,
    /// Derivations to include; all stored ones when omitted.
    #[arg(long)]
    pub stanh: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub center_count: usize,
    /// Report the hyper-latent quantizers instead of the main ones.
    #[arg(long)]
    pub hyper: bool,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub images: EvalImages,
    #[arg(long)]
    pub anchor: String,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4,8")]
    pub deltas: Vec<f64>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation or settings: exit 2.
    Usage(anyhow::Error),
    /// The operation itself failed: exit 1.
    Operation(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Operation(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(e) | Self::Operation(e) => write!(f, "{e:#}"),
        }
    }
}

/// Parses `A3` or `3`.
pub fn parse_id(text: &str, prefix: char) -> Result<u16> {
    let digits = text.strip_prefix(prefix).unwrap_or(text);
    digits
        .parse()
        .map_err(|_| anyhow!("expected an id like `{prefix}1`, got `{text}`"))
}

/// Defaults, then the config file, then flags.
pub fn layered_settings(base: TrainConfig, common: &Common, flags: &TrainFlags) -> Result<Settings> {
    let mut s = Settings::new(base);
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    let t = &mut s.train;
    if let Some(v) = common.seed {
        t.seed = v;
    }
    if let Some(v) = flags.lambda {
        t.lambda = v;
    }
    if let Some(v) = flags.steps {
        t.steps = v;
    }
    if let Some(v) = flags.batch {
        t.batch = v;
    }
    if let Some(v) = flags.patch {
        t.patch = v;
    }
    if let Some(v) = flags.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = flags.quantizer_learning_rate {
        t.quantizer_learning_rate = v;
    }
    if let Some(v) = flags.patience {
        t.patience = v;
    }
    if let Some(v) = flags.velocity {
        t.velocity = v;
    }
    Ok(s)
}

/// Flag, then `$SVRC_REGISTRY`, then the config file, then `./registry`.
pub fn registry_root(common: &Common, settings: Option<&Settings>) -> PathBuf {
    if let Some(p) = &common.registry {
        return p.clone();
    }
    if let Some(p) = std::env::var_os(REGISTRY_ENV).filter(|p| !p.is_empty()) {
        return PathBuf::from(p);
    }
    settings
        .and_then(|s| s.registry.clone())
        .unwrap_or_else(|| PathBuf::from("registry"))
}

fn settings_only(common: &Common) -> Result<Settings, Failure> {
    layered_settings(TrainConfig::anchor(), common, &TrainFlags::default()).map_err(Failure::Usage)
}

fn op<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Operation)
}

fn usage<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::TrainAnchor(a) => train_anchor_cmd(a),
        Command::Refine(a) => refine_cmd(a),
        Command::Interpolate(a) => interpolate_cmd(a),
        Command::Encode(a) => encode_cmd(a),
        Command::Decode(a) => decode_cmd(a),
        Command::EvalRd(a) => eval_rd_cmd(a),
        Command::BdRate(a) => bd_rate_cmd(a),
        Command::Intervals(a) => intervals_cmd(a),
        Command::BaselineSweep(a) => baseline_cmd(a),
    }
}

fn training_data(flags: &DataFlags, seed: u64) -> Result<PatchSource> {
    match &flags.data {
        Some(dir) => PatchSource::from_dir(dir).with_context(|| format!("loading {}", dir.display())),
        None => Ok(PatchSource::synthetic(seed, flags.synthetic, 128, 128)?),
    }
}

fn eval_images(flags: &EvalImages, seed: u64) -> Result<Vec<Tensor>> {
    match &flags.images {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .with_context(|| format!("listing {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!("no .ppm images in {}", dir.display());
            }
            paths.iter().map(|p| Ok(load_ppm(p)?.to_tensor())).collect()
        }
        None => Ok((0..flags.eval_synthetic as u64)
            .map(|i| synthetic_image(seed.wrapping_add(1_000_003 + i), flags.eval_size, flags.eval_size).to_tensor())
            .collect()),
    }
}

fn progress(every: usize) -> impl FnMut(&StepReport) {
    let mut acc = (0.0, 0.0, 0.0, 0usize);
    move |r: &StepReport| {
        acc = (acc.0 + r.loss, acc.1 + r.mse, acc.2 + r.bpp, acc.3 + 1);
        if r.step.is_multiple_of(every) {
            let n = acc.3 as f64;
            eprintln!(
                "step {:>6}  loss {:.4}  psnr {:.2} dB  bpp {:.4}  lr {:.1e}",
                r.step,
                acc.0 / n,
                -10.0 * (acc.1 / n).log10(),
                acc.2 / n,
                r.learning_rate
            );
            acc = (0.0, 0.0, 0.0, 0);
        }
    }
}

fn train_anchor_cmd(a: TrainAnchorArgs) -> Result<(), Failure> {
    let id = usage(parse_id(&a.id, 'A'))?;
    let mut s = usage(layered_settings(TrainConfig::anchor(), &a.common, &a.train))?;
    let m = &mut s.train.model;
    if let Some(v) = a.levels_main {
        m.levels_main = v;
    }
    if let Some(v) = a.levels_hyper {
        m.levels_hyper = v;
    }
    if let Some(r) = &a.init_range {
        (m.init_lo, m.init_hi) = usage(config::range(r))?;
    }
    if let Some(v) = a.m {
        m.m = v;
    }
    if let Some(v) = a.n {
        m.n = v;
    }
    usage(s.validate())?;
    let registry = Registry::new(registry_root(&a.common, Some(&s)));
    let data = op(training_data(&a.data, s.train.seed))?;
    let mut log = progress(s.train.steps_per_epoch * 10);
    let model = op(train_anchor_logged(&data, &s.train, &mut log).map_err(Into::into))?;
    let path = op(registry.save_anchor(id, &model).map_err(Into::into))?;
    println!("{}", path.display());
    Ok(())
}

fn refine_cmd(a: RefineArgs) -> Result<(), Failure> {
    let anchor_id = usage(parse_id(&a.anchor, 'A'))?;
    let s = usage(layered_settings(TrainConfig::derivation(), &a.common, &a.train))?;
    let registry = Registry::new(registry_root(&a.common, Some(&s)));
    let anchor = op(registry.load_anchor(anchor_id).map_err(Into::into))?;
    let mut train = s.train;
    train.model = anchor.config;
    usage(train.validate().map_err(Into::into))?;
    let start = match &a.from {
        Some(d) => {
            let from = usage(parse_id(d, 'D'))?;
            RefineStart::from_derivation(&op(registry.load_derivation(anchor_id, from).map_err(Into::into))?)
        }
        None => RefineStart::from_anchor(&anchor),
    };
    let id = match &a.id {
        Some(d) => usage(parse_id(d, 'D'))?,
        None => op(registry.next_derivation_id(anchor_id).map_err(Into::into))?,
    };
    let data = op(training_data(&a.data, train.seed))?;
    let mut log = progress(train.steps_per_epoch * 10);
    let d = op(refine_derivation_logged(&anchor, (anchor_id, id), &start, &data, &train, &mut log).map_err(Into::into))?;
    let path = op(registry.save_derivation(&d).map_err(Into::into))?;
    println!("{}", path.display());
    Ok(())
}

/// The single anchor that stores derivation `id`.
fn anchor_of(registry: &Registry, id: u16) -> Result<u16> {
    let mut owners = Vec::new();
    for a in registry.anchor_ids()? {
        if registry.derivation_path(a, id).is_file() {
            owners.push(a);
        }
    }
    match owners.as_slice() {
        [a] => Ok(*a),
        [] => bail!("no anchor holds derivation D{id}"),
        _ => bail!("derivation D{id} exists under several anchors; pass --anchor"),
    }
}

fn resolve_anchor(registry: &Registry, given: Option<&str>, hint: Option<u16>) -> Result<u16, Failure> {
    match (given, hint) {
        (Some(a), _) => usage(parse_id(a, 'A')),
        (None, Some(d)) => op(anchor_of(registry, d)),
        (None, None) => Err(Failure::Usage(anyhow!("--anchor is required"))),
    }
}

fn interpolate_cmd(a: InterpolateArgs) -> Result<(), Failure> {
    let s = settings_only(&a.common)?;
    let registry = Registry::new(registry_root(&a.common, Some(&s)));
    let (from, to) = (usage(parse_id(&a.from, 'D'))?, usage(parse_id(&a.to, 'D'))?);
    if !(0.0..=1.0).contains(&a.rho) {
        return Err(Failure::Usage(anyhow!("--rho {} outside [0, 1]", a.rho)));
    }
    let hint = if from != 0 { from } else { to };
    let anchor_id = resolve_anchor(&registry, a.anchor.as_deref(), Some(hint))?;
    let anchor = op(registry.load_anchor(anchor_id).map_err(Into::into))?;
    let end = |id: u16| -> Result<(f64, TrainingMeta, LayerPair)> {
        if id == 0 {
            return Ok((anchor.lambda, anchor.meta, anchor.layers.clone()));
        }
        let d = registry.load_derivation(anchor_id, id)?;
        Ok((d.lambda, d.meta, d.layers))
    };
    let (la, ma, pa) = op(end(from))?;
    let (lb, mb, pb) = op(end(to))?;
    let rho = a.rho;
    let layers = LayerPair {
        main: op(svrc::quantizer::interpolate(&pa.main, &pb.main, rho).map_err(Into::into))?,
        hyper: op(svrc::quantizer::interpolate(&pa.hyper, &pb.hyper, rho).map_err(Into::into))?,
    };
    let mix = |x: f64, y: f64| (1.0 - rho) * x + rho * y;
    let id = match &a.id {
        Some(d) => usage(parse_id(d, 'D'))?,
        None => op(registry.next_derivation_id(anchor_id).map_err(Into::into))?,
    };
    let d = Derivation {
        anchor_id,
        id,
        lambda: mix(la, lb),
        layers,
        meta: TrainingMeta {
            seed: s.train.seed,
            steps: 0,
            velocity: ma.velocity.max(mb.velocity),
            beta_max_main: mix(ma.beta_max_main, mb.beta_max_main),
            beta_max_hyper: mix(ma.beta_max_hyper, mb.beta_max_hyper),
        },
    };
    let path = op(registry.save_derivation(&d).map_err(Into::into))?;
    println!("{}", path.display());
    Ok(())
}

fn encode_cmd(a: EncodeArgs) -> Result<(), Failure> {
    let s = settings_only(&a.common)?;
    let registry = Registry::new(registry_root(&a.common, Some(&s)));
    let source = match (&a.stanh, &a.from, &a.to, a.rho) {
        (Some(d), ..) => LayerSource::Derivation(usage(parse_id(d, 'D'))?),
        (None, Some(f), Some(t), Some(rho)) => LayerSource::Interpolation {
            from: usage(parse_id(f, 'D'))?,
            to: usage(parse_id(t, 'D'))?,
            rho: usage(quantize_rho(rho).map_err(Into::into))?,
        },
        _ => LayerSource::Anchor,
    };
    let hint = match source {
        LayerSource::Derivation(d) => Some(d),
        LayerSource::Interpolation { from, to, .. } => [from, to].into_iter().find(|&d| d != 0),
        LayerSource::Anchor => None,
    };
    let anchor_id = resolve_anchor(&registry, a.anchor.as_deref(), hint)?;
    let anchor = op(registry.load_anchor(anchor_id).map_err(Into::into))?;
    let layers = op(registry.resolve(anchor_id, &anchor, source).map_err(Into::into))?;
    let image = op(load_ppm(&a.input).with_context(|| format!("reading {}", a.input.display())))?;
    let stream = op(encode_image(&image.to_tensor(), &anchor, anchor_id, source, &layers).map_err(Into::into))?;
    op(write_atomic(&a.output, &stream.to_bytes()).map_err(Into::into))?;
    println!("{} bytes, {:.4} bpp", stream.len(), stream.bpp());
    Ok(())
}

fn decode_cmd(a: DecodeArgs) -> Result<(), Failure> {
    let s = settings_only(&a.common)?;
    let registry = Registry::new(registry_root(&a.common, Some(&s)));
    let bytes = op(std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display())))?;
    let x_hat = op(registry.decode(&bytes).map_err(Into::into))?;
    let image = op(PpmImage::from_tensor(&x_hat).map_err(Into::into))?;
    op(write_ppm(&image, &a.output).map_err(Into::into))?;
    Ok(())
}

fn print_points(points: &[RdPoint]) {
    for p in points {
        println!("{:<28} {:.4} bpp  {:.3} dB", p.label, p.bpp, p.psnr);
    }
}

fn eval_rd_cmd(a: EvalRdArgs) -> Result<(), Failure> {
    let s = settings_only(&a.common)?;
    if a.rho_grid.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Failure::Usage(anyhow!("--rho-grid values must lie in [0, 1]")));
    }
    let registry = Registry::new(registry_root(&a.common, Some(&s)));
    let ids = if a.anchor.is_empty() {
        op(registry.anchor_ids().map_err(Into::into))?
    } else {
        a.anchor.iter().map(|x| parse_id(x, 'A')).collect::<Result<Vec<_>>>().map_err(Failure::Usage)?
    };
    if ids.is_empty() {
        return Err(Failure::Operation(anyhow!("no anchors in {}", registry.root().display())));
    }
    let models: Vec<AnchorModel> = op(ids
        .iter()
        .map(|&id| registry.load_anchor(id).map_err(Into::into))
        .collect::<Result<_>>())?;
    let mut sets = Vec::new();
    for (&id, model) in ids.iter().zip(&models) {
        let derivations = op(registry
            .derivation_ids(id)
            .and_then(|ds| ds.into_iter().map(|d| registry.load_derivation(id, d)).collect())
            .map_err(Into::into))?;
        sets.push(AnchorSet {
            id,
            model,
            derivations,
        });
    }
    let images = op(eval_images(&a.images, s.train.seed))?;
    let points = op(rd_sweep(&sets, &a.rho_grid, &images).map_err(Into::into))?;
    let path = a.common.out.join("rd_points.csv");
    op(write_rd_points(&path, &points).map_err(Into::into))?;
    print_points(&points);
    Ok(())
}

fn bd_rate_cmd(a: BdRateArgs) -> Result<(), Failure> {
    let read = |p: &Path| read_rd_points(p).map_err(|e| anyhow!("{}: {e}", p.display()));
    let (ca, cb) = (op(read(&a.curve_a))?, op(read(&a.curve_b))?);
    let m = op(bd_metrics(&ca, &cb).map_err(Into::into))?;
    let name = |p: &Path| p.display().to_string();
    let path = a.common.out.join("bd.csv");
    op(write_bd(&path, &[(name(&a.curve_a), name(&a.curve_b), m)]).map_err(Into::into))?;
    println!("BD-Rate {:+.3} %  BD-PSNR {:+.4} dB", m.rate_percent, m.psnr_db);
    Ok(())
}

fn intervals_cmd(a: IntervalsArgs) -> Result<(), Failure> {
    let s = settings_only(&a.common)?;
    let registry = Registry::new(registry_root(&a.common, Some(&s)));
    let anchor_id = usage(parse_id(&a.anchor, 'A'))?;
    let anchor = op(registry.load_anchor(anchor_id).map_err(Into::into))?;
    let ids = if a.stanh.is_empty() {
        op(registry.derivation_ids(anchor_id).map_err(Into::into))?
    } else {
        a.stanh.iter().map(|x| parse_id(x, 'D')).collect::<Result<Vec<_>>>().map_err(Failure::Usage)?
    };
    let pick = |p: &LayerPair| if a.hyper { p.hyper.clone() } else { p.main.clone() };
    let mut layers = vec![(format!("A{anchor_id}"), pick(&anchor.layers))];
    for id in ids {
        let d = op(registry.load_derivation(anchor_id, id).map_err(Into::into))?;
        layers.push((format!("A{anchor_id}/D{id}"), pick(&d.layers)));
    }
    let report = usage(interval_report(&layers, a.center_count).map_err(Into::into))?;
    let path = a.common.out.join("intervals.csv");
    op(write_intervals(&path, &report).map_err(Into::into))?;
    for (label, _) in &layers {
        if let Some(w) = report.central_width(label) {
            println!("{label:<12} central width {w:.4}");
        }
    }
    Ok(())
}

fn baseline_cmd(a: BaselineArgs) -> Result<(), Failure> {
    let s = settings_only(&a.common)?;
    if a.deltas.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
        return Err(Failure::Usage(anyhow!("--deltas must be positive")));
    }
    let registry = Registry::new(registry_root(&a.common, Some(&s)));
    let anchor_id = usage(parse_id(&a.anchor, 'A'))?;
    let anchor = op(registry.load_anchor(anchor_id).map_err(Into::into))?;
    let images = op(eval_images(&a.images, s.train.seed))?;
    let points = op(uniform_baseline_sweep(&anchor, &a.deltas, &images).map_err(Into::into))?;
    let path = a.common.out.join("baseline.csv");
    op(write_rd_points(&path, &points).map_err(Into::into))?;
    print_points(&points);
    Ok(())
}
