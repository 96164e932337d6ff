//! `protoform` command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod formats;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use protoform::analysis::{self, SweepAxis};
use protoform::data::{self, EmbeddingDataset, SplitDataset, SyntheticKind, SyntheticSpec};
use protoform::geometry::{HyperPg, VmfProto};
use protoform::gradcheck::{self, GRAD_TOLERANCE};
use protoform::model::{self, ModelParams};
use protoform::training::{self, evaluate_top1, params_checksum};
use protoform::{Formulation, Prototype, TrainConfig};

/// Prototype formulations for prototypical part classifiers.
#[derive(Parser)]
#[command(name = "protoform", version, after_help = formats::THREADS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test embedding pair.
    #[command(after_help = formats::EMBEDDINGS)]
    GenData(GenDataArgs),
    /// Train a model and write its report and checkpoint.
    #[command(after_help = const_format_train())]
    Train(TrainCmd),
    /// Top-1 accuracy of a checkpoint on an embedding file.
    #[command(after_help = const_format_io())]
    Eval(EvalArgs),
    /// Train across prototype counts or dimensions and several seeds.
    #[command(after_help = const_format_sweep())]
    Sweep(SweepArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Evaluate a hyperspherical prototype on a sphere lattice.
    #[command(after_help = formats::SPHERE)]
    Sphere(SphereArgs),
    /// Export the learned (mu, sigma) of each HyperPG prototype.
    #[command(after_help = formats::CHECKPOINT)]
    Scatter(ScatterArgs),
    /// Training patches most similar to a prototype.
    #[command(after_help = const_format_io())]
    Nearest(NearestArgs),
}

fn const_format_train() -> String {
    [
        formats::REPORT,
        formats::CONFIG,
        formats::EMBEDDINGS,
        formats::CHECKPOINT,
    ]
    .join("\n\n")
}

fn const_format_sweep() -> String {
    [formats::SWEEP, formats::CONFIG, formats::EMBEDDINGS].join("\n\n")
}

fn const_format_io() -> String {
    [formats::EMBEDDINGS, formats::CHECKPOINT].join("\n\n")
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Blobs,
    Hyperspherical,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "hyperspherical")]
    kind: Kind,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    d_in: usize,
    #[arg(long, default_value_t = 1)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    height: usize,
    /// Directional concentration (hyperspherical).
    #[arg(long, default_value_t = 50.0)]
    kappa: f64,
    /// Within-class standard deviation (blobs).
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    /// Standard deviation of class centers (blobs).
    #[arg(long, default_value_t = 2.0)]
    spread: f64,
    #[arg(long, default_value_t = 0.5)]
    norm_min: f64,
    #[arg(long, default_value_t = 2.0)]
    norm_max: f64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for train.emb, test.emb and per-split statistics.
    #[arg(long)]
    out: PathBuf,
}

/// Training flags. Unset flags keep the config-file or built-in value.
#[derive(Args)]
struct TrainFlags {
    /// Key=value configuration file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prototype formulation [default: hyperpg].
    #[arg(long)]
    formulation: Option<Formulation>,
    /// [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Learning rate [default: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Weight decay [default: 1e-4].
    #[arg(long)]
    wd: Option<f64>,
    /// Batch size [default: 48].
    #[arg(long)]
    batch: Option<usize>,
    /// Prototypes per class [default: 10].
    #[arg(long)]
    q: Option<usize>,
    /// Prototype dimensionality [default: 128].
    #[arg(long)]
    dim: Option<usize>,
    /// Neck hidden width [default: d_in / 2].
    #[arg(long)]
    d_hidden: Option<usize>,
    /// Cluster loss weight [default: 0.8].
    #[arg(long)]
    lambda_clst: Option<f64>,
    /// Separation loss weight [default: 0.08].
    #[arg(long)]
    lambda_sep: Option<f64>,
    /// Keep the neck at its random initialization.
    #[arg(long)]
    freeze_neck: bool,
    /// Disable data-parallel evaluation.
    #[arg(long)]
    sequential: bool,
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig, Failure> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            config::apply_file(&mut cfg, path).map_err(Failure::Usage)?;
        }
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag {
                    cfg.$($field)+ = v;
                }
            };
        }
        set!(formulation => formulation);
        set!(epochs => epochs);
        set!(seed => seed);
        set!(lr => learning_rate);
        set!(wd => weight_decay);
        set!(batch => batch_size);
        set!(q => per_class);
        set!(dim => dim);
        set!(lambda_clst => weights.lambda_clst);
        set!(lambda_sep => weights.lambda_sep);
        if self.d_hidden.is_some() {
            cfg.d_hidden = self.d_hidden;
        }
        if self.freeze_neck {
            cfg.trainable.neck = false;
        }
        if self.sequential {
            cfg.parallel = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataFlags {
    /// PROTOEMB1 training embeddings.
    #[arg(long)]
    data: PathBuf,
    /// PROTOEMB1 test embeddings; without it a stratified 80/20 split of
    /// --data is used.
    #[arg(long)]
    test: Option<PathBuf>,
}

impl DataFlags {
    fn load(&self, seed: u64) -> Result<SplitDataset, Failure> {
        let train = load(&self.data)?;
        Ok(match &self.test {
            Some(t) => SplitDataset::new(train, load(t)?)?,
            None => data::stratified_split(&train, 0.2, seed)?,
        })
    }
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    flags: TrainFlags,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Accepted for uniformity; evaluation draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sequential: bool,
    /// Directory for eval.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Q,
    Dim,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    /// Comma-separated formulation tags.
    #[arg(long, value_delimiter = ',', default_value = "cosine,hyperpg")]
    formulations: Vec<Formulation>,
    /// Comma-separated seeds; overrides --seed.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check every formulation.
    #[arg(long, conflicts_with = "formulation")]
    all: bool,
    /// Formulations to check (repeatable).
    #[arg(long)]
    formulation: Vec<Formulation>,
    /// Random points for the similarity check.
    #[arg(long, default_value_t = 100)]
    points: usize,
    /// Random tiny models for the end-to-end check.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sequential: bool,
    /// Directory for gradcheck.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SphereArgs {
    /// Read prototype --proto from this checkpoint instead of building one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    proto: usize,
    /// cosine, vmf or a hyperpg tag.
    #[arg(long, default_value = "hyperpg-trunc-gauss")]
    formulation: Formulation,
    /// Comma-separated anchor direction.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "0,0,1"
    )]
    anchor: Vec<f64>,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    mu: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 10.0)]
    kappa: f64,
    #[arg(long, default_value_t = 181)]
    lat: usize,
    #[arg(long, default_value_t = 360)]
    lon: usize,
    /// Points on the cosine profile.
    #[arg(long, default_value_t = 201)]
    samples: usize,
    /// Pixels per grid cell in sphere.svg.
    #[arg(long, default_value_t = 2)]
    cell_px: usize,
    /// Accepted for uniformity; the lattice is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScatterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Accepted for uniformity; the export is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NearestArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    proto: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Accepted for uniformity; the search is exhaustive.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<protoform::Error> for Failure {
    fn from(e: protoform::Error) -> Self {
        match e {
            protoform::Error::Configuration(_) | protoform::Error::Unsupported { .. } => {
                Failure::Usage(e.into())
            }
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn load(path: &Path) -> Result<EmbeddingDataset, Failure> {
    data::load_embeddings(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::Runtime)
}

fn load_model(path: &Path) -> Result<ModelParams, Failure> {
    model::load_checkpoint(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::Runtime)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Result<(), Failure> {
    let spec = SyntheticSpec {
        kind: match a.kind {
            Kind::Blobs => SyntheticKind::EuclideanBlobs,
            Kind::Hyperspherical => SyntheticKind::HypersphericalVmf,
        },
        classes: a.classes,
        per_class: a.per_class,
        d_in: a.d_in,
        width: a.width,
        height: a.height,
        center_spread: a.spread,
        noise: a.noise,
        concentration: a.kappa,
        norm_range: Some((a.norm_min, a.norm_max)),
        test_fraction: a.test_fraction,
        seed: a.seed,
    };
    let split = data::generate(&spec)?;
    fs::create_dir_all(&a.out)?;
    data::save_embeddings(&split.train, a.out.join("train.emb"))?;
    data::save_embeddings(&split.test, a.out.join("test.emb"))?;
    write(&a.out, "train_stats.csv", split.train.stats_csv())?;
    write(&a.out, "test_stats.csv", split.test.stats_csv())?;
    println!(
        "wrote {} train and {} test records to {}",
        split.train.len(),
        split.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainCmd) -> Result<(), Failure> {
    let cfg = a.flags.resolve()?;
    let data = a.data.load(cfg.seed)?;
    let (report, params) = training::train_with(&data, &cfg, |r| {
        eprintln!(
            "epoch {:>4}  total {:.6}  ce {:.6}  test_acc {:.4}",
            r.epoch, r.total, r.ce, r.test_acc
        );
    })?;
    report.write_to(&a.out, &params)?;
    write(&a.out, "config.txt", config::render(&cfg))?;
    println!(
        "{} final test accuracy {:.4} ({:.1}s), wrote {}",
        cfg.formulation,
        report.final_test_acc(),
        report.wall_time_secs,
        a.out.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let params = load_model(&a.checkpoint)?;
    let data = load(&a.data)?;
    let acc = evaluate_top1(&params, &data, !a.sequential)?;
    println!("top-1 accuracy {acc:.4} on {} records", data.len());
    if let Some(out) = &a.out {
        let summary = serde_json::json!({
            "formulation": params.config.formulation.tag(),
            "records": data.len(),
            "top1": acc,
            "checksum": params_checksum(&params),
        });
        write(
            out,
            "eval.json",
            serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)?,
        )?;
    }
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<(), Failure> {
    let base = a.flags.resolve()?;
    let data = a.data.load(base.seed)?;
    let axis = match a.axis {
        Axis::Q => SweepAxis::PerClass,
        Axis::Dim => SweepAxis::Dim,
    };
    let result = analysis::run_sweep(
        &data,
        axis,
        &a.values,
        &a.formulations,
        &base,
        &a.seeds,
        base.parallel,
    )?;
    write(&a.out, "sweep.csv", result.to_csv())?;
    write(&a.out, "sweep_summary.csv", result.summary_csv())?;
    write(&a.out, "config.txt", config::render(&base))?;
    for c in result.aggregate() {
        println!(
            "{:<22} {}={:<5} acc {:.4} +- {:.4}",
            c.formulation.tag(),
            axis.as_str(),
            c.axis_value,
            c.mean,
            c.std
        );
    }
    for &f in &a.formulations {
        println!("{:<22} spread {:.4}", f.tag(), result.spread(f));
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    let formulations: Vec<Formulation> = if a.all {
        Formulation::ALL.to_vec()
    } else if a.formulation.is_empty() {
        return Err(Failure::Usage(anyhow!(
            "pass --all or at least one --formulation"
        )));
    } else {
        a.formulation.clone()
    };
    let rows = gradcheck::check_all(&formulations, a.points, a.instances, a.seed, !a.sequential)?;
    let mut csv = String::from("formulation,similarity_max_rel_err,model_max_rel_err,passed\n");
    println!(
        "{:<22} {:>14} {:>14}  status",
        "formulation", "similarity", "model"
    );
    for r in &rows {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<22} {:>14.3e} {:>14.3e}  {status}",
            r.formulation.tag(),
            r.similarity_max_rel_err,
            r.model_max_rel_err
        );
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.formulation.tag(),
            r.similarity_max_rel_err,
            r.model_max_rel_err,
            r.passed()
        ));
    }
    if let Some(out) = &a.out {
        write(out, "gradcheck.csv", csv)?;
    }
    if rows.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!(
            "relative gradient error above {GRAD_TOLERANCE:e}"
        )))
    }
}

fn built_prototype(a: &SphereArgs) -> Result<Prototype, Failure> {
    let anchor = a.anchor.clone();
    Ok(match a.formulation {
        Formulation::Cosine => Prototype::Cosine(anchor),
        Formulation::Vmf => {
            if !(a.kappa > 0.0) {
                return Err(Failure::Usage(anyhow!("--kappa must be positive")));
            }
            Prototype::Vmf(VmfProto {
                anchor,
                log_kappa: a.kappa.ln(),
            })
        }
        Formulation::HyperPg(family) => {
            Prototype::HyperPg(HyperPg::new(anchor, a.mu, a.sigma, family)?)
        }
        other => {
            return Err(Failure::Usage(anyhow!(
                "cannot build a `{other}` prototype from flags (use cosine, vmf or a hyperpg tag, or --checkpoint)"
            )))
        }
    })
}

fn sphere(a: &SphereArgs) -> Result<(), Failure> {
    let proto = match &a.checkpoint {
        Some(path) => {
            let params = load_model(path)?;
            let parts = params.bank.parts.len();
            params.bank.parts.get(a.proto).cloned().ok_or_else(|| {
                Failure::Usage(anyhow!("prototype {} out of range ({parts})", a.proto))
            })?
        }
        None => built_prototype(a)?,
    };
    let profile = analysis::cosine_profile(&proto, a.samples)?;
    write(&a.out, "profile.csv", analysis::profile_csv(&profile))?;
    if proto.dim() == 3 {
        let grid = analysis::sphere_activation_grid(&proto, a.lat, a.lon)?;
        write(&a.out, "sphere.csv", grid.to_csv())?;
        write(&a.out, "sphere.svg", grid.to_svg(a.cell_px))?;
        let m = grid.argmax();
        println!(
            "max {:.6} at lon {:.1} lat {:.1}; wrote {}",
            m.value,
            m.lon,
            m.lat,
            a.out.display()
        );
    } else {
        println!("dim {}: wrote the cosine profile only", proto.dim());
    }
    Ok(())
}

fn scatter(a: &ScatterArgs) -> Result<(), Failure> {
    let params = load_model(&a.checkpoint)?;
    let rows = analysis::param_scatter(&params)?;
    write(&a.out, "scatter.csv", analysis::scatter_csv(&rows))?;
    println!("wrote {} prototypes", rows.len());
    Ok(())
}

fn nearest(a: &NearestArgs) -> Result<(), Failure> {
    let params = load_model(&a.checkpoint)?;
    let data = load(&a.data)?;
    let matches = analysis::nearest_patches(&params, &data, a.proto, a.k)?;
    write(&a.out, "nearest.csv", analysis::patches_csv(&matches))?;
    for m in &matches {
        println!(
            "record {:>6} cell ({}, {}) similarity {:.6}",
            m.record, m.x, m.y, m.similarity
        );
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("PROTOFORM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Usage(anyhow!(
            "PROTOFORM_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    configure_threads()?;
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Sphere(a) => sphere(a),
        Command::Scatter(a) => scatter(a),
        Command::Nearest(a) => nearest(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            eprintln!("run with --help for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
