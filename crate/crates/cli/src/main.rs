//! `gmcn`: fit inputs, train and evaluate networks, render mixtures, and run
//! the fitting benchmarks, memory calculator and gradient checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gmcn::autodiff::suite::{check_model, check_operation, OPERATIONS};
use gmcn::autodiff::GradCheckConfig;
use gmcn::harness::{bench_fitting, memcalc, render, BenchConfig, FootprintSpec, Slice};
use gmcn::input::{fit_pointcloud_mixture, read_point_cloud, MnistSplit, PointFitMethod};
use gmcn::serialize::{from_text, load_mixtures, save_mixtures};
use gmcn::train::{evaluate, load_splits, mnist_dataset, Checkpoint, DataConfig, TrainConfig, Trainer};
use gmcn::{BoundingBox, MixtureBatch};

#[derive(Debug, Parser)]
#[command(name = "gmcn", version, about)]
struct Cli {
    /// TOML config; its keys are overridden by the flags below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads: 0 uses every core, 1 is fully deterministic.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Compute device. Only `cpu` exists; the flag is reserved.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit input mixtures to MNIST images or point clouds.
    FitInput(FitInputArgs),
    /// Train a classifier; writes metrics.tsv and checkpoints to --out.
    Train(TrainArgs),
    /// Accuracy and confusion matrix of a checkpoint.
    Eval(EvalArgs),
    /// Render one channel of a mixture file to a PPM image.
    Render(RenderArgs),
    /// Minimal memory footprint per convolution module.
    Memcalc(MemcalcArgs),
    /// Speed and accuracy of the activation and reduction methods.
    BenchFitting(BenchArgs),
    /// Finite-difference checks of every differentiable operation.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
struct FitInputArgs {
    /// Directory with the MNIST IDX files.
    #[arg(long, conflicts_with = "points")]
    mnist: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "train")]
    split: Split,

    /// Use only the first N images.
    #[arg(long)]
    limit: Option<usize>,

    /// Point clouds (`x y z` text or OFF), one sample each.
    #[arg(long, num_args = 1..)]
    points: Vec<PathBuf>,

    /// Point-cloud fitting: kmeans, kmeans+em or rand+em.
    #[arg(long, default_value = "kmeans")]
    method: String,

    #[arg(long, default_value_t = 16)]
    components: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Mixture file, binary (`.gm`) or text.
    input: PathBuf,
    /// PPM file to write; defaults to `<out>/render.ppm`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    /// `xmin,ymin,xmax,ymax` of the image plane.
    #[arg(long, value_delimiter = ',', default_values_t = [-10.0, -10.0, 10.0, 10.0], allow_hyphen_values = true)]
    bbox: Vec<f64>,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    /// Axis held fixed when rendering a 3D mixture.
    #[arg(long, default_value_t = 2)]
    slice_axis: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    slice_value: f64,
}

#[derive(Debug, Args)]
struct MemcalcArgs {
    /// Convolution emits 2·N_p Gaussians directly instead of F_i·N_i·N_k.
    #[arg(long)]
    fused: bool,
    #[arg(long, default_value_t = 32)]
    batch: u64,
    /// TOML footprint spec replacing the reference network.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    reduce_to: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    /// Skip the least-squares reference.
    #[arg(long)]
    no_least_squares: bool,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    /// Operations to check; all of them plus the model by default.
    #[arg(long, num_args = 1..)]
    ops: Vec<String>,
    #[arg(long, default_value_t = 10)]
    points: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if cli.device != "cpu" {
        bail!("device {:?} is not available; only cpu is supported", cli.device);
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::FitInput(a) => fit_input(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Eval(a) => eval(&cli, a),
        Command::Render(a) => render_cmd(&cli, a),
        Command::Memcalc(a) => memcalc_cmd(a),
        Command::BenchFitting(a) => bench(&cli, a),
        Command::GradCheck(a) => grad_check(&cli, a),
    }
}

fn out_dir(cli: &Cli, default: &Path) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| default.to_path_buf());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn read_mixture_file(path: &Path) -> Result<MixtureBatch> {
    let m = if path.extension().is_some_and(|e| e == "gm") {
        load_mixtures(path)?
    } else {
        from_text(&fs::read_to_string(path)?)?
    };
    Ok(m)
}

fn fit_input(cli: &Cli, a: &FitInputArgs) -> Result<ExitCode> {
    let dir = out_dir(cli, Path::new("."))?;
    let seed = cli.seed.unwrap_or(0);
    let (m, labels, name) = if let Some(mnist) = &a.mnist {
        let split = match a.split {
            Split::Train => MnistSplit::Train,
            Split::Test => MnistSplit::Test,
        };
        let d = mnist_dataset(mnist, split, a.limit, a.components, seed, None)?;
        let name = match a.split {
            Split::Train => "mnist-train",
            Split::Test => "mnist-test",
        };
        (d.inputs, Some(d.labels), name)
    } else if !a.points.is_empty() {
        let method: PointFitMethod = a.method.parse()?;
        let mut samples = Vec::with_capacity(a.points.len());
        for (i, p) in a.points.iter().enumerate() {
            let pts = read_point_cloud(p).with_context(|| format!("reading {}", p.display()))?;
            let gs = fit_pointcloud_mixture(&pts, a.components, method, seed.wrapping_add(i as u64))?;
            samples.push(MixtureBatch::from_channel(pts.dims, gs)?);
        }
        (MixtureBatch::stack(&samples)?, None, "points")
    } else {
        bail!("give either --mnist DIR or --points FILE...");
    };
    let path = dir.join(format!("{name}.gm"));
    save_mixtures(&path, &m)?;
    println!("wrote {} samples to {}", m.batch(), path.display());
    if let Some(labels) = labels {
        let lp = dir.join(format!("{name}.labels.json"));
        fs::write(&lp, serde_json::to_vec(&labels)?)?;
        println!("wrote labels to {}", lp.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn train_config(cli: &Cli, a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &cli.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(t) = cli.threads {
        c.threads = t;
    }
    if let Some(o) = &cli.out {
        c.out = o.clone();
    }
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        c.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        c.batch_size = b;
    }
    c.validate()?;
    Ok(c)
}

fn cache_dir(data: &DataConfig, out: &Path) -> Result<Option<PathBuf>> {
    Ok(match data {
        DataConfig::Mnist { .. } => {
            let d = out.join("cache");
            fs::create_dir_all(&d)?;
            Some(d)
        }
        _ => None,
    })
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<ExitCode> {
    let config = train_config(cli, a)?;
    let out = config.out.clone();
    fs::create_dir_all(&out)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut state = Checkpoint::load(p).with_context(|| format!("reading {}", p.display()))?;
            state.config.epochs = config.epochs;
            state.config.threads = config.threads;
            state.config.out = out.clone();
            let cache = cache_dir(&state.config.data, &out)?;
            let (tr, te) = load_splits(&state.config.data, state.config.seed, cache.as_deref())?;
            Trainer::resume(state, tr, te, Some(out.clone()))?
        }
        None => {
            fs::write(out.join("config.toml"), config.to_toml()?)?;
            let cache = cache_dir(&config.data, &out)?;
            let (tr, te) = load_splits(&config.data, config.seed, cache.as_deref())?;
            Trainer::new(config, tr, te, Some(out.clone()))?
        }
    };
    let metrics = trainer.run()?;
    if let Some(m) = metrics.last() {
        println!(
            "epoch {}: test accuracy {:.4}, best {:.4}",
            m.epoch, m.test.accuracy, trainer.state.best_accuracy
        );
    }
    println!("metrics and checkpoints in {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<ExitCode> {
    let state = Checkpoint::load(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let data = match &cli.config {
        Some(p) => TrainConfig::load(p)?.data,
        None => state.config.data.clone(),
    };
    let seed = cli.seed.unwrap_or(state.config.seed);
    let out = cli.out.clone().unwrap_or_else(|| state.config.out.clone());
    let cache = cache_dir(&data, &out)?;
    let (_, test) = load_splits(&data, seed, cache.as_deref())?;
    let test = gmcn::train::Dataset::new(state.normalization.apply(&test.inputs)?, test.labels, test.classes)?;
    let r = evaluate(&state.model, &test, a.batch_size)?;
    println!("accuracy\t{:.6}", r.accuracy);
    println!("loss\t{:.6}", r.loss);
    println!("confusion (rows: true class, columns: predicted)");
    for row in &r.confusion {
        println!("{}", row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("\t"));
    }
    Ok(ExitCode::SUCCESS)
}

fn render_cmd(cli: &Cli, a: &RenderArgs) -> Result<ExitCode> {
    let m = read_mixture_file(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let gs = m.channel(a.batch, a.channel)?;
    let slice = (m.dims() == 3).then_some(Slice {
        axis: a.slice_axis,
        value: a.slice_value,
    });
    if a.bbox.len() != 4 {
        bail!("--bbox takes four values, got {}", a.bbox.len());
    }
    let bbox = BoundingBox::new(vec![a.bbox[0], a.bbox[1]], vec![a.bbox[2], a.bbox[3]]);
    let img = render(gs, m.dims(), &bbox, a.width, a.height, slice)?;
    let path = match &a.output {
        Some(p) => p.clone(),
        None => out_dir(cli, Path::new("."))?.join("render.ppm"),
    };
    img.save_ppm(&path)?;
    println!("wrote {}x{} image to {}", a.width, a.height, path.display());
    Ok(ExitCode::SUCCESS)
}

fn memcalc_cmd(a: &MemcalcArgs) -> Result<ExitCode> {
    let spec = match &a.spec {
        Some(p) => toml::from_str::<FootprintSpec>(&fs::read_to_string(p)?)?,
        None => FootprintSpec::reference(a.batch, a.fused),
    };
    if spec.layers.iter().any(|l| [l.f_i, l.f_o, l.n_i, l.n_o, l.n_p, l.n_k].contains(&0)) {
        bail!("footprint spec entries must be positive");
    }
    println!("{}", memcalc(&spec));
    Ok(ExitCode::SUCCESS)
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<ExitCode> {
    let mut c: BenchConfig = match &cli.config {
        Some(p) => toml::from_str(&fs::read_to_string(p)?)?,
        None => BenchConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(v) = a.dims {
        c.dims = v;
    }
    if let Some(v) = a.components {
        c.components = v;
    }
    if let Some(v) = a.reduce_to {
        c.reduce_to = v;
    }
    if let Some(v) = a.instances {
        c.instances = v;
    }
    if a.no_least_squares {
        c.least_squares = false;
    }
    let report = bench_fitting(&c)?;
    print!("{report}");
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bench-fitting.txt"), report.to_string())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn grad_check(cli: &Cli, a: &GradCheckArgs) -> Result<ExitCode> {
    let cfg = GradCheckConfig {
        step: a.step,
        ..Default::default()
    };
    let seed = cli.seed.unwrap_or(0);
    let names: Vec<String> = if a.ops.is_empty() {
        OPERATIONS.iter().map(|s| s.to_string()).chain(["model".to_string()]).collect()
    } else {
        a.ops.clone()
    };
    let mut ok = true;
    println!("{:<16} {:>8} {:>8} {:>12}", "operation", "checked", "skipped", "max_rel_err");
    for (i, name) in names.iter().enumerate() {
        let seed = seed.wrapping_add(i as u64);
        let r = if name == "model" {
            check_model(a.points, seed, &cfg)?
        } else {
            let op = OPERATIONS
                .iter()
                .find(|o| **o == name.as_str())
                .with_context(|| format!("unknown operation {name}; known: {}, model", OPERATIONS.join(", ")))?;
            check_operation(op, a.points, seed, &cfg)?
        };
        let pass = r.max_rel_error < a.tolerance;
        ok &= pass;
        println!(
            "{:<16} {:>8} {:>8} {:>12.3e} {}",
            r.name,
            r.checked,
            r.skipped,
            r.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

#[cfg(test)]
mod tests {
    use super::*;
    use gmcn::serialize::to_text;

    #[test]
    fn flags_override_config_keys() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(&cfg, "seed = 3\nepochs = 7\nlearning_rate = 0.01\n").unwrap();
        let cli = Cli::parse_from(["gmcn", "--config", cfg.to_str().unwrap(), "--seed", "9", "train", "--epochs", "2"]);
        let Command::Train(a) = &cli.command else { panic!() };
        let c = train_config(&cli, a).unwrap();
        assert_eq!((c.seed, c.epochs, c.learning_rate), (9, 2, 0.01));
    }

    #[test]
    fn negative_bbox_values_parse() {
        let cli = Cli::parse_from(["gmcn", "render", "m.gm", "--bbox", "-5,-4,5,4"]);
        let Command::Render(a) = &cli.command else { panic!() };
        assert_eq!(a.bbox, vec![-5.0, -4.0, 5.0, 4.0]);
    }

    #[test]
    fn text_mixtures_are_read_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let m = MixtureBatch::from_channel(2, vec![gmcn::Gaussian::isotropic(1.0, &[0.0, 1.0], 0.5).unwrap()]).unwrap();
        let p = dir.path().join("m.toml");
        fs::write(&p, to_text(&m).unwrap()).unwrap();
        assert_eq!(read_mixture_file(&p).unwrap(), m);
        let q = dir.path().join("m.gm");
        save_mixtures(&q, &m).unwrap();
        assert_eq!(read_mixture_file(&q).unwrap().shape(), m.shape());
    }
}
