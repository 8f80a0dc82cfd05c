//! `iron`: dataset generation, training, prediction, benchmarking and
//! landscape export from one JSON config.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iron_core::baselines::Method;
use iron_core::bench::{run_benchmark, BenchConfig, BenchmarkReport, IronSource};
use iron_core::config::RunConfig;
use iron_core::landscape::{
    argmax_tensor, GridIndex, SimilarityTensor, DEFAULT_WINDOW, LABEL_SCALE,
};
use iron_core::net::{predict_optimum, IronModel, OffsetPredictor, PerfectStub};
use iron_core::synth::{build_dataset, random_scene_specs, scene_tensor};
use iron_core::trainer::{
    evaluate_split, read_dataset, split_dataset, train, write_dataset, write_loss_csv,
};
use iron_core::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "iron", version, about = "Learned one-shot optimizer for point-set registration")]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    /// Master seed. Falls back to the config file, then IRON_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training dataset and its manifest.
    GenData {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        centers: Option<usize>,
    },
    /// Train a model on a dataset.
    Train {
        /// Defaults to `<out>/dataset.irnd`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// One-shot prediction from a single window of a tensor file.
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        tensor: PathBuf,
        /// Initialization node, 1-based, as `i,j,k`.
        #[arg(long)]
        center: String,
    },
    /// Compare methods over a seeded scene suite.
    Benchmark {
        /// Comma-separated subset of anneal,ga,ps,pso,iron.
        #[arg(long, default_value = "anneal,ga,ps,pso,iron")]
        methods: String,
        #[command(flatten)]
        model: ModelArgs,
        /// Drop noise and outliers from the suite.
        #[arg(long)]
        noiseless: bool,
    },
    /// Write the full similarity tensor of one scene.
    ExportLandscape {
        /// Scene seed; defaults to the master seed.
        #[arg(long)]
        scene_seed: Option<u64>,
        /// Defaults to `<out>/landscape.irnt`.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Test hook: replace the network by an oracle that predicts the
    /// tensor argmax exactly.
    #[arg(long, conflicts_with = "model")]
    stub_perfect: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Format => 3,
                ErrorKind::Runtime => 4,
            })
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let (mut cfg, mut explicit_seed) = match &cli.config {
        Some(p) => {
            let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| Error::config(p.display().to_string(), e.to_string()))?;
            (RunConfig::load(p)?, raw.get("seed").is_some())
        }
        None => (RunConfig::default(), false),
    };
    for o in &cli.overrides {
        let (path, value) = o
            .split_once('=')
            .ok_or_else(|| Error::config(o.as_str(), "expected PATH=VALUE"))?;
        cfg.set(path, value)?;
        explicit_seed |= path == "seed";
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    } else if !explicit_seed {
        if let Ok(v) = std::env::var("IRON_SEED") {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config("IRON_SEED", format!("not an unsigned integer: {v:?}")))?;
        }
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::GenData { scenes, centers } => {
            if let Some(s) = scenes {
                cfg.dataset.scenes = *s;
            }
            if let Some(c) = centers {
                cfg.dataset.centers_per_scene = *c;
            }
        }
        Command::Train { epochs: Some(e), .. } => cfg.train.epochs = *e,
        Command::Benchmark { noiseless: true, .. } => cfg.suite.noiseless = true,
        _ => {}
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("threads", "must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("threads", e.to_string()))?;
    }
    match cli.command {
        Command::GenData { .. } => gen_data(&cfg),
        Command::Train { dataset, .. } => train_cmd(&cfg, dataset),
        Command::Predict { model, tensor, center } => predict(&cfg, &model, &tensor, &center),
        Command::Benchmark { methods, model, .. } => benchmark(&cfg, &methods, &model),
        Command::ExportLandscape { scene_seed, file } => export_landscape(&cfg, scene_seed, file),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn create_path(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let d = &cfg.dataset;
    let specs = random_scene_specs(&d.template, &cfg.grid, d.scenes, cfg.seed)?;
    eprintln!("building {} scene tensors", specs.len());
    let (samples, manifest) = build_dataset(&specs, d.centers_per_scene, &cfg.landscape())?;
    let mut w = create(&cfg.output_dir, "dataset.irnd")?;
    write_dataset(&samples, &mut w)?;
    w.flush()?;
    let mut w = create(&cfg.output_dir, "dataset.json")?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.flush()?;
    let l = &manifest.labels;
    println!("samples: {}", samples.len());
    println!("label mean: {:.6} {:.6} {:.6}", l.mean[0], l.mean[1], l.mean[2]);
    println!("label min: {:.6} {:.6} {:.6}", l.min[0], l.min[1], l.min[2]);
    println!("label max: {:.6} {:.6} {:.6}", l.max[0], l.max[1], l.max[2]);
    Ok(())
}

fn train_cmd(cfg: &RunConfig, dataset: Option<PathBuf>) -> Result<()> {
    let path = dataset.unwrap_or_else(|| cfg.output_dir.join("dataset.irnd"));
    let samples = read_dataset(BufReader::new(File::open(&path)?))?;
    let (train_set, val_set) =
        split_dataset(&samples, 1.0 - cfg.dataset.validation_fraction, cfg.seed);
    let mut model = IronModel::new(cfg.model.architecture.clone(), cfg.model.input_norm, cfg.seed)?;
    eprintln!(
        "training on {} samples, validating on {}",
        train_set.len(),
        val_set.len()
    );
    let history = train(&mut model, &train_set, &cfg.train, |epoch, loss| {
        eprintln!("epoch {epoch}: loss {loss:.6}");
    })?;
    let mut w = create(&cfg.output_dir, "model.irnw")?;
    model.save(&mut w)?;
    w.flush()?;
    let mut w = create(&cfg.output_dir, "loss.csv")?;
    write_loss_csv(&history, &mut w)?;
    w.flush()?;
    let train_eval = evaluate_split(&model, &train_set)?;
    println!("train loss: {:.6}", train_eval.mean_loss);
    println!("train param accuracy: {:.4}", train_eval.param_accuracy);
    if val_set.is_empty() {
        println!("validation: none");
    } else {
        let v = evaluate_split(&model, &val_set)?;
        println!("validation loss: {:.6}", v.mean_loss);
        println!("validation param accuracy: {:.4}", v.param_accuracy);
    }
    Ok(())
}

fn parse_center(s: &str, size: usize) -> Result<GridIndex> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::config("center", format!("expected i,j,k with 1-based indices, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut c = [0usize; 3];
    for (slot, p) in c.iter_mut().zip(parts) {
        let v: usize = p.parse().map_err(|_| bad())?;
        if v == 0 || v > size {
            return Err(Error::config("center", format!("index {v} outside 1..={size}")));
        }
        *slot = v - 1;
    }
    Ok(c)
}

fn load_model(cfg: &RunConfig, args: &ModelArgs) -> Result<Option<IronModel>> {
    match &args.model {
        Some(p) => Ok(Some(IronModel::load(
            BufReader::new(File::open(p)?),
            &cfg.model.architecture,
        )?)),
        None => Ok(None),
    }
}

fn predict(cfg: &RunConfig, args: &ModelArgs, tensor: &Path, center: &str) -> Result<()> {
    if !args.stub_perfect && args.model.is_none() {
        return Err(Error::MissingModel("pass --model or --stub-perfect".into()));
    }
    let t = SimilarityTensor::read_from(BufReader::new(File::open(tensor)?))?;
    let c = parse_center(center, t.size())?;
    t.grid().check_admissible(c, DEFAULT_WINDOW)?;
    let model = load_model(cfg, args)?;
    let stub = PerfectStub { optimum: argmax_tensor(&t) };
    let predictor: &dyn OffsetPredictor = match &model {
        Some(m) => m,
        None => &stub,
    };
    let p = predict_optimum(predictor, &t, c, LABEL_SCALE)?;
    let step = t.grid().spacing();
    let node: [i64; 3] = std::array::from_fn(|a| {
        c[a] as i64 + (p.raw_output[a] * LABEL_SCALE).round() as i64 + 1
    });
    let fmt3 = |v: [f64; 3]| format!("{:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    println!("init node: {} {} {}", c[0] + 1, c[1] + 1, c[2] + 1);
    println!("init translation: {}", fmt3(p.init_translation));
    println!("offset normalized: {}", fmt3([p.raw_output[0], p.raw_output[1], p.raw_output[2]]));
    println!("offset steps: {}", fmt3(std::array::from_fn(|a| p.offset[a] / step[a])));
    println!("offset metres: {}", fmt3(p.offset));
    println!("estimated optimum: {}", fmt3(p.translation));
    println!("estimated node: {} {} {}", node[0], node[1], node[2]);
    println!("evaluations: {}", p.evaluation_count);
    Ok(())
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let methods = s
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(Method::parse)
        .collect::<Result<Vec<_>>>()?;
    if methods.is_empty() {
        return Err(Error::config("methods", "empty list"));
    }
    Ok(methods)
}

fn print_summary(report: &BenchmarkReport) {
    let mut header = format!("{:<10}", "metric");
    for m in &report.methods {
        header += &format!(" {:>20}", m.method.name());
    }
    println!("{header}");
    let rows: [(&str, fn(&iron_core::bench::MethodSummary) -> iron_core::bench::MeanStd); 6] = [
        ("ParamAcc", |m| m.param_accuracy),
        ("ParamRMSE", |m| m.param_rmse),
        ("PointAcc", |m| m.point_accuracy),
        ("PointRMSE", |m| m.point_rmse),
        ("Runtime", |m| m.runtime_seconds),
        ("OptiStep", |m| m.opti_step),
    ];
    for (name, get) in rows {
        let mut line = format!("{name:<10}");
        for m in &report.methods {
            let v = get(m);
            line += &format!(" {:>20}", format!("{:.3} ± {:.3}", v.mean, v.std));
        }
        println!("{line}");
    }
    let failed: usize = report.methods.iter().map(|m| m.failed).sum();
    println!("failed trials: {failed}");
}

fn benchmark(cfg: &RunConfig, methods: &str, args: &ModelArgs) -> Result<()> {
    let methods = parse_methods(methods)?;
    let wants_iron = methods.contains(&Method::Iron);
    if wants_iron && !args.stub_perfect && args.model.is_none() {
        return Err(Error::MissingModel("iron requested without --model or --stub-perfect".into()));
    }
    let model = if wants_iron { load_model(cfg, args)? } else { None };
    let iron = match (&model, wants_iron) {
        (Some(m), _) => Some(IronSource::Model(m)),
        (None, true) => Some(IronSource::PerfectStub),
        (None, false) => None,
    };
    let specs = random_scene_specs(
        &cfg.suite_template(),
        &cfg.grid,
        cfg.suite.scenes,
        cfg.seed.wrapping_add(cfg.suite.seed_offset),
    )?;
    let bench = BenchConfig {
        eval: cfg.eval,
        heuristics: cfg.heuristics.clone(),
        trials_per_scene: cfg.suite.trials_per_scene,
        seed: cfg.seed,
    };
    eprintln!(
        "benchmarking {} methods on {} scenes x {} trials",
        methods.len(),
        specs.len(),
        bench.trials_per_scene
    );
    let report = run_benchmark(&specs, &cfg.landscape(), &methods, iron, &bench)?;
    let mut w = create(&cfg.output_dir, "report.json")?;
    report.write_json(&mut w)?;
    w.flush()?;
    let mut w = create(&cfg.output_dir, "summary.csv")?;
    report.write_csv(&mut w)?;
    w.flush()?;
    print_summary(&report);
    Ok(())
}

fn export_landscape(cfg: &RunConfig, scene_seed: Option<u64>, file: Option<PathBuf>) -> Result<()> {
    let seed = scene_seed.unwrap_or(cfg.seed);
    let spec = random_scene_specs(&cfg.dataset.template, &cfg.grid, 1, seed)?.remove(0);
    let (_, tensor, argmax) = scene_tensor(&spec, &cfg.landscape(), 0)?;
    let path = file.unwrap_or_else(|| cfg.output_dir.join("landscape.irnt"));
    let mut w = create_path(&path)?;
    tensor.write_to(&mut w)?;
    w.flush()?;
    println!("tensor: {}", path.display());
    println!("nodes per axis: {}", tensor.size());
    println!("argmax node: {} {} {}", argmax[0] + 1, argmax[1] + 1, argmax[2] + 1);
    Ok(())
}
