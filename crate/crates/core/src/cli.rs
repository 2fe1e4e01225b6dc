//! Command-line front end. [`run`] returns the process exit code:
//! 0 on success, 1 on usage errors, 2 on runtime errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;

use crate::attack::{edgefool_attack, AttackConfig};
use crate::classifier::{load_model, save_model, train_classifier, ArchId, TrainConfig};
use crate::detector::{calibrate, is_adversarial, DetectorCalibration, Squeezer};
use crate::error::Error;
use crate::harness::{
    derive_seed, generate_synthetic, load_dataset, read_rows_csv, render_metrics, run_evaluation, compute_metrics,
    ExperimentConfig, SynthConfig,
};
use crate::image::Image;
use crate::smoothing::{l0_smooth_traced, L0Config};

#[derive(Debug, Parser)]
#[command(name = "edgefool", version, about = "Detail-enhancing adversarial images: attack, detect, evaluate")]
struct Cli {
    /// JSON config for the subcommand
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic desk dataset (train/test/calib/heldout splits)
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on a class-per-directory tree
    Train(TrainArgs),
    /// Run l0 smoothing on image files
    Smooth(SmoothArgs),
    /// Attack one image or every image in a directory
    Attack(AttackArgs),
    /// Calibrate the feature-squeezing detector or score images
    Detect {
        #[command(subcommand)]
        action: DetectAction,
    },
    /// Full evaluation driven by an experiment config
    Eval,
    /// Re-render metrics from a per-image CSV
    Report {
        csv: PathBuf,
        /// Print metrics as JSON instead of a table
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Optional test split for reporting accuracy
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value = "cnn-a")]
    arch: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SmoothArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    beta_max: Option<f64>,
}

#[derive(Debug, Args)]
struct AttackArgs {
    /// Image file or directory of PNG/PPM files
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Write per-iteration losses to `<name>.trace.csv`
    #[arg(long)]
    trace: bool,
    /// Structure-network dilations, comma separated (last = output layer)
    #[arg(long, value_delimiter = ',')]
    dilations: Option<Vec<usize>>,
}

#[derive(Debug, Subcommand)]
enum DetectAction {
    /// Fit thresholds on clean images
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        /// Class-per-directory tree of clean images
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        target_fpr: f64,
    },
    /// Flag images with a saved calibration
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> std::result::Result<T, Failure> {
    let Some(path) = path else { return Ok(T::default()) };
    let bytes = std::fs::read(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn pool(jobs: Option<usize>) -> std::result::Result<rayon::ThreadPool, Failure> {
    let n = jobs.unwrap_or(1);
    if n == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| usage(e.to_string()))
}

fn image_inputs(input: &Path) -> std::result::Result<Vec<PathBuf>, Failure> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| usage(format!("{}: {e}", input.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && matches!(
                        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                        Some("png" | "ppm")
                    )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(usage(format!("{} contains no PNG/PPM files", input.display())));
        }
        Ok(files)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(usage(format!("no such file or directory: {}", input.display())))
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

fn require(path: &Path, what: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn gen_data(cli: &Cli, out: &Path) -> CliResult {
    let cfg: SynthConfig = read_config(cli.config.as_deref())?;
    generate_synthetic(out, &cfg, cli.seed.unwrap_or(0))?;
    println!("wrote synthetic dataset to {}", out.display());
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> CliResult {
    let cfg: TrainConfig = read_config(cli.config.as_deref())?;
    let arch: ArchId = a.arch.parse().map_err(|e: Error| usage(e.to_string()))?;
    require(&a.data, "training data")?;
    let train = load_dataset(&a.data)?;
    let test = match &a.test {
        Some(p) => {
            require(p, "test data")?;
            load_dataset(p)?.samples
        }
        None => Vec::new(),
    };
    let out = train_classifier(&train.samples, &test, arch, train.class_names.len(), &cfg, cli.seed.unwrap_or(0))?;
    save_model(&out.model, &a.out)?;
    println!(
        "{arch}: train accuracy {:.4}{}; saved {}",
        out.train_accuracy,
        out.test_accuracy.map(|t| format!(", test accuracy {t:.4}")).unwrap_or_default(),
        a.out.display()
    );
    Ok(())
}

fn smooth(cli: &Cli, a: &SmoothArgs) -> CliResult {
    let mut cfg: L0Config = read_config(cli.config.as_deref())?;
    if let Some(l) = a.lambda {
        cfg = L0Config { beta0: 2.0 * l, lambda: l, ..cfg };
    }
    if let Some(k) = a.kappa {
        cfg.kappa = k;
    }
    if let Some(b) = a.beta_max {
        cfg.beta_max = b;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    std::fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    for input in &a.inputs {
        require(input, "input image")?;
        let img = Image::load(input)?;
        let out = l0_smooth_traced(&img, &cfg)?;
        let dest = a.out_dir.join(format!("{}.png", stem(input)));
        out.image.save(&dest)?;
        println!(
            "{} -> {} ({} iterations, energy {:.6})",
            input.display(),
            dest.display(),
            out.energy_trace.len(),
            out.energy_trace.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn attack(cli: &Cli, a: &AttackArgs) -> CliResult {
    let mut cfg: AttackConfig = read_config(cli.config.as_deref())?;
    if let Some(d) = &a.dilations {
        cfg.fcnn.dilations = d.clone();
    }
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    require(&a.model, "model")?;
    let inputs = image_inputs(&a.input)?;
    let model = load_model(&a.model)?;
    let pool = pool(cli.jobs)?;
    std::fs::create_dir_all(&a.out_dir).map_err(Error::from)?;

    let results: Vec<_> = pool.install(|| {
        inputs
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let img = Image::load(p)?;
                let cfg = AttackConfig {
                    seed: if inputs.len() == 1 { seed } else { derive_seed(seed, i as u64) },
                    ..cfg.clone()
                };
                edgefool_attack(&img, &model, &cfg, None)
            })
            .collect()
    });
    let mut failed = 0;
    for (p, res) in inputs.iter().zip(results) {
        let res = res?;
        let name = stem(p);
        res.adversarial.save(&a.out_dir.join(format!("{name}.png")))?;
        if a.trace {
            let mut w = csv::Writer::from_path(a.out_dir.join(format!("{name}.trace.csv"))).map_err(Error::from)?;
            w.write_record(["iteration", "total", "smooth", "adversarial"]).map_err(Error::from)?;
            for (i, l) in res.trace.iter().enumerate() {
                w.write_record([i.to_string(), l.total.to_string(), l.smooth.to_string(), l.adversarial.to_string()])
                    .map_err(Error::from)?;
            }
            w.flush().map_err(Error::from)?;
        }
        failed += usize::from(!res.success);
        let loss = res.loss.expect("edgefool reports losses");
        println!(
            "{}: label {} -> {} {} after {} iterations (L_s {:.3e}, L_adv {:.4})",
            p.display(),
            res.original_label,
            res.adversarial_label,
            if res.success { "success" } else { "failed" },
            res.iterations,
            loss.smooth,
            loss.adversarial
        );
    }
    if failed > 0 {
        eprintln!("warning: {failed} of {} attacks did not succeed", inputs.len());
    }
    Ok(())
}

fn detect(cli: &Cli, action: &DetectAction) -> CliResult {
    match action {
        DetectAction::Calibrate {
            model,
            clean,
            out,
            target_fpr,
        } => {
            let squeezers: Vec<Squeezer> = match cli.config.as_deref() {
                Some(p) => read_config::<Vec<Squeezer>>(Some(p))?,
                None => Squeezer::default_set(),
            };
            for s in &squeezers {
                s.validate().map_err(|e| usage(e.to_string()))?;
            }
            if !(*target_fpr > 0.0 && *target_fpr < 1.0) {
                return Err(usage(format!("--target-fpr must be in (0, 1), got {target_fpr}")));
            }
            require(model, "model")?;
            require(clean, "clean image set")?;
            let model = load_model(model)?;
            let images: Vec<Image> = load_dataset(clean)?.samples.into_iter().map(|s| s.image).collect();
            let cal = pool(cli.jobs)?.install(|| calibrate(&model, &images, &squeezers, *target_fpr))?;
            cal.save(out)?;
            for (s, t) in cal.squeezers.iter().zip(&cal.thresholds) {
                println!("{s}: threshold {t:.6}");
            }
            println!("saved {}", out.display());
            Ok(())
        }
        DetectAction::Score {
            model,
            calibration,
            inputs,
        } => {
            require(model, "model")?;
            require(calibration, "calibration")?;
            let model = load_model(model)?;
            let cal = DetectorCalibration::load(calibration)?;
            let mut files = Vec::new();
            for i in inputs {
                files.extend(image_inputs(i)?);
            }
            for f in files {
                let d = is_adversarial(&cal, &model, &Image::load(&f)?)?;
                let cells: Vec<String> = cal
                    .squeezers
                    .iter()
                    .zip(d.scores.iter().zip(&d.flags))
                    .map(|(s, (v, flag))| format!("{s}={v:.4}{}", if *flag { "!" } else { "" }))
                    .collect();
                println!(
                    "{}: {} {}",
                    f.display(),
                    if d.flags.iter().any(|&x| x) { "FLAGGED" } else { "clean" },
                    cells.join(" ")
                );
            }
            Ok(())
        }
    }
}

fn eval(cli: &Cli) -> CliResult {
    let path = cli.config.as_deref().ok_or_else(|| usage("eval requires --config <json>"))?;
    if !path.exists() {
        return Err(usage(format!("config file not found: {}", path.display())));
    }
    let mut cfg = ExperimentConfig::load(path).map_err(|e| usage(e.to_string()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let report = run_evaluation(&cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", render_metrics(&report.metrics));
    println!("report: {}", cfg.output_dir.join("report.json").display());
    Ok(())
}

fn report(csv: &Path, json: bool) -> CliResult {
    require(csv, "CSV")?;
    let (schema, rows) = read_rows_csv(csv)?;
    let metrics = compute_metrics(&rows, &schema);
    if json {
        println!("{}", serde_json::to_string_pretty(&metrics).map_err(Error::from)?);
    } else {
        print!("{}", render_metrics(&metrics));
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::GenData { out } => gen_data(&cli, out),
        Command::Train(a) => train(&cli, a),
        Command::Smooth(a) => smooth(&cli, a),
        Command::Attack(a) => attack(&cli, a),
        Command::Detect { action } => detect(&cli, action),
        Command::Eval => eval(&cli),
        Command::Report { csv, json } => report(csv, *json),
    };
    let _ = std::io::stdout().flush();
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
