//! Command-line front end: dataset generation, training, evaluation,
//! inference and the standalone region-aware transform.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crowdcount::autodiff::Tensor;
use crowdcount::checkpoint::{load_checkpoint, save_checkpoint};
use crowdcount::datagen::{gen_dataset, load_manifest, load_split, SceneSpec, Split};
use crowdcount::eval::{evaluate, infer_density};
use crowdcount::formats::{load_image, save_density, save_image};
use crowdcount::net::init_params;
use crowdcount::region_aware::{self, RaConfig};
use crowdcount::scene::{DensityMap, GrayImage};
use crowdcount::train::{train, TrainConfig};
use crowdcount::{Error, Result};

#[derive(Parser)]
#[command(name = "crowdcount", version, about = "Region-aware feedback crowd counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic crowd dataset.
    Gen(GenArgs),
    /// Train a network and write a checkpoint.
    Train(TrainArgs),
    /// Report MAE/MSE of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict a density map for one image.
    Infer(InferArgs),
    /// Apply the region-aware transform to an image and a priority map.
    Ra(RaArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "train", default_value_t = 200)]
    n_train: usize,
    #[arg(long = "test", default_value_t = 50)]
    n_test: usize,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    min_heads: Option<usize>,
    #[arg(long)]
    max_heads: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    d_ratio: Option<f64>,
    /// Divisor applied to the similarity scores before the softmax.
    #[arg(long)]
    ra_temp: Option<f64>,
    /// Score columns by cosine similarity instead of the raw inner product.
    #[arg(long)]
    ra_cosine: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate batch samples sequentially (byte-reproducible either way).
    #[arg(long)]
    single_thread: bool,
    /// Give the second pass its own trunk weights.
    #[arg(long)]
    two_tower: bool,
    /// Append per-epoch statistics to this CSV file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Print one line per image before the summary.
    #[arg(short, long)]
    verbose: bool,
    #[arg(long)]
    single_thread: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a max-normalized rendering of the density.
    #[arg(long)]
    viz: Option<PathBuf>,
    /// Reflect-pad inputs whose sides the network cannot take.
    #[arg(long)]
    pad: bool,
}

#[derive(Args)]
struct RaArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    priority: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write `|O - Q|`, max-normalized.
    #[arg(long)]
    diff: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    temp: f64,
    #[arg(long)]
    cosine: bool,
}

fn io_err(path: &Path, source: io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn run_gen(a: GenArgs) -> Result<()> {
    let d = SceneSpec::default();
    let spec = SceneSpec {
        width: a.width.unwrap_or(d.width),
        height: a.height.unwrap_or(d.height),
        min_heads: a.min_heads.unwrap_or(d.min_heads),
        max_heads: a.max_heads.unwrap_or(d.max_heads),
        noise: a.noise.unwrap_or(d.noise),
        seed: a.seed,
        ..d
    };
    let manifest = gen_dataset(&spec, a.n_train, a.n_test, &a.out)?;
    println!("wrote {} train and {} test scenes to {}", a.n_train, a.n_test, manifest.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value {
                $field = v;
            }
        };
    }
    set!(cfg.epochs, a.epochs);
    set!(cfg.lr, a.lr);
    set!(cfg.batch_size, a.batch);
    set!(cfg.crop, a.crop);
    set!(cfg.bayes.delta, a.delta);
    set!(cfg.bayes.d_ratio, a.d_ratio);
    set!(cfg.net.ra.temperature, a.ra_temp);
    set!(cfg.seed, a.seed);
    cfg.net.ra.column_normalize = a.ra_cosine;
    cfg.net.two_tower = a.two_tower;
    cfg.net.seed = cfg.seed;
    cfg
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a);
    cfg.validate()?;
    let data = load_split(&a.data, Split::Train)?;
    let mut params = init_params(&cfg.net)?;
    let mut log = match &a.log {
        Some(path) => {
            let mut f = File::create(path).map_err(|e| io_err(path, e))?;
            writeln!(f, "epoch,loss,mae_train,prio_grad_norm").map_err(|e| io_err(path, e))?;
            Some((path.clone(), f))
        }
        None => None,
    };
    let mut log_error = None;
    train(&mut params, &data, &cfg, !a.single_thread, |s| {
        println!("{}", s.telemetry_line());
        if let Some((path, f)) = log.as_mut() {
            let row = writeln!(
                f,
                "{},{:.6},{:.6},{:e}",
                s.epoch, s.mean_loss, s.mae_train, s.priority_grad_norm
            );
            if let Err(e) = row {
                log_error.get_or_insert(io_err(path, e));
            }
        }
    })?;
    if let Some(e) = log_error {
        return Err(e);
    }
    save_checkpoint(&params, &cfg, &a.out)?;
    eprintln!("saved {}", a.out.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let split: Split = a.split.parse().map_err(|_| {
        Error::Usage(format!("--split must be train or test, got {:?}", a.split))
    })?;
    let (params, cfg) = load_checkpoint(&a.ckpt)?;
    let (manifest, _) = load_manifest(&a.data)?;
    let scenes = load_split(&a.data, split)?;
    let report = evaluate(&params, &cfg.net, &scenes, !a.single_thread)?;
    if a.verbose {
        let entries = match split {
            Split::Train => &manifest.train,
            Split::Test => &manifest.test,
        };
        for (m, e) in entries.iter().zip(&report.entries) {
            println!(
                "{} pred={:.6} gt={} abs_err={:.6}",
                m.image, e.predicted, e.ground_truth, e.abs_error
            );
        }
    }
    println!("{}", report.summary_line());
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<()> {
    let (params, cfg) = load_checkpoint(&a.ckpt)?;
    let img = load_image(&a.image)?;
    let density = infer_density(&params, &cfg.net, &img, a.pad)?;
    // the file stores single precision; report the count of what is written
    let stored = DensityMap::new(
        density.height(),
        density.width(),
        density.values().iter().map(|&v| v as f32 as f64).collect(),
    )?;
    save_density(&stored, &a.out)?;
    if let Some(viz) = &a.viz {
        save_image(&stored.render(), viz)?;
    }
    println!("count={:.6}", stored.count());
    Ok(())
}

fn as_matrix(img: &GrayImage) -> Result<Tensor<f64>> {
    img.to_tensor::<f64>().reshaped(vec![img.height(), img.width()])
}

fn run_ra(a: RaArgs) -> Result<()> {
    let q_img = load_image(&a.image)?;
    let a_img = load_image(&a.priority)?;
    if (q_img.height(), q_img.width()) != (a_img.height(), a_img.width()) {
        return Err(Error::Shape(format!(
            "image is {}x{} but priority map is {}x{}",
            q_img.height(),
            q_img.width(),
            a_img.height(),
            a_img.width()
        )));
    }
    let cfg = RaConfig { temperature: a.temp, column_normalize: a.cosine };
    cfg.validate()?;
    let q = as_matrix(&q_img)?;
    let o = region_aware::apply(&q, &as_matrix(&a_img)?, &cfg)?;
    save_image(&GrayImage::from_tensor(&o)?, &a.out)?;
    if let Some(path) = &a.diff {
        let diff: Vec<f64> = o.data().iter().zip(q.data()).map(|(x, y)| (x - y).abs()).collect();
        let max = diff.iter().cloned().fold(0.0, f64::max);
        let scaled = diff.iter().map(|&d| if max > 0.0 { d / max } else { 0.0 }).collect();
        save_image(&GrayImage::new(q_img.height(), q_img.width(), scaled)?, path)?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Argument(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Ra(a) => run_ra(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
