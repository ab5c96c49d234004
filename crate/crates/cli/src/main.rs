//! `nlcs`: sample, reconstruct, benchmark and evaluate block CS images.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use nlcs_core::dictionaries::{collect_training_groups, train_gmm, ExternalGmm, GmmTrainOptions};
use nlcs_core::grouping::GroupingParams;
use nlcs_core::metrics::{psnr, ssim, write_results, EvalResult};
use nlcs_core::pgm::{read_image, write_image};
use nlcs_core::sampling::{sample_noisy, MeasurementSet};
use nlcs_core::solver::{reconstruct_with, resolve_eta, write_trace};
use nlcs_core::{BlockMeasurementOperator, Error, Image, RegularizerKind, Result, Rng, SolverConfig};

#[derive(Parser, Debug)]
#[command(name = "nlcs", version, about = "Block compressive sensing with nonlocal group priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Measure an image block by block.
    Sample(SampleArgs),
    /// Reconstruct an image from a measurement file.
    Reconstruct(ReconstructArgs),
    /// Sample and reconstruct every image of a directory over rates and regularizers.
    Bench(BenchArgs),
    /// Train the external GMM used by hsse.
    TrainGmm(TrainArgs),
    /// PSNR and SSIM between two images.
    Eval(EvalArgs),
}

/// Config file plus `key=value` overrides, shared by several subcommands.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lambda=2000`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<SolverConfig> {
        let mut cfg = match &self.config {
            Some(p) => SolverConfig::from_file(p)?,
            None => SolverConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k, v).map_err(Error::Config)?;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    rate: f64,
    #[arg(long, default_value_t = 32)]
    block: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Orthonormalize the rows of the sensing matrix (pass the same flag to reconstruct).
    #[arg(long)]
    ortho: bool,
    /// Std-dev of Gaussian noise added to the measurements.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    meas: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Regularizer: gsr, gsrc, hsse, nlr, rrc, lrgsc or trunc.
    #[arg(long)]
    reg: Option<RegularizerKind>,
    /// Outer iterations.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    ortho: bool,
    /// External GMM model, required by hsse.
    #[arg(long)]
    gmm: Option<PathBuf>,
    /// Ground truth image; enables per-iteration PSNR.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3")]
    rates: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "gsr,gsrc,nlr,rrc,lrgsc")]
    regs: Vec<RegularizerKind>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    iters: Option<usize>,
    /// Base seed; each cell uses `seed XOR hash(image, rate, regularizer)`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gmm: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 32)]
    components: usize,
    /// Number of sampled training groups.
    #[arg(long, default_value_t = 20_000)]
    groups: usize,
    /// Patches per training group.
    #[arg(long, default_value_t = 10)]
    group_size: usize,
    #[arg(long)]
    em_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

fn print_config(cfg: &SolverConfig) {
    eprintln!("# resolved config");
    for line in cfg.resolved().to_string().lines() {
        eprintln!("#   {line}");
    }
}

fn load_gmm(path: Option<&Path>) -> Result<Option<ExternalGmm>> {
    path.map(ExternalGmm::read).transpose()
}

fn run_sample(args: &SampleArgs) -> Result<()> {
    let cfg = SolverConfig {
        block_size: args.block,
        sampling_rate: args.rate,
        seed: args.seed,
        ortho: args.ortho,
        noise_sigma: args.noise_sigma,
        ..SolverConfig::default()
    };
    print_config(&cfg);
    cfg.validate()?;
    let img = read_image(&args.input)?;
    let op = BlockMeasurementOperator::build(args.block, args.rate, args.seed, args.ortho)?;
    let ms = sample_noisy(&img, &op, args.noise_sigma);
    ms.write(&args.out)?;
    println!(
        "wrote {} blocks x {} measurements to {}",
        ms.blocks.len(),
        op.rows(),
        args.out.display()
    );
    Ok(())
}

fn run_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let ms = MeasurementSet::read(&args.meas)?;
    let mut cfg = args.config.load()?;
    cfg.block_size = ms.block_size;
    cfg.sampling_rate = ms.rate;
    cfg.seed = ms.seed;
    cfg.ortho |= args.ortho;
    if let Some(kind) = args.reg {
        cfg.regularizer = kind;
    }
    if let Some(n) = args.iters {
        cfg.outer_iters = n;
    }
    print_config(&cfg);
    cfg.validate()?;
    let gmm = load_gmm(args.gmm.as_deref())?;
    let truth = args.truth.as_ref().map(read_image).transpose()?;
    let op = BlockMeasurementOperator::build(cfg.block_size, cfg.sampling_rate, cfg.seed, cfg.ortho)?;
    eprintln!("# eta = {}", resolve_eta(&cfg, &op));

    let start = Instant::now();
    let total = cfg.outer_iters;
    let state = reconstruct_with(&ms, &op, &cfg, gmm.as_ref(), truth.as_ref(), |row| {
        let psnr = row.psnr.map(|p| format!(" psnr {p:.3}")).unwrap_or_default();
        eprintln!(
            "iter {}/{total} fidelity {:.6e} reg {:.6e}{psnr}",
            row.iter, row.data_fidelity, row.reg_surrogate
        );
    })?;
    write_image(&args.out, &state.x_hat)?;
    if let Some(path) = &args.trace {
        write_trace(path, &state.trace)?;
    }
    print!("reconstructed {} in {:.2}s", args.out.display(), start.elapsed().as_secs_f64());
    match &truth {
        Some(t) => println!(", psnr {}", psnr(&state.x_hat, t)?),
        None => println!(),
    }
    Ok(())
}

/// FNV-1a, stable across platforms and releases.
fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // separator so ("ab","c") and ("a","bc") differ
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn cell_seed(base: u64, image: &str, rate: f64, reg: RegularizerKind) -> u64 {
    base ^ stable_hash(&[image.as_bytes(), &rate.to_le_bytes(), reg.name().as_bytes()])
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension().is_some_and(|e| {
                    e.eq_ignore_ascii_case("pgm") || (cfg!(feature = "png") && e.eq_ignore_ascii_case("png"))
                })
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Config(format!("no images found in {}", dir.display())));
    }
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(n) = args.iters {
        cfg.outer_iters = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    print_config(&cfg);
    cfg.validate()?;
    for &rate in &args.rates {
        SolverConfig { sampling_rate: rate, ..cfg.clone() }.validate()?;
    }
    let gmm = load_gmm(args.gmm.as_deref())?;
    if args.regs.iter().any(|r| r.needs_gmm()) && gmm.is_none() {
        return Err(Error::Config("hsse needs an external GMM model (--gmm)".into()));
    }
    let images = list_images(&args.images)?
        .into_iter()
        .map(|p| Ok((file_name(&p), read_image(&p)?)))
        .collect::<Result<Vec<(String, Image)>>>()?;

    let cells: Vec<(usize, f64, RegularizerKind)> = (0..images.len())
        .flat_map(|i| {
            args.rates
                .iter()
                .flat_map(move |&rate| args.regs.iter().map(move |&reg| (i, rate, reg)))
        })
        .collect();
    eprintln!("# {} cells", cells.len());

    let rows = cells
        .par_iter()
        .map(|&(i, rate, reg)| {
            let (name, img) = &images[i];
            let cell_cfg = SolverConfig {
                sampling_rate: rate,
                regularizer: reg,
                seed: cell_seed(cfg.seed, name, rate, reg),
                ..cfg.clone()
            };
            let start = Instant::now();
            let op = BlockMeasurementOperator::build(
                cell_cfg.block_size,
                rate,
                cell_cfg.seed,
                cell_cfg.ortho,
            )?;
            let ms = sample_noisy(img, &op, cell_cfg.noise_sigma);
            let state = reconstruct_with(&ms, &op, &cell_cfg, gmm.as_ref(), None, |_| {})?;
            let runtime_s = start.elapsed().as_secs_f64();
            let row = EvalResult {
                image: name.clone(),
                regularizer: reg.name().to_string(),
                rate,
                psnr: psnr(&state.x_hat, img)?,
                ssim: ssim(&state.x_hat, img)?,
                runtime_s,
            };
            eprintln!(
                "{} rate {} {}: psnr {:.3} ssim {:.4} ({:.1}s)",
                row.image, rate, row.regularizer, row.psnr.db, row.ssim, runtime_s
            );
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    write_results(&args.out, &rows)?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    cfg.gmm_components = args.components;
    if let Some(n) = args.em_iters {
        cfg.em_iters = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    print_config(&cfg);
    cfg.validate()?;
    if args.group_size == 0 || args.groups == 0 {
        return Err(Error::Config("--groups and --group-size must be positive".into()));
    }
    let images = list_images(&args.corpus)?
        .iter()
        .map(read_image)
        .collect::<Result<Vec<_>>>()?;
    let params = GroupingParams {
        group_size: args.group_size,
        ..GroupingParams::from(&cfg)
    };
    let mut rng = Rng::new(cfg.seed);
    let groups = collect_training_groups(&images, &params, args.groups, &mut rng)?;
    eprintln!("# {} training groups from {} images", groups.len(), images.len());
    let opts = GmmTrainOptions {
        components: cfg.gmm_components,
        em_iters: cfg.em_iters,
        ..GmmTrainOptions::default()
    };
    let fit = train_gmm(&groups, &opts, &mut rng)?;
    for (i, ll) in fit.log_likelihood.iter().enumerate() {
        eprintln!("em {} log-likelihood {ll:.6e}", i + 1);
    }
    fit.model.write(&args.out)?;
    println!(
        "wrote {} components (b = {}) to {}",
        fit.model.len(),
        fit.model.dim(),
        args.out.display()
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    print_config(&SolverConfig::default());
    let a = read_image(&args.a)?;
    let b = read_image(&args.b)?;
    let p = psnr(&a, &b)?;
    println!("psnr {p}");
    println!("ssim {:.6}", ssim(&a, &b)?);
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var("NLCS_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // fails only if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
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
    configure_threads();
    let result = match &cli.command {
        Command::Sample(a) => run_sample(a),
        Command::Reconstruct(a) => run_reconstruct(a),
        Command::Bench(a) => run_bench(a),
        Command::TrainGmm(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
