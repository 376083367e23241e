use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wcnet::cost::{depthwise_flops, model_cost, wt_flops, wtconv_flops, CostQuery, CostReport};
use wcnet::data::{gen_synthetic, nearest_centroid_accuracy, prepare, save_cube, save_labels, PadMode, Split};
use wcnet::run::{eval_checkpoint, train_run, RunConfig, CONFIG_FILE};
use wcnet::selfcheck::{self, SelfcheckOptions};
use wcnet::train::Metrics;
use wcnet::wtconv::{receptive_field, WTConvConfig, WtMode};
use wcnet::{Error, Result};

/// Wavelet convolutions and a fully dense 3-D classifier for hyperspectral
/// cubes.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic cube and label map.
    GenData(GenData),
    /// Split, train and evaluate; writes a run directory.
    Train(Train),
    /// Evaluate a checkpoint on one split.
    Eval(Eval),
    /// Closed-form MAC counts of a wavelet conv layer or a whole network.
    Flops(Flops),
    /// Reconstruction, energy, adjoint and gradient property suites.
    Selfcheck(Selfcheck),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    bands: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Directory receiving `cube.hsic` and `labels.hsil`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size network, 80 epochs.
    Full,
    /// Small network and short schedule for one CPU core.
    Desk,
}

#[derive(Args)]
struct Train {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting configuration when no file is given.
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    #[arg(long)]
    cube: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    block: Option<usize>,
    /// Train:val:test shares, e.g. `6:1:3`.
    #[arg(long)]
    ratios: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// `0` evaluates the initial parameters only.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    mirror_pad: bool,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Resolved run configuration; defaults to the one beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cube: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct Flops {
    /// Per-layer cost of the network in a JSON run configuration.
    #[arg(long, conflicts_with_all = ["channels", "size", "kernel", "levels"])]
    config: Option<PathBuf>,
    #[arg(long)]
    channels: Option<u64>,
    /// Square input side.
    #[arg(long)]
    size: Option<u64>,
    #[arg(long)]
    kernel: Option<u64>,
    #[arg(long)]
    levels: Option<u32>,
}

#[derive(Args)]
struct Selfcheck {
    /// Smaller sweeps for a fast smoke run.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: offset added to one Haar filter tap.
    #[arg(long, hide = true, default_value_t = 0.0)]
    perturb_filter: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Flops(a) => flops(a),
        Command::Selfcheck(a) => selfcheck_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn gen_data(a: GenData) -> Result<ExitCode> {
    let (cube, labels) = gen_synthetic(a.classes, a.height, a.width, a.bands, a.noise, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let (cp, lp) = (a.out.join("cube.hsic"), a.out.join("labels.hsil"));
    save_cube(&cube, &cp)?;
    save_labels(&labels, &lp)?;
    let (set, _) = prepare(&cube, &labels, 1, PadMode::Zero, [6.0, 1.0, 3.0], a.seed)?;
    println!("wrote {} and {}", cp.display(), lp.display());
    println!("nearest-centroid accuracy: {:.4}", nearest_centroid_accuracy(&set)?);
    Ok(ExitCode::SUCCESS)
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("ratios {s:?}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("ratios {s:?} must have three parts")))
}

fn train_cmd(a: Train) -> Result<ExitCode> {
    let mut cfg = match (&a.config, a.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Preset::Full) => RunConfig::default(),
        (None, Preset::Desk) => RunConfig::desk(),
    };
    if a.cube.is_some() {
        cfg.cube = a.cube;
    }
    if a.labels.is_some() {
        cfg.labels = a.labels;
    }
    if let Some(b) = a.block {
        cfg.block = b;
    }
    if let Some(r) = &a.ratios {
        cfg.ratios = parse_ratios(r)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(p) = a.patience {
        cfg.train.patience = p;
    }
    if a.mirror_pad {
        cfg.pad = PadMode::Mirror;
    }
    let (cube, labels) = cfg.load_data()?;
    let run = train_run(&cfg, &cube, &labels, Some(&a.out))?;
    for m in &run.metrics.splits {
        print_metrics(m);
    }
    println!("run directory: {} ({:.1} s)", a.out.display(), run.info.seconds);
    Ok(ExitCode::SUCCESS)
}

fn print_metrics(m: &Metrics) {
    println!(
        "{:<5} n={:<5} loss {:.4}  OA {:.4}  AA {:.4}  kappa {:.4}",
        format!("{:?}", m.split).to_lowercase(),
        m.samples,
        m.loss,
        m.overall_accuracy,
        m.average_accuracy,
        m.kappa
    );
}

fn eval_cmd(a: Eval) -> Result<ExitCode> {
    let cfg_path = match a.config {
        Some(p) => p,
        None => a.checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    let mut cfg = RunConfig::load(&cfg_path)?;
    if a.cube.is_some() {
        cfg.cube = a.cube;
    }
    if a.labels.is_some() {
        cfg.labels = a.labels;
    }
    let m = eval_checkpoint(&cfg, &a.checkpoint, a.split)?;
    print_metrics(&m);
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(ExitCode::SUCCESS)
}

fn print_report(r: &CostReport) {
    for item in &r.items {
        println!("  {:<32} {:>14} {:>10}", item.name, item.flops, item.params);
    }
    println!("  {:<32} {:>14} {:>10}", "total", r.total_flops, r.total_params);
}

fn flops(a: Flops) -> Result<ExitCode> {
    if let Some(p) = a.config {
        let cfg = RunConfig::load(&p)?;
        let r = model_cost(&cfg.network)?;
        println!("per-patch cost of {} (MACs, parameters)", p.display());
        print_report(&r);
        return Ok(ExitCode::SUCCESS);
    }
    let layer = match (a.channels, a.size, a.kernel, a.levels) {
        (None, None, None, None) => None,
        (Some(c), Some(n), Some(k), Some(l)) => Some((c, n, k, l)),
        _ => {
            return Err(Error::Config(
                "--channels, --size, --kernel and --levels go together".into(),
            ))
        }
    };
    let Some((c, n, k, l)) = layer else {
        println!("7x7 depthwise, 512x512 input     {:>14}", depthwise_flops(&CostQuery::square(1, 512, 7, 0)));
        println!("31x31 depthwise, 512x512 input   {:>14}", depthwise_flops(&CostQuery::square(1, 512, 31, 0)));
        let q = CostQuery::square(1, 512, 5, 3);
        println!("wavelet conv, 3 levels, 5x5      {:>14}", wtconv_flops(&q));
        println!("wavelet transforms (wt + iwt)    {:>14}", 2 * wt_flops(&q));
        println!("wavelet conv layer total         {:>14}", CostReport::wtconv(&q, true).total_flops);
        return Ok(ExitCode::SUCCESS);
    };
    let q = CostQuery::square(c, n, k, l);
    let rf = receptive_field(&WTConvConfig::new(l as usize, k as usize, c as usize).with_mode(WtMode::Spatial2d));
    println!("wavelet conv layer: {c} channels, {n}x{n} input, {k}x{k} kernel, {l} levels");
    print_report(&CostReport::wtconv(&q, true));
    println!("depthwise {k}x{k} for comparison  {:>14}", depthwise_flops(&CostQuery::square(c, n, k, 0)));
    println!(
        "depthwise {rf}x{rf} (same receptive field) {:>14}",
        depthwise_flops(&CostQuery::square(c, n, rf as u64, 0))
    );
    Ok(ExitCode::SUCCESS)
}

fn selfcheck_cmd(a: Selfcheck) -> Result<ExitCode> {
    let mut opts = SelfcheckOptions {
        seed: a.seed,
        filter_perturbation: a.perturb_filter,
        ..Default::default()
    };
    if a.quick {
        opts.cases = 100;
        opts.max_extent = 32;
        opts.adjoint_cases = 50;
        opts.gradient_configs = 4;
    }
    let start = std::time::Instant::now();
    let report = selfcheck::run(&opts)?;
    for c in &report.checks {
        println!(
            "{:<4} {:<18} cases {:>5}  worst {:.3e}  tolerance {:.0e}",
            if c.passed() { "ok" } else { "FAIL" },
            c.name,
            c.cases,
            c.worst,
            c.tolerance
        );
    }
    println!("{:.1} s", start.elapsed().as_secs_f64());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
