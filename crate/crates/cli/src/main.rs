use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use lam_core::attention::{attention_band_mass_rows, LogBase};
use lam_core::bench::{self, BenchOptions};
use lam_core::data::{self, Fractions, Series, Split, SynthKind, WindowedDataset};
use lam_core::lam::LRule;
use lam_core::model::checkpoint::{self, Checkpoint};
use lam_core::model::settings::Settings;
use lam_core::model::train::{self, evaluate, evaluate_last_value};
use lam_core::model::{ForecastModel, Mechanism, ModelConfig};
use lam_core::verify::{self, Fault, VerifyOptions};
use lam_core::{Error, Exec};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "lam",
    version,
    about = "Local attention kernels, checks, benchmarks and a toy forecaster"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle, masking, counter, permutation and gradient suites.
    Verify(VerifyArgs),
    /// Time single attention calls and fit scaling exponents.
    Bench(BenchArgs),
    /// Train a forecaster from a key=value config.
    Train(TrainArgs),
    /// Attention mass inside the local band, per layer, head and L.
    Bandmass(BandmassArgs),
    /// Forecast the next m steps after the last n rows of a CSV.
    Forecast(ForecastArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// Randomized kernel cases; gradient checks run trials/10, permutation checks trials/20.
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deliberately break the kernel (test-only): skip-pad-mask.
    #[arg(long, value_name = "NAME")]
    inject_fault: Option<Fault>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "512,1024,2048,4096,8192,16384"
    )]
    n_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "full,lam,prob")]
    mechanisms: Vec<Mechanism>,
    /// 4ceil, ceil4 or fixed:<k>.
    #[arg(long, default_value = "4ceil")]
    l_rule: LRule,
    /// Logarithm base of the L rule: 2 or e.
    #[arg(long, default_value = "2")]
    log_base: String,
    #[arg(long, default_value_t = 16)]
    d_model: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Skip dense cells whose score matrix exceeds this many MiB.
    #[arg(long, default_value_t = 3072)]
    max_score_mib: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
    /// Run the kernels on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct DataArgs {
    /// CSV path, or synth:<sines|trend_season|ar_noise>.
    #[arg(long, default_value = "synth:sines")]
    data: String,
    /// Length of a synthetic series.
    #[arg(long, default_value_t = 20000)]
    length: usize,
    /// Feature count of a synthetic series.
    #[arg(long, default_value_t = 3)]
    features: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path; the loss curve and data manifest are written next to it.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct BandmassArgs {
    /// Trained checkpoint; without it a randomly initialised model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Input length of the random model.
    #[arg(long, default_value_t = 96)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,96")]
    l_list: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "bandmass.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "forecast.csv")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Train(a) => cmd_train(a),
        Command::Bandmass(a) => cmd_bandmass(a),
        Command::Forecast(a) => cmd_forecast(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(
                e.downcast_ref::<Error>(),
                Some(Error::InvalidArgument(_) | Error::UnknownKey(_))
            );
            ExitCode::from(if usage { EXIT_USAGE } else { EXIT_FAILURE })
        }
    }
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn cmd_verify(a: VerifyArgs) -> anyhow::Result<ExitCode> {
    let opts = VerifyOptions {
        trials: a.trials,
        seed: a.seed,
        fault: a.inject_fault,
    };
    let report = verify::run_all(&opts)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for s in &report.suites {
        println!("{s}");
        for f in s.failures.iter().take(10) {
            println!("    {f}");
        }
        if s.failures.len() > 10 {
            println!("    ... {} more", s.failures.len() - 10);
        }
    }
    Ok(if report.passed() {
        println!("all suites passed");
        ExitCode::SUCCESS
    } else {
        println!("verification FAILED");
        ExitCode::from(EXIT_FAILURE)
    })
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<ExitCode> {
    let log_base = match a.log_base.as_str() {
        "2" => LogBase::Two,
        "e" => LogBase::E,
        other => {
            return Err(
                Error::InvalidArgument(format!("log base `{other}`: expected 2 or e")).into(),
            )
        }
    };
    let opts = BenchOptions {
        n_list: a.n_list,
        mechanisms: a.mechanisms,
        l_rule: a.l_rule,
        log_base,
        d_model: a.d_model,
        repeats: a.repeats,
        seed: a.seed,
        max_score_bytes: a.max_score_mib << 20,
        exec: exec(a.sequential),
    };
    let outcome = bench::run(&opts)?;
    bench::write_csv(&a.out, &outcome.records)?;
    for r in &outcome.records {
        println!(
            "{:<5} n={:<6} L={:<3} wall={:>12} ns  dot_products={:<12} peak_scores={}",
            r.mechanism, r.n, r.l, r.wall_ns, r.dot_products, r.peak_score_elements
        );
    }
    for s in &outcome.skipped {
        println!("{:<5} n={:<6} skipped: {}", s.mechanism, s.n, s.reason);
    }
    for (m, slope) in &outcome.slopes {
        match slope {
            Some(s) => println!("slope {m}: {s:.3}"),
            None => println!("slope {m}: n/a (fewer than two points)"),
        }
    }
    if let Some(rss) = bench::peak_rss_bytes() {
        println!("peak RSS: {:.1} MiB", rss as f64 / (1 << 20) as f64);
    }
    println!("wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_series(d: &DataArgs, seed: u64) -> anyhow::Result<Series> {
    if let Some(kind) = d.data.strip_prefix("synth:") {
        let kind: SynthKind = kind.parse()?;
        if d.length == 0 || d.features == 0 {
            return Err(Error::InvalidArgument(
                "synthetic length and features must be positive".into(),
            )
            .into());
        }
        return Ok(data::synth_series(kind, d.length, d.features, seed));
    }
    let csv = data::load_csv(&d.data)?;
    for row in &csv.dropped {
        eprintln!("dropped line {}: {}", row.line, row.reason);
    }
    Ok(csv.series)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let mut settings = Settings::load(&a.config)?;
    if let Some(seed) = a.seed {
        settings.seed = seed;
    }
    let series = load_series(&a.data, settings.seed)?;
    let ds = WindowedDataset::standardize_split_window(
        &series,
        settings.window_spec(),
        Fractions::default(),
    )?;
    let cfg = settings.model_config(series.features());
    let mut model = ForecastModel::new(cfg)?;
    println!(
        "{} model, {} parameters; {} / {} / {} train / val / test windows",
        cfg.mechanism,
        model.count_parameters(),
        ds.len(Split::Train),
        ds.len(Split::Val),
        ds.len(Split::Test)
    );
    let exec = exec(a.sequential);
    let report = train::train_with_progress(&mut model, &ds, &settings.train_options(exec), |s| {
        println!(
            "epoch {:>3}  train mse {:.5} mae {:.5}  val mse {:.5} mae {:.5}",
            s.epoch, s.train_mse, s.train_mae, s.val_mse, s.val_mae
        );
    })?;

    let curve_path = sibling(&a.out, ".curve.csv");
    let mut w =
        csv::Writer::from_path(&curve_path).with_context(|| curve_path.display().to_string())?;
    w.write_record(["epoch", "train_mse", "val_mse", "train_mae", "val_mae"])?;
    for s in &report.curve {
        w.write_record([
            s.epoch.to_string(),
            s.train_mse.to_string(),
            s.val_mse.to_string(),
            s.train_mae.to_string(),
            s.val_mae.to_string(),
        ])?;
    }
    w.flush()?;
    let manifest_path = sibling(&a.out, ".manifest.txt");
    std::fs::write(&manifest_path, ds.manifest())
        .with_context(|| manifest_path.display().to_string())?;
    checkpoint::save(
        &a.out,
        &Checkpoint {
            model: model.clone(),
            scaler: ds.scaler.clone(),
            feature_names: ds.names.clone(),
        },
    )?;

    if let Some(best) = report.best_epoch {
        println!(
            "kept weights of epoch {best}{}",
            if report.stopped_early {
                " (early stop)"
            } else {
                ""
            }
        );
    }
    if let (Some(test), Some(base)) = (
        evaluate(&model, &ds, Split::Test, exec)?,
        evaluate_last_value(&ds, Split::Test)?,
    ) {
        println!("test mse {:.5} mae {:.5}", test.mse, test.mae);
        println!(
            "last-value baseline mse {:.5} mae {:.5}",
            base.mse, base.mae
        );
    }
    println!(
        "wrote {}, {}, {}",
        a.out.display(),
        curve_path.display(),
        manifest_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_bandmass(a: BandmassArgs) -> anyhow::Result<ExitCode> {
    let (model, scaler) = match &a.checkpoint {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            (ck.model, Some(ck.scaler))
        }
        None => {
            let mut cfg = ModelConfig::new(Mechanism::Full, a.data.features, 8, 1, a.n, 1, 2);
            cfg.seed = a.seed;
            (ForecastModel::new(cfg)?, None)
        }
    };
    let n = model.config.n;
    let series = load_series(&a.data, a.seed)?;
    if series.features() != model.config.d_features {
        bail!(
            "data has {} features, model expects {}",
            series.features(),
            model.config.d_features
        );
    }
    let raw = series.tail(n)?;
    let x = match scaler {
        Some(s) => s.transform(&raw)?,
        None => data::Scaler::fit(&raw, 0..n)?.transform(&raw)?,
    };
    let (_, probe, _) = model.forward_probed(&x)?;

    let mut w = csv::Writer::from_path(&a.out).with_context(|| a.out.display().to_string())?;
    w.write_record(["layer", "head", "L", "band_mass", "last_row_mass"])?;
    for (layer, heads) in &probe.blocks {
        for (h, (q, k)) in heads.iter().enumerate() {
            for &l in &a.l_list {
                if !(1..=n).contains(&l) {
                    return Err(Error::InvalidArgument(format!("L = {l} outside 1..={n}")).into());
                }
                let rows = attention_band_mass_rows(q, k, l)?;
                let mean = rows.iter().sum::<f64>() / rows.len() as f64;
                let last = rows[rows.len() - 1];
                w.write_record([
                    layer.clone(),
                    h.to_string(),
                    l.to_string(),
                    mean.to_string(),
                    last.to_string(),
                ])?;
                println!("{layer:<10} head {h}  L={l:<4} band mass {mean:.4}  last row {last:.4}");
            }
        }
    }
    w.flush()?;
    println!("wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_forecast(a: ForecastArgs) -> anyhow::Result<ExitCode> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let csv = data::load_csv(&a.input)?;
    for row in &csv.dropped {
        eprintln!("dropped line {}: {}", row.line, row.reason);
    }
    let cfg = ck.model.config;
    if csv.series.features() != cfg.d_features {
        return Err(Error::InvalidArgument(format!(
            "input has {} features, checkpoint expects {}",
            csv.series.features(),
            cfg.d_features
        ))
        .into());
    }
    let x = ck.scaler.transform(&csv.series.tail(cfg.n)?)?;
    let y = ck.scaler.inverse(&ck.model.forward(&x)?)?;
    data::write_csv(&a.out, &csv.series.names, &y)?;
    println!("wrote {} steps to {}", cfg.m, a.out.display());
    Ok(ExitCode::SUCCESS)
}
