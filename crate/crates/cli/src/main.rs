use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use resfactor::experiment::{merge_reports, prepare, run_experiment, ExperimentConfig, Stages};
use resfactor::residual_pipeline::{fit_pca_ggm, fit_transform};
use resfactor::spectral_factor::{fit_pca, write_ic_curve_csv};
use resfactor::synthetic::generate_synthetic;
use resfactor::{Error, Method};

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_ALL_FAILED: u8 = 3;

/// Residual factor extraction experiments.
#[derive(Parser)]
#[command(name = "resfactor", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one transform on the first window and dump it.
    Fit(Common),
    /// Orthogonality of held-out residuals over all windows.
    Evaluate(Common),
    /// Contrarian strategy performance over all windows.
    Backtest(Common),
    /// Orthogonality and performance together.
    Run(Common),
    /// Write the synthetic price panel described by the config.
    Synth(Common),
    /// Merge report CSVs from several output directories and re-average.
    Report {
        /// Directories holding orthogonality.csv / performance.csv.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run only this method.
    #[arg(long)]
    method: Option<Method>,
}

enum Failure {
    Config(String),
    Data(String),
    AllFailed,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

struct Loaded {
    config: ExperimentConfig,
    bytes: Vec<u8>,
    base_dir: PathBuf,
    out: PathBuf,
}

fn load(args: &Common) -> Result<Loaded, Failure> {
    let bytes = fs::read(&args.config)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| Failure::Config(e.to_string()))?;
    let mut config = ExperimentConfig::from_toml(&text)?;
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(method) = args.method {
        config.methods = vec![method];
    }
    let base_dir = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| base_dir.join(&config.output_dir));
    Ok(Loaded {
        config,
        bytes,
        base_dir,
        out,
    })
}

fn fit(args: &Common) -> Result<(), Failure> {
    let l = load(args)?;
    let prepared = prepare(&l.config, &l.base_dir)?;
    let rep = &prepared.replicates[0];
    let split = &rep.splits[0];
    let method = l.config.methods[0];
    let options = l.config.fit_options();
    fs::create_dir_all(&l.out)?;

    let transform = if method == Method::PcaGgm {
        let (t, est) = fit_pca_ggm(&split.train, &split.label, &options)?;
        est.write_objective_trace_csv(fs::File::create(l.out.join("objective_trace.csv"))?)?;
        t
    } else {
        fit_transform(method, &split.train, &split.label, &options)?
    };
    if matches!(method, Method::Pca | Method::PcaGgm) {
        let (_, proj) = fit_pca(&split.train, options.k_max)?;
        write_ic_curve_csv(
            &proj.ic_curve,
            fs::File::create(l.out.join("ic_curve.csv"))?,
        )?;
    }
    transform.write_dump(BufWriter::new(fs::File::create(
        l.out.join("transform.txt"),
    )?))?;
    println!(
        "{method} on {} (seed {}): k = {}",
        split.label,
        rep.seed,
        transform.provenance.k.map_or("-".into(), |k| k.to_string())
    );
    for d in &transform.provenance.diagnostics {
        println!("  {d}");
    }
    Ok(())
}

fn experiment(args: &Common, stages: Stages) -> Result<(), Failure> {
    let l = load(args)?;
    let outcome = run_experiment(&l.config, &l.bytes, &l.base_dir, &l.out, stages)?;
    println!(
        "{} cells, {} failed; reports in {}",
        outcome.manifest.cells,
        outcome.manifest.failed_cells,
        outcome.output_dir.display()
    );
    if outcome.all_failed() {
        return Err(Failure::AllFailed);
    }
    Ok(())
}

fn synth(args: &Common) -> Result<(), Failure> {
    let l = load(args)?;
    let Some(spec) = &l.config.synthetic else {
        return Err(Failure::Config("synth needs a [synthetic] section".into()));
    };
    let mut spec = spec.clone();
    spec.seed = spec.seed.wrapping_add(l.config.seeds[0]);
    let panel = generate_synthetic(&spec)?;
    fs::create_dir_all(&l.out)?;
    let path = l.out.join("prices.csv");
    panel.write_csv(BufWriter::new(fs::File::create(&path)?))?;
    println!(
        "{} assets x {} dates written to {}",
        panel.assets().len(),
        panel.dates().len(),
        path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Fit(args) => fit(args),
        Command::Evaluate(args) => experiment(
            args,
            Stages {
                orthogonality: true,
                performance: false,
            },
        ),
        Command::Backtest(args) => experiment(
            args,
            Stages {
                orthogonality: false,
                performance: true,
            },
        ),
        Command::Run(args) => experiment(args, Stages::ALL),
        Command::Synth(args) => synth(args),
        Command::Report { inputs, out } => merge_reports(inputs, out).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::AllFailed) => {
            eprintln!("every cell failed");
            ExitCode::from(EXIT_ALL_FAILED)
        }
    }
}
