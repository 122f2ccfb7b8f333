use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ftopinn::field_sampler::{sample_periodic_grf, sample_rbf_grf, write_samples_csv, GrfSpec};
use ftopinn::harness::{
    apply_axis, check_weight_file, oracle_solution, preset, run_experiment, run_pretrain, run_sweep, BasisConfig,
    ExperimentConfig, PretrainConfig, SweepAxis,
};
use ftopinn::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "ftopinn",
    version,
    about = "Operator-trunk least-squares PDE solver and experiment harness"
)]
struct Cli {
    /// Experiment (or pre-training) config, TOML or JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the collocation (or sampling) seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; defaults to the config's `out_dir`, then `out`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and train an operator network.
    Pretrain,
    /// Run one experiment.
    Solve(ExperimentArgs),
    /// Run an experiment over a list of parameter values.
    Sweep {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// dof, beta, m, mu, scales, rank or layers.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Draw GRF samples to CSV.
    GrfSample {
        #[arg(long, default_value_t = 0.2)]
        length_scale: f64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 100)]
        sensors: usize,
        /// Periodic spectral field instead of the RBF kernel.
        #[arg(long)]
        periodic: bool,
        #[arg(long, default_value_t = 25.0)]
        sigma: f64,
        #[arg(long, default_value_t = 5.0)]
        tau: f64,
        #[arg(long, default_value_t = 4.0)]
        exponent: f64,
    },
    /// Tabulate the reference solution of an experiment's problem.
    Oracle {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Nodes per axis; the experiment's test grid by default.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Validate a weight file, optionally against exported reference outputs.
    ConvertCheck {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        parity: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// example1 .. example4; used when no --config is given.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    dof: Option<usize>,
    #[arg(long)]
    m: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// Use the trunk(s) of this weight file as the basis.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Number of trunk input scalings (with --weights).
    #[arg(long)]
    scales: Option<usize>,
}

fn experiment_config(cli: &Cli, args: &ExperimentArgs) -> ftopinn::Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, &args.preset) {
        (Some(_), Some(_)) => return Err(Error::Config("give either --config or --preset".into())),
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => return Err(Error::Config("an experiment needs --config or --preset".into())),
    };
    if let Some(path) = &args.weights {
        cfg.basis = BasisConfig::WeightFile {
            path: path.clone(),
            scales: 1,
            warm_start: true,
        };
    }
    if let Some(j) = args.scales {
        apply_axis(&mut cfg, SweepAxis::Scales, j as f64)?;
    }
    if let Some(v) = args.beta {
        apply_axis(&mut cfg, SweepAxis::Beta, v)?;
    }
    if let Some(v) = args.dof {
        apply_axis(&mut cfg, SweepAxis::Dof, v as f64)?;
    }
    if let Some(v) = args.m {
        apply_axis(&mut cfg, SweepAxis::M, v)?;
    }
    if let Some(v) = args.mu {
        apply_axis(&mut cfg, SweepAxis::Mu, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out_dir
        .clone()
        .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serialisable"));
}

fn run(cli: &Cli) -> ftopinn::Result<()> {
    match &cli.command {
        Command::Pretrain => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::Config("pretrain needs --config".into()))?;
            let mut cfg = PretrainConfig::load(path)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let outcome = run_pretrain(&cfg, &out_dir(cli, None))?;
            log::info!(
                "trained {} epochs, final loss {:e}",
                outcome.loss_trace.len(),
                outcome.loss_trace.last().copied().unwrap_or(f64::NAN)
            );
            println!("train_rel_l2 {:e}", outcome.train_rel_l2);
        }
        Command::Solve(args) => {
            let cfg = experiment_config(cli, args)?;
            let dir = out_dir(cli, Some(&cfg));
            let report = run_experiment(&cfg, &dir)?;
            match report.rel_l2 {
                Some(r) => println!("rel_l2 {r:e} l_inf {:e} dof {}", report.l_inf, report.dof),
                None => println!("rel_l2 undefined l_inf {:e} dof {}", report.l_inf, report.dof),
            }
        }
        Command::Sweep {
            experiment,
            axis,
            values,
            repeats,
        } => {
            let cfg = experiment_config(cli, experiment)?;
            let axis: SweepAxis = axis.parse()?;
            let dir = out_dir(cli, Some(&cfg));
            let result = run_sweep(&cfg, axis, values, *repeats, &dir)?;
            for row in &result.rows {
                println!(
                    "{}={} rel_l2 mean {:?} std {:?} failures {}",
                    row.axis, row.value, row.rel_l2_mean, row.rel_l2_std, row.failures
                );
            }
        }
        Command::GrfSample {
            length_scale,
            count,
            sensors,
            periodic,
            sigma,
            tau,
            exponent,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let dir = out_dir(cli, None);
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let path = dir.join("grf_samples.csv");
            if *periodic {
                let spec = GrfSpec::periodic(*sigma, *tau, *exponent, *sensors, seed);
                let fields = sample_periodic_grf(&spec, *count)?;
                write_samples_csv(&path, fields.iter().map(|f| (f.grid.as_slice(), f.values.as_slice())))?;
            } else {
                let spec = GrfSpec::rbf(*length_scale, *sensors, seed);
                let fields = sample_rbf_grf(&spec, *count)?;
                write_samples_csv(&path, fields.iter().map(|f| (f.grid(), f.values())))?;
            }
            println!("{}", path.display());
        }
        Command::Oracle { experiment, n } => {
            let cfg = experiment_config(cli, experiment)?;
            let dir = out_dir(cli, Some(&cfg));
            let sol = oracle_solution(&cfg, *n)?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let path = dir.join("reference.csv");
            sol.write_csv(&path)?;
            println!("{}", path.display());
        }
        Command::ConvertCheck { weights, parity, tol } => {
            let check = check_weight_file(weights, parity.as_deref(), *tol)?;
            print_json(&check);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_CONFIG })
        }
    }
}
