//! `longmiss` command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use longmiss::estimators::FitOptions;
use longmiss::harness::report::{read_summaries, report_csv_string, write_summaries, REPORT_HEADER};
use longmiss::harness::{apply_method, hyperparameter_sweep, impute_with, run_grid, GridConfig, Hyperparameters, Method};
use longmiss::{Error, LongitudinalDataset};

#[derive(Parser, Debug)]
#[command(name = "longmiss", version, about = "Growth curve models with missing data: simulate, fit, impute")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a simulation grid and write report.csv plus per-condition summaries.
    Simulate {
        #[arg(long)]
        grid: PathBuf,
        /// Overrides the grid's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the grid's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Fit the linear growth model to a CSV and print one JSON record per method.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// A method name or `all`.
        #[arg(long, default_value = "all")]
        method: String,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Impute a CSV and write the completed copies plus provenance.json.
    Impute {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Vary one imputation hyperparameter over a condition from a grid file.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        /// Position of the condition in the grid file.
        #[arg(long, default_value_t = 0)]
        condition: usize,
        #[arg(long)]
        method: Method,
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        /// Output CSV; standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Rebuild report.csv from a directory of condition summaries.
    Report {
        #[arg(long)]
        input: PathBuf,
        /// Output CSV; standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "NA")]
    na_token: String,
    /// Seed for the imputation streams; an entropy seed is drawn and printed when omitted.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct HyperArgs {
    /// Neighbors for knn.
    #[arg(long)]
    k: Option<usize>,
    /// Trees for missforest and miceforest.
    #[arg(long)]
    trees: Option<usize>,
    /// Maximum terminal nodes for micecart.
    #[arg(long)]
    nodes: Option<usize>,
    /// Imputations for the chained-equation methods.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    sweeps: Option<usize>,
    /// Huber weight quantile for tsre; 1 disables downweighting.
    #[arg(long)]
    quantile: Option<f64>,
    #[arg(long)]
    include_aux: bool,
}

impl HyperArgs {
    fn resolve(&self) -> Result<Hyperparameters, Error> {
        let d = Hyperparameters::default();
        let h = Hyperparameters {
            knn_k: self.k.unwrap_or(d.knn_k),
            missforest_trees: self.trees.unwrap_or(d.missforest_trees),
            miceforest_trees: self.trees.unwrap_or(d.miceforest_trees),
            micecart_nodes: self.nodes.unwrap_or(d.micecart_nodes),
            m: self.m.unwrap_or(d.m),
            sweeps: self.sweeps.unwrap_or(d.sweeps),
            tsre_quantile: self.quantile.unwrap_or(d.tsre_quantile),
            include_aux: self.include_aux,
            standard_errors: true,
        };
        h.validate()?;
        Ok(h)
    }
}

#[derive(Debug)]
enum Failure {
    Lib(Error),
    NotConverged(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Lib(Error::Config(_) | Error::Spec(_) | Error::Mechanism(_) | Error::Json(_)) => 2,
            Failure::Lib(Error::Data(_) | Error::Csv(_) | Error::Io(_)) => 3,
            Failure::Lib(Error::Numerical(_) | Error::Imputation(_) | Error::Pooling(_)) => 4,
            Failure::NotConverged(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Lib(e) => write!(f, "{e}"),
            Failure::NotConverged(methods) => write!(f, "fit did not converge for: {}", methods.join(", ")),
        }
    }
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        eprintln!("seed: {s}");
        s
    })
}

fn require_file(path: &Path, what: &str) -> Result<(), Error> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} `{}` is not a readable file", path.display())))
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(p, text)?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn parse_methods(spec: &str) -> Result<Vec<Method>, Error> {
    if spec.eq_ignore_ascii_case("all") {
        return Ok(Method::ALL.to_vec());
    }
    spec.split(',').map(|s| s.trim().parse()).collect()
}

fn load_data(args: &DataArgs) -> Result<LongitudinalDataset, Error> {
    require_file(&args.input, "input")?;
    LongitudinalDataset::read_csv_path(&args.input, &args.na_token)
}

fn simulate(grid: &Path, seed: Option<u64>, output: Option<PathBuf>, parallelism: Option<usize>) -> Result<(), Failure> {
    require_file(grid, "grid")?;
    let mut config = GridConfig::load(grid)?;
    if let Some(s) = seed {
        config.base_seed = s;
    }
    let conditions = config.conditions()?;
    let out = output.unwrap_or(config.output_dir.clone());
    std::fs::create_dir_all(&out)?;
    let parallelism = parallelism.unwrap_or(config.parallelism).max(1);
    info!("running {} conditions on {parallelism} threads", conditions.len());
    let summaries = run_grid(&conditions, parallelism)?;
    write_summaries(&summaries, &out)?;
    std::fs::write(out.join("report.csv"), report_csv_string(&summaries)?)?;
    eprintln!("wrote {} condition summaries and report.csv to {}", summaries.len(), out.display());
    Ok(())
}

fn fit(data: &DataArgs, method: &str, hyper: &HyperArgs) -> Result<(), Failure> {
    let methods = parse_methods(method)?;
    let hyper = hyper.resolve()?;
    let dataset = load_data(data)?;
    let seed = resolve_seed(data.seed);
    let opts = FitOptions { compute_se: true, ..FitOptions::default() };
    let mut records = Vec::with_capacity(methods.len());
    let mut failed = Vec::new();
    for m in methods {
        let fit = apply_method(m, &dataset, &hyper, seed, &opts)?;
        if !fit.fit.converged {
            failed.push(m.label().to_string());
        }
        records.push(fit);
    }
    let text = serde_json::to_string_pretty(&records).map_err(Error::from)?;
    println!("{text}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::NotConverged(failed))
    }
}

fn impute(data: &DataArgs, method: Method, output: &Path, hyper: &HyperArgs) -> Result<(), Failure> {
    if !method.is_imputation() {
        return Err(Error::Config(format!("{method} is not an imputation method")).into());
    }
    let hyper = hyper.resolve()?;
    let dataset = load_data(data)?;
    let seed = resolve_seed(data.seed);
    let set = impute_with(method, &dataset, &hyper, seed)?;
    set.write_dir(output, &data.na_token)?;
    eprintln!("wrote {} completed datasets to {}", set.m(), output.display());
    Ok(())
}

fn sweep(
    grid: &Path,
    condition: usize,
    method: Method,
    levels: &[usize],
    seed: Option<u64>,
    parallelism: usize,
    output: Option<&Path>,
) -> Result<(), Failure> {
    require_file(grid, "grid")?;
    let mut config = GridConfig::load(grid)?;
    if let Some(s) = seed {
        config.base_seed = s;
    }
    let conditions = config.conditions()?;
    let cond = conditions
        .get(condition)
        .ok_or_else(|| Error::Config(format!("grid has {} conditions, no condition {condition}", conditions.len())))?;
    let results = hyperparameter_sweep(cond, method, levels, parallelism.max(1))?;
    let mut text = format!("level,{}\n", REPORT_HEADER.join(","));
    for (level, summary) in &results {
        let csv = report_csv_string(std::slice::from_ref(summary))?;
        for line in csv.lines().skip(1) {
            text.push_str(&format!("{level},{line}\n"));
        }
    }
    write_output(output, &text)?;
    Ok(())
}

fn report(input: &Path, output: Option<&Path>) -> Result<(), Failure> {
    if !input.is_dir() {
        return Err(Error::Config(format!("input `{}` is not a directory", input.display())).into());
    }
    let summaries = read_summaries(input)?;
    if summaries.is_empty() {
        return Err(Error::Data(format!("no condition summaries in {}", input.display())).into());
    }
    write_output(output, &report_csv_string(&summaries)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { grid, seed, output, parallelism } => simulate(&grid, seed, output, parallelism),
        Command::Fit { data, method, hyper } => fit(&data, &method, &hyper),
        Command::Impute { data, method, output, hyper } => impute(&data, method, &output, &hyper),
        Command::Sweep { grid, condition, method, levels, seed, parallelism, output } => {
            sweep(&grid, condition, method, &levels, seed, parallelism, output.as_deref())
        }
        Command::Report { input, output } => report(&input, output.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
