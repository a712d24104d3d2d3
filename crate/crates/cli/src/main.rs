use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drbsde_cli::runner::fmt_f;
use drbsde_cli::scenario::set_param;
use drbsde_cli::{assemble, parse_scenario, run_scenario, CliError, RunReport, Scenario};

/// Default output directory when `--out` is absent.
const OUT_ENV: &str = "DRBSDE_OUT";

#[derive(Parser)]
#[command(name = "drbsde", version, about = "Doubly reflected BSDEs with default: lattice and Monte Carlo runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct RunOpts {
    /// Output directory (default: $DRBSDE_OUT, else the current directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Runs a scenario file, or every `.toml` file in a directory.
    Run {
        path: PathBuf,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Parses and validates a scenario without solving.
    Validate { file: PathBuf },
    /// Runs a scenario once per value of a parameter.
    Sweep {
        file: PathBuf,
        /// `dotted.name=v1,v2,...`
        #[arg(long)]
        param: String,
        #[command(flatten)]
        opts: RunOpts,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Status {
    Pass = 0,
    Fail = 1,
    Error = 2,
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or("scenario".into(), |s| s.to_string_lossy().into_owned())
}

fn out_dir(opts: &RunOpts) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn write_files(dir: &Path, report: &RunReport) -> Result<(), CliError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| CliError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    for (name, body) in &report.files {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io(&p))?;
    }
    Ok(())
}

fn execute(mut scenario: Scenario, opts: &RunOpts) -> Result<RunReport, CliError> {
    if let Some(seed) = opts.seed {
        scenario.seed = seed;
    }
    let report = run_scenario(&scenario)?;
    write_files(&out_dir(opts), &report)?;
    Ok(report)
}

fn run_file(path: &Path, opts: &RunOpts) -> (Status, Option<RunReport>) {
    let result = read(path)
        .and_then(|text| parse_scenario(&text, &stem(path)))
        .and_then(|s| execute(s, opts));
    match result {
        Ok(report) => {
            print!("{}", report.summary());
            let status = if report.passed() { Status::Pass } else { Status::Fail };
            (status, Some(report))
        }
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            (Status::Error, None)
        }
    }
}

fn scenario_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|source| CliError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_run(path: &Path, opts: &RunOpts) -> Status {
    if path.is_dir() {
        match scenario_files(path) {
            Ok(files) => files.iter().map(|f| run_file(f, opts).0).max().unwrap_or(Status::Pass),
            Err(e) => {
                eprintln!("error: {e}");
                Status::Error
            }
        }
    } else {
        run_file(path, opts).0
    }
}

fn cmd_validate(file: &Path) -> Status {
    let result = read(file)
        .and_then(|text| parse_scenario(&text, &stem(file)))
        .and_then(|s| assemble::validate(&s).map(|_| s));
    match result {
        Ok(s) => {
            println!("valid: {} ({})", s.name, s.run);
            Status::Pass
        }
        Err(e) => {
            eprintln!("error: {}: {e}", file.display());
            Status::Error
        }
    }
}

fn cmd_sweep(file: &Path, param: &str, opts: &RunOpts) -> Status {
    let Some((name, values)) = param.split_once('=') else {
        eprintln!("error: --param expects name=v1,v2,...");
        return Status::Error;
    };
    let text = match read(file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return Status::Error;
        }
    };
    let base = stem(file);
    let mut csv = String::from("param,value,metric,metric_value,status\n");
    let mut worst = Status::Pass;
    for v in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let label = format!("{base}_{}_{v}", name.replace('.', "_"));
        let result = set_param(&text, name, v)
            .and_then(|t| parse_scenario(&t, &label))
            .map(|mut s| {
                s.name = label.clone();
                s
            })
            .and_then(|s| execute(s, opts));
        let status = match &result {
            Ok(r) => {
                print!("{}", r.summary());
                if r.passed() { Status::Pass } else { Status::Fail }
            }
            Err(e) => {
                eprintln!("error: {label}: {e}");
                Status::Error
            }
        };
        let (metric, value) = result.as_ref().map_or(("", String::new()), |r| (r.headline.0, fmt_f(r.headline.1)));
        let word = ["pass", "fail", "error"][status as usize];
        csv.push_str(&format!("{name},{v},{metric},{value},{word}\n"));
        worst = worst.max(status);
    }
    let dir = out_dir(opts);
    let path = dir.join(format!("{base}_sweep.csv"));
    if let Err(e) = fs::create_dir_all(&dir).and_then(|_| fs::write(&path, csv)) {
        eprintln!("error: {}: {e}", path.display());
        return Status::Error;
    }
    worst
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match &cli.command {
        Command::Run { opts, .. } | Command::Sweep { opts, .. } => opts.threads,
        Command::Validate { .. } => None,
    };
    if let Some(t) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let status = match &cli.command {
        Command::Run { path, opts } => cmd_run(path, opts),
        Command::Validate { file } => cmd_validate(file),
        Command::Sweep { file, param, opts } => cmd_sweep(file, param, opts),
    };
    ExitCode::from(status as u8)
}
