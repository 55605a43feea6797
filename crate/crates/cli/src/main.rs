use std::path::PathBuf;
use std::process::ExitCode;

use aoi_cli::compare::{compare, ResultSet};
use aoi_cli::plot::render_svg;
use aoi_cli::{run_experiment, CliError, OutputFormat, RunOptions};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aoi-sim", version, about = "Whittle-index AoI scheduling experiments")]
#[command(args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: Option<RunArgs>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run(RunArgs),
    /// Compare a baseline policy against benchmarks in sweep results.
    Compare(CompareArgs),
    /// Render a sweep results CSV as an SVG line chart.
    Plot(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
}

#[derive(Args)]
struct CompareArgs {
    /// Results file A.
    a: PathBuf,
    /// Optional results file B on the same grid.
    b: Option<PathBuf>,
    #[arg(long, default_value = "whittle")]
    baseline: String,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: OutputFormat,
}

#[derive(Args)]
struct PlotArgs {
    /// Sweep results CSV.
    input: PathBuf,
    /// SVG file to write.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, default_value = "Average cost of AoI")]
    title: String,
}

fn run(args: RunArgs) -> Result<(), CliError> {
    let summary = run_experiment(
        &args.config,
        &RunOptions {
            out_dir: args.out,
            seed: args.seed,
            threads: args.threads,
            format: args.format,
        },
    )?;
    eprintln!("wrote {} rows to {}", summary.rows, summary.results.display());
    Ok(())
}

fn write_out(path: Option<&PathBuf>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|e| CliError::io(p, e)),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes).map_err(|e| CliError::io("<stdout>", e))
        }
    }
}

fn compare_cmd(args: CompareArgs) -> Result<(), CliError> {
    let a = ResultSet::load(&args.a)?;
    let b = args.b.as_deref().map(ResultSet::load).transpose()?;
    let report = compare(&a, b.as_ref(), &args.baseline)?;
    match args.format {
        OutputFormat::Csv => {
            write_out(args.out.as_ref(), &report.table().to_csv())?;
            for line in report.summary_lines() {
                eprintln!("{line}");
            }
        }
        OutputFormat::Json => {
            let mut bytes = serde_json::to_vec_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
            bytes.push(b'\n');
            write_out(args.out.as_ref(), &bytes)?;
        }
    }
    Ok(())
}

fn plot_cmd(args: PlotArgs) -> Result<(), CliError> {
    let set = ResultSet::load(&args.input)?;
    let svg = render_svg(&set, &args.title).ok_or_else(|| CliError::Results {
        path: args.input.clone(),
        message: "no rows with a lambda value to plot".into(),
    })?;
    std::fs::write(&args.out, svg).map_err(|e| CliError::io(&args.out, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match (cli.command, cli.run) {
        (Some(Command::Run(a)), _) | (None, Some(a)) => run(a),
        (Some(Command::Compare(a)), _) => compare_cmd(a),
        (Some(Command::Plot(a)), _) => plot_cmd(a),
        (None, None) => {
            eprintln!("error: --config is required (see --help)");
            return ExitCode::from(2);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
