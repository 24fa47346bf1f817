use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use graphpool::conv::ConvKind;
use graphpool::data::{compare_stats, compute_dataset_stats, load_tu_dataset, DatasetName, DatasetSpec, FeatureMode};
use graphpool::experiment::{self, ExperimentConfig, CHART_FILE, RESULTS_FILE};
use graphpool::pool::PoolKind;
use graphpool::train::GridKind;

// Training allocates and frees many mid-sized buffers per step; the system
// allocator maps and unmaps them, and the page faults cost about a third of
// the runtime.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Relative tolerance for comparing dataset statistics with the reference table.
const STATS_TOLERANCE: f64 = 0.02;

#[derive(Parser, Debug)]
#[command(name = "graphpool", version, about = "Graph convolution and pooling benchmarks")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cross-validate conv × pool cells and record results.
    Run(RunArgs),
    /// Redraw the chart and print the table from a results file.
    Report(ReportArgs),
    /// Print dataset statistics against the reference table.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// mutag, proteins, imdb-binary, reddit-binary or all.
    #[arg(long, value_parser = parse_datasets)]
    dataset: Option<List<DatasetName>>,
    /// gcn, sage, tagcn or all.
    #[arg(long, value_parser = parse_convs)]
    conv: Option<List<ConvKind>>,
    /// none, sortpool, diffpool, topk, sagpool or all.
    #[arg(long, value_parser = parse_pools)]
    pool: Option<List<PoolKind>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Output directory for results.csv and accuracy.svg.
    #[arg(long)]
    out: Option<PathBuf>,
    /// small or full.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<GridKind>,
    /// Worker threads for folds and grid points (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Epoch budget per training run.
    #[arg(long)]
    epochs: Option<usize>,
    /// Pool after every convolution.
    #[arg(long)]
    hierarchical: bool,
    /// auto, degree or constant.
    #[arg(long, value_parser = parse_features)]
    features: Option<FeatureMode>,
    #[command(flatten)]
    data: DataArgs,
    /// Flat key = value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset root directory.
    #[arg(long, env = "GNN_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

impl DataArgs {
    fn root(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| PathBuf::from("data"))
    }
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory holding results.csv; the chart is written next to it.
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long, value_parser = parse_datasets, default_value = "all")]
    dataset: List<DatasetName>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    dataset: Option<String>,
    conv: Option<String>,
    pool: Option<String>,
    seed: Option<u64>,
    folds: Option<usize>,
    out: Option<PathBuf>,
    grid: Option<String>,
    jobs: Option<usize>,
    epochs: Option<usize>,
    hierarchical: Option<bool>,
    features: Option<String>,
    data_dir: Option<PathBuf>,
}

/// A comma-separated selection, or `all`.
#[derive(Clone, Debug)]
struct List<T>(Vec<T>);

fn parse_many<T: FromStr<Err = graphpool::Error> + Clone>(s: &str, all: &[T]) -> Result<List<T>, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(List(all.to_vec()));
    }
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()
        .map(List)
}

fn parse_datasets(s: &str) -> Result<List<DatasetName>, String> {
    parse_many(s, &DatasetName::ALL)
}

fn parse_convs(s: &str) -> Result<List<ConvKind>, String> {
    parse_many(s, &ConvKind::ALL)
}

fn parse_pools(s: &str) -> Result<List<PoolKind>, String> {
    parse_many(s, &PoolKind::ALL)
}

fn parse_grid(s: &str) -> Result<GridKind, String> {
    s.parse().map_err(|e: graphpool::Error| e.to_string())
}

fn parse_features(s: &str) -> Result<FeatureMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "auto" => Ok(FeatureMode::Auto),
        "degree" => Ok(FeatureMode::Degree),
        "constant" => Ok(FeatureMode::Constant),
        other => Err(format!(
            "unknown feature mode {other:?} (expected auto, degree or constant)"
        )),
    }
}

/// A usage error: exit status 2.
struct Usage(String);

fn from_file<T>(value: Option<String>, parse: fn(&str) -> Result<T, String>) -> Result<Option<T>, Usage> {
    value.map(|s| parse(&s)).transpose().map_err(Usage)
}

fn build_config(args: RunArgs) -> Result<ExperimentConfig, Usage> {
    let file = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Usage(format!("{}: {e}", p.display())))?;
            toml::from_str::<FileConfig>(&text).map_err(|e| Usage(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let defaults = ExperimentConfig::default();
    Ok(ExperimentConfig {
        data_root: args.data.data_dir.or(file.data_dir).unwrap_or(defaults.data_root),
        datasets: match args.dataset {
            Some(List(d)) => d,
            None => from_file(file.dataset, parse_datasets)?.map_or(defaults.datasets, |l| l.0),
        },
        convs: match args.conv {
            Some(List(c)) => c,
            None => from_file(file.conv, parse_convs)?.map_or(defaults.convs, |l| l.0),
        },
        pools: match args.pool {
            Some(List(p)) => p,
            None => from_file(file.pool, parse_pools)?.map_or(defaults.pools, |l| l.0),
        },
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
        folds: args.folds.or(file.folds).unwrap_or(defaults.folds),
        out_dir: args.out.or(file.out).unwrap_or(defaults.out_dir),
        grid: match args.grid {
            Some(g) => g,
            None => from_file(file.grid, parse_grid)?.unwrap_or(defaults.grid),
        },
        jobs: args.jobs.or(file.jobs).unwrap_or(defaults.jobs),
        epochs: args.epochs.or(file.epochs),
        hierarchical: args.hierarchical || file.hierarchical.unwrap_or(false),
        features: match args.features {
            Some(f) => f,
            None => from_file(file.features, parse_features)?.unwrap_or(defaults.features),
        },
    })
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let config = match build_config(args) {
        Ok(c) => c,
        Err(Usage(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let outcomes = match experiment::run(&config) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut failed = 0;
    for o in &outcomes {
        match &o.result {
            Ok(r) => println!(
                "{} {} {}: {} ± {} ({}s) {}",
                r.dataset,
                r.conv,
                r.pool,
                experiment::fixed4(r.mean),
                experiment::fixed4(r.std),
                r.seconds.round(),
                r.winner_hp
            ),
            Err(e) => {
                failed += 1;
                eprintln!("error: {} {} {}: {e}", o.dataset, o.conv, o.pool);
            }
        }
    }
    println!(
        "{} of {} cells completed; results in {}",
        outcomes.len() - failed,
        outcomes.len(),
        config.out_dir.join(RESULTS_FILE).display()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn cmd_report(args: ReportArgs) -> ExitCode {
    let csv = args.out.join(RESULTS_FILE);
    let result = experiment::parse_csv(&csv).and_then(|rows| {
        experiment::emit_bar_chart(&rows, &args.out.join(CHART_FILE))?;
        Ok(rows)
    });
    match result {
        Ok(rows) => {
            println!(
                "{:<14} {:<6} {:<9} {:>5} {:>7} {:>7}",
                "dataset", "conv", "pool", "seed", "mean", "std"
            );
            for r in rows {
                println!(
                    "{:<14} {:<6} {:<9} {:>5} {:>7} {:>7}",
                    r.dataset,
                    r.conv.to_string(),
                    r.pool.to_string(),
                    r.seed,
                    experiment::fixed4(r.mean),
                    experiment::fixed4(r.std)
                );
            }
            println!("chart: {}", args.out.join(CHART_FILE).display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}: {e}", csv.display());
            ExitCode::FAILURE
        }
    }
}

fn cmd_stats(args: StatsArgs) -> ExitCode {
    let root = args.data.root();
    let mut ok = true;
    println!(
        "{:<14} {:>6} {:>7} {:>9} {:>11} {:>11} {:>9} {:>10}",
        "dataset", "graphs", "classes", "avg_nodes", "edges_undir", "edges_dir", "reference", "convention"
    );
    for name in args.dataset.0 {
        match stats_line(name, &root) {
            Ok((line, passed)) => {
                ok &= passed;
                println!("{line}");
            }
            Err(e) => {
                ok = false;
                eprintln!("error: {name}: {e}");
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn stats_line(name: DatasetName, root: &Path) -> graphpool::Result<(String, bool)> {
    let d = load_tu_dataset(&DatasetSpec::locate(name, root))?;
    let s = compute_dataset_stats(&d)?;
    let expected = name.expected();
    let cmp = compare_stats(&s, &expected, STATS_TOLERANCE);
    let convention = match cmp.convention {
        Some(c) => format!("{c:?}").to_ascii_lowercase(),
        None => "mismatch".into(),
    };
    Ok((
        format!(
            "{:<14} {:>6} {:>7} {:>9.2} {:>11.2} {:>11.2} {:>9.2} {:>10}",
            name.slug(),
            s.graphs,
            s.classes,
            s.avg_nodes,
            s.avg_edges_undirected,
            s.avg_edges_directed,
            expected.avg_edges,
            convention
        ),
        cmp.passed(),
    ))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::Stats(a) => cmd_stats(a),
    }
}
