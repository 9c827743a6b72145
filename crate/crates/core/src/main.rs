use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use dnnloc::detector::DetectorConfig;
use dnnloc::probes::{Observer, TraceWriter};
use dnnloc::workbench::{
    builtin_model, load_dataset, mutate, run_bench, train_spec_with, LoadOptions, ModelSpec, MonitorKind, Mutation,
    NormalizeMethod, Suite, TrainReport,
};

#[derive(Parser)]
#[command(name = "dnnloc", version, about = "Train small networks and localize training faults")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model spec with one or more monitors attached.
    Train {
        /// Model spec JSON (or builtin:<name>).
        #[arg(long)]
        model: String,
        /// CSV path or builtin:<xor|blobs|blobs255|linreg>.
        #[arg(long)]
        data: String,
        /// 0-based label columns, comma separated. Defaults to the last column.
        #[arg(long, value_delimiter = ',')]
        label_cols: Option<Vec<usize>>,
        #[arg(long)]
        one_hot: bool,
        #[arg(long, value_enum)]
        normalize: Option<NormalizeArg>,
        #[arg(long, value_enum)]
        monitor: MonitorArg,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stream one JSON summary per batch.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Apply a mutation to a spec and write the result.
    Mutate {
        #[arg(long)]
        model: String,
        /// e.g. zero_lr, scale_lr=10, wrong_loss=mse, drop_activation=1
        #[arg(long)]
        op: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a benchmark suite and write per-case results as CSV.
    Bench {
        /// Suite JSON, or builtin:canonical.
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizeArg {
    None,
    Minmax,
    Standardize,
}

#[derive(Clone, Copy, ValueEnum)]
enum MonitorArg {
    None,
    Deeplocalize,
    TerminateOnNan,
    EarlyStopLoss,
    EarlyStopAcc,
    All,
}

impl MonitorArg {
    fn kinds(self) -> Vec<MonitorKind> {
        match self {
            MonitorArg::None => Vec::new(),
            MonitorArg::Deeplocalize => vec![MonitorKind::DeepLocalize],
            MonitorArg::TerminateOnNan => vec![MonitorKind::TerminateOnNaN],
            MonitorArg::EarlyStopLoss => vec![MonitorKind::EarlyStopLoss],
            MonitorArg::EarlyStopAcc => vec![MonitorKind::EarlyStopAcc],
            MonitorArg::All => MonitorKind::ALL.to_vec(),
        }
    }
}

fn read_spec(source: &str) -> anyhow::Result<ModelSpec> {
    let text = match source.strip_prefix("builtin:") {
        Some(name) => builtin_model(name)
            .with_context(|| format!("unknown builtin model `{name}`"))?
            .to_string(),
        None => std::fs::read_to_string(source).with_context(|| format!("cannot read {source}"))?,
    };
    ModelSpec::from_json(&text).with_context(|| format!("invalid model spec {source}"))
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train {
            model,
            data,
            label_cols,
            one_hot,
            normalize,
            monitor,
            seed,
            out,
            trace_out,
        } => {
            let mut spec = read_spec(&model)?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let normalize = match normalize {
                None | Some(NormalizeArg::None) => NormalizeMethod::None,
                Some(NormalizeArg::Minmax) => NormalizeMethod::Minmax,
                Some(NormalizeArg::Standardize) => NormalizeMethod::Standardize,
            };
            let options = LoadOptions {
                label_cols,
                one_hot,
                normalize,
            };
            let dataset = load_dataset(&data, &options).with_context(|| format!("cannot load {data}"))?;
            let detector = DetectorConfig::default();
            let kinds = monitor.kinds();
            let outcome = match trace_out {
                Some(path) => {
                    let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
                    let mut trace = TraceWriter::new(BufWriter::new(file));
                    let outcome = train_spec_with(&spec, &dataset, &kinds, &detector, &mut [&mut trace as &mut dyn Observer])?;
                    trace.finish()?.flush()?;
                    outcome
                }
                None => train_spec_with(&spec, &dataset, &kinds, &detector, &mut [])?,
            };
            let report = TrainReport::from_outcome(&outcome);
            let json = report.to_json_pretty();
            match out {
                Some(path) => write_file(&path, &(json + "\n"))?,
                None => println!("{json}"),
            }
            eprintln!("{}", outcome.verdict);
            Ok(if outcome.verdict.is_fault() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Mutate { model, op, out } => {
            let spec = read_spec(&model)?;
            let mutation: Mutation = op.parse()?;
            let (mutated, truth) = mutate(&spec, &mutation)?;
            write_file(&out, &(mutated.to_json_pretty() + "\n"))?;
            eprintln!("{mutation}: {truth:?}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { suite, out } => {
            let suite = match suite.strip_prefix("builtin:") {
                Some("canonical") => Suite::canonical(),
                Some(other) => bail!("unknown builtin suite `{other}`"),
                None => Suite::load(Path::new(&suite)).with_context(|| format!("cannot load suite {suite}"))?,
            };
            let report = run_bench(&suite);
            write_file(&out, &report.to_csv()?)?;
            print!("{}", report.to_table());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
