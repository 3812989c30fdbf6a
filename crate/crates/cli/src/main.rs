mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use spdrf_core::data::{self, synth_generate, Dataset, TargetFunction};
use spdrf_core::persist::write_atomic;
use spdrf_core::trainer::{self, Checkpoint, Mode, PaceReport};

use crate::config::RunConfig;

const DEFAULT_TARGET: &str = "t";

#[derive(Parser)]
#[command(name = "spdrf", version, about = "Self-paced deep regression forests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test pair as CSV.
    Synth(SynthArgs),
    /// Train a model; writes a checkpoint and a per-pace report.
    Train(TrainArgs),
    /// Score a checkpoint on a CSV dataset.
    Eval(EvalArgs),
    /// Print a pace report CSV as a table.
    PaceReport(PaceReportArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Name of the target column in dataset CSVs [default: t].
    #[arg(long)]
    target_column: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    train_out: Option<PathBuf>,
    #[arg(long)]
    test_out: Option<PathBuf>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long, value_enum)]
    function: Option<FunctionArg>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    outlier_fraction: Option<f64>,
    #[arg(long)]
    outlier_shift: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Training CSV. Without --train/--test the [synth] section is generated in memory.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output checkpoint [default: checkpoint.json].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output pace report [default: pace_report.csv].
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    tree_count: Option<usize>,
    #[arg(long)]
    tree_depth: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    hidden_dims: Option<Vec<usize>>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    steps_per_pace: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Comma-separated, increasing, ending at 1.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    exclude_fraction: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Also write the metrics document here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PaceReportArgs {
    report: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    SpdrfCapped,
    Spdrf,
    DrfBaseline,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::SpdrfCapped => Mode::SpdrfCapped,
            ModeArg::Spdrf => Mode::Spdrf,
            ModeArg::DrfBaseline => Mode::DrfBaseline,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FunctionArg {
    SineLinear,
    Ramp,
}

impl From<FunctionArg> for TargetFunction {
    fn from(f: FunctionArg) -> Self {
        match f {
            FunctionArg::SineLinear => TargetFunction::SineLinear,
            FunctionArg::Ramp => TargetFunction::Ramp,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => synth(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::PaceReport(args) => pace_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(common: &Common) -> anyhow::Result<(RunConfig, String)> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = Some(seed);
    }
    let seed = config.seed.unwrap_or(0);
    config.synth.seed = seed;
    config.train.seed = seed;
    let target = common
        .target_column
        .clone()
        .or_else(|| config.paths.target_column.clone())
        .unwrap_or_else(|| DEFAULT_TARGET.to_string());
    Ok((config, target))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let (config, target) = load(&args.common)?;
    let mut spec = config.synth;
    set(&mut spec.n_samples, args.n_samples);
    set(&mut spec.n_test, args.n_test);
    set(&mut spec.feature_dim, args.feature_dim);
    set(&mut spec.function, args.function.map(Into::into));
    set(&mut spec.noise_std, args.noise_std);
    set(&mut spec.outlier_fraction, args.outlier_fraction);
    set(&mut spec.outlier_shift, args.outlier_shift);
    let train_out = args
        .train_out
        .or(config.paths.train)
        .context("no training output path (--train-out or paths.train)")?;
    let test_out = args
        .test_out
        .or(config.paths.test)
        .context("no test output path (--test-out or paths.test)")?;

    let (train_set, test_set) = synth_generate(&spec)?;
    // serialize both before touching the filesystem
    let train_bytes = data::to_csv(&train_set, &target)?;
    let test_bytes = data::to_csv(&test_set, &target)?;
    write_atomic(&train_out, &train_bytes)?;
    write_atomic(&test_out, &test_bytes)?;
    Ok(())
}

fn datasets(
    config: &RunConfig,
    train: Option<PathBuf>,
    test: Option<PathBuf>,
    target: &str,
) -> anyhow::Result<(Dataset, Dataset)> {
    let train = train.or_else(|| config.paths.train.clone());
    let test = test.or_else(|| config.paths.test.clone());
    match (train, test) {
        (Some(a), Some(b)) => Ok((load_data(&a, target)?, load_data(&b, target)?)),
        (None, None) => Ok(synth_generate(&config.synth)?),
        (Some(_), None) => bail!("a training set was given without a test set (--test)"),
        (None, Some(_)) => bail!("a test set was given without a training set (--train)"),
    }
}

fn load_data(path: &Path, target: &str) -> anyhow::Result<Dataset> {
    data::load_csv(path, target).with_context(|| format!("loading {}", path.display()))
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let (config, target) = load(&args.common)?;
    let mut tc = config.train.clone();
    set(&mut tc.tree_count, args.tree_count);
    set(&mut tc.tree_depth, args.tree_depth);
    set(&mut tc.hidden_dims, args.hidden_dims);
    set(&mut tc.batch_size, args.batch_size);
    set(&mut tc.pretrain_steps, args.pretrain_steps);
    set(&mut tc.steps_per_pace, args.steps_per_pace);
    set(&mut tc.learning_rate.initial, args.learning_rate);
    set(&mut tc.schedule.fractions, args.fractions);
    set(&mut tc.schedule.exclude_fraction, args.exclude_fraction);
    let mode = args
        .mode
        .map(Mode::from)
        .or(config.mode)
        .unwrap_or(Mode::SpdrfCapped);
    let tc = mode.apply(&tc);
    tc.validate()?;

    let checkpoint_path = args
        .checkpoint
        .or_else(|| config.paths.checkpoint.clone())
        .unwrap_or_else(|| PathBuf::from("checkpoint.json"));
    let report_path = args
        .report
        .or_else(|| config.paths.report.clone())
        .unwrap_or_else(|| PathBuf::from("pace_report.csv"));

    let (train_set, test_set) = datasets(&config, args.train, args.test, &target)?;
    let out = trainer::train(&train_set, &test_set, &tc)?;
    let final_test = trainer::evaluate(&test_set, &out.checkpoint)?;

    out.checkpoint.save(&checkpoint_path)?;
    out.report.save(&report_path)?;
    println!("{}", final_test.to_json());
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let (config, target) = load(&args.common)?;
    let path = args
        .checkpoint
        .or(config.paths.checkpoint)
        .context("no checkpoint given (--checkpoint or paths.checkpoint)")?;
    let checkpoint =
        Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let dataset = load_data(&args.data, &target)?;
    let metrics = trainer::evaluate(&dataset, &checkpoint)?;
    let doc = metrics.to_json();
    if let Some(out) = args.output {
        write_atomic(&out, format!("{doc}\n").as_bytes())?;
    }
    println!("{doc}");
    Ok(())
}

fn pace_report(args: PaceReportArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.report)
        .with_context(|| format!("reading {}", args.report.display()))?;
    let report =
        PaceReport::from_csv(&text).with_context(|| format!("in {}", args.report.display()))?;
    print!("{}", render_table(&report));
    Ok(())
}

fn render_table(report: &PaceReport) -> String {
    let mut header: Vec<String> = [
        "pace",
        "lambda",
        "epsilon",
        "selected",
        "excluded",
        "train_mae",
        "test_mae",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=10).map(|l| format!("cs_{l}")));
    header.push("seconds".into());

    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            let mut row = vec![
                r.pace_index.to_string(),
                format!("{:.4}", r.lambda),
                format!("{:.3e}", r.epsilon),
                r.selected_count.to_string(),
                r.excluded_count.to_string(),
                format!("{:.3}", r.train_mae),
                format!("{:.3}", r.test_mae),
            ];
            row.extend(r.test_cs.iter().map(|c| format!("{c:.1}")));
            row.push(format!("{:.2}", r.seconds));
            row
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap()
        })
        .collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:>w$}"))
            .collect();
        padded.join("  ") + "\n"
    };
    let mut out = line(&header);
    for row in &rows {
        out += &line(row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
