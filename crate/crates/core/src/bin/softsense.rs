use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use softsense::data::Partition;
use softsense::experiment::{files, Experiment, ExperimentConfig};
use softsense::{Error, Result};

/// Two-stage soft-sensing pipeline: train, explain, fine-tune, report.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent of the experiment directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/valid/test CSVs.
    Generate(Common),
    /// Train the baseline checkpoint.
    Train(Common),
    /// Export saliency maps and their aggregates.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune the sensor weight layer of a checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Metrics of a checkpoint on one partition.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Partition,
    },
    /// Compare two metric files.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        finetuned: Option<PathBuf>,
    },
    /// Every stage in order.
    Run(Common),
}

fn parse_split(s: &str) -> std::result::Result<Partition, String> {
    match s {
        "train" => Ok(Partition::Train),
        "valid" => Ok(Partition::Valid),
        "test" => Ok(Partition::Test),
        _ => Err(format!("unknown split {s:?}, expected train, valid or test")),
    }
}

fn open(c: &Common) -> Result<Experiment> {
    let mut config = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        config = config.with_seed(seed);
    }
    Experiment::new(config, c.out.as_deref())
}

fn or_default(exp: &Experiment, given: Option<PathBuf>, name: &str) -> PathBuf {
    given.unwrap_or_else(|| exp.path(name))
}

fn show(path: &Path) {
    println!("{}", path.display());
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(c) => {
            let paths = open(&c)?.cmd_generate()?;
            for p in [Partition::Train, Partition::Valid, Partition::Test] {
                show(paths.get(p));
            }
        }
        Command::Train(c) => show(&open(&c)?.cmd_train()?),
        Command::Visualize { common, checkpoint } => {
            let exp = open(&common)?;
            for p in exp.cmd_visualize(&or_default(&exp, checkpoint, files::BASELINE))? {
                show(&p);
            }
        }
        Command::Finetune { common, checkpoint } => {
            let exp = open(&common)?;
            show(&exp.cmd_finetune(&or_default(&exp, checkpoint, files::BASELINE))?);
        }
        Command::Evaluate { common, checkpoint, split } => {
            let exp = open(&common)?;
            let (report, path) = exp.cmd_evaluate(&or_default(&exp, checkpoint, files::FINETUNED), split)?;
            for t in &report.tasks {
                println!("task {} auroc {:.4} tpr {:.4}", t.task, t.auroc, t.tpr);
            }
            show(&path);
        }
        Command::Report { common, baseline, finetuned } => {
            let exp = open(&common)?;
            let b = or_default(&exp, baseline, &files::metrics("baseline", "test"));
            let f = or_default(&exp, finetuned, &files::metrics("finetuned", "test"));
            let (report, path) = exp.cmd_report(&b, &f)?;
            print_report(&report);
            show(&path);
        }
        Command::Run(c) => {
            let exp = open(&c)?;
            print_report(&exp.run()?);
            show(&exp.dir);
        }
    }
    Ok(())
}

fn print_report(r: &softsense::experiment::ExperimentReport) {
    println!("task base_auroc ft_auroc delta base_tpr ft_tpr delta");
    for t in &r.tasks {
        println!(
            "{} {:.4} {:.4} {:+.4} {:.4} {:.4} {:+.4}",
            t.task,
            t.baseline.auroc,
            t.finetuned.auroc,
            t.delta_auroc,
            t.baseline.tpr,
            t.finetuned.tpr,
            t.delta_tpr
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
