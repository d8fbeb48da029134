use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use inet_core::eval::EvalReport;
use inet_core::experiments::{
    cmd_ablate, cmd_dictsweep, cmd_eval, cmd_gradcheck, cmd_sweep, cmd_train, exit_code, StudyRow, DICT_MULTIPLIERS,
    GRADCHECK_TOLERANCE,
};
use inet_core::{Error, RunConfig};

#[derive(Parser)]
#[command(name = "inet", version, about = "Siamese re-identification training with OLP and HEP losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides any seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics.csv, eval files and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint and state.json in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a saved checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference checks of every analytic gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train all three loss modes with a shared seed.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Dictionary-size study over capacity multipliers.
    Dictsweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = DICT_MULTIPLIERS)]
        multipliers: Vec<usize>,
    },
    /// Gallery-size sweep over nested galleries.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> anyhow::Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::InvalidConfig("output_dir: required (use --out)".into()))?;
    cfg.validate()?;
    Ok((cfg, out))
}

fn print_report(label: &str, r: &EvalReport) {
    println!(
        "{label}: gallery {} queries {} top1 {:.4} top5 {:.4} top10 {:.4} mAP {:.4}",
        r.gallery_size, r.num_queries, r.top1, r.top5, r.top10, r.mean_ap
    );
}

fn print_study(rows: &[StudyRow]) {
    for row in rows {
        print_report(&format!("{} x{}", row.loss_mode, row.dictionary_capacity_multiplier), &row.report);
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { common, resume } => {
            let (cfg, out) = load_config(&common)?;
            let outcome = cmd_train(&cfg, &out, resume)?;
            println!("trained {} iterations into {}", outcome.iterations, out.display());
            print_report("initial", &outcome.initial_eval);
            print_report("final", &outcome.final_eval);
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = load_config(&common)?;
            print_report("eval", &cmd_eval(&cfg, &out, checkpoint.as_deref())?);
        }
        Command::Gradcheck { common } => {
            let (cfg, out) = load_config(&common)?;
            let results = cmd_gradcheck(cfg.seed()?, &out)?;
            for r in &results {
                let status = if r.passed { "ok" } else { "FAIL" };
                println!("{:<14} max rel error {:.3e} over {} coordinates  {status}", r.suite, r.max_rel_error, r.coordinates);
            }
            if results.iter().any(|r| !r.passed) {
                eprintln!("gradient check exceeded {GRADCHECK_TOLERANCE:e}");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Ablate { common } => {
            let (cfg, out) = load_config(&common)?;
            print_study(&cmd_ablate(&cfg, &out)?);
        }
        Command::Dictsweep { common, multipliers } => {
            let (cfg, out) = load_config(&common)?;
            print_study(&cmd_dictsweep(&cfg, &out, &multipliers)?);
        }
        Command::Sweep { common, checkpoint } => {
            let (cfg, out) = load_config(&common)?;
            for r in cmd_sweep(&cfg, &out, checkpoint.as_deref().map(Path::new))? {
                print_report("sweep", &r);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<Error>().map_or(1, exit_code);
            ExitCode::from(code as u8)
        }
    }
}
