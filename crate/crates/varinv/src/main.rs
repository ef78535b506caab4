use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use varinv::config::{ExperimentConfig, Method};
use varinv::error::{AppError, EXIT_OK};
use varinv::exec::Pool;
use varinv::pipeline::{self, table_row, Ctx};

#[derive(Parser)]
#[command(name = "varinv", version, about = "Trainable variational inversion of sea-surface fields")]
struct Cli {
    /// Experiment config (JSON); the built-in desk config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the top-level seed and every seed derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize truth, SST, masks and altimetry.
    Generate,
    /// Optimal interpolation of the altimetry.
    BaselineOi,
    /// Train one method.
    Train {
        #[arg(long, value_enum)]
        method: Method,
        /// Continue from the method's checkpoint if present.
        #[arg(long)]
        resume: bool,
    },
    /// Reconstruct the test block with one method.
    Reconstruct {
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Score reconstructions against the truth.
    Evaluate {
        /// Methods to score; the config's list when omitted.
        #[arg(long, value_enum, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Score this field-stack file instead.
        #[arg(long, conflicts_with = "methods")]
        estimate: Option<PathBuf>,
        /// Field of `--estimate` to score.
        #[arg(long, requires = "estimate")]
        field: Option<String>,
    },
    /// Finite-difference gradient checks.
    Gradcheck,
    /// Dump the learned SST and SSH feature maps.
    Features,
    /// Print the resolved config.
    ShowConfig,
}

fn load_config(cli: &Cli) -> varinv::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(0),
    };
    if let Some(s) = cli.seed {
        cfg.reseed(s);
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> varinv::Result<()> {
    let cfg = load_config(&cli)?;
    if let Command::ShowConfig = cli.command {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let ctx = Ctx::new(cfg, Pool::new(cli.threads)?)?;
    match cli.command {
        Command::Generate => {
            let s = pipeline::generate(&ctx)?;
            println!("windows: {} train, {} val, {} test", s.train.len(), s.val.len(), s.test.len());
        }
        Command::BaselineOi => {
            pipeline::baseline_oi(&ctx)?;
        }
        Command::Train { method, resume } => {
            let st = pipeline::train(&ctx, method, resume)?;
            if let Some(v) = st.best_val {
                println!("{}: best validation loss {v:.6e}", method.name());
            }
        }
        Command::Reconstruct { method } => {
            pipeline::reconstruct(&ctx, method)?;
        }
        Command::Evaluate { methods, estimate, field } => {
            let methods = if methods.is_empty() { ctx.cfg.eval.methods.clone() } else { methods };
            let est = estimate.as_deref().map(|p| (p, field.as_deref()));
            for s in pipeline::evaluate(&ctx, &methods, est)? {
                println!("{}", table_row(&s));
            }
        }
        Command::Gradcheck => {
            let rows = pipeline::gradcheck(&ctx)?;
            for r in &rows {
                println!("{:<32} {:.3e} (tol {:.0e}) {}", r.name, r.error, r.tol, if r.pass() { "ok" } else { "FAIL" });
            }
            let failed: Vec<&str> = rows.iter().filter(|r| !r.pass()).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(AppError::GradCheck(failed.join(", ")));
            }
        }
        Command::Features => {
            let f = pipeline::features(&ctx)?;
            println!("{} feature maps written", f.len());
        }
        Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 2 } else { EXIT_OK as u8 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.structured());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
