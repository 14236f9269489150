//! `prunebench` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use prunebench::data::{generate_stream, generate_task, TaskKind, TaskSpec};
use prunebench::error::ConfigError;
use prunebench::flops::flop_report;
use prunebench::harness::{self, prepare, Pretrained, STATUS_FAILED};
use prunebench::io::{self, ExperimentConfig, PruneManifest};
use prunebench::model::{Model, TrainabilityConfig};
use prunebench::{par, prune, Error};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "prunebench", version, about = "Zero-shot structured pruning under FLOP budgets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides `[output] dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (overrides `[run] threads`).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the task stream as IDX files plus `stream/stream.toml`.
    GenStream,
    /// Train on the pretraining task and write `pretrained.ckpt`.
    Pretrain,
    /// Prune `[input] checkpoint` with the `[prune]` plan.
    Prune,
    /// Print per-layer training FLOPs for the model and every method.
    Flops,
    /// Run the `[run]` grid and write `records.csv`.
    Run,
    /// Aggregate records into `curves.csv` and/or `curves.svg`.
    Curve {
        #[arg(long, value_enum, default_value_t = Format::Both)]
        format: Format,
        /// Records CSV (overrides `[input] records`).
        #[arg(long, value_name = "PATH")]
        records: Option<PathBuf>,
    },
    /// Print a text summary of a records CSV.
    Report {
        /// Records CSV (overrides `[input] records`).
        #[arg(long, value_name = "PATH")]
        records: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Svg,
    Both,
}

struct Ctx {
    config: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn output(&self, name: &str) -> Result<PathBuf, Error> {
        fs::create_dir_all(&self.out).map_err(|e| io_error(&self.out, e))?;
        Ok(self.out.join(name))
    }

    fn checkpoint(&self) -> Result<Model, Error> {
        let path = self.config.input.checkpoint.as_ref().ok_or_else(|| missing("input", "checkpoint"))?;
        io::load_checkpoint(path)
    }

    fn records_path(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.config.input.records.clone()).unwrap_or_else(|| self.out.join("records.csv"))
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn missing(section: &str, key: &str) -> Error {
    ConfigError::MissingKey { section: section.into(), key: key.into() }.into()
}

fn load_config(cli: &Cli) -> Result<Ctx, Error> {
    let mut config = match &cli.config {
        Some(p) => io::parse_config(p)?,
        None => io::parse_config_str("", Path::new("."))?,
    };
    if let Some(seed) = cli.seed {
        config.override_seed(seed)?;
    }
    let out = cli.out.clone().unwrap_or_else(|| config.output.dir.clone());
    Ok(Ctx { config, out })
}

fn gen_stream(ctx: &Ctx) -> Result<(), Error> {
    let data = generate_stream(&ctx.config.stream)?;
    let dir = ctx.output("stream")?;
    let manifest = io::write_stream(&data, ctx.config.stream.seed, &dir)?;
    for t in &manifest.tasks {
        println!(
            "{:<8} {:<9} {:>3} classes  train {:>6}  val {:>4}  test {:>4}",
            t.spec.task_id,
            t.spec.kind.as_str(),
            t.spec.n_classes,
            t.spec.n_train,
            t.spec.n_val,
            t.spec.n_test
        );
    }
    println!("wrote {}", dir.join(io::STREAM_MANIFEST).display());
    Ok(())
}

fn pretrain_model(ctx: &Ctx) -> Result<Pretrained, Error> {
    info!("generating pretraining task `{}`", ctx.config.stream.pretrain.task_id);
    let task = generate_task(&ctx.config.stream.pretrain)?;
    info!("pretraining for {} steps", ctx.config.pretrain.steps);
    let pre = harness::pretrain(&task, &ctx.config.model, &ctx.config.pretrain)?;
    info!("pretraining test accuracy {:.4}", pre.test_accuracy);
    Ok(pre)
}

fn pretrain(ctx: &Ctx) -> Result<(), Error> {
    let pre = pretrain_model(ctx)?;
    let path = ctx.output("pretrained.ckpt")?;
    io::save_checkpoint(&pre.model, &path)?;
    println!("test accuracy {:.4}", pre.test_accuracy);
    println!("wrote {}", path.display());
    Ok(())
}

fn prune_cmd(ctx: &Ctx) -> Result<(), Error> {
    let plan = ctx.config.prune.ok_or_else(|| missing("prune", "granularity"))?;
    let model = ctx.checkpoint()?;
    let r = prune::prune(&model, &plan)?;
    if r.integer_pinned {
        warn!("target {} pinned by integer counts; nearest achievable {:.4}", plan.target, r.achieved);
    }
    let ckpt = ctx.output("pruned.ckpt")?;
    io::save_checkpoint(r.compacted_model.as_ref().unwrap_or(&r.masked_model), &ckpt)?;
    let manifest = ctx.output("prune.toml")?;
    io::write_atomic(&manifest, io::prune_manifest_to_string(&PruneManifest::from(&r))?.as_bytes())?;
    println!("plan {}  rate {:.4}", plan.label(), r.rate);
    println!("achieved {:.4} of prunable FLOPs, {:.4} of the training step", r.achieved, r.achieved_model);
    println!("wrote {} and {}", ckpt.display(), manifest.display());
    Ok(())
}

fn flops(ctx: &Ctx) -> Result<(), Error> {
    let model = match &ctx.config.input.checkpoint {
        Some(p) => io::load_checkpoint(p)?,
        None => Model::build(&ctx.config.model, ctx.config.pretrain.seed)?,
    };
    let report = flop_report(&model, &TrainabilityConfig::full(&model))?;
    println!("== model (all layers trainable) ==\n{}", report.to_text());
    io::write_atomic(&ctx.output("flops.csv")?, report.to_csv().as_bytes())?;
    // Only the id and class count matter for surgery.
    let task = TaskSpec {
        task_id: "flops".into(),
        kind: TaskKind::Object,
        n_classes: model.head_classes(),
        ..ctx.config.stream.pretrain.clone()
    };
    for m in &ctx.config.methods {
        let p = prepare(&model, m, ctx.config.pretrain.seed, &task)?;
        let report = flop_report(&p.model, &p.train)?;
        println!("== {} ==\n{}", m.name, report.to_text());
        io::write_atomic(&ctx.output(&format!("flops-{}.csv", m.name))?, report.to_csv().as_bytes())?;
    }
    println!("wrote CSV reports to {}", ctx.out.display());
    Ok(())
}

fn run(ctx: &Ctx) -> Result<(), Error> {
    let run_config = ctx.config.run.as_ref().ok_or_else(|| missing("run", "protocol"))?;
    if ctx.config.methods.is_empty() {
        return Err(missing("methods", "base"));
    }
    let pretrained = match &ctx.config.input.checkpoint {
        Some(p) => io::load_checkpoint(p)?,
        None => {
            let pre = pretrain_model(ctx)?;
            io::save_checkpoint(&pre.model, &ctx.output("pretrained.ckpt")?)?;
            pre.model
        }
    };
    info!("generating {} downstream tasks", ctx.config.stream.downstream.len());
    let stream = generate_stream(&ctx.config.stream)?;
    info!(
        "running {} methods x {} tasks x {} seeds",
        ctx.config.methods.len(),
        stream.downstream.len(),
        run_config.seeds.len()
    );
    let records = harness::run(&pretrained, &stream, &ctx.config.methods, run_config)?;
    let failed = records.iter().filter(|r| r.status == STATUS_FAILED).count();
    if failed > 0 {
        warn!("{failed} failed cells recorded");
    }
    let path = ctx.output("records.csv")?;
    io::save_records(&records, &path)?;
    println!("{} records ({failed} failed)", records.len());
    println!("wrote {}", path.display());
    Ok(())
}

fn curve(ctx: &Ctx, format: Format, records: Option<PathBuf>) -> Result<(), Error> {
    let records = io::load_records(&ctx.records_path(records))?;
    let curves = harness::tradeoff_curves(&records);
    if matches!(format, Format::Csv | Format::Both) {
        let path = ctx.output("curves.csv")?;
        io::write_atomic(&path, io::curves_to_csv(&curves)?.as_bytes())?;
        println!("wrote {}", path.display());
    }
    if matches!(format, Format::Svg | Format::Both) {
        let path = ctx.output("curves.svg")?;
        io::write_atomic(&path, io::curves_svg(&curves).as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn report(ctx: &Ctx, records: Option<PathBuf>) -> Result<(), Error> {
    let records = io::load_records(&ctx.records_path(records))?;
    print!("{}", io::report(&records));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    let ctx = load_config(&cli)?;
    let threads = cli.threads.or(ctx.config.threads);
    if threads == Some(0) {
        return Err(Error::OutOfRange { what: "--threads", value: "0".into(), allowed: ">= 1" });
    }
    par::install(threads, move || match cli.command {
        Command::GenStream => gen_stream(&ctx),
        Command::Pretrain => pretrain(&ctx),
        Command::Prune => prune_cmd(&ctx),
        Command::Flops => flops(&ctx),
        Command::Run => run(&ctx),
        Command::Curve { format, records } => curve(&ctx, format, records),
        Command::Report { records } => report(&ctx, records),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PRUNEBENCH_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_VALIDATION) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
