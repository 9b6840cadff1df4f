use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use jointprune::artifacts::{
    read_trace, CheckpointState, FinalArchitecture, TraceWriter, CHECKPOINT_SCHEMA_VERSION,
};
use jointprune::cost::{CostModel, LatencyTable};
use jointprune::error::{Error, Result};
use jointprune::net::{evaluate_error, make_dataset, SharedWeightStore};
use jointprune::optimizer::{self, ErrorEvaluator, RunHooks, SharedNetEvaluator, TraceRecord};
use jointprune::report;
use jointprune::rng::{DetRng, RngState};
use jointprune::runconfig;
use jointprune::space::{normalize, ArchitectureConfig, PruningVector};

#[derive(Parser)]
#[command(name = "jointprune", version, about = "Joint channel/spatial/depth pruning search")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full alternating optimization described by a config file.
    Optimize {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate one pruning vector or explicit architecture on a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated pruning vector, e.g. "0.5,0.5,0.5,1.0".
        #[arg(long, conflicts_with = "config")]
        vector: Option<String>,
        /// Path to a JSON architecture {"out_channels": [...], "spatial": N, "depth": D}.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Turn a trace into plot-ready CSV files.
    Report {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latency lookup-table utilities.
    Lut {
        #[command(subcommand)]
        cmd: LutCmd,
    },
}

#[derive(Subcommand)]
enum LutCmd {
    /// Check a table for malformed rows, duplicates and coverage gaps.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Interpolate missing grid cells and write the completed table.
    Fill {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn verbose() -> bool {
    matches!(
        std::env::var("JOINTPRUNE_LOG").as_deref(),
        Ok("info") | Ok("debug")
    )
}

struct FileHooks {
    writer: TraceWriter,
    checkpoint_dir: PathBuf,
    state: CheckpointState,
}

impl RunHooks for FileHooks {
    fn on_record(&mut self, record: &TraceRecord) -> Result<()> {
        if verbose() {
            eprintln!(
                "step {:>4}  sigma {:.5}  alpha {:.5}  mu_error {:.5}  k_bound {:.4}",
                record.outer_step, record.sigma, record.alpha, record.mu_error, record.k_bound
            );
        }
        self.writer.write(record)
    }

    fn on_checkpoint(
        &mut self,
        step: usize,
        mu: &PruningVector,
        rng: &RngState,
        store: Option<&SharedWeightStore>,
    ) -> Result<()> {
        self.state.outer_step = step;
        self.state.mu = mu.entries.clone();
        self.state.rng = rng.clone();
        if let Some(store) = store {
            self.state.save(&self.checkpoint_dir, store)?;
        }
        Ok(())
    }
}

fn cmd_optimize(config_path: &Path) -> Result<()> {
    let file = runconfig::load(config_path)?;
    let config_dir = config_path.parent().unwrap_or(Path::new("."));
    let run = runconfig::resolve(&file, config_dir)?;

    let (train, val) = make_dataset(
        run.data.classes,
        run.space.spatial_max,
        run.data.train_per_class,
        run.data.val_per_class,
        run.data.seed,
    )?;
    // weight init on its own stream, independent of the run's sampling stream
    let store = SharedWeightStore::init(&run.space, &mut DetRng::new(run.optimizer.seed, 1))?;
    let mut evaluator = SharedNetEvaluator::new(
        run.space.clone(),
        store,
        run.constraint.clone(),
        run.latency_table.clone(),
        train,
        val,
        run.hyper,
        run.batch_size,
        run.eval_subset,
    )?;

    std::fs::create_dir_all(&run.output.out_dir)?;
    let mut hooks = FileHooks {
        writer: TraceWriter::create(&run.output.trace_path())?,
        checkpoint_dir: run.output.checkpoint_dir(),
        state: CheckpointState {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            space: run.space.clone(),
            constraint: run.constraint.clone(),
            latency_table: run.latency_table.clone(),
            data: run.data.clone(),
            hyper: run.hyper,
            mu: vec![],
            outer_step: 0,
            sigma_schedule: run.optimizer.sigma_schedule,
            alpha_schedule: run.optimizer.alpha_schedule,
            rng: DetRng::new(run.optimizer.seed, 0).state(),
        },
    };

    let result = optimizer::run(&run.optimizer, &mut evaluator, &mut hooks)?;
    let described = evaluator
        .describe(&result.mu)?
        .ok_or_else(|| Error::InvalidArgument("evaluator produced no architecture".into()))?;
    let arch = FinalArchitecture::from_config(
        &described.config,
        described.cost,
        run.constraint.metric,
        result.mu.entries.clone(),
    );
    arch.save(&run.output.architecture_path())?;
    println!(
        "final architecture: channels {:?}, spatial {}, depth {}, cost {}",
        arch.out_channels, arch.spatial, arch.depth, arch.cost
    );
    Ok(())
}

fn parse_vector(text: &str) -> Result<PruningVector> {
    let entries = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("vector entry '{s}': {e}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(PruningVector::new(entries))
}

fn cmd_evaluate(checkpoint: &Path, vector: Option<&str>, config: Option<&Path>) -> Result<()> {
    let (state, store) = CheckpointState::load(checkpoint)?;
    let v = match (vector, config) {
        (Some(text), None) => parse_vector(text)?,
        (None, Some(path)) => {
            let f = std::fs::File::open(path)?;
            let cfg: ArchitectureConfig = serde_json::from_reader(std::io::BufReader::new(f))?;
            normalize(&cfg, &state.space)?
        }
        _ => {
            return Err(Error::InvalidArgument(
                "give exactly one of --vector or --config".into(),
            ))
        }
    };
    let (_, val) = make_dataset(
        state.data.classes,
        state.space.spatial_max,
        state.data.train_per_class,
        state.data.val_per_class,
        state.data.seed,
    )?;
    let cost_model = CostModel::from_space(&state.space)?;
    let all: Vec<usize> = (0..val.len()).collect();
    let (loss, cost, error) = evaluate_error(
        &store,
        &state.space,
        &v,
        &val,
        &all,
        &state.constraint,
        &cost_model,
        state.latency_table.as_ref(),
    )?;
    let rounded = jointprune::space::round_to_config(
        &jointprune::space::clamp(&v, &state.space),
        &state.space,
    )?;
    let out = serde_json::json!({
        "loss": loss,
        "cost": cost,
        "penalized_error": error,
        "architecture": rounded,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_report(trace_path: &Path, out_dir: &Path) -> Result<()> {
    let (records, truncated) = read_trace(trace_path)?;
    if truncated {
        eprintln!(
            "warning: {} is truncated; reporting on the {} valid record(s)",
            trace_path.display(),
            records.len()
        );
    }
    let summary = report::emit(&records, out_dir)?;
    println!("wrote {} file(s) from {} record(s):", summary.files.len(), summary.records);
    for f in &summary.files {
        println!("  {}", f.display());
    }
    Ok(())
}

fn cmd_lut_validate(input: &Path) -> Result<()> {
    let table = LatencyTable::load(input)?;
    let gaps = table.coverage_gaps();
    println!("{} gaps", gaps.len());
    for (layer, ic, oc, si) in gaps.iter().take(20) {
        println!("  missing: layer {layer}, in {ic}, out {oc}, spatial {si}");
    }
    if gaps.len() > 20 {
        println!("  ... and {} more", gaps.len() - 20);
    }
    Ok(())
}

fn cmd_lut_fill(input: &Path, out: &Path) -> Result<()> {
    let table = LatencyTable::load(input)?;
    let filled = table.fill_missing()?;
    let f = std::io::BufWriter::new(std::fs::File::create(out)?);
    filled.to_csv(f)?;
    println!(
        "filled {} missing cell(s); wrote {}",
        table.coverage_gaps().len(),
        out.display()
    );
    Ok(())
}

/// Exit code 1 for configuration/input errors, 2 for runtime failures.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Csv { .. }
        | Error::DuplicateKey(_)
        | Error::InvalidArgument(_)
        | Error::InvalidSpace(_)
        | Error::DimensionMismatch { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Optimize { config } => cmd_optimize(config),
        Cmd::Evaluate {
            checkpoint,
            vector,
            config,
        } => cmd_evaluate(checkpoint, vector.as_deref(), config.as_deref()),
        Cmd::Report { trace, out } => cmd_report(trace, out),
        Cmd::Lut { cmd } => match cmd {
            LutCmd::Validate { input } => cmd_lut_validate(input),
            LutCmd::Fill { input, out } => cmd_lut_fill(input, out),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
