use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fixcon_core::engine::{self, RepairConfig, TerminationReason};
use fixcon_core::inject::{inject, make_desk_model, FaultSpec, InjectCategory, InjectMode};
use fixcon_core::interp::{infer_shapes, Dataset};
use fixcon_core::ir::{load_model, save_model, GraphModel};

#[derive(Parser)]
#[command(
    name = "fixcon",
    version,
    about = "Localize and repair faults in converted models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Iteratively repair TARGET until it agrees with SOURCE on the dataset.
    Repair {
        #[command(flatten)]
        pair: PairArgs,
        /// Where to write the repaired model; sidecar logs go next to it.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: LoopArgs,
    },
    /// Report suspected faults without changing the target.
    Localize {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        cfg: LoopArgs,
    },
    /// Compare top-1 labels of both models on the dataset.
    Eval {
        #[command(flatten)]
        pair: PairArgs,
        /// Also write the per-image summary as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print a model's nodes and inferred output shapes.
    Inspect { model: PathBuf },
    /// Write a faulty copy of a model.
    Inject {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        category: InjectCategory,
        /// Node to mutate; repeat for several.
        #[arg(long = "layer")]
        layers: Vec<String>,
        #[arg(long)]
        magnitude: Option<f64>,
        #[arg(long)]
        mode: Option<InjectMode>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the injection record.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Generate the small reference classifier and a synthetic dataset.
    Desk {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        images: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Directory of `.tensor` images.
    #[arg(long)]
    data: PathBuf,
}

impl PairArgs {
    fn load(&self) -> Result<(GraphModel, GraphModel, Dataset)> {
        Ok((
            read_model(&self.source)?,
            read_model(&self.target)?,
            read_dataset(&self.data)?,
        ))
    }
}

#[derive(Args)]
struct LoopArgs {
    #[arg(long, default_value_t = 100)]
    n_sim: usize,
    #[arg(long, default_value_t = 100)]
    n_diss: usize,
    #[arg(long = "analysis-iters", default_value_t = 3)]
    analysis_iter_no: usize,
    #[arg(long, default_value_t = 3)]
    diss_no: usize,
    /// Seconds.
    #[arg(long = "time-limit", default_value_t = 7200)]
    time_limit: u64,
    #[arg(long, default_value_t = 0.05)]
    significance: f32,
    #[arg(long = "kt-threshold", default_value_t = 0.99)]
    kt_threshold: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Elements tested per layer; 0 tests all.
    #[arg(long, default_value_t = 4096)]
    element_cap: usize,
    #[arg(long, default_value_t = 0.0)]
    weight_tolerance: f32,
}

impl LoopArgs {
    fn config(&self) -> RepairConfig {
        RepairConfig {
            n_sim: self.n_sim,
            n_diss: self.n_diss,
            analysis_iter_no: self.analysis_iter_no,
            diss_no: self.diss_no,
            time_limit_secs: self.time_limit,
            significance: self.significance,
            kt_fixed_threshold: self.kt_threshold,
            seed: self.seed,
            element_cap: (self.element_cap > 0).then_some(self.element_cap),
            weight_tolerance: self.weight_tolerance,
        }
    }
}

fn read_model(path: &Path) -> Result<GraphModel> {
    load_model(path).with_context(|| format!("loading {}", path.display()))
}

fn read_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load_dir(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Repair { pair, out, cfg } => {
            let (source, target, data) = pair.load()?;
            let log_path = engine::sidecar_path(&out, "repairlog.jsonl");
            let mut log = File::create(&log_path)
                .with_context(|| format!("creating {}", log_path.display()))?;
            let outcome =
                engine::run_repair_logged(&source, &target, &data, &cfg.config(), Some(&mut log))?;
            engine::save_outcome(&outcome, &out)?;
            let accepted = outcome.actions.iter().filter(|a| a.accepted).count();
            println!(
                "{}: dissimilarity {:.2}% after {} iteration(s), {} of {} action(s) accepted",
                outcome.termination_reason,
                outcome.final_dissimilarity(),
                outcome.state.iteration,
                accepted,
                outcome.actions.len()
            );
            for (cat, n) in &outcome.localized {
                println!("  {cat}: localized {n}, repaired {}", outcome.repaired[cat]);
            }
            Ok(match outcome.termination_reason {
                TerminationReason::ZeroDissimilarity => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            })
        }
        Command::Localize { pair, report, cfg } => {
            let (source, target, data) = pair.load()?;
            let loc = engine::localize(&source, &target, &data, &cfg.config())?;
            write_json(&report, &loc.findings.reports)?;
            println!("{} report(s)", loc.findings.reports.len());
            for (i, p) in loc.ranking.order.iter().enumerate() {
                println!("  {:>2}. {p}", i + 1);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { pair, json } => {
            let (source, target, data) = pair.load()?;
            let summary = engine::evaluate(&source, &target, &data)?;
            println!(
                "dissimilarity {:.2}% ({} of {} images)",
                summary.dissimilarity_pct,
                summary.dissimilar_count(),
                summary.images.len()
            );
            if let Some(path) = json {
                write_json(&path, &summary)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Inspect { model } => {
            let m = read_model(&model)?;
            let shapes = infer_shapes(&m).map_err(|e| anyhow::anyhow!("{e}"))?;
            println!(
                "{} input {} {:?} {}",
                m.name, m.input.name, m.input.shape, m.input.layout
            );
            println!(
                "preprocessing scale {} mean {:?} std {:?} {}",
                m.preproc.scale, m.preproc.mean, m.preproc.std, m.preproc.layout
            );
            for n in &m.nodes {
                let params: usize = n.weights.values().map(|w| w.len()).sum();
                println!(
                    "  {:<16} {:<20} {:?} -> {} {:?} params {params}",
                    n.id,
                    n.op.name(),
                    n.inputs,
                    n.output(),
                    shapes.get(&n.id).cloned().unwrap_or_default()
                );
            }
            println!("output {}", m.output_name);
            Ok(ExitCode::SUCCESS)
        }
        Command::Inject {
            source,
            category,
            layers,
            magnitude,
            mode,
            seed,
            out,
            record,
        } => {
            let src = read_model(&source)?;
            let spec = FaultSpec {
                category,
                target_layers: layers,
                magnitude,
                mode,
                seed,
            };
            let (model, rec) = inject(&src, &spec)?;
            save_model(&model, &out).with_context(|| format!("writing {}", out.display()))?;
            if let Some(path) = record {
                write_json(&path, &rec)?;
            }
            println!("{category} touched {}", rec.touched.join(", "));
            Ok(ExitCode::SUCCESS)
        }
        Command::Desk {
            seed,
            images,
            out,
            data,
        } => {
            let f = make_desk_model(seed, images);
            save_model(&f.model, &out).with_context(|| format!("writing {}", out.display()))?;
            f.dataset
                .save_dir(&data)
                .with_context(|| format!("writing dataset {}", data.display()))?;
            println!("wrote {} and {} images", out.display(), f.dataset.len());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
