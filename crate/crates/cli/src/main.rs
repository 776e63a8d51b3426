use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dgprune::domains::{split, Dataset, SplitPlan};
use dgprune::harness::{self, evaluate, pretrain, run_experiment, ExperimentConfig, Precision, RunSeeds};
use dgprune::nn::GatedModel;
use dgprune::pruning::{prune_finetune_loop, write_event_log, Criterion};
use dgprune::{Error, Result, Scalar};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dgprune", version, about = "Filter pruning with Taylor and variance-of-risk importance")]
struct Cli {
    /// Experiment config (TOML). Defaults to the built-in desk setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; for `experiment` it replaces the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Taylor,
    Ior,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Taylor => Criterion::Taylor,
            CriterionArg::Ior => Criterion::Ior,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset and write it as a DGPD container.
    GenData,
    /// Pretrain on the source domains and save the best-validation checkpoint.
    Pretrain,
    /// Prune a checkpoint while finetuning.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "ior")]
        criterion: CriterionArg,
    },
    /// Intra- and cross-domain accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Pretrain and prune every arm for every seed, then aggregate.
    Experiment,
    /// Build CSV and Markdown tables from results files.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => ExperimentConfig::from_toml("held_out_domain = 3"),
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

struct Setup {
    cfg: ExperimentConfig,
    dataset: Dataset,
    plan: SplitPlan,
    seeds: RunSeeds,
    seed: u64,
}

impl Setup {
    fn new(cli: &Cli) -> Result<Self> {
        let cfg = load_config(cli.config.as_deref())?;
        let dataset = cfg.data.load()?;
        cfg.check_dataset(&dataset)?;
        let seed = cli.seed.unwrap_or(cfg.seeds[0]);
        let seeds = RunSeeds::derive(seed);
        let plan = split(&dataset, cfg.held_out_domain, seeds.split)?;
        Ok(Self {
            cfg,
            dataset,
            plan,
            seeds,
            seed,
        })
    }

    fn load_model<S: Scalar>(&self, path: &Path) -> Result<GatedModel<S>> {
        let model = GatedModel::<S>::load(path).map_err(|e| e.context(format!("checkpoint {}", path.display())))?;
        if model.arch() != &self.cfg.architecture {
            return Err(Error::Config(format!("checkpoint {} does not match the configured architecture", path.display())));
        }
        Ok(model)
    }
}

fn cmd_pretrain<S: Scalar>(s: &Setup, out: &Path) -> Result<()> {
    let init = GatedModel::<S>::build(&s.cfg.architecture, s.seeds.init)?;
    let rec = pretrain(&init, &s.dataset, &s.plan, &s.cfg.pretrain, s.seeds.pretrain)?;
    fs::create_dir_all(out)?;
    let bytes = rec.model.to_bytes();
    let path = out.join("pretrained.pldg");
    fs::write(&path, &bytes)?;
    fs::write(out.join("pretrain_history.json"), serde_json::to_string_pretty(&rec.history)?)?;
    fs::write(out.join("split.json"), serde_json::to_string(&s.plan)?)?;
    let e = evaluate(&rec.model, &s.dataset, &s.plan)?;
    print_json(&json!({
        "seed": s.seed,
        "checkpoint": path,
        "sha256": harness::sha256_hex(&bytes),
        "best_epoch": rec.best_epoch,
        "intra": e.intra,
        "cross": e.cross,
    }));
    Ok(())
}

fn cmd_prune<S: Scalar>(s: &Setup, model: &Path, criterion: Criterion, out: &Path) -> Result<()> {
    let start = s.load_model::<S>(model)?;
    let before = evaluate(&start, &s.dataset, &s.plan)?;
    let rec = prune_finetune_loop(
        &start,
        &s.dataset,
        &s.plan,
        &s.cfg.pruning.finetune,
        criterion,
        &s.cfg.pruning.ior,
        s.seeds.finetune,
    )?;
    let after = evaluate(&rec.best_model, &s.dataset, &s.plan)?;
    fs::create_dir_all(out)?;
    rec.best_model.save(&out.join("best.pldg"))?;
    rec.final_model.save(&out.join("final.pldg"))?;
    write_event_log(&rec.events, &out.join("events.jsonl"))?;
    rec.table.write_csv(fs::File::create(out.join("importance.csv"))?)?;
    print_json(&json!({
        "seed": s.seed,
        "criterion": harness::criterion_name(criterion),
        "remaining_ratio": rec.best_model.remaining_ratio(),
        "best_epoch": rec.best_epoch,
        "before": before,
        "after": after,
    }));
    Ok(())
}

fn cmd_eval<S: Scalar>(s: &Setup, model: &Path) -> Result<()> {
    let m = s.load_model::<S>(model)?;
    let e = evaluate(&m, &s.dataset, &s.plan)?;
    print_json(&json!({
        "seed": s.seed,
        "remaining_ratio": m.remaining_ratio(),
        "intra": e.intra,
        "cross": e.cross,
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.clone();
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(cli.config.as_deref())?;
            let ds = cfg.data.load()?;
            fs::create_dir_all(&out)?;
            let path = out.join("dataset.dgpd");
            ds.save(&path)?;
            print_json(&json!({"dataset": path, "samples": ds.len(), "domains": ds.domain_names}));
        }
        Command::Pretrain => {
            let s = Setup::new(&cli)?;
            match s.cfg.precision {
                Precision::F32 => cmd_pretrain::<f32>(&s, &out)?,
                Precision::F64 => cmd_pretrain::<f64>(&s, &out)?,
            }
        }
        Command::Prune { model, criterion } => {
            let s = Setup::new(&cli)?;
            let c = Criterion::from(*criterion);
            match s.cfg.precision {
                Precision::F32 => cmd_prune::<f32>(&s, model, c, &out)?,
                Precision::F64 => cmd_prune::<f64>(&s, model, c, &out)?,
            }
        }
        Command::Eval { model } => {
            let s = Setup::new(&cli)?;
            match s.cfg.precision {
                Precision::F32 => cmd_eval::<f32>(&s, model)?,
                Precision::F64 => cmd_eval::<f64>(&s, model)?,
            }
        }
        Command::Experiment => {
            let mut cfg = load_config(cli.config.as_deref())?;
            if let Some(seed) = cli.seed {
                cfg.seeds = vec![seed];
            }
            cfg.output_dir = Some(out.clone());
            let outcome = run_experiment(&cfg)?;
            let arms: Vec<_> = outcome
                .results
                .iter()
                .map(|(c, r)| {
                    json!({
                        "criterion": harness::criterion_name(*c),
                        "results": out.join(format!("results_{}.json", harness::criterion_name(*c))),
                        "aggregate": r.aggregate,
                        "failures": r.failures.len(),
                    })
                })
                .collect();
            print_json(&json!({"arms": arms}));
        }
        Command::Report { results } => {
            let report = harness::report(results, &out)?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}

/// Keeps glibc from returning freed tape buffers to the OS after every step.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune_allocator() {
    // SAFETY: mallopt only adjusts allocator thresholds and is called before any threads start.
    unsafe {
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune_allocator() {}

fn main() -> ExitCode {
    tune_allocator();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
