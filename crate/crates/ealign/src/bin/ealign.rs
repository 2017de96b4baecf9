//! Command-line front end: train, evaluate, generate synthetic datasets and
//! inspect sampling plans.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ealign::checkpoint;
use ealign::config::{Mode, RunConfig};
use ealign::error::EalignError;
use ealign::eval::{evaluate, load_literal, Direction};
use ealign::kg::{load_dataset, Dataset};
use ealign::mem::CountingAlloc;
use ealign::sampler::{build_plan, plan_stats};
use ealign::semisup::run_semi;
use ealign::synth::{generate_instance_pair, write_dataset, NoiseSpec};
use ealign::trainer::{full_final, train};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "ealign", about = "Cross-graph entity alignment", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and report test metrics
    Train(TrainArgs),
    /// Evaluate a saved checkpoint
    Eval(EvalArgs),
    /// Generate a synthetic dataset with known ground truth
    Synth(SynthArgs),
    /// Dump per-entity sampling-plan statistics as CSV
    SampleStats(SampleStatsArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Basic,
    Semi,
    Lit,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Basic => Mode::Basic,
            ModeArg::Semi => Mode::Semi,
            ModeArg::Lit => Mode::Lit,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirectionArg {
    Kg1ToKg2,
    Kg2ToKg1,
    Average,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Direction {
        match d {
            DirectionArg::Kg1ToKg2 => Direction::Kg1ToKg2,
            DirectionArg::Kg2ToKg1 => Direction::Kg2ToKg1,
            DirectionArg::Average => Direction::Average,
        }
    }
}

/// Hyper-parameter flags; unset flags fall back to the config file, then to
/// the built-in defaults.
#[derive(Args)]
struct HyperArgs {
    /// Embedding dimension
    #[arg(long)]
    dim: Option<usize>,
    /// Number of encoder layers
    #[arg(long)]
    layers: Option<usize>,
    /// Sampling ratio controlling per-entity draw counts
    #[arg(long)]
    tau: Option<f64>,
    /// Reviewing threshold for the semi-supervised loop
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Epochs of rising dev loss tolerated before stopping
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    literal_emb: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the resolved configuration and exit
    #[arg(long)]
    print_config: bool,
    /// Hits@k cutoffs (repeatable)
    #[arg(long = "k")]
    ks: Vec<usize>,
    /// Fraction of reference pairs used for training
    #[arg(long)]
    train_ratio: Option<f64>,
    /// Fraction of reference pairs used for early stopping
    #[arg(long)]
    dev_ratio: Option<f64>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frozen-target file saved next to the checkpoint during training
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long)]
    data_dir: PathBuf,
    /// Expected embedding dimension; mismatch with the checkpoint is an error
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long = "k")]
    ks: Vec<usize>,
    #[arg(long)]
    literal_emb: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "average")]
    direction: DirectionArg,
    #[arg(long)]
    train_ratio: Option<f64>,
    #[arg(long)]
    dev_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 500)]
    entities: usize,
    #[arg(long, default_value_t = 5)]
    relations: usize,
    #[arg(long, default_value_t = 6.0)]
    avg_degree: f64,
    #[arg(long, default_value_t = 0.02)]
    delete_prob: f64,
    #[arg(long, default_value_t = 0)]
    add_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SampleStatsArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Synth(args) => cmd_synth(args),
        Command::SampleStats(args) => cmd_sample_stats(args),
    }
}

fn resolve_config(args: &TrainArgs) -> Result<RunConfig, EalignError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| EalignError::io(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| EalignError::parse(path, 0, format!("bad config: {e}")))?
        }
        None => RunConfig::default(),
    };
    let h = &args.hyper;
    macro_rules! take {
        ($($flag:expr => $field:ident),* $(,)?) => {
            $(if let Some(v) = $flag { cfg.$field = v; })*
        };
    }
    take! {
        h.dim => dim, h.layers => depth, h.tau => tau, h.epsilon => epsilon,
        h.batch_size => batch_size, h.dropout => dropout, h.lr => learning_rate,
        h.patience => patience, h.max_epochs => max_epochs, h.seed => rng_seed,
        args.train_ratio => train_ratio, args.dev_ratio => dev_ratio,
    }
    if let Some(m) = args.mode {
        cfg.mode = m.into();
    }
    if let Some(p) = &args.literal_emb {
        cfg.literal_emb = Some(p.clone());
    }
    cfg.data_dir = Some(args.data_dir.clone());
    cfg.out_dir = args.out_dir.clone();
    if !args.ks.is_empty() {
        cfg.ks = args.ks.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Exit code 2: bad input (config or dataset), nothing written yet.
fn fail2(err: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(2)
}

fn fail1(err: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::FAILURE
}

fn cmd_train(args: TrainArgs) -> ExitCode {
    let cfg = match resolve_config(&args) {
        Ok(c) => c,
        Err(e) => return fail2(e),
    };
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).unwrap());
        return ExitCode::SUCCESS;
    }

    let dataset: Dataset =
        match load_dataset(&args.data_dir, cfg.train_ratio, cfg.dev_ratio, cfg.rng_seed) {
            Ok(d) => d,
            Err(e) => return fail2(e),
        };
    let literal = match &cfg.literal_emb {
        Some(path) => match load_literal(path, dataset.joint.num_entities) {
            Ok(l) => {
                if l.missing > 0 {
                    eprintln!(
                        "warning: {} entities have no literal embedding; using zero vectors",
                        l.missing
                    );
                }
                Some(l)
            }
            Err(e) => return fail2(e),
        },
        None => None,
    };

    if let Err(e) = std::fs::create_dir_all(&cfg.out_dir) {
        return fail1(EalignError::io(&cfg.out_dir, e));
    }
    let run = || -> Result<(), EalignError> {
        let tc = cfg.train_config();
        std::fs::write(
            cfg.out_dir.join("config.json"),
            serde_json::to_string_pretty(&cfg).unwrap(),
        )
        .map_err(|e| EalignError::io(&cfg.out_dir, e))?;

        let (params, targets, log_lines, semi_lines) = match cfg.mode {
            Mode::Semi => {
                let out = run_semi(
                    &dataset.joint,
                    &dataset.seeds,
                    &tc,
                    cfg.epsilon,
                    cfg.max_semi_iterations,
                )?;
                let semi: Vec<String> = out
                    .reports
                    .iter()
                    .map(|r| serde_json::to_string(r).unwrap())
                    .collect();
                (out.params, out.targets, Vec::new(), semi)
            }
            Mode::Basic | Mode::Lit => {
                let (params, targets, _, report) = train(
                    &dataset.joint,
                    &dataset.seeds.train,
                    &dataset.seeds.dev,
                    &tc,
                )?;
                let log: Vec<String> = report
                    .log
                    .iter()
                    .map(|r| serde_json::to_string(r).unwrap())
                    .collect();
                (params, targets, log, Vec::new())
            }
        };

        checkpoint::save(&params, &cfg.out_dir.join("model.ckpt"))?;
        checkpoint::save_targets(&targets, &cfg.out_dir.join("targets.bin"))?;
        if !log_lines.is_empty() {
            std::fs::write(cfg.out_dir.join("train_log.jsonl"), log_lines.join("\n") + "\n")
                .map_err(|e| EalignError::io(&cfg.out_dir, e))?;
        }
        if !semi_lines.is_empty() {
            std::fs::write(cfg.out_dir.join("semi_report.jsonl"), semi_lines.join("\n") + "\n")
                .map_err(|e| EalignError::io(&cfg.out_dir, e))?;
        }

        if !dataset.seeds.test.is_empty() {
            let final_emb = full_final(&dataset.joint, &params)?;
            let result = evaluate(
                &final_emb,
                &targets,
                &dataset.seeds.test,
                &cfg.ks,
                Direction::Average,
                literal.as_ref(),
            )?;
            let json = serde_json::to_string_pretty(&result).unwrap();
            std::fs::write(cfg.out_dir.join("metrics.json"), &json)
                .map_err(|e| EalignError::io(&cfg.out_dir, e))?;
            println!("{json}");
        } else {
            eprintln!("warning: no test pairs; skipping evaluation");
        }
        Ok(())
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail1(e),
    }
}

fn cmd_eval(args: EvalArgs) -> ExitCode {
    let run = || -> Result<String, EalignError> {
        let params = checkpoint::load(&args.checkpoint)?;
        if let Some(dim) = args.dim {
            if dim != params.dim {
                return Err(EalignError::Checkpoint(format!(
                    "checkpoint dimension {} does not match requested dimension {dim}",
                    params.dim
                )));
            }
        }
        let targets_path = args
            .targets
            .clone()
            .unwrap_or_else(|| args.checkpoint.with_file_name("targets.bin"));
        let targets = checkpoint::load_targets(&targets_path)?;

        let cfg = RunConfig::default();
        let dataset = load_dataset(
            &args.data_dir,
            args.train_ratio.unwrap_or(cfg.train_ratio),
            args.dev_ratio.unwrap_or(cfg.dev_ratio),
            args.seed.unwrap_or(cfg.rng_seed),
        )?;
        if dataset.joint.num_entities != params.entity.nrows() {
            return Err(EalignError::Checkpoint(format!(
                "checkpoint has {} entities, dataset has {}",
                params.entity.nrows(),
                dataset.joint.num_entities
            )));
        }
        let literal = match &args.literal_emb {
            Some(p) => Some(load_literal(p, dataset.joint.num_entities)?),
            None => None,
        };
        let ks = if args.ks.is_empty() { cfg.ks } else { args.ks.clone() };
        let final_emb = full_final(&dataset.joint, &params)?;
        let result = evaluate(
            &final_emb,
            &targets,
            &dataset.seeds.test,
            &ks,
            args.direction.into(),
            literal.as_ref(),
        )?;
        Ok(serde_json::to_string_pretty(&result).unwrap())
    };
    match run() {
        Ok(json) => {
            println!("{json}");
            ExitCode::SUCCESS
        }
        Err(e) => fail1(e),
    }
}

fn cmd_synth(args: SynthArgs) -> ExitCode {
    let noise = NoiseSpec {
        edge_delete_prob: args.delete_prob,
        edge_add_count: args.add_count,
        rng_seed: args.seed,
    };
    let run = || -> Result<(), EalignError> {
        let inst = generate_instance_pair(
            args.entities,
            args.relations,
            args.avg_degree,
            &noise,
            args.seed,
        )?;
        write_dataset(&inst, &args.out_dir)?;
        eprintln!(
            "wrote {} + {} triples, {} ground-truth pairs to {}",
            inst.instance1.triples.len(),
            inst.instance2.triples.len(),
            inst.ground_truth.len(),
            args.out_dir.display()
        );
        Ok(())
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail1(e),
    }
}

fn cmd_sample_stats(args: SampleStatsArgs) -> ExitCode {
    let run = || -> Result<(), EalignError> {
        let cfg = RunConfig::default();
        let dataset = load_dataset(&args.data_dir, cfg.train_ratio, cfg.dev_ratio, args.seed)?;
        let plan = build_plan(&dataset.joint, None, args.tau, 0)?;
        let mut csv = String::from("entity,degree,expected_alpha,sample_count\n");
        for (e, deg, exp, t) in plan_stats(&dataset.joint, &plan) {
            csv.push_str(&format!("{e},{deg},{exp},{t}\n"));
        }
        match &args.out {
            Some(path) => std::fs::write(path, csv).map_err(|e| EalignError::io(path, e))?,
            None => print!("{csv}"),
        }
        Ok(())
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail1(e),
    }
}
