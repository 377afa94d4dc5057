use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use circuit_probe::decompose::FitHyper;
use circuit_probe::experiments::{self, Experiment, ExperimentConfig, SolverOptions};
use circuit_probe::instrument::{Answer, Role, RoleNode};
use circuit_probe::model;
use circuit_probe::verify::{self, Status, VerifyOptions, CACHE_ENV, FREQ_FILE};
use clap::{Args, Parser, Subcommand};

/// Mechanistic analyses of factual recall in GPT-2.
#[derive(Parser, Debug)]
#[command(name = "circuit-probe", version)]
struct Cli {
    /// Safetensors checkpoint [default: $CIRCUIT_PROBE_CACHE/model.safetensors]
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Task file [default: bundled country_capital.json]
    #[arg(long, global = true)]
    task: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=2))]
    shots: u8,
    #[arg(long, global = true, default_value = "reports")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads [default: available cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Do not prefix prompts with <|endoftext|>
    #[arg(long, global = true)]
    no_bos: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SolverArgs {
    /// Reuse solutions.json written by fit-mlp
    #[arg(long)]
    solutions: Option<PathBuf>,
    /// Solve the normal equations instead of running gradient descent
    #[arg(long)]
    closed_form: bool,
    #[arg(long, default_value_t = FitHyper::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = FitHyper::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = FitHyper::default().momentum)]
    momentum: f64,
    #[arg(long, default_value_t = FitHyper::default().folds)]
    folds: usize,
}

impl SolverArgs {
    fn options(&self) -> SolverOptions {
        SolverOptions {
            solutions: self.solutions.clone(),
            closed_form: self.closed_form,
            hyper: FitHyper {
                lr: self.lr,
                steps: self.steps,
                momentum: self.momentum,
                folds: self.folds,
                seed: 0,
            },
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Logit-lens probabilities of X and Y at every node of every layer
    Dynamics,
    /// Path-patch every head into one receiver node
    PatchGrid {
        /// `site:layer:position`, e.g. resid_post:11:-1
        #[arg(long, default_value = "resid_post:11:-1", value_parser = parse_receiver)]
        receiver: RoleNode,
        /// Position of the sender heads: final, x, or an index
        #[arg(long, default_value = "final")]
        sender_role: Role,
        #[arg(long, default_value = "y", value_parser = parse_answer)]
        answer: Answer,
    },
    /// Attention-to-X versus projection-onto-W_U[X] correlation
    Mover {
        /// Heads as LAYER:HEAD
        #[arg(long = "head", value_parser = parse_head, default_values = ["9:8", "10:0"])]
        heads: Vec<(usize, usize)>,
    },
    /// Decode one head's OV output at the X position
    OvProbe {
        #[arg(long, default_value_t = 9)]
        layer: usize,
        #[arg(long, default_value_t = 8)]
        head: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Regress MLP outputs on head outputs and the incoming residual
    FitMlp {
        /// Layers to fit [default: all]
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Project an MLP output and intercept onto span{W_U[X], W_U[Y]}
    Project {
        #[arg(long, default_value_t = 10)]
        layer: usize,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Replace every MLP output by its reconstruction and compare outputs
    Fidelity {
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Mask a layer's heads to self-attention and subtract an intercept
    Suppress {
        #[arg(long)]
        mask_layer: Option<usize>,
        #[arg(long)]
        subtract_intercept: Option<usize>,
        /// Token frequency TSV [default: $CIRCUIT_PROBE_CACHE/word_freq.tsv if present]
        #[arg(long)]
        freq: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Run the acceptance criteria and print a pass/fail table
    Verify {
        #[arg(long)]
        closed_form: bool,
        #[arg(long)]
        freq: Option<PathBuf>,
    },
}

fn parse_receiver(s: &str) -> Result<RoleNode, String> {
    s.parse().map_err(|e: circuit_probe::Error| e.to_string())
}

fn parse_answer(s: &str) -> Result<Answer, String> {
    match s {
        "x" | "X" => Ok(Answer::X),
        "y" | "Y" => Ok(Answer::Y),
        _ => Err(format!("expected x or y, got {s:?}")),
    }
}

fn parse_head(s: &str) -> Result<(usize, usize), String> {
    let bad = || format!("expected LAYER:HEAD or LxHy, got {s:?}");
    let (l, h) = match s.split_once(':') {
        Some(p) => p,
        None => s
            .strip_prefix('L')
            .and_then(|r| r.split_once('H'))
            .ok_or_else(bad)?,
    };
    Ok((l.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

fn cache_file(name: &str) -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV)
        .map(|d| PathBuf::from(d).join(name))
        .filter(|p| p.is_file())
}

fn experiment(command: Command) -> Experiment {
    match command {
        Command::Dynamics => Experiment::Dynamics,
        Command::PatchGrid {
            receiver,
            sender_role,
            answer,
        } => Experiment::PatchGrid {
            receiver,
            sender_role,
            answer,
        },
        Command::Mover { heads } => Experiment::Mover { heads },
        Command::OvProbe { layer, head, k } => Experiment::OvProbe { layer, head, k },
        Command::FitMlp { layers, solver } => Experiment::FitMlp {
            layers,
            solver: solver.options(),
        },
        Command::Project { layer, solver } => Experiment::Project {
            layer,
            solver: solver.options(),
        },
        Command::Fidelity { solver } => Experiment::Fidelity {
            solver: solver.options(),
        },
        Command::Suppress {
            mask_layer,
            subtract_intercept,
            freq,
            solver,
        } => Experiment::Suppress {
            mask_layer,
            subtract_intercept,
            freq: freq.or_else(|| cache_file(FREQ_FILE)),
            solver: solver.options(),
        },
        Command::Verify { .. } => unreachable!("handled separately"),
    }
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("building the worker pool")?;
    }
    let model = cli.model.or_else(|| cache_file("model.safetensors"));

    if let Command::Verify { closed_form, freq } = cli.command {
        let mut opts = VerifyOptions::from_env();
        opts.model = model.or(opts.model);
        opts.freq = freq.or(opts.freq);
        opts.closed_form = closed_form;
        opts.seed = cli.seed;
        let results = verify::run(&opts);
        print!("{}", verify::format_table(&results));
        return Ok(results.iter().all(|r| r.status != Status::Fail));
    }

    let Some(model) = model else {
        bail!(
            "no model: pass --model or set ${CACHE_ENV} to a directory holding model.safetensors"
        );
    };
    let config = ExperimentConfig {
        model,
        task: cli
            .task
            .unwrap_or_else(|| verify::bundled_assets().join("tasks/country_capital.json")),
        shots: cli.shots.into(),
        out: cli.out,
        seed: cli.seed,
        prepend_bos: !cli.no_bos,
        experiment: experiment(cli.command),
    };
    let name = config.experiment.name();
    let summary = experiments::run_experiment(&config).with_context(|| format!("{name} failed"))?;
    for path in &summary.written {
        println!("{}", path.display());
    }
    log::info!("{name}: {} prompts", summary.n_prompts);
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let started = Instant::now();
    let outcome = run(cli);
    log::info!(
        "{} forward passes, {:.1}s wall time",
        model::forward_pass_count(),
        started.elapsed().as_secs_f64()
    );
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
