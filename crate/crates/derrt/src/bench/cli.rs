//! The `derrt` command-line tool.
//!
//! Exit codes: 0 on success, 1 when a requested plan fails to reach the
//! goal, 2 on usage or configuration errors.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::env::generators::{gen_bugtrap, gen_narrow_passage_with, gen_roundabout, PassageParams};
use crate::env::Environment;
use crate::error::Result;
use crate::neural::NeuralConfig;
use crate::planner::{plan, HmmFeatureKind, PlannerConfig};
use crate::training::{
    collect_traces, train_hmm, train_recurrent, OptimizerConfig, TraceDataset, TraceKind,
};

use super::heatmap::{accumulate_dumps, emit_pgm, HeatmapSpec};
use super::model_io::{load_model, save_gru, save_hmm};
use super::runners::{
    curves_to_csv, run_bugtrap, run_passage, run_roundabout, BugtrapBenchConfig,
    PassageBenchConfig, RoundaboutBenchConfig,
};

#[derive(Parser)]
#[command(
    name = "derrt",
    version,
    about = "Sampling-based planning with learned steering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Environment tools.
    Env {
        #[command(subcommand)]
        command: EnvCommand,
    },
    /// Harvest training traces from baseline planner runs.
    Collect(CollectArgs),
    /// Fit a Gaussian-emission HMM steering model to harvested traces.
    TrainHmm(TrainHmmArgs),
    /// Train the recurrent (GRU) steering model on harvested traces.
    TrainGru(TrainGruArgs),
    /// Run one planning query.
    Plan(PlanArgs),
    /// Reproduce an experiment suite.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Render a node-visit heat map from tree dumps.
    Heatmap(HeatmapArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvKind {
    Passage,
    Bugtrap,
    Roundabout,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapScale {
    /// Training-scale maps.
    Train,
    /// Test-scale maps (wider passage maps with narrowed passages).
    Test,
}

#[derive(Subcommand)]
enum EnvCommand {
    /// Generate a procedural environment and write it as JSON.
    Gen(EnvGenArgs),
}

#[derive(Args)]
struct EnvGenArgs {
    #[arg(long, value_enum)]
    kind: EnvKind,
    #[arg(long)]
    seed: u64,
    /// Number of agents (roundabout only).
    #[arg(long, default_value_t = 2)]
    agents: usize,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Parameter scale for passage maps.
    #[arg(long, value_enum, default_value_t = MapScale::Train)]
    scale: MapScale,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long, value_enum)]
    kind: EnvKind,
    #[arg(long)]
    seed: u64,
    /// Target number of traces.
    #[arg(long, default_value_t = 50)]
    traces: usize,
    /// Maximum environments to try.
    #[arg(long, default_value_t = 500)]
    max_envs: usize,
    /// Planner iteration budget per environment.
    #[arg(long, default_value_t = 3000)]
    budget: usize,
    /// Maximum agents per roundabout map.
    #[arg(long, default_value_t = 4)]
    agents: usize,
    #[arg(long, default_value_t = 300)]
    width: usize,
    #[arg(long, default_value_t = 300)]
    height: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainHmmArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, default_value_t = 3)]
    states: usize,
    #[arg(long)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainGruArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    env: PathBuf,
    /// Steering model; plain RRT* when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Goal-bias probability.
    #[arg(long, default_value_t = 0.05)]
    goal_bias: f64,
    /// Emit the result as JSON on stdout.
    #[arg(long)]
    json: bool,
    /// Write the search tree as JSONL.
    #[arg(long)]
    dump_tree: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Long narrow passage: RRT* vs the HMM- and GRU-guided planners.
    Passage(BenchPassageArgs),
    /// Bug trap: RRT* vs the patch-encoder GRU planner, with curves.
    Bugtrap(BenchBugtrapArgs),
    /// Multi-agent roundabout across agent counts.
    Roundabout(BenchRoundaboutArgs),
}

#[derive(Args)]
struct BenchPassageArgs {
    #[arg(long, default_value_t = 50)]
    rounds: usize,
    #[arg(long, default_value_t = 600)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    train_traces: usize,
    #[arg(long)]
    json: bool,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchBugtrapArgs {
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    train_traces: usize,
    #[arg(long)]
    json: bool,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write progress curves as CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args)]
struct BenchRoundaboutArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Agent counts to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2, 4, 6, 8])]
    agents: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 120)]
    train_traces: usize,
    /// Skip the joint-space baseline.
    #[arg(long)]
    no_joint: bool,
    #[arg(long)]
    json: bool,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    /// Tree dump files (JSONL), comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    dumps: Vec<PathBuf>,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    /// Sample fraction rendered pure black.
    #[arg(long, default_value_t = 0.01)]
    anchor: f64,
    #[arg(short, long)]
    output: PathBuf,
}

/// Parse `argv` and run. Returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap uses exit code 2 for usage errors and 0 for --help/--version.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Env { command } => match command {
            EnvCommand::Gen(args) => env_gen(args),
        },
        Command::Collect(args) => collect(args),
        Command::TrainHmm(args) => train_hmm_cmd(args),
        Command::TrainGru(args) => train_gru_cmd(args),
        Command::Plan(args) => plan_cmd(args),
        Command::Bench { command } => match command {
            BenchCommand::Passage(args) => bench_passage(args),
            BenchCommand::Bugtrap(args) => bench_bugtrap(args),
            BenchCommand::Roundabout(args) => bench_roundabout(args),
        },
        Command::Heatmap(args) => heatmap_cmd(args),
    }
}

fn env_gen(args: EnvGenArgs) -> Result<i32> {
    let env = match args.kind {
        EnvKind::Passage => {
            let (dw, dh, params) = match args.scale {
                MapScale::Train => (300, 300, PassageParams::default()),
                MapScale::Test => (600, 300, PassageParams::narrowed()),
            };
            gen_narrow_passage_with(
                args.seed,
                args.width.unwrap_or(dw),
                args.height.unwrap_or(dh),
                &params,
            )
        }
        EnvKind::Bugtrap => gen_bugtrap(args.seed),
        EnvKind::Roundabout => gen_roundabout(args.seed, args.agents),
    };
    std::fs::write(&args.output, env.to_json()?)?;
    eprintln!(
        "wrote {} ({}x{}, {} agents)",
        args.output.display(),
        env.map.width,
        env.map.height,
        env.agents.len()
    );
    Ok(0)
}

fn collect(args: CollectArgs) -> Result<i32> {
    let kind = match args.kind {
        EnvKind::Passage => TraceKind::Passage {
            width: args.width,
            height: args.height,
            params: PassageParams::default(),
        },
        EnvKind::Bugtrap => TraceKind::Bugtrap,
        EnvKind::Roundabout => TraceKind::Roundabout {
            max_agents: args.agents,
        },
    };
    let dataset = collect_traces(&kind, args.traces, args.max_envs, args.budget, args.seed)?;
    dataset.save(&args.output)?;
    eprintln!(
        "wrote {} traces ({} steps) to {}",
        dataset.traces.len(),
        dataset.step_count(),
        args.output.display()
    );
    Ok(0)
}

fn train_hmm_cmd(args: TrainHmmArgs) -> Result<i32> {
    let dataset = TraceDataset::load(&args.traces)?;
    let (model, curve) = train_hmm(&dataset, args.states, args.seed)?;
    let features = match dataset.schema.generator.as_str() {
        "roundabout" => HmmFeatureKind::NearestAgent,
        _ => HmmFeatureKind::Passage,
    };
    save_hmm(&args.output, &model, features)?;
    eprintln!(
        "trained {}-state HMM over {} traces; final log-likelihood {:.3}",
        args.states,
        dataset.traces.len(),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(0)
}

fn train_gru_cmd(args: TrainGruArgs) -> Result<i32> {
    let dataset = TraceDataset::load(&args.traces)?;
    let arch = match dataset.schema.generator.as_str() {
        "passage" => NeuralConfig::passage(dataset.schema.steering_radius / 2.0),
        "bugtrap" => NeuralConfig::bugtrap(dataset.schema.steering_radius / 2.0),
        "roundabout" => NeuralConfig::roundabout(dataset.schema.steering_radius / 2.0),
        other => {
            return Err(crate::error::Error::InvalidConfig(format!(
                "unknown generator {other} in trace schema"
            )))
        }
    };
    let opt = OptimizerConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        epochs: args.epochs,
        truncate: None,
    };
    let (model, curve) = train_recurrent(&dataset, arch, &opt, args.seed)?;
    save_gru(&args.output, &model)?;
    eprintln!(
        "trained GRU ({} parameters) over {} traces; loss {:.3} -> {:.3}",
        model.param_count(),
        dataset.traces.len(),
        curve.first().copied().unwrap_or(f64::NAN),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(0)
}

fn plan_cmd(args: PlanArgs) -> Result<i32> {
    let env = Environment::from_json(&std::fs::read_to_string(&args.env)?)?;
    let model = args.model.as_ref().map(load_model).transpose()?;
    let mut cfg = PlannerConfig::for_env(&env, args.samples, args.seed);
    cfg.goal_bias = args.goal_bias;
    let result = plan(&env, model.as_ref().map(|m| m.as_dyn()), &cfg)?;
    if let Some(path) = &args.dump_tree {
        std::fs::write(path, result.tree.to_jsonl())?;
    }
    if args.json {
        println!("{}", result.to_json());
    } else if result.success {
        println!(
            "reached goal: length {:.2}, {} nodes, {}/{} valid moves",
            result.path_length,
            result.tree.len(),
            result.valid,
            result.proposed
        );
    } else {
        println!(
            "no path found in {} iterations ({} nodes)",
            result.iterations,
            result.tree.len()
        );
    }
    Ok(if result.success { 0 } else { 1 })
}

fn print_report(report: &crate::bench::BenchmarkReport, json: bool) {
    if json {
        println!("{}", report.to_json());
        return;
    }
    println!("experiment: {}", report.experiment);
    for a in &report.aggregates {
        let path = match (a.mean_path_length, a.path_length_stderr) {
            (Some(m), Some(se)) => format!("{m:.2} +/- {se:.2}"),
            (Some(m), None) => format!("{m:.2}"),
            _ => "-".to_string(),
        };
        println!(
            "  {:<22} success {:>5.1}% (std {:.1}%)  path {}  valid-moves {:.2}",
            a.planner,
            100.0 * a.success_rate,
            100.0 * a.success_rate_std,
            path,
            a.valid_move_proportion
        );
    }
}

fn bench_passage(args: BenchPassageArgs) -> Result<i32> {
    let mut cfg = PassageBenchConfig::desk(args.seed);
    cfg.rounds = args.rounds;
    cfg.samples = args.samples;
    cfg.train_traces = args.train_traces;
    let report = run_passage(&cfg)?;
    if let Some(path) = &args.output {
        std::fs::write(path, report.to_json())?;
    }
    print_report(&report, args.json);
    Ok(0)
}

fn bench_bugtrap(args: BenchBugtrapArgs) -> Result<i32> {
    let mut cfg = BugtrapBenchConfig::desk(args.seed);
    cfg.seeds = args.seeds;
    cfg.steps = args.steps;
    cfg.train_traces = args.train_traces;
    let (report, curves) = run_bugtrap(&cfg)?;
    if let Some(path) = &args.output {
        std::fs::write(path, report.to_json())?;
    }
    if let Some(path) = &args.curves {
        std::fs::write(path, curves_to_csv(&curves))?;
    }
    print_report(&report, args.json);
    Ok(0)
}

fn bench_roundabout(args: BenchRoundaboutArgs) -> Result<i32> {
    let mut cfg = RoundaboutBenchConfig::desk(args.seed);
    cfg.trials = args.trials;
    cfg.agent_counts = args.agents;
    cfg.samples_per_step = args.samples;
    cfg.train_traces = args.train_traces;
    cfg.include_joint = !args.no_joint;
    let report = run_roundabout(&cfg)?;
    if let Some(path) = &args.output {
        std::fs::write(path, report.to_json())?;
    }
    print_report(&report, args.json);
    Ok(0)
}

fn heatmap_cmd(args: HeatmapArgs) -> Result<i32> {
    let dumps = args
        .dumps
        .iter()
        .map(std::fs::read_to_string)
        .collect::<std::io::Result<Vec<_>>>()?;
    let spec = HeatmapSpec {
        width: args.width,
        height: args.height,
        anchor: args.anchor,
    };
    let (counts, total) = accumulate_dumps(&dumps, &spec)?;
    std::fs::write(&args.output, emit_pgm(&counts, total, &spec))?;
    eprintln!(
        "wrote {} ({} nodes accumulated)",
        args.output.display(),
        total
    );
    Ok(0)
}
