//! `rhm-lab`: generate Random Hierarchy Model grammars, sample datasets,
//! audit instance statistics, train and evaluate the layerwise learner, run
//! scaling sweeps, and exercise the deep quadratic boolean task.
//!
//! All randomness flows from the `--seed` flags through documented sub-seed
//! derivation, so identical invocations produce byte-identical output files.
//! Exit codes: 0 success, 1 usage or parameter error, 2 runtime error.

use clap::{Args, Parser, Subcommand};
use rhm_core::deepquad::{self, SampleSource};
use rhm_core::error::Error as CoreError;
use rhm_core::experiments::{export_csv_path, run_sweep, SweepConfig};
use rhm_core::grammar::{load_instance, save_instance, RhmParams, Sample};
use rhm_core::learner::{
    audited_layer_configs, budget_layer_configs, load_model, predict, save_model, train_layerwise,
    ScheduleMultipliers,
};
use rhm_core::oracle::{audit_assumptions, TransitionStats};
use rhm_core::{RhmInstance, RngStream};
use serde::Serialize;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "rhm-lab",
    about = "Random Hierarchy Model laboratory",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    /// Parallel worker cap (default: logical cores; env RHM_LAB_JOBS).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a grammar and write it as JSON.
    Gen(GenArgs),
    /// Generate a JSON-lines dataset from a grammar.
    Sample(SampleArgs),
    /// Audit a grammar's non-degeneracy and per-level signal.
    Audit(AuditArgs),
    /// Train the layerwise model on a grammar.
    Train(TrainArgs),
    /// Evaluate a trained model on a dataset.
    Eval(EvalArgs),
    /// Run a parameter/budget sweep from a JSON config.
    Sweep(SweepArgs),
    /// Sample deep quadratic boolean targets and report layerwise recovery.
    Deepquad(DeepquadArgs),
}

#[derive(Args, Serialize)]
struct GenArgs {
    /// Number of levels.
    #[arg(long = "L")]
    levels: usize,
    /// Branching factor.
    #[arg(long = "s")]
    branching: usize,
    /// Vocabulary size per level.
    #[arg(long = "V")]
    vocab: usize,
    /// Production rules per symbol.
    #[arg(long = "m")]
    rules: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output grammar path.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct SampleArgs {
    /// Grammar JSON path.
    grammar: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record the intermediate-level sequences on each line.
    #[arg(long)]
    keep_intermediates: bool,
    /// Output JSON-lines path.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct AuditArgs {
    /// Grammar JSON path.
    grammar: PathBuf,
    /// Optional JSON report path; the table always prints to stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Grammar JSON path.
    grammar: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total sample budget, split geometrically across levels.
    /// When absent, per-level counts are `sample-mult * m^l`.
    #[arg(long)]
    n_total: Option<usize>,
    /// Per-level sample multiplier (used without --n-total).
    #[arg(long, default_value_t = 1000.0)]
    sample_mult: f64,
    /// Random Fourier frequencies per level.
    #[arg(long, default_value_t = 512)]
    feature_count: usize,
    /// Bandwidth multiplier.
    #[arg(long, default_value_t = 1.0)]
    sigma_mult: f64,
    /// Gradient-step multiplier.
    #[arg(long, default_value_t = 1.0)]
    step_mult: f64,
    /// Target-accuracy multiplier.
    #[arg(long, default_value_t = 1.0)]
    eps_mult: f64,
    /// Floor for the near-orthogonality target in the bandwidth schedule.
    #[arg(long, default_value_t = 0.02)]
    eps_o_floor: f64,
    /// Ridge weight override (default 1/(V*m)).
    #[arg(long)]
    ridge: Option<f64>,
    /// Use the generic sampled-rule signal bound instead of this grammar's
    /// audited per-level signals when setting bandwidths.
    #[arg(long)]
    generic_signals: bool,
    /// Output model path.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Model JSON path.
    model: PathBuf,
    /// Dataset JSON-lines path.
    dataset: PathBuf,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    /// Sweep config JSON path.
    config: PathBuf,
    /// Output CSV path.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct DeepquadArgs {
    /// Input dimension.
    #[arg(long = "d")]
    dim: usize,
    /// Comma-separated set counts per level, e.g. "6,3,1".
    #[arg(long, value_delimiter = ',')]
    level_sizes: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    c_min: f64,
    /// Fresh samples per recovered level.
    #[arg(long, default_value_t = 10000)]
    n_per_level: usize,
    /// Number of seeded repetitions.
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(short, long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprintln!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };

    let jobs = cli.jobs.or_else(|| {
        std::env::var("RHM_LAB_JOBS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = jobs {
        // Ignore AlreadyInitialized: tests may install a pool first.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }

    match run(cli.command, jobs) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CoreError::InvalidParams(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

/// Echoes the fully resolved configuration (defaults included) to stderr.
fn echo_config<T: Serialize>(subcommand: &str, args: &T, jobs: Option<usize>) {
    let resolved = serde_json::json!({
        "subcommand": subcommand,
        "jobs": jobs,
        "args": args,
    });
    eprintln!("config: {resolved}");
}

fn run(command: Command, jobs: Option<usize>) -> Result<(), CoreError> {
    match command {
        Command::Gen(args) => {
            echo_config("gen", &args, jobs);
            let params = RhmParams::new(
                args.levels,
                args.branching,
                args.vocab,
                args.rules,
                args.seed,
            );
            let mut rng = RngStream::from_seed(args.seed);
            let instance = RhmInstance::sample(params, &mut rng)?;
            std::fs::write(&args.output, save_instance(&instance))?;
            println!("wrote grammar to {}", args.output.display());
            Ok(())
        }
        Command::Sample(args) => {
            echo_config("sample", &args, jobs);
            let instance = load_instance(&std::fs::read_to_string(&args.grammar)?)?;
            let rng = RngStream::from_seed(args.seed);
            let file = std::fs::File::create(&args.output)?;
            let mut out = std::io::BufWriter::new(file);
            for i in 0..args.n {
                let mut sample_rng = rng.substream(i as u64);
                let sample = instance.generate_sample(&mut sample_rng, args.keep_intermediates);
                serde_json::to_writer(&mut out, &sample)
                    .map_err(|e| CoreError::Numeric(e.to_string()))?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
            println!("wrote {} samples to {}", args.n, args.output.display());
            Ok(())
        }
        Command::Audit(args) => {
            echo_config("audit", &args, jobs);
            let instance = load_instance(&std::fs::read_to_string(&args.grammar)?)?;
            let stats = TransitionStats::compute(&instance);
            let report = audit_assumptions(&instance, &stats);
            print!("{}", report.render_table());
            if let Some(path) = &args.output {
                let json = serde_json::to_string_pretty(&report)
                    .map_err(|e| CoreError::Numeric(e.to_string()))?;
                std::fs::write(path, json)?;
            }
            Ok(())
        }
        Command::Train(args) => {
            echo_config("train", &args, jobs);
            let instance = load_instance(&std::fs::read_to_string(&args.grammar)?)?;
            let params = *instance.params();
            let mult = ScheduleMultipliers {
                sample_mult: args.sample_mult,
                feature_count: args.feature_count,
                sigma_mult: args.sigma_mult,
                step_mult: args.step_mult,
                eps_mult: args.eps_mult,
                eps_o_floor: args.eps_o_floor,
                ridge: args.ridge,
            };
            let configs = if args.generic_signals {
                match args.n_total {
                    Some(n) => budget_layer_configs(&params, n, &mult),
                    None => rhm_core::learner::default_layer_configs(&params, &mult),
                }
            } else {
                let stats = TransitionStats::compute(&instance);
                match args.n_total {
                    Some(n) => rhm_core::learner::audited_budget_layer_configs(
                        &params,
                        &stats.rho_emp,
                        n,
                        &mult,
                    ),
                    None => audited_layer_configs(&params, &stats.rho_emp, &mult),
                }
            };
            for (idx, c) in configs.iter().enumerate() {
                eprintln!(
                    "stage level {}: N={} T={} eta={:.6} lambda={:.6} M={} sigma={:.6}",
                    params.levels - idx,
                    c.samples,
                    c.gd_steps,
                    c.step_size,
                    c.ridge,
                    c.feature_count,
                    c.sigma
                );
            }
            let rng = RngStream::from_seed(args.seed);
            let model = train_layerwise(&instance, &configs, &rng)?;
            std::fs::write(&args.output, save_model(&model)?)?;
            println!("wrote model to {}", args.output.display());
            Ok(())
        }
        Command::Eval(args) => {
            echo_config("eval", &args, jobs);
            let model = load_model(&std::fs::read_to_string(&args.model)?)?;
            let file = std::fs::File::open(&args.dataset)?;
            let reader = std::io::BufReader::new(file);
            let mut total = 0usize;
            let mut hits = 0usize;
            for (line_no, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let sample: Sample = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
                    path: format!("{}:{}", args.dataset.display(), line_no + 1),
                    message: e.to_string(),
                })?;
                total += 1;
                match predict(&model, &sample.tokens) {
                    Ok(label) if label == sample.label => hits += 1,
                    Ok(_) => {}
                    // A degenerate normalization is a failed prediction, not
                    // a failed evaluation.
                    Err(CoreError::DegenerateNormalization { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            if total == 0 {
                return Err(CoreError::EmptyResult);
            }
            println!("accuracy={}", hits as f64 / total as f64);
            Ok(())
        }
        Command::Sweep(args) => {
            echo_config("sweep", &args, jobs);
            let text = std::fs::read_to_string(&args.config)?;
            let config: SweepConfig =
                serde_json::from_str(&text).map_err(|e| CoreError::Parse {
                    path: format!("{}", args.config.display()),
                    message: e.to_string(),
                })?;
            let result = run_sweep(&config)?;
            export_csv_path(&result, &args.output)?;
            println!(
                "wrote {} rows to {}",
                result.rows.len(),
                args.output.display()
            );
            Ok(())
        }
        Command::Deepquad(args) => {
            echo_config("deepquad", &args, jobs);
            if args.seeds == 0 {
                return Err(CoreError::InvalidParams(
                    "--seeds must be at least 1".into(),
                ));
            }
            let file = std::fs::File::create(&args.output)?;
            let mut out = std::io::BufWriter::new(file);
            writeln!(
                out,
                "seed,support_exact,max_coeff_error,levels_recovered,units_recovered"
            )?;
            for rep in 0..args.seeds {
                let root = RngStream::from_seed(args.seed).substream(rep as u64);
                let target = deepquad::sample_target(
                    args.dim,
                    &args.level_sizes,
                    args.c_min,
                    &mut root.substream(0),
                )?;
                let row = match deepquad::learn_layerwise(
                    |x| deepquad::eval_target(&target, x).expect("target evaluates on ±1"),
                    args.dim,
                    args.c_min,
                    SampleSource::Random {
                        per_level: args.n_per_level,
                    },
                    &mut root.substream(1),
                ) {
                    Ok(model) => {
                        let want: Vec<Vec<deepquad::IndexSet>> = target
                            .levels
                            .iter()
                            .map(|l| {
                                let mut l = l.clone();
                                l.sort();
                                l
                            })
                            .collect();
                        let support_exact = model.support() == want;
                        let max_err = model
                            .levels
                            .iter()
                            .flatten()
                            .filter_map(|u| {
                                target
                                    .coefficients
                                    .get(&u.support)
                                    .map(|c| (u.coefficient - c).abs())
                            })
                            .fold(0.0f64, f64::max);
                        let units: usize = model.levels.iter().map(|l| l.len()).sum();
                        format!(
                            "{rep},{},{:.16e},{},{units}",
                            u8::from(support_exact),
                            max_err,
                            model.levels.len()
                        )
                    }
                    Err(e) => {
                        eprintln!("seed {rep}: {e}");
                        format!("{rep},0,{:.16e},0,0", f64::MAX)
                    }
                };
                writeln!(out, "{row}")?;
            }
            out.flush()?;
            println!("wrote {} rows to {}", args.seeds, args.output.display());
            Ok(())
        }
    }
}
