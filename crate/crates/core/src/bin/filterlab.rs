//! Command-line front end: protocol runs, a-vector estimation, the
//! stage-switch solver, coupling checks, reconstructible-set verification,
//! and the acceptance suite. Exit code 0 only when every requested
//! assertion passed.

use std::fs;
use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use filterlab::accepted::AVector;
use filterlab::experiment::{run_experiment, ExperimentConfig, Protocol};
use filterlab::filter::{ErrorRate, FilterParams, ImplId};
use filterlab::obfuscation::{coupling_check_exhaustive, coupling_check_sampled, Partition};
use filterlab::reconstructible::{build_state_graph, verify_section5_lemma, DEFAULT_NODE_CAP};
use filterlab::tape::{domain, RandomTape};
use filterlab::warmup::AccountingMode;
use filterlab::{acceptance, lemma_s};

#[derive(Parser)]
#[command(name = "filterlab", version, about = "Dynamic-filter space lower-bound laboratory")]
struct Cli {
    /// Base seed for all randomness in the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Number of seeded trials.
    #[arg(long, global = true, default_value_t = 100)]
    trials: u64,
    /// Output path (stdout when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format for reports.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ideal,
    Stream,
}

impl From<ModeArg> for AccountingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ideal => AccountingMode::Ideal,
            ModeArg::Stream => AccountingMode::Stream,
        }
    }
}

#[derive(Args)]
struct FilterArgs {
    /// Implementation id: fingerprint, bitmap_exact, or sticky_toy.
    #[arg(long = "impl", value_name = "IMPL")]
    impl_id: String,
    /// Capacity n.
    #[arg(long)]
    n: u64,
    /// Error rate, e.g. 1/16 or 0.0625.
    #[arg(long)]
    eps: String,
    /// Universe size u.
    #[arg(long)]
    u: u64,
}

impl FilterArgs {
    fn impl_id(&self) -> Result<ImplId, String> {
        self.impl_id.parse().map_err(|e| format!("{e}"))
    }

    fn error_rate(&self) -> Result<ErrorRate, String> {
        self.eps.parse().map_err(|e| format!("{e}"))
    }

    fn params(&self) -> Result<FilterParams, String> {
        FilterParams::new(self.u, self.n, self.error_rate()?).map_err(|e| format!("{e}"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the warmup protocol over seeded trials.
    RunWarmup {
        #[command(flatten)]
        filter: FilterArgs,
        /// Fixed stage switch (conflicts with --auto-s).
        #[arg(long, conflicts_with = "auto_s")]
        s: Option<u64>,
        /// Select s from a frozen a-vector estimate.
        #[arg(long)]
        auto_s: bool,
        #[arg(long, value_enum, default_value_t = ModeArg::Ideal)]
        mode: ModeArg,
        /// Trials for the frozen a-vector when --auto-s is set.
        #[arg(long, default_value_t = 64)]
        avector_trials: u64,
    },
    /// Run the general (obfuscating-tree) protocol over seeded trials.
    RunGeneral {
        #[command(flatten)]
        filter: FilterArgs,
        /// Batch count b (must divide n and u).
        #[arg(long)]
        b: u64,
        /// Obfuscation width M.
        #[arg(long)]
        m: u64,
        #[arg(long, conflicts_with = "auto_s")]
        s: Option<u64>,
        #[arg(long)]
        auto_s: bool,
        #[arg(long, value_enum, default_value_t = ModeArg::Ideal)]
        mode: ModeArg,
        /// Substitute reconstructible sets for accepted sets (tiny scale).
        #[arg(long)]
        reconstructible: bool,
        #[arg(long, default_value_t = 64)]
        avector_trials: u64,
    },
    /// Verify the coupling between the F- and G-side distributions.
    CouplingCheck {
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long)]
        b: u64,
        #[arg(long)]
        m: u64,
        /// Exact enumeration (tiny instances only); otherwise Monte Carlo.
        #[arg(long)]
        exhaustive: bool,
        /// Outcome cap for exhaustive enumeration.
        #[arg(long, default_value_t = 1 << 22)]
        outcome_cap: u64,
    },
    /// Solve the stage switch for an a-vector JSON file.
    LemmaS {
        /// Path to {normalizer, values[], stderr[]} JSON ("-" for stdin).
        #[arg(long)]
        input: String,
    },
    /// Estimate the a-vector and write it as JSON.
    EstimateAvector {
        #[command(flatten)]
        filter: FilterArgs,
        /// Chain to estimate over: warmup insertion prefixes or the general
        /// protocol's G-state cuts.
        #[arg(long, value_enum, default_value_t = ChainArg::Warmup)]
        protocol: ChainArg,
        #[arg(long, default_value_t = 2)]
        b: u64,
        #[arg(long, default_value_t = 4)]
        m: u64,
    },
    /// Build the conforming-state graph and verify the reconstructible-set
    /// properties exhaustively.
    VerifyReconstructible {
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long)]
        b: u64,
        /// Write graph statistics JSON here.
        #[arg(long)]
        stats_out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_NODE_CAP)]
        node_cap: usize,
    },
    /// Run the acceptance criteria and print one line per criterion.
    Acceptance {
        /// Comma-separated subset, e.g. A1,A3 (all by default).
        #[arg(long)]
        only: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ChainArg {
    Warmup,
    General,
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<(), String> {
    match out {
        Some(path) => fs::write(path, content).map_err(|e| format!("write {path:?}: {e}")),
        None => {
            println!("{content}");
            Ok(())
        }
    }
}

fn run() -> Result<bool, String> {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().ok();
    }
    match cli.command {
        Command::RunWarmup { filter, s, auto_s, mode, avector_trials } => {
            let config = ExperimentConfig {
                impl_id: filter.impl_id()?,
                universe: filter.u,
                capacity: filter.n,
                error_rate: filter.error_rate()?,
                protocol: Protocol::Warmup,
                b: 1,
                m_cap: 1,
                s: if auto_s { None } else { Some(s.unwrap_or(0)) },
                trials: cli.trials,
                base_seed: cli.seed,
                mode: mode.into(),
                avector_trials,
            };
            let report = run_experiment(&config).map_err(|e| format!("{e}"))?;
            let ok = report.aggregates.decode_fraction == 1.0;
            let body = match cli.format {
                Format::Csv => report.to_csv(),
                Format::Json => report.to_json(),
            };
            emit(&cli.out, &body)?;
            eprintln!(
                "warmup {}: s={} mean_derived={:.3} (stderr {:.3}) space={:.3} decode={:.1}%",
                config.impl_id,
                report.chosen_s,
                report.aggregates.mean_derived_bound,
                report.aggregates.stderr_derived_bound,
                report.references.space_bits,
                report.aggregates.decode_fraction * 100.0
            );
            Ok(ok)
        }
        Command::RunGeneral { filter, b, m, s, auto_s, mode, reconstructible, avector_trials } => {
            let config = ExperimentConfig {
                impl_id: filter.impl_id()?,
                universe: filter.u,
                capacity: filter.n,
                error_rate: filter.error_rate()?,
                protocol: if reconstructible {
                    Protocol::GeneralReconstructible
                } else {
                    Protocol::General
                },
                b,
                m_cap: m,
                s: if auto_s { None } else { Some(s.unwrap_or(0)) },
                trials: cli.trials,
                base_seed: cli.seed,
                mode: mode.into(),
                avector_trials,
            };
            let report = run_experiment(&config).map_err(|e| format!("{e}"))?;
            let ok = report.aggregates.decode_fraction == 1.0;
            let body = match cli.format {
                Format::Csv => report.to_csv(),
                Format::Json => report.to_json(),
            };
            emit(&cli.out, &body)?;
            eprintln!(
                "general {}: b={} M={} s={} mean_derived={:.3} space={:.3} decode={:.1}%",
                config.impl_id,
                b,
                m,
                report.chosen_s,
                report.aggregates.mean_derived_bound,
                report.references.space_bits,
                report.aggregates.decode_fraction * 100.0
            );
            Ok(ok)
        }
        Command::CouplingCheck { filter, b, m, exhaustive, outcome_cap } => {
            let params = filter.params()?;
            if exhaustive {
                let report = coupling_check_exhaustive(params, b, m, cli.seed, outcome_cap)
                    .map_err(|e| format!("{e}"))?;
                let ok = report.tv_exactly_zero == Some(true);
                println!(
                    "exhaustive coupling: b={b} M={m} outcomes={} max TV={:?} (exactly zero: {:?})",
                    report.outcomes, report.max_tv, report.tv_exactly_zero
                );
                Ok(ok)
            } else {
                let report = coupling_check_sampled(
                    filter.impl_id()?,
                    params,
                    b,
                    m,
                    cli.trials,
                    cli.seed,
                )
                .map_err(|e| format!("{e}"))?;
                let ok = report
                    .gaps
                    .iter()
                    .zip(report.gap_sigmas.iter())
                    .all(|(&g, &s)| g <= report.gap_bound + 3.0 * s);
                println!(
                    "sampled coupling: b={b} M={m} trials={} gaps={:?} bound={:.3}",
                    report.outcomes, report.gaps, report.gap_bound
                );
                Ok(ok)
            }
        }
        Command::LemmaS { input } => {
            let text = if input == "-" {
                let mut buf = String::new();
                std::io::stdin().read_to_string(&mut buf).map_err(|e| format!("stdin: {e}"))?;
                buf
            } else {
                fs::read_to_string(&input).map_err(|e| format!("read {input}: {e}"))?
            };
            let avector = AVector::from_json(&text).map_err(|e| format!("{e}"))?;
            let result = lemma_s::choose_s(avector.tail()).map_err(|e| format!("{e}"))?;
            println!(
                "{}",
                serde_json::json!({
                    "s": result.s,
                    "lhs": result.lhs_value,
                    "bound": result.bound_value,
                    "slack": result.slack,
                })
            );
            Ok(result.lhs_value <= result.bound_value + 1e-9 * result.bound_value.abs().max(1.0))
        }
        Command::EstimateAvector { filter, protocol, b, m } => {
            let params = filter.params()?;
            let impl_id = filter.impl_id()?;
            let est = match protocol {
                ChainArg::Warmup => filterlab::accepted::estimate_avector_warmup(
                    impl_id, params, cli.trials, cli.seed,
                )
                .map_err(|e| format!("{e}"))?,
                ChainArg::General => filterlab::obfuscation::estimate_avector_general(
                    impl_id, params, b, m, cli.trials, cli.seed,
                )
                .map_err(|e| format!("{e}"))?,
            };
            emit(&cli.out, &est.avector.to_json())?;
            eprintln!(
                "estimated {} checkpoints over {} trials ({} chain monotonicity violations)",
                est.avector.values.len(),
                est.trials,
                est.monotonicity_violations
            );
            Ok(true)
        }
        Command::VerifyReconstructible { filter, b, stats_out, node_cap } => {
            let params = filter.params()?;
            let impl_id = filter.impl_id()?;
            let tape = RandomTape::new(cli.seed);
            let mut reader = tape.reader(domain::PUBLIC_PARTITION);
            let partition =
                Partition::sample(filter.u, b, &mut reader).map_err(|e| format!("{e}"))?;
            let graph = build_state_graph(impl_id, params, &partition, tape, node_cap)
                .map_err(|e| format!("{e}"))?;
            let stats = graph.stats();
            if let Some(path) = stats_out {
                fs::write(&path, serde_json::to_string_pretty(&stats).unwrap())
                    .map_err(|e| format!("write {path:?}: {e}"))?;
            }
            let report = verify_section5_lemma(&graph).map_err(|e| format!("{e}"))?;
            println!(
                "graph: {} nodes, {} edges, max memory multiplicity {}",
                stats.nodes, stats.edges, stats.max_memory_multiplicity
            );
            println!(
                "lemma: {} nodes checked, {} prefix pairs, sandwich violations {}, monotone violations {}, off-multiple pairs {} ({} hold)",
                report.nodes_checked,
                report.pairs_checked,
                report.sandwich_counterexamples.len(),
                report.monotone_counterexamples.len(),
                report.off_multiple_pairs,
                report.off_multiple_holds
            );
            for line in
                report.sandwich_counterexamples.iter().chain(&report.monotone_counterexamples)
            {
                println!("counterexample: {line}");
            }
            Ok(report.holds())
        }
        Command::Acceptance { only } => {
            let ids: Vec<String> = match only {
                Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
                None => acceptance::ALL_IDS.iter().map(|s| s.to_string()).collect(),
            };
            let mut all_pass = true;
            for id in &ids {
                match acceptance::run_criterion(id) {
                    Some(result) => {
                        println!("{}", result.line());
                        all_pass &= result.pass;
                    }
                    None => {
                        println!("{id} UNKNOWN: no such criterion");
                        all_pass = false;
                    }
                }
            }
            Ok(all_pass)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
