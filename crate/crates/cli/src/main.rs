//! Command-line front end: dataset generation, ball/ring queries against
//! a dataset file, the benchmark grid, and the match service.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, RwLock};

use clap::{Parser, Subcommand};

use rankmatch::bench::{self, GridConfig};
use rankmatch::matchd::{self, ServiceConfig, ServiceState};
use rankmatch::mtree::Tree;
use rankmatch::RankList;

const EXIT_DATA: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "rankmatch",
    version,
    about = "Metric search over ranked-preference lists"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a population file of shuffled rank lists, one per line.
    Gen {
        /// Number of lists to generate.
        #[arg(long)]
        n: usize,
        /// Length of each list.
        #[arg(long)]
        len: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output path for the population dump.
        #[arg(long)]
        out: PathBuf,
    },
    /// Ball query: ids of dataset lines within radius r of q.
    Query {
        /// Population file produced by `gen`.
        #[arg(long)]
        dataset: PathBuf,
        /// Query list as comma-separated integers, e.g. `2,0,1,3`.
        #[arg(long)]
        q: String,
        /// Normalized radius in [0, 1].
        #[arg(long)]
        r: f64,
        /// Tree construction seed (answers do not depend on it).
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Ring query: ids at normalized distance within [r-lo, r-hi] of q.
    Ring {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        q: String,
        #[arg(long = "r-lo")]
        r_lo: f64,
        #[arg(long = "r-hi")]
        r_hi: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run the (len, N, r) benchmark grid and write a CSV of the results.
    Bench {
        /// Grid as key=value lines: lens, ns, rs, queries, seed.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated list lengths (overrides the config file).
        #[arg(long)]
        lens: Option<String>,
        /// Comma-separated population sizes.
        #[arg(long)]
        ns: Option<String>,
        /// Comma-separated normalized radii.
        #[arg(long)]
        rs: Option<String>,
        /// Queries per (len, N) cell.
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV output path.
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
        /// Use the full built-in grid with populations up to 2.5e6
        /// (hours of runtime) instead of the desk-scale default.
        #[arg(long = "full-table2")]
        full_table2: bool,
        /// Cells to run in parallel; keep at 1 when timings matter.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the match service on a local socket.
    Serve {
        /// Listen address, e.g. 127.0.0.1:4817 (port 0 picks one).
        #[arg(long, default_value = "127.0.0.1:4817")]
        listen: String,
        /// Vocabulary file: one item name per line.
        #[arg(long)]
        vocab: PathBuf,
        /// Snapshot path; restored on start when present, then kept
        /// current on every mutation.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// Inactive fraction that triggers a cleanup rebuild.
        #[arg(long, default_value_t = 0.25)]
        cleanup_threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum CliError {
    /// Bad arguments, detectable without touching any file.
    Usage(String),
    /// Problems with data files, sockets, or their contents.
    Data(String),
}

impl CliError {
    fn usage(e: impl ToString) -> Self {
        CliError::Usage(e.to_string())
    }

    fn data(e: impl ToString) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_DATA)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen { n, len, seed, out } => cmd_gen(n, len, seed, &out),
        Command::Query { dataset, q, r, seed } => cmd_range(&dataset, &q, 0.0, r, seed),
        Command::Ring { dataset, q, r_lo, r_hi, seed } => cmd_range(&dataset, &q, r_lo, r_hi, seed),
        Command::Bench {
            config,
            lens,
            ns,
            rs,
            queries,
            seed,
            out,
            full_table2,
            jobs,
        } => cmd_bench(config, lens, ns, rs, queries, seed, &out, full_table2, jobs),
        Command::Serve {
            listen,
            vocab,
            snapshot,
            cleanup_threshold,
            seed,
        } => cmd_serve(&listen, &vocab, snapshot, cleanup_threshold, seed),
    }
}

fn cmd_gen(n: usize, len: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    if n < 1 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    if len < 2 {
        return Err(CliError::Usage("--len must be at least 2".into()));
    }
    let population = bench::generate_population(n, len, seed).map_err(CliError::usage)?;
    let file = fs::File::create(out)
        .map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    let mut writer = BufWriter::new(file);
    bench::write_population(&population, &mut writer).map_err(CliError::data)?;
    writer.flush().map_err(CliError::data)?;
    println!("wrote {n} lists of length {len} to {}", out.display());
    Ok(())
}

fn cmd_range(dataset: &Path, q: &str, r_lo: f64, r_hi: f64, seed: u64) -> Result<(), CliError> {
    let query = parse_query_literal(q)?;
    if !(0.0..=1.0).contains(&r_lo) || !(0.0..=1.0).contains(&r_hi) {
        return Err(CliError::Usage("radii must lie in [0, 1]".into()));
    }
    if r_lo > r_hi {
        return Err(CliError::Usage(format!(
            "lower radius {r_lo} exceeds upper radius {r_hi}"
        )));
    }

    let file = fs::File::open(dataset)
        .map_err(|e| CliError::data(format!("{}: {e}", dataset.display())))?;
    let records = bench::read_population(BufReader::new(file))
        .map_err(|e| CliError::data(format!("{}: {e}", dataset.display())))?;
    if records.is_empty() {
        return Err(CliError::data(format!("{}: empty dataset", dataset.display())));
    }
    let tree = Tree::build(records, seed).map_err(CliError::data)?;
    let (mut ids, stats) = tree
        .ring_query(&query, r_lo, r_hi)
        .map_err(CliError::data)?;
    ids.sort_unstable();

    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for id in &ids {
        let _ = writeln!(out, "{id}");
    }
    let _ = writeln!(out, "n_found={} dist_calls={}", stats.n_found, stats.dist_calls);
    let _ = out.flush();
    Ok(())
}

fn parse_query_literal(q: &str) -> Result<RankList, CliError> {
    let items: Vec<u32> = q
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<u32>()
                .map_err(|e| CliError::Usage(format!("query item {tok:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    RankList::new(items).map_err(|e| CliError::Usage(format!("query list: {e}")))
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    config_path: Option<PathBuf>,
    lens: Option<String>,
    ns: Option<String>,
    rs: Option<String>,
    queries: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    full_table2: bool,
    jobs: usize,
) -> Result<(), CliError> {
    let base_seed = seed.unwrap_or(42);
    let mut config = if full_table2 {
        GridConfig::full_table2(base_seed)
    } else {
        GridConfig::desk_scale(base_seed)
    };
    if let Some(path) = config_path {
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        config
            .apply_key_values(&text)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    }
    // Flags override the config file.
    let mut overrides = String::new();
    if let Some(v) = lens {
        overrides.push_str(&format!("lens={v}\n"));
    }
    if let Some(v) = ns {
        overrides.push_str(&format!("ns={v}\n"));
    }
    if let Some(v) = rs {
        overrides.push_str(&format!("rs={v}\n"));
    }
    if let Some(v) = queries {
        overrides.push_str(&format!("queries={v}\n"));
    }
    if let Some(v) = seed {
        overrides.push_str(&format!("seed={v}\n"));
    }
    config.apply_key_values(&overrides).map_err(CliError::usage)?;
    config.validate().map_err(CliError::usage)?;
    if jobs < 1 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }

    let outcome = bench::run_grid_jobs(&config, jobs).map_err(CliError::data)?;

    let file = fs::File::create(out)
        .map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    let mut writer = BufWriter::new(file);
    bench::emit_csv(&outcome.cells, &mut writer).map_err(CliError::data)?;
    writer.flush().map_err(CliError::data)?;

    for build in &outcome.builds {
        println!(
            "built len={} N={} in {:.3}s with {} distance calls",
            build.len,
            build.n,
            build.build_elapsed.as_secs_f64(),
            build.build_dist_calls
        );
    }
    let max_relative = outcome
        .cells
        .iter()
        .map(|c| c.relative_calls)
        .fold(0.0f64, f64::max);
    println!(
        "cells={} max_relative_calls={max_relative} out={}",
        outcome.cells.len(),
        out.display()
    );
    Ok(())
}

fn cmd_serve(
    listen: &str,
    vocab_path: &Path,
    snapshot: Option<PathBuf>,
    cleanup_threshold: f64,
    seed: u64,
) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&cleanup_threshold) {
        return Err(CliError::Usage("--cleanup-threshold must lie in [0, 1]".into()));
    }

    let vocab_file = fs::File::open(vocab_path)
        .map_err(|e| CliError::data(format!("{}: {e}", vocab_path.display())))?;
    let vocabulary =
        matchd::load_vocabulary(BufReader::new(vocab_file)).map_err(CliError::data)?;
    let config = ServiceConfig {
        cleanup_threshold,
        seed,
        ..ServiceConfig::default()
    };

    let mut state = match &snapshot {
        Some(path) if path.exists() => {
            let restored = ServiceState::restore(path, config).map_err(CliError::data)?;
            if restored.vocabulary() != vocabulary {
                return Err(CliError::data(format!(
                    "snapshot {} was taken with a different vocabulary",
                    path.display()
                )));
            }
            restored
        }
        _ => ServiceState::new(vocabulary, config).map_err(CliError::data)?,
    };
    if let Some(path) = snapshot {
        state.set_persistence(path).map_err(CliError::data)?;
    }

    let listener = TcpListener::bind(listen)
        .map_err(|e| CliError::data(format!("bind {listen}: {e}")))?;
    let addr = listener.local_addr().map_err(CliError::data)?;
    println!(
        "listening on {addr} vocabulary={} users={}",
        state.vocabulary().len(),
        state.active_count()
    );
    std::io::stdout().flush().ok();

    matchd::serve(listener, Arc::new(RwLock::new(state))).map_err(CliError::data)
}
