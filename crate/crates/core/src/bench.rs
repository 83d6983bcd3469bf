//! Scaling-study harness: synthetic populations, a (len, N, r) parameter
//! grid, and plot-ready CSV output.
//!
//! Each grid cell fixes a list length and population size, generates that
//! many uniformly shuffled permutations, builds a tree, and runs a fixed
//! set of population members as ball queries across the radius sweep.
//! Recorded per query: answer size, distance evaluations (the
//! hardware-independent cost signal), evaluations relative to the
//! population size, and wall time. Build time and build evaluations are
//! reported separately per cell, never mixed into the query rows.
//!
//! Every random stream is derived from one base seed, split by purpose
//! and cell, so adding cells to a grid never perturbs the data or queries
//! of existing cells.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::kendall::{self, RankList};
use crate::mtree::{self, Tree, UserRecord};

#[derive(Debug)]
pub enum Error {
    /// A grid or generator parameter is out of range.
    InvalidConfig(String),
    /// More queries requested than the population holds.
    NotEnoughMembers { requested: usize, population: usize },
    /// CSV emission needs at least one row.
    EmptyResults,
    /// A population file line failed to parse.
    Parse { line: usize, message: String },
    /// A cell failed; carries the offending parameters.
    Cell { len: usize, n: usize, source: Box<Error> },
    Tree(mtree::Error),
    List(kendall::Error),
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::NotEnoughMembers { requested, population } => {
                write!(f, "cannot pick {requested} queries from {population} records")
            }
            Error::EmptyResults => write!(f, "no results to emit"),
            Error::Parse { line, message } => write!(f, "line {line}: {message}"),
            Error::Cell { len, n, source } => {
                write!(f, "cell len={len} N={n} failed: {source}")
            }
            Error::Tree(e) => write!(f, "{e}"),
            Error::List(e) => write!(f, "{e}"),
            Error::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<mtree::Error> for Error {
    fn from(e: mtree::Error) -> Self {
        Error::Tree(e)
    }
}

impl From<kendall::Error> for Error {
    fn from(e: kendall::Error) -> Self {
        Error::List(e)
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

/// The sweep: every (len, N) pair is one cell; each cell runs
/// `queries_per_cell` fixed queries at every radius.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub lens: Vec<usize>,
    pub ns: Vec<usize>,
    pub rs: Vec<f64>,
    pub queries_per_cell: usize,
    pub seed: u64,
}

impl GridConfig {
    /// The radius sweep `{0.0} + {0.05, 0.06, ..., 0.17}`.
    pub fn standard_radii() -> Vec<f64> {
        let mut rs = vec![0.0];
        rs.extend((5..=17).map(|i| i as f64 / 100.0));
        rs
    }

    /// Default grid: full length and radius sweeps, populations up to
    /// 1e5. Completes in about a minute; suitable for development runs.
    pub fn desk_scale(seed: u64) -> Self {
        GridConfig {
            lens: vec![10, 15, 20, 30],
            ns: vec![5_000, 10_000, 30_000, 100_000],
            rs: Self::standard_radii(),
            queries_per_cell: 5,
            seed,
        }
    }

    /// The full grid with populations up to 2.5e6. Hours, not minutes.
    pub fn full_table2(seed: u64) -> Self {
        GridConfig {
            ns: vec![
                5_000, 10_000, 30_000, 60_000, 100_000, 200_000, 400_000, 1_200_000, 1_900_000,
                2_500_000,
            ],
            ..Self::desk_scale(seed)
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.lens.is_empty() || self.ns.is_empty() || self.rs.is_empty() {
            return Err(Error::InvalidConfig(
                "lens, ns, and rs must each be non-empty".into(),
            ));
        }
        if let Some(&len) = self.lens.iter().find(|&&l| l < 2) {
            return Err(Error::InvalidConfig(format!("list length {len} < 2")));
        }
        if let Some(&n) = self.ns.iter().find(|&&n| n < 1) {
            return Err(Error::InvalidConfig(format!("population size {n} < 1")));
        }
        if let Some(&r) = self.rs.iter().find(|&&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::InvalidConfig(format!("radius {r} outside [0, 1]")));
        }
        if self.queries_per_cell < 1 {
            return Err(Error::InvalidConfig("queries_per_cell must be >= 1".into()));
        }
        if self.ns.iter().any(|&n| n < self.queries_per_cell) {
            return Err(Error::InvalidConfig(format!(
                "queries_per_cell {} exceeds the smallest population",
                self.queries_per_cell
            )));
        }
        Ok(())
    }

    /// Applies `key = value` lines (`#` comments and blank lines ignored)
    /// on top of the current values. Keys: `lens`, `ns`, `rs`, `queries`,
    /// `seed`; list values are comma-separated.
    pub fn apply_key_values(&mut self, text: &str) -> Result<(), Error> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got {raw:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |message: String| Error::Parse { line: i + 1, message };
            match key {
                "lens" => {
                    self.lens = parse_list(value).map_err(bad)?;
                }
                "ns" => {
                    self.ns = parse_list(value).map_err(bad)?;
                }
                "rs" => {
                    self.rs = parse_list(value).map_err(bad)?;
                }
                "queries" => {
                    self.queries_per_cell =
                        value.parse().map_err(|e| bad(format!("queries: {e}")))?;
                }
                "seed" => {
                    self.seed = value.parse().map_err(|e| bad(format!("seed: {e}")))?;
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        Ok(())
    }
}

fn parse_list<T: std::str::FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

/// One query in one cell of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub len: usize,
    pub n: usize,
    pub r: f64,
    pub query_index: usize,
    pub n_found: usize,
    pub dist_calls: u64,
    /// `dist_calls / n`; 1.0 would be brute force.
    pub relative_calls: f64,
    /// Query time only; build time is reported in [`BuildReport`].
    pub elapsed: Duration,
}

/// Construction cost of one cell's tree.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildReport {
    pub len: usize,
    pub n: usize,
    pub build_elapsed: Duration,
    pub build_dist_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridOutcome {
    pub cells: Vec<CellResult>,
    pub builds: Vec<BuildReport>,
}

/// Purpose tags for splitting the base seed into independent streams.
#[derive(Clone, Copy)]
enum Stream {
    Population = 1,
    TreeBuild = 2,
    Queries = 3,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_seed(seed: u64, stream: Stream, len: usize, n: usize) -> u64 {
    let mut s = splitmix64(seed ^ (stream as u64));
    s = splitmix64(s ^ (len as u64));
    splitmix64(s ^ (n as u64))
}

/// `n` uniformly shuffled copies of `{0, 1, ..., len-1}` with user ids
/// `0..n`, reproducible from the seed.
pub fn generate_population(n: usize, len: usize, seed: u64) -> Result<Vec<UserRecord>, Error> {
    if n < 1 {
        return Err(Error::InvalidConfig(format!("population size {n} < 1")));
    }
    if len < 2 {
        return Err(Error::InvalidConfig(format!("list length {len} < 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for user_id in 0..n as u64 {
        let mut items: Vec<u32> = (0..len as u32).collect();
        items.shuffle(&mut rng);
        let list = RankList::new(items)?;
        records.push(UserRecord::new(user_id, list));
    }
    Ok(records)
}

/// `k` distinct population members, chosen by seeded sampling.
pub fn pick_queries(
    population: &[UserRecord],
    k: usize,
    seed: u64,
) -> Result<Vec<RankList>, Error> {
    if k > population.len() {
        return Err(Error::NotEnoughMembers {
            requested: k,
            population: population.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = index::sample(&mut rng, population.len(), k);
    Ok(chosen.iter().map(|i| population[i].list.clone()).collect())
}

/// Runs the whole grid sequentially. Rows come out in deterministic
/// order: lens outermost, then populations, radii, query index.
pub fn run_grid(config: &GridConfig) -> Result<GridOutcome, Error> {
    run_grid_jobs(config, 1)
}

/// Same grid with up to `jobs` cells in flight at once. Cell outputs are
/// stitched back in deterministic order; use one job when query timings
/// must not contend.
pub fn run_grid_jobs(config: &GridConfig, jobs: usize) -> Result<GridOutcome, Error> {
    config.validate()?;
    let cells: Vec<(usize, usize)> = config
        .lens
        .iter()
        .flat_map(|&len| config.ns.iter().map(move |&n| (len, n)))
        .collect();

    let mut outputs: Vec<Option<(Vec<CellResult>, BuildReport)>> = Vec::new();
    outputs.resize_with(cells.len(), || None);

    if jobs <= 1 {
        for (slot, &(len, n)) in cells.iter().enumerate() {
            outputs[slot] = Some(run_cell(config, len, n)?);
        }
    } else {
        type CellSlot = std::sync::Mutex<Option<Result<(Vec<CellResult>, BuildReport), Error>>>;
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<CellSlot> =
            cells.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(cells.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= cells.len() {
                        break;
                    }
                    let (len, n) = cells[i];
                    let result = run_cell(config, len, n);
                    *slots[i].lock().unwrap() = Some(result);
                });
            }
        });
        for (slot, cell) in slots.into_iter().enumerate() {
            let result = cell.into_inner().unwrap().expect("every cell was run");
            outputs[slot] = Some(result?);
        }
    }

    let mut outcome = GridOutcome::default();
    for output in outputs.into_iter().flatten() {
        let (rows, build) = output;
        outcome.cells.extend(rows);
        outcome.builds.push(build);
    }
    Ok(outcome)
}

fn run_cell(
    config: &GridConfig,
    len: usize,
    n: usize,
) -> Result<(Vec<CellResult>, BuildReport), Error> {
    let fail = |source: Error| Error::Cell { len, n, source: Box::new(source) };

    let population =
        generate_population(n, len, stream_seed(config.seed, Stream::Population, len, n))
            .map_err(fail)?;
    let queries = pick_queries(
        &population,
        config.queries_per_cell,
        stream_seed(config.seed, Stream::Queries, len, n),
    )
    .map_err(fail)?;

    let build_started = Instant::now();
    let tree = Tree::build(population, stream_seed(config.seed, Stream::TreeBuild, len, n))
        .map_err(|e| fail(e.into()))?;
    let build = BuildReport {
        len,
        n,
        build_elapsed: build_started.elapsed(),
        build_dist_calls: tree.build_dist_calls(),
    };

    let mut rows = Vec::with_capacity(config.rs.len() * queries.len());
    for &r in &config.rs {
        for (query_index, q) in queries.iter().enumerate() {
            let (ids, stats) = tree.ball_query(q, r).map_err(|e| fail(e.into()))?;
            rows.push(CellResult {
                len,
                n,
                r,
                query_index,
                n_found: ids.len(),
                dist_calls: stats.dist_calls,
                relative_calls: stats.dist_calls as f64 / n as f64,
                elapsed: stats.elapsed,
            });
        }
    }
    Ok((rows, build))
}

/// Writes the result rows as CSV. Every field except `elapsed_ns` is a
/// pure function of the grid config and seed.
pub fn emit_csv<W: Write>(results: &[CellResult], mut out: W) -> Result<(), Error> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    writeln!(
        out,
        "len,N,r,query_index,n_found,dist_calls,relative_calls,elapsed_ns"
    )?;
    for row in results {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.len,
            row.n,
            row.r,
            row.query_index,
            row.n_found,
            row.dist_calls,
            row.relative_calls,
            row.elapsed.as_nanos()
        )?;
    }
    Ok(())
}

/// Writes a population dump: one permutation per line, space-separated.
pub fn write_population<W: Write>(records: &[UserRecord], mut out: W) -> Result<(), Error> {
    for rec in records {
        let mut line = String::with_capacity(rec.list.len() * 3);
        for (i, item) in rec.list.items().iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            let _ = fmt::Write::write_fmt(&mut line, format_args!("{item}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads a population dump back; line numbers become user ids.
pub fn read_population<R: BufRead>(input: R) -> Result<Vec<UserRecord>, Error> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let items: Vec<u32> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u32>().map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("{tok:?}: {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        let list = RankList::new(items).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(UserRecord::new(records.len() as u64, list));
    }
    Ok(records)
}
