//! Cascading metric tree over rank lists.
//!
//! Construction picks a random vantage record per node, splits the
//! remaining records at the median distance into an inner and an outer
//! half, and stores four radii per node: the minimum and maximum distance
//! over all descendants (`r_min`, `r_max`), the maximum over the inner
//! half (`r_inner`), and the minimum over the outer half (`r_outer`).
//! Ball and ring range queries prune subtrees through those radii and the
//! triangle inequality, and additionally carry per-record distances to
//! ancestor vantage points ("cascading" bounds) that can prove a record
//! inside or outside the query range without evaluating the distance.
//!
//! All radii and thresholds are raw integer discordant-pair counts;
//! normalized radii from the public API are converted once per query by
//! [`radius_to_raw`].

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::kendall::{self, RankList, RawDistance};

/// Absorbs representation error when a normalized radius was itself
/// computed as a ratio of small integers.
const RADIUS_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Build was given no records.
    EmptyPopulation,
    /// Records in one population must share a single list length.
    MixedLengths { expected: usize, got: usize },
    /// A query or inserted list does not match the tree's list length.
    LengthMismatch { expected: usize, got: usize },
    /// An active record with this user id already exists.
    DuplicateActiveUser { user_id: u64 },
    /// No record with this user id exists.
    UnknownUser { user_id: u64 },
    /// The record is already inactive.
    AlreadyInactive { user_id: u64 },
    /// Normalized radii must lie in `[0, 1]`.
    RadiusOutOfRange { value: f64 },
    /// Ring bounds must satisfy `lo <= hi`.
    InvalidRing { lo: f64, hi: f64 },
    /// List length must be at least 2.
    ShortList { len: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyPopulation => write!(f, "cannot build a tree over zero records"),
            Error::MixedLengths { expected, got } => {
                write!(f, "mixed list lengths in population: {expected} vs {got}")
            }
            Error::LengthMismatch { expected, got } => {
                write!(f, "list length {got} does not match tree length {expected}")
            }
            Error::DuplicateActiveUser { user_id } => {
                write!(f, "user {user_id} already has an active record")
            }
            Error::UnknownUser { user_id } => write!(f, "unknown user {user_id}"),
            Error::AlreadyInactive { user_id } => {
                write!(f, "user {user_id} is already inactive")
            }
            Error::RadiusOutOfRange { value } => {
                write!(f, "radius {value} outside [0, 1]")
            }
            Error::InvalidRing { lo, hi } => {
                write!(f, "ring bounds inverted: {lo} > {hi}")
            }
            Error::ShortList { len } => {
                write!(f, "list length must be at least 2, got {len}")
            }
        }
    }
}

impl std::error::Error for Error {}

/// One stored user: an opaque id, the ranked list, and an active flag.
/// Inactive records stay in the tree as routing objects but never appear
/// in answer sets.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub user_id: u64,
    pub list: RankList,
    pub active: bool,
}

impl UserRecord {
    pub fn new(user_id: u64, list: RankList) -> Self {
        UserRecord {
            user_id,
            list,
            active: true,
        }
    }
}

/// Tuning knobs for tree construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeConfig {
    /// Subtrees of at most this many records are stored as flat buckets.
    /// `1` recovers the pure binary tree.
    pub bucket_capacity: usize,
    /// How many of its nearest ancestors each stored record keeps a
    /// distance to. `0` disables cascading bounds.
    pub cascade_depth: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            bucket_capacity: 16,
            cascade_depth: 8,
        }
    }
}

/// A ball or ring query: normalized radii `r_lo <= r_hi`, both inclusive.
/// A ball is the special case `r_lo = 0`.
#[derive(Debug, Clone)]
pub struct QuerySpec {
    pub q: RankList,
    pub r_lo: f64,
    pub r_hi: f64,
}

impl QuerySpec {
    pub fn ball(q: RankList, r: f64) -> Self {
        QuerySpec { q, r_lo: 0.0, r_hi: r }
    }

    pub fn ring(q: RankList, r_lo: f64, r_hi: f64) -> Self {
        QuerySpec { q, r_lo, r_hi }
    }
}

/// Per-query instrumentation: answer size, distance evaluations, wall time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryStats {
    pub n_found: usize,
    pub dist_calls: u64,
    pub elapsed: Duration,
}

/// Distance from a stored record to the ancestor vantage at `depth` on its
/// root path. Recorded during construction and insertion, consumed by the
/// cascading include/exclude tests at query time.
#[derive(Debug, Clone, Copy)]
struct CascadeEntry {
    depth: u32,
    dist: RawDistance,
}

#[derive(Debug)]
struct StoredRecord {
    record: UserRecord,
    cascade: Vec<CascadeEntry>,
}

#[derive(Debug)]
enum Subtree {
    Empty,
    /// Record indices, in ascending insertion order.
    Bucket(Vec<u32>),
    Node(Box<Node>),
}

#[derive(Debug)]
struct Node {
    vantage: u32,
    /// Minimum distance from the vantage to any non-vantage descendant.
    r_min: RawDistance,
    /// Maximum distance from the vantage to any non-vantage descendant.
    r_max: RawDistance,
    /// Maximum distance from the vantage to the inner half.
    r_inner: RawDistance,
    /// Minimum distance from the vantage to the outer half; `None` while
    /// the outer side is empty, in which case the outer descent test never
    /// passes.
    r_outer: Option<RawDistance>,
    inner: Subtree,
    outer: Subtree,
}

/// Largest raw threshold `R` such that "normalized distance <= r" is
/// equivalent to "raw distance <= R" for lists of length `n`.
pub fn radius_to_raw(r: f64, n: usize) -> Result<RawDistance, Error> {
    if n < 2 {
        return Err(Error::ShortList { len: n });
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::RadiusOutOfRange { value: r });
    }
    let max = kendall::max_pairs(n);
    let raw = (r * max as f64 + RADIUS_EPSILON).floor() as u64;
    Ok(raw.min(max))
}

/// Smallest raw threshold `R` such that "normalized distance >= r" is
/// equivalent to "raw distance >= R". Lower-bound counterpart of
/// [`radius_to_raw`] for ring queries.
fn radius_to_raw_lower(r: f64, n: usize) -> RawDistance {
    let max = kendall::max_pairs(n);
    let raw = (r * max as f64 - RADIUS_EPSILON).ceil().max(0.0) as u64;
    raw.min(max)
}

/// The cascading metric tree. Owns its record store; queries are
/// read-only, mutations require exclusive access.
#[derive(Debug)]
pub struct Tree {
    records: Vec<StoredRecord>,
    /// user id -> record index, active records only.
    by_user: HashMap<u64, u32>,
    root: Subtree,
    list_len: usize,
    seed: u64,
    config: TreeConfig,
    rng: ChaCha8Rng,
    build_calls: u64,
    inactive: usize,
}

impl Tree {
    /// Builds a tree over `records` with default configuration. The record
    /// collection may include inactive records (they become routing
    /// objects); user ids must be unique among the active ones.
    pub fn build(records: Vec<UserRecord>, seed: u64) -> Result<Self, Error> {
        Self::build_with(records, seed, TreeConfig::default())
    }

    pub fn build_with(
        records: Vec<UserRecord>,
        seed: u64,
        config: TreeConfig,
    ) -> Result<Self, Error> {
        let first = records.first().ok_or(Error::EmptyPopulation)?;
        let list_len = first.list.len();
        let mut by_user = HashMap::new();
        let mut inactive = 0usize;
        for (i, rec) in records.iter().enumerate() {
            if rec.list.len() != list_len {
                return Err(Error::MixedLengths {
                    expected: list_len,
                    got: rec.list.len(),
                });
            }
            if rec.active {
                if by_user.insert(rec.user_id, i as u32).is_some() {
                    return Err(Error::DuplicateActiveUser {
                        user_id: rec.user_id,
                    });
                }
            } else {
                inactive += 1;
            }
        }

        let mut stored: Vec<StoredRecord> = records
            .into_iter()
            .map(|record| StoredRecord {
                record,
                cascade: Vec::new(),
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut build_calls = 0u64;
        let set: Vec<u32> = (0..stored.len() as u32).collect();
        let root = build_subtree(&mut stored, set, 0, &config, &mut rng, &mut build_calls);

        Ok(Tree {
            records: stored,
            by_user,
            root,
            list_len,
            seed,
            config,
            rng,
            build_calls,
            inactive,
        })
    }

    /// An empty tree accepting lists of length `list_len`. Build rejects
    /// empty populations, so this is the explicit starting point for
    /// incrementally populated trees and the result of cleaning up a tree
    /// with no active records.
    pub fn empty(list_len: usize, seed: u64, config: TreeConfig) -> Result<Self, Error> {
        if list_len < 2 {
            return Err(Error::ShortList { len: list_len });
        }
        Ok(Tree {
            records: Vec::new(),
            by_user: HashMap::new(),
            root: Subtree::Empty,
            list_len,
            seed,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            build_calls: 0,
            inactive: 0,
        })
    }

    /// Total stored records, active and inactive.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.records.len() - self.inactive
    }

    pub fn inactive_count(&self) -> usize {
        self.inactive
    }

    pub fn list_len(&self) -> usize {
        self.list_len
    }

    pub fn config(&self) -> TreeConfig {
        self.config
    }

    /// Distance evaluations spent building the tree, including insert
    /// routing and bucket splits since.
    pub fn build_dist_calls(&self) -> u64 {
        self.build_calls
    }

    /// All stored records in insertion order, inactive ones included.
    pub fn records(&self) -> impl Iterator<Item = &UserRecord> {
        self.records.iter().map(|s| &s.record)
    }

    /// The active record for `user_id`, if any.
    pub fn active_record(&self, user_id: u64) -> Option<&UserRecord> {
        self.by_user
            .get(&user_id)
            .map(|&i| &self.records[i as usize].record)
    }

    /// Range query with cascading ancestor bounds enabled.
    pub fn query(&self, spec: &QuerySpec) -> Result<(Vec<u64>, QueryStats), Error> {
        self.run_query(spec, self.config.cascade_depth > 0)
    }

    /// Range query using only the per-node radius conditions. Answers are
    /// identical to [`Tree::query`]; only `dist_calls` differs.
    pub fn query_uncascaded(&self, spec: &QuerySpec) -> Result<(Vec<u64>, QueryStats), Error> {
        self.run_query(spec, false)
    }

    /// Active records whose normalized distance to `q` is at most `r`.
    pub fn ball_query(&self, q: &RankList, r: f64) -> Result<(Vec<u64>, QueryStats), Error> {
        self.query(&QuerySpec::ball(q.clone(), r))
    }

    /// Active records whose normalized distance to `q` lies in
    /// `[r_lo, r_hi]`, both ends inclusive.
    pub fn ring_query(
        &self,
        q: &RankList,
        r_lo: f64,
        r_hi: f64,
    ) -> Result<(Vec<u64>, QueryStats), Error> {
        self.query(&QuerySpec::ring(q.clone(), r_lo, r_hi))
    }

    fn run_query(&self, spec: &QuerySpec, cascade: bool) -> Result<(Vec<u64>, QueryStats), Error> {
        if spec.q.len() != self.list_len {
            return Err(Error::LengthMismatch {
                expected: self.list_len,
                got: spec.q.len(),
            });
        }
        if !(0.0..=1.0).contains(&spec.r_lo) {
            return Err(Error::RadiusOutOfRange { value: spec.r_lo });
        }
        if !(0.0..=1.0).contains(&spec.r_hi) {
            return Err(Error::RadiusOutOfRange { value: spec.r_hi });
        }
        if spec.r_lo > spec.r_hi {
            return Err(Error::InvalidRing {
                lo: spec.r_lo,
                hi: spec.r_hi,
            });
        }

        let started = Instant::now();
        let mut ctx = QueryCtx {
            lo: radius_to_raw_lower(spec.r_lo, self.list_len),
            hi: radius_to_raw(spec.r_hi, self.list_len)?,
            cascade,
            dist_calls: 0,
            found: Vec::new(),
            path: Vec::new(),
        };
        self.visit(&self.root, &spec.q, &mut ctx);
        let stats = QueryStats {
            n_found: ctx.found.len(),
            dist_calls: ctx.dist_calls,
            elapsed: started.elapsed(),
        };
        Ok((ctx.found, stats))
    }

    fn visit(&self, sub: &Subtree, q: &RankList, ctx: &mut QueryCtx) {
        match sub {
            Subtree::Empty => {}
            Subtree::Bucket(entries) => {
                for &ri in entries {
                    self.check_record(ri, q, ctx);
                }
            }
            Subtree::Node(node) => {
                let stored = &self.records[node.vantage as usize];
                ctx.dist_calls += 1;
                let d = kendall::distance_unchecked(&stored.record.list, q);

                // Cond 0: report the vantage itself.
                if stored.record.active && ctx.lo <= d && d <= ctx.hi {
                    ctx.found.push(stored.record.user_id);
                }

                // Cond 1: the whole subtree is farther out than the range.
                // Cond 2: the whole subtree is closer in than the range.
                // Third test: the subtree's outer shell cannot reach the
                // ring's lower bound.
                let prune = node.r_min > d + ctx.hi
                    || d > node.r_max + ctx.hi
                    || d + node.r_max < ctx.lo;
                if prune {
                    return;
                }

                ctx.path.push(d);
                // Cond 3: the range can intersect the inner shell.
                if d <= node.r_inner + ctx.hi && d + node.r_inner >= ctx.lo {
                    self.visit(&node.inner, q, ctx);
                }
                // Cond 4: the range can reach past the outer boundary.
                if let Some(r_outer) = node.r_outer {
                    if d + ctx.hi >= r_outer {
                        self.visit(&node.outer, q, ctx);
                    }
                }
                ctx.path.pop();
            }
        }
    }

    fn check_record(&self, ri: u32, q: &RankList, ctx: &mut QueryCtx) {
        let stored = &self.records[ri as usize];
        if !stored.record.active {
            return;
        }
        if ctx.cascade {
            // Triangle-inequality bounds on d(q, record) through every
            // ancestor whose distance to q is already on the path.
            let mut lower: u64 = 0;
            let mut upper: u64 = u64::MAX;
            for entry in &stored.cascade {
                debug_assert!((entry.depth as usize) < ctx.path.len());
                let dq = ctx.path[entry.depth as usize];
                lower = lower.max(dq.abs_diff(entry.dist));
                upper = upper.min(dq + entry.dist);
            }
            if lower > ctx.hi || upper < ctx.lo {
                return;
            }
            if lower >= ctx.lo && upper <= ctx.hi {
                ctx.found.push(stored.record.user_id);
                return;
            }
        }
        ctx.dist_calls += 1;
        let d = kendall::distance_unchecked(&stored.record.list, q);
        if ctx.lo <= d && d <= ctx.hi {
            ctx.found.push(stored.record.user_id);
        }
    }

    /// Routes `record` from the root along the existing split radii and
    /// attaches it at the bottom, widening node radii on the way down. A
    /// bucket that would overflow is rebuilt in place as a subtree.
    pub fn insert(&mut self, record: UserRecord) -> Result<(), Error> {
        if record.list.len() != self.list_len {
            return Err(Error::LengthMismatch {
                expected: self.list_len,
                got: record.list.len(),
            });
        }
        if record.active && self.by_user.contains_key(&record.user_id) {
            return Err(Error::DuplicateActiveUser {
                user_id: record.user_id,
            });
        }

        let idx = self.records.len() as u32;
        if record.active {
            self.by_user.insert(record.user_id, idx);
        } else {
            self.inactive += 1;
        }
        self.records.push(StoredRecord {
            record,
            cascade: Vec::new(),
        });

        let Tree {
            ref mut records,
            ref mut root,
            ref mut rng,
            ref mut build_calls,
            ref config,
            ..
        } = *self;
        route_insert(root, records, idx, 0, config, rng, build_calls);
        Ok(())
    }

    /// Flags the user's active record inactive. The record keeps routing
    /// queries but no longer appears in answer sets.
    pub fn deactivate(&mut self, user_id: u64) -> Result<(), Error> {
        match self.by_user.remove(&user_id) {
            Some(idx) => {
                self.records[idx as usize].record.active = false;
                self.inactive += 1;
                Ok(())
            }
            None => {
                if self.records.iter().any(|s| s.record.user_id == user_id) {
                    Err(Error::AlreadyInactive { user_id })
                } else {
                    Err(Error::UnknownUser { user_id })
                }
            }
        }
    }

    /// A freshly built tree over only the active records, dropping
    /// inactive routing objects. Returns the empty sentinel when nothing
    /// is active.
    pub fn cleanup(&self) -> Tree {
        let active: Vec<UserRecord> = self
            .records
            .iter()
            .filter(|s| s.record.active)
            .map(|s| s.record.clone())
            .collect();
        if active.is_empty() {
            return Tree::empty(self.list_len, self.seed, self.config)
                .expect("existing tree has a valid list length");
        }
        Tree::build_with(active, self.seed, self.config)
            .expect("active records of a valid tree rebuild cleanly")
    }

    /// Deterministic one-node-per-line text rendering for golden tests:
    /// `depth user_id r_min r_inner r_outer r_max`, preorder, inner side
    /// first. Bucket entries print `-` for the radii; an empty outer side
    /// prints `inf`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        out.push_str("# rankmatch tree v1\n");
        out.push_str("# radii cover non-vantage descendants\n");
        self.dump_subtree(&self.root, 0, &mut out);
        out
    }

    fn dump_subtree(&self, sub: &Subtree, depth: usize, out: &mut String) {
        match sub {
            Subtree::Empty => {}
            Subtree::Bucket(entries) => {
                for &ri in entries {
                    let rec = &self.records[ri as usize].record;
                    let _ = writeln!(out, "{depth} {} - - - -", rec.user_id);
                }
            }
            Subtree::Node(node) => {
                let rec = &self.records[node.vantage as usize].record;
                let outer = match node.r_outer {
                    Some(r) => r.to_string(),
                    None => "inf".to_string(),
                };
                let _ = writeln!(
                    out,
                    "{depth} {} {} {} {} {}",
                    rec.user_id, node.r_min, node.r_inner, outer, node.r_max
                );
                self.dump_subtree(&node.inner, depth + 1, out);
                self.dump_subtree(&node.outer, depth + 1, out);
            }
        }
    }
}

struct QueryCtx {
    lo: RawDistance,
    hi: RawDistance,
    cascade: bool,
    dist_calls: u64,
    found: Vec<u64>,
    /// `path[depth]` = distance from the vantage at `depth` to the query.
    path: Vec<RawDistance>,
}

/// Appends `(depth, dist)` to a record's ancestor-distance list, keeping
/// only the `limit` nearest (deepest) ancestors.
fn push_cascade(cascade: &mut Vec<CascadeEntry>, depth: u32, dist: RawDistance, limit: usize) {
    if limit == 0 {
        return;
    }
    if cascade.len() == limit {
        cascade.remove(0);
    }
    cascade.push(CascadeEntry { depth, dist });
}

fn build_subtree(
    records: &mut [StoredRecord],
    mut set: Vec<u32>,
    depth: u32,
    config: &TreeConfig,
    rng: &mut ChaCha8Rng,
    build_calls: &mut u64,
) -> Subtree {
    if set.is_empty() {
        return Subtree::Empty;
    }
    if set.len() <= config.bucket_capacity.max(1) {
        return Subtree::Bucket(set);
    }

    let vantage = set.remove(rng.random_range(0..set.len()));
    let vantage_list = records[vantage as usize].record.list.clone();

    // Distances in set order; the set is kept in ascending insertion
    // order, so the stable sort breaks distance ties by insertion order.
    let mut by_dist: Vec<(u32, RawDistance)> = set
        .iter()
        .map(|&ri| {
            *build_calls += 1;
            let d = kendall::distance_unchecked(&vantage_list, &records[ri as usize].record.list);
            push_cascade(
                &mut records[ri as usize].cascade,
                depth,
                d,
                config.cascade_depth,
            );
            (ri, d)
        })
        .collect();
    by_dist.sort_by_key(|&(_, d)| d);

    let m = by_dist.len();
    let k = m.div_ceil(2);
    let r_min = by_dist[0].1;
    let r_max = by_dist[m - 1].1;
    let r_inner = by_dist[k - 1].1;
    let r_outer = if k < m { Some(by_dist[k].1) } else { None };

    let mut inner_set: Vec<u32> = by_dist[..k].iter().map(|&(ri, _)| ri).collect();
    let mut outer_set: Vec<u32> = by_dist[k..].iter().map(|&(ri, _)| ri).collect();
    inner_set.sort_unstable();
    outer_set.sort_unstable();

    let inner = build_subtree(records, inner_set, depth + 1, config, rng, build_calls);
    let outer = build_subtree(records, outer_set, depth + 1, config, rng, build_calls);

    Subtree::Node(Box::new(Node {
        vantage,
        r_min,
        r_max,
        r_inner,
        r_outer,
        inner,
        outer,
    }))
}

fn route_insert(
    sub: &mut Subtree,
    records: &mut [StoredRecord],
    idx: u32,
    depth: u32,
    config: &TreeConfig,
    rng: &mut ChaCha8Rng,
    build_calls: &mut u64,
) {
    match sub {
        Subtree::Empty => {
            *sub = Subtree::Bucket(vec![idx]);
        }
        Subtree::Bucket(entries) => {
            if entries.len() < config.bucket_capacity.max(1) {
                entries.push(idx);
            } else {
                // Overflow: rebuild this bucket plus the newcomer as a
                // subtree rooted at the same depth. Existing cascade
                // entries above this point stay valid; deeper ones are
                // appended by the rebuild.
                let mut members = std::mem::take(entries);
                members.push(idx);
                *sub = build_subtree(records, members, depth, config, rng, build_calls);
            }
        }
        Subtree::Node(node) => {
            *build_calls += 1;
            let d = kendall::distance_unchecked(
                &records[node.vantage as usize].record.list,
                &records[idx as usize].record.list,
            );
            push_cascade(&mut records[idx as usize].cascade, depth, d, config.cascade_depth);
            node.r_min = node.r_min.min(d);
            node.r_max = node.r_max.max(d);
            if d <= node.r_inner {
                route_insert(&mut node.inner, records, idx, depth + 1, config, rng, build_calls);
            } else {
                node.r_outer = Some(match node.r_outer {
                    Some(r) => r.min(d),
                    None => d,
                });
                route_insert(&mut node.outer, records, idx, depth + 1, config, rng, build_calls);
            }
        }
    }
}
