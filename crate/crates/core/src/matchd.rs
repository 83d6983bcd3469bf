//! A minimal compatibility-matching service over the metric tree.
//!
//! Users register a full ranking of a fixed item vocabulary. A profile
//! update soft-deletes the old record and inserts the new one; once the
//! inactive fraction crosses a threshold the tree is rebuilt over the
//! active records. Match queries run a ball or ring query centered on
//! the user's own list and return the neighbours sorted by distance,
//! never including the querying user.
//!
//! The wire protocol is line-delimited over a local socket, one
//! tab-separated request per line, one response line back:
//!
//! ```text
//! REGISTER <user_id> <item> <item> ...   -> OK
//! UPDATE   <user_id> <item> <item> ...   -> OK
//! MATCH    <user_id> <r>                 -> OK <n> <uid>:<dist> ...
//! RING     <user_id> <r_lo> <r_hi>       -> OK <n> <uid>:<dist> ...
//! SNAPSHOT [<path>]                      -> OK <path>
//! ```
//!
//! Errors come back as `ERR <code> <detail>`. State is persisted as a
//! versioned snapshot; when persistence is enabled every mutation is
//! written out before it is acknowledged.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use crate::kendall::{self, RankList};
use crate::mtree::{self, Tree, TreeConfig, UserRecord};

const SNAPSHOT_HEADER: &str = "matchd-snapshot v1";

#[derive(Debug)]
pub enum Error {
    /// An item name that is not in the vocabulary.
    UnknownItem(String),
    /// A ranked list with the wrong number of items.
    WrongItemCount { expected: usize, got: usize },
    /// An item named twice in one ranked list.
    DuplicateItem(String),
    /// The user already has an active record.
    DuplicateUser(u64),
    /// No active record for this user.
    UnknownUser(u64),
    /// The vocabulary itself is unusable.
    InvalidVocabulary(String),
    /// A malformed protocol request.
    BadRequest(String),
    /// A snapshot file that fails the header or structure checks.
    Corrupt(String),
    Tree(mtree::Error),
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::UnknownItem(name) => write!(f, "unknown item {name:?}"),
            Error::WrongItemCount { expected, got } => {
                write!(f, "expected {expected} ranked items, got {got}")
            }
            Error::DuplicateItem(name) => write!(f, "item {name:?} ranked twice"),
            Error::DuplicateUser(id) => write!(f, "user {id} is already registered"),
            Error::UnknownUser(id) => write!(f, "no active user {id}"),
            Error::InvalidVocabulary(msg) => write!(f, "invalid vocabulary: {msg}"),
            Error::BadRequest(msg) => write!(f, "bad request: {msg}"),
            Error::Corrupt(msg) => write!(f, "corrupt snapshot: {msg}"),
            Error::Tree(e) => write!(f, "{e}"),
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

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Stable wire code for the ERR response.
    pub fn code(&self) -> &'static str {
        match self {
            Error::UnknownItem(_) => "unknown-item",
            Error::WrongItemCount { .. } => "bad-item-count",
            Error::DuplicateItem(_) => "duplicate-item",
            Error::DuplicateUser(_) => "duplicate-user",
            Error::UnknownUser(_) => "unknown-user",
            Error::InvalidVocabulary(_) => "bad-vocabulary",
            Error::BadRequest(_) => "bad-request",
            Error::Corrupt(_) => "corrupt-snapshot",
            Error::Tree(mtree::Error::RadiusOutOfRange { .. })
            | Error::Tree(mtree::Error::InvalidRing { .. }) => "bad-radius",
            Error::Tree(_) => "tree",
            Error::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceConfig {
    /// Rebuild over active records once `inactive / total` exceeds this.
    pub cleanup_threshold: f64,
    pub seed: u64,
    pub tree: TreeConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            cleanup_threshold: 0.25,
            seed: 0,
            tree: TreeConfig::default(),
        }
    }
}

/// The full service state: vocabulary, record tree, persistence target.
#[derive(Debug)]
pub struct ServiceState {
    vocabulary: Vec<String>,
    vocab_index: HashMap<String, u32>,
    tree: Tree,
    config: ServiceConfig,
    persist_path: Option<PathBuf>,
}

impl ServiceState {
    /// A fresh service over `vocabulary`; its length fixes the list
    /// length for every registered user.
    pub fn new(vocabulary: Vec<String>, config: ServiceConfig) -> Result<Self, Error> {
        let vocab_index = index_vocabulary(&vocabulary)?;
        let tree = Tree::empty(vocabulary.len(), config.seed, config.tree)?;
        Ok(ServiceState {
            vocabulary,
            vocab_index,
            tree,
            config,
            persist_path: None,
        })
    }

    /// Enables snapshot persistence; writes the current state immediately
    /// and after every subsequent mutation, before it is acknowledged.
    pub fn set_persistence(&mut self, path: PathBuf) -> Result<(), Error> {
        self.persist_path = Some(path);
        self.persist()
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn active_count(&self) -> usize {
        self.tree.active_count()
    }

    pub fn inactive_fraction(&self) -> f64 {
        if self.tree.is_empty() {
            0.0
        } else {
            self.tree.inactive_count() as f64 / self.tree.len() as f64
        }
    }

    /// Maps ranked item names onto a rank list using the vocabulary.
    pub fn list_from_names<S: AsRef<str>>(&self, names: &[S]) -> Result<RankList, Error> {
        if names.len() != self.vocabulary.len() {
            return Err(Error::WrongItemCount {
                expected: self.vocabulary.len(),
                got: names.len(),
            });
        }
        let mut items = Vec::with_capacity(names.len());
        for name in names {
            let name = name.as_ref();
            let idx = self
                .vocab_index
                .get(name)
                .copied()
                .ok_or_else(|| Error::UnknownItem(name.to_string()))?;
            items.push(idx);
        }
        RankList::new(items).map_err(|e| match e {
            kendall::Error::NotAPermutation { value } => {
                Error::DuplicateItem(self.vocabulary[value as usize].clone())
            }
            other => Error::InvalidVocabulary(other.to_string()),
        })
    }

    pub fn register<S: AsRef<str>>(&mut self, user_id: u64, names: &[S]) -> Result<(), Error> {
        let list = self.list_from_names(names)?;
        self.tree
            .insert(UserRecord::new(user_id, list))
            .map_err(|e| match e {
                mtree::Error::DuplicateActiveUser { user_id } => Error::DuplicateUser(user_id),
                other => Error::Tree(other),
            })?;
        self.persist()
    }

    /// Replaces the user's list: the old record is soft-deleted and kept
    /// as a routing object, the new one inserted. Fires a cleanup rebuild
    /// when the inactive fraction crosses the threshold.
    pub fn update<S: AsRef<str>>(&mut self, user_id: u64, names: &[S]) -> Result<(), Error> {
        let list = self.list_from_names(names)?;
        self.tree.deactivate(user_id).map_err(|e| match e {
            mtree::Error::UnknownUser { user_id } | mtree::Error::AlreadyInactive { user_id } => {
                Error::UnknownUser(user_id)
            }
            other => Error::Tree(other),
        })?;
        self.tree
            .insert(UserRecord::new(user_id, list))
            .expect("a just-deactivated user id inserts cleanly");
        if self.inactive_fraction() > self.config.cleanup_threshold {
            self.tree = self.tree.cleanup();
        }
        self.persist()
    }

    /// Rebuilds the tree over active records right now, regardless of the
    /// threshold, dropping the inactive routing objects.
    pub fn cleanup(&mut self) -> Result<(), Error> {
        self.tree = self.tree.cleanup();
        self.persist()
    }

    /// Active users within normalized distance `r` of the user's own
    /// list, excluding the user, ascending by distance with user id as
    /// the tie-break.
    pub fn match_ball(&self, user_id: u64, r: f64) -> Result<Vec<(u64, f64)>, Error> {
        self.match_ring(user_id, 0.0, r)
    }

    /// Ring variant of [`ServiceState::match_ball`]: distances within
    /// `[r_lo, r_hi]`, both inclusive.
    pub fn match_ring(&self, user_id: u64, r_lo: f64, r_hi: f64) -> Result<Vec<(u64, f64)>, Error> {
        let me = self
            .tree
            .active_record(user_id)
            .ok_or(Error::UnknownUser(user_id))?;
        let my_list = me.list.clone();
        let (ids, _) = self.tree.ring_query(&my_list, r_lo, r_hi)?;
        let n = my_list.len();
        let mut matches: Vec<(u64, f64)> = ids
            .into_iter()
            .filter(|&id| id != user_id)
            .map(|id| {
                let other = self
                    .tree
                    .active_record(id)
                    .expect("answer sets contain only active records");
                let d = kendall::distance(&my_list, &other.list)
                    .expect("stored lists share one length");
                let nd = kendall::normalize(d, n).expect("stored distance is in range");
                (id, nd)
            })
            .collect();
        matches.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        Ok(matches)
    }

    /// Writes the versioned snapshot: header, vocabulary block, then one
    /// `user_id<TAB>active<TAB>perm` line per record in insertion order.
    pub fn snapshot(&self, path: &Path) -> Result<(), Error> {
        let tmp = path.with_extension("tmp");
        {
            let file = fs::File::create(&tmp)?;
            let mut out = BufWriter::new(file);
            writeln!(out, "{SNAPSHOT_HEADER}")?;
            writeln!(out, "vocabulary {}", self.vocabulary.len())?;
            for name in &self.vocabulary {
                writeln!(out, "{name}")?;
            }
            writeln!(out, "records {}", self.tree.len())?;
            for rec in self.tree.records() {
                let perm: Vec<String> = rec.list.items().iter().map(u32::to_string).collect();
                writeln!(
                    out,
                    "{}\t{}\t{}",
                    rec.user_id,
                    u8::from(rec.active),
                    perm.join(" ")
                )?;
            }
            out.flush()?;
            out.get_ref().sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Rebuilds a service from a snapshot; records round-trip exactly,
    /// the tree is built fresh over them.
    pub fn restore(path: &Path, config: ServiceConfig) -> Result<Self, Error> {
        let file = fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let mut next = |what: &str| -> Result<String, Error> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Corrupt(format!("missing {what}")))
        };

        let header = next("header")?;
        if header != SNAPSHOT_HEADER {
            return Err(Error::Corrupt(format!("unrecognized header {header:?}")));
        }
        let vocab_count = parse_count(&next("vocabulary count")?, "vocabulary")?;
        let mut vocabulary = Vec::with_capacity(vocab_count);
        for _ in 0..vocab_count {
            vocabulary.push(next("vocabulary entry")?);
        }
        let record_count = parse_count(&next("record count")?, "records")?;
        let mut records = Vec::with_capacity(record_count);
        for i in 0..record_count {
            let line = next("record")?;
            records.push(parse_record(&line, i)?);
        }
        if lines.next().is_some() {
            return Err(Error::Corrupt("trailing data after records".into()));
        }

        let vocab_index = index_vocabulary(&vocabulary)?;
        let tree = if records.is_empty() {
            Tree::empty(vocabulary.len(), config.seed, config.tree)?
        } else {
            Tree::build_with(records, config.seed, config.tree)?
        };
        if tree.list_len() != vocabulary.len() {
            return Err(Error::Corrupt(format!(
                "records rank {} items but the vocabulary has {}",
                tree.list_len(),
                vocabulary.len()
            )));
        }
        Ok(ServiceState {
            vocabulary,
            vocab_index,
            tree,
            config,
            persist_path: Some(path.to_path_buf()),
        })
    }

    fn persist(&self) -> Result<(), Error> {
        match &self.persist_path {
            Some(path) => self.snapshot(path),
            None => Ok(()),
        }
    }
}

fn index_vocabulary(vocabulary: &[String]) -> Result<HashMap<String, u32>, Error> {
    if vocabulary.len() < 2 {
        return Err(Error::InvalidVocabulary(format!(
            "need at least 2 items, got {}",
            vocabulary.len()
        )));
    }
    let mut index = HashMap::with_capacity(vocabulary.len());
    for (i, name) in vocabulary.iter().enumerate() {
        if name.is_empty() {
            return Err(Error::InvalidVocabulary(format!("item {i} is empty")));
        }
        if name.contains('\t') || name.contains('\n') {
            return Err(Error::InvalidVocabulary(format!(
                "item {name:?} contains protocol delimiters"
            )));
        }
        if index.insert(name.clone(), i as u32).is_some() {
            return Err(Error::InvalidVocabulary(format!("item {name:?} repeated")));
        }
    }
    Ok(index)
}

fn parse_count(line: &str, expected_tag: &str) -> Result<usize, Error> {
    let (tag, value) = line
        .split_once(' ')
        .ok_or_else(|| Error::Corrupt(format!("malformed count line {line:?}")))?;
    if tag != expected_tag {
        return Err(Error::Corrupt(format!(
            "expected {expected_tag:?} section, found {tag:?}"
        )));
    }
    value
        .parse()
        .map_err(|e| Error::Corrupt(format!("bad {expected_tag} count: {e}")))
}

fn parse_record(line: &str, index: usize) -> Result<UserRecord, Error> {
    let bad = |msg: String| Error::Corrupt(format!("record {index}: {msg}"));
    let mut fields = line.split('\t');
    let user_id = fields
        .next()
        .ok_or_else(|| bad("missing user id".into()))?
        .parse::<u64>()
        .map_err(|e| bad(format!("user id: {e}")))?;
    let active = match fields.next() {
        Some("0") => false,
        Some("1") => true,
        other => return Err(bad(format!("active flag: {other:?}"))),
    };
    let perm = fields.next().ok_or_else(|| bad("missing list".into()))?;
    if fields.next().is_some() {
        return Err(bad("extra fields".into()));
    }
    let items: Vec<u32> = perm
        .split_whitespace()
        .map(|tok| tok.parse::<u32>().map_err(|e| bad(format!("{tok:?}: {e}"))))
        .collect::<Result<_, _>>()?;
    let list = RankList::new(items).map_err(|e| bad(e.to_string()))?;
    Ok(UserRecord {
        user_id,
        list,
        active,
    })
}

/// Executes one protocol line against the shared state and renders the
/// response line. Mutating verbs take the write lock; MATCH, RING, and
/// SNAPSHOT run under the read lock so queries proceed during snapshots.
pub fn handle_request(state: &RwLock<ServiceState>, line: &str) -> String {
    match dispatch(state, line) {
        Ok(payload) => match payload {
            Some(fields) => format!("OK\t{fields}"),
            None => "OK".to_string(),
        },
        Err(e) => format!("ERR\t{}\t{e}", e.code()),
    }
}

fn dispatch(state: &RwLock<ServiceState>, line: &str) -> Result<Option<String>, Error> {
    let mut fields = line.split('\t');
    let verb = fields
        .next()
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::BadRequest("empty request".into()))?;
    let rest: Vec<&str> = fields.collect();

    match verb {
        "REGISTER" | "UPDATE" => {
            let (uid, names) = rest
                .split_first()
                .ok_or_else(|| Error::BadRequest(format!("{verb} needs a user id")))?;
            let uid = parse_uid(uid)?;
            let mut guard = state.write().expect("service lock poisoned");
            if verb == "REGISTER" {
                guard.register(uid, names)?;
            } else {
                guard.update(uid, names)?;
            }
            Ok(None)
        }
        "MATCH" => {
            let [uid, r] = rest[..] else {
                return Err(Error::BadRequest("MATCH needs: user id, radius".into()));
            };
            let guard = state.read().expect("service lock poisoned");
            let matches = guard.match_ball(parse_uid(uid)?, parse_radius(r)?)?;
            Ok(Some(render_matches(&matches)))
        }
        "RING" => {
            let [uid, lo, hi] = rest[..] else {
                return Err(Error::BadRequest("RING needs: user id, two radii".into()));
            };
            let guard = state.read().expect("service lock poisoned");
            let matches =
                guard.match_ring(parse_uid(uid)?, parse_radius(lo)?, parse_radius(hi)?)?;
            Ok(Some(render_matches(&matches)))
        }
        "SNAPSHOT" => {
            let guard = state.read().expect("service lock poisoned");
            let path = match rest[..] {
                [] => guard
                    .persist_path
                    .clone()
                    .ok_or_else(|| Error::BadRequest("no snapshot path configured".into()))?,
                [p] => PathBuf::from(p),
                _ => return Err(Error::BadRequest("SNAPSHOT takes one optional path".into())),
            };
            guard.snapshot(&path)?;
            Ok(Some(path.display().to_string()))
        }
        other => Err(Error::BadRequest(format!("unknown verb {other:?}"))),
    }
}

fn parse_uid(field: &str) -> Result<u64, Error> {
    field
        .parse()
        .map_err(|e| Error::BadRequest(format!("user id {field:?}: {e}")))
}

fn parse_radius(field: &str) -> Result<f64, Error> {
    field
        .parse()
        .map_err(|e| Error::BadRequest(format!("radius {field:?}: {e}")))
}

fn render_matches(matches: &[(u64, f64)]) -> String {
    let mut out = matches.len().to_string();
    for (uid, dist) in matches {
        out.push('\t');
        let _ = fmt::Write::write_fmt(&mut out, format_args!("{uid}:{dist}"));
    }
    out
}

/// Accepts connections forever, one thread per client, each reading
/// request lines and writing one response line per request.
pub fn serve(listener: TcpListener, state: Arc<RwLock<ServiceState>>) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let state = Arc::clone(&state);
        std::thread::spawn(move || {
            let _ = handle_connection(stream, &state);
        });
    }
    Ok(())
}

fn handle_connection(stream: TcpStream, state: &RwLock<ServiceState>) -> io::Result<()> {
    let reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    for line in reader.lines() {
        let line = line?;
        let response = handle_request(state, &line);
        writer.write_all(response.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Reads a vocabulary file: one item name per line, blank lines and `#`
/// comments skipped.
pub fn load_vocabulary<R: BufRead>(input: R) -> Result<Vec<String>, Error> {
    let mut names = Vec::new();
    for line in input.lines() {
        let line = line?;
        let name = line.trim();
        if name.is_empty() || name.starts_with('#') {
            continue;
        }
        names.push(name.to_string());
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn vocab(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn four_item_service() -> ServiceState {
        ServiceState::new(
            vocab(&["movies", "sports", "music", "travel"]),
            ServiceConfig::default(),
        )
        .unwrap()
    }

    /// Independent answer check: scan the stored records with the
    /// quadratic distance and apply the self-exclusion and ordering rules.
    fn scan_matches(state: &ServiceState, user_id: u64, r_lo: f64, r_hi: f64) -> Vec<(u64, f64)> {
        let me = state.tree().active_record(user_id).unwrap().list.clone();
        let n = me.len();
        let lo = (r_lo * kendall::max_pairs(n) as f64 - 1e-9).ceil().max(0.0) as u64;
        let hi = mtree::radius_to_raw(r_hi, n).unwrap();
        let mut result: Vec<(u64, f64)> = state
            .tree()
            .records()
            .filter(|rec| rec.active && rec.user_id != user_id)
            .filter_map(|rec| {
                let d = kendall::distance_oracle(&rec.list, &me).unwrap();
                (lo <= d && d <= hi).then(|| (rec.user_id, kendall::normalize(d, n).unwrap()))
            })
            .collect();
        result.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        result
    }

    #[test]
    fn register_and_match_the_worked_example() {
        let mut state = four_item_service();
        state
            .register(1, &["movies", "sports", "music", "travel"])
            .unwrap();
        state
            .register(2, &["music", "travel", "movies", "sports"])
            .unwrap();
        // Four discordant pairs out of six -> distance 2/3, inside 0.67.
        let matches = state.match_ball(1, 0.67).unwrap();
        assert_eq!(matches, vec![(2, 2.0 / 3.0)]);
        let matches = state.match_ball(1, 0.5).unwrap();
        assert!(matches.is_empty());
    }

    #[test]
    fn registration_validates_names_and_users() {
        let mut state = four_item_service();
        let full = ["movies", "sports", "music", "travel"];
        state.register(1, &full).unwrap();

        assert!(matches!(
            state.register(1, &full),
            Err(Error::DuplicateUser(1))
        ));
        assert!(matches!(
            state.register(2, &["movies", "sports", "music"]),
            Err(Error::WrongItemCount { expected: 4, got: 3 })
        ));
        assert!(matches!(
            state.register(2, &["movies", "sports", "music", "biking"]),
            Err(Error::UnknownItem(_))
        ));
        assert!(matches!(
            state.register(2, &["movies", "sports", "music", "movies"]),
            Err(Error::DuplicateItem(_))
        ));
        // Nothing was inserted by the failed attempts.
        assert_eq!(state.active_count(), 1);
    }

    #[test]
    fn identical_lists_match_each_other_but_never_themselves() {
        let mut state = four_item_service();
        let list = ["travel", "music", "sports", "movies"];
        state.register(10, &list).unwrap();
        state.register(20, &list).unwrap();
        assert_eq!(state.match_ball(10, 0.0).unwrap(), vec![(20, 0.0)]);
        assert_eq!(state.match_ball(20, 0.0).unwrap(), vec![(10, 0.0)]);
    }

    #[test]
    fn update_moves_the_user_to_the_new_neighbourhood() {
        let mut state = four_item_service();
        let a = ["movies", "sports", "music", "travel"];
        let b = ["travel", "music", "sports", "movies"]; // a reversed
        state.register(1, &a).unwrap();
        state.register(2, &a).unwrap();
        state.register(3, &b).unwrap();

        state.update(1, &b).unwrap();
        assert_eq!(state.match_ball(1, 0.0).unwrap(), vec![(3, 0.0)]);
        let far = state.match_ball(1, 1.0).unwrap();
        assert_eq!(far, vec![(3, 0.0), (2, 1.0)]);

        assert!(matches!(state.update(99, &a), Err(Error::UnknownUser(99))));
    }

    #[test]
    fn random_updates_stay_oracle_consistent() {
        let names: Vec<String> = (0..8).map(|i| format!("item{i}")).collect();
        let mut state = ServiceState::new(names.clone(), ServiceConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ranked = |rng: &mut ChaCha8Rng| {
            let mut order: Vec<String> = names.clone();
            order.shuffle(rng);
            order
        };
        for uid in 0..150u64 {
            let list = ranked(&mut rng);
            state.register(uid, &list).unwrap();
        }
        for _ in 0..200 {
            let uid = rng.random_range(0..150);
            let list = ranked(&mut rng);
            state.update(uid, &list).unwrap();
        }
        for uid in (0..150).step_by(10) {
            let r = rng.random_range(0.0..=0.6);
            assert_eq!(state.match_ball(uid, r).unwrap(), scan_matches(&state, uid, 0.0, r));
        }
    }

    #[test]
    fn threshold_crossing_triggers_cleanup() {
        let names: Vec<String> = (0..6).map(|i| format!("item{i}")).collect();
        let config = ServiceConfig {
            cleanup_threshold: 0.2,
            ..ServiceConfig::default()
        };
        let mut state = ServiceState::new(names.clone(), config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for uid in 0..50u64 {
            let mut order = names.clone();
            order.shuffle(&mut rng);
            state.register(uid, &order).unwrap();
        }
        // Each update adds one inactive record; the fraction crosses 0.2
        // and the rebuild drops them again.
        for uid in 0..20u64 {
            let mut order = names.clone();
            order.shuffle(&mut rng);
            state.update(uid, &order).unwrap();
            assert!(state.inactive_fraction() <= 0.2 + 1e-12);
        }
        assert_eq!(state.active_count(), 50);
        for uid in (0..50).step_by(7) {
            assert_eq!(
                state.match_ball(uid, 0.4).unwrap(),
                scan_matches(&state, uid, 0.0, 0.4)
            );
        }
    }

    #[test]
    fn ring_returns_exactly_the_increment_between_two_balls() {
        let names: Vec<String> = (0..7).map(|i| format!("item{i}")).collect();
        let mut state = ServiceState::new(names.clone(), ServiceConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for uid in 0..120u64 {
            let mut order = names.clone();
            order.shuffle(&mut rng);
            state.register(uid, &order).unwrap();
        }
        let (r_prev, r_new) = (0.19, 0.41); // both fall strictly between raw distances
        let small: BTreeSet<u64> = state.match_ball(3, r_prev).unwrap().into_iter().map(|(u, _)| u).collect();
        let big: BTreeSet<u64> = state.match_ball(3, r_new).unwrap().into_iter().map(|(u, _)| u).collect();
        let ring: BTreeSet<u64> = state.match_ring(3, r_prev, r_new).unwrap().into_iter().map(|(u, _)| u).collect();
        let diff: BTreeSet<u64> = big.difference(&small).copied().collect();
        assert_eq!(ring, diff);
    }

    #[test]
    fn match_results_grow_as_prefix_sets() {
        let names: Vec<String> = (0..6).map(|i| format!("item{i}")).collect();
        let mut state = ServiceState::new(names.clone(), ServiceConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for uid in 0..80u64 {
            let mut order = names.clone();
            order.shuffle(&mut rng);
            state.register(uid, &order).unwrap();
        }
        let mut prev: Vec<(u64, f64)> = Vec::new();
        for r in [0.0, 0.1, 0.3, 0.6, 1.0] {
            let cur = state.match_ball(7, r).unwrap();
            assert_eq!(&cur[..prev.len()], &prev[..], "smaller answer is not a prefix at r={r}");
            prev = cur;
        }
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let dir = std::env::temp_dir().join(format!("matchd-test-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.snapshot");

        let names: Vec<String> = (0..6).map(|i| format!("item{i}")).collect();
        let mut state = ServiceState::new(names.clone(), ServiceConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for uid in 0..60u64 {
            let mut order = names.clone();
            order.shuffle(&mut rng);
            state.register(uid, &order).unwrap();
        }
        for uid in 0..10u64 {
            let mut order = names.clone();
            order.shuffle(&mut rng);
            state.update(uid, &order).unwrap();
        }

        state.snapshot(&path).unwrap();
        let restored = ServiceState::restore(&path, ServiceConfig::default()).unwrap();
        assert_eq!(restored.vocabulary(), state.vocabulary());
        assert_eq!(restored.tree().len(), state.tree().len());

        // Snapshot of the restored state is byte-identical.
        let again = dir.join("again.snapshot");
        restored.snapshot(&again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

        // Matching behaviour carried over exactly: 100 match calls.
        for uid in (0..60).step_by(3) {
            for r in [0.1, 0.2, 0.35, 0.5, 1.0] {
                assert_eq!(
                    restored.match_ball(uid, r).unwrap(),
                    state.match_ball(uid, r).unwrap()
                );
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn empty_state_round_trips_and_corruption_is_detected() {
        let dir = std::env::temp_dir().join(format!("matchd-empty-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.snapshot");

        let state = four_item_service();
        state.snapshot(&path).unwrap();
        let restored = ServiceState::restore(&path, ServiceConfig::default()).unwrap();
        assert_eq!(restored.tree().len(), 0);

        fs::write(&path, "not-a-snapshot v9\n").unwrap();
        assert!(matches!(
            ServiceState::restore(&path, ServiceConfig::default()),
            Err(Error::Corrupt(_))
        ));

        fs::write(
            &path,
            "matchd-snapshot v1\nvocabulary 2\na\nb\nrecords 1\n0\t2\t0 1\n",
        )
        .unwrap();
        assert!(matches!(
            ServiceState::restore(&path, ServiceConfig::default()),
            Err(Error::Corrupt(_))
        ));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn mutations_persist_before_acknowledgement() {
        let dir = std::env::temp_dir().join(format!("matchd-persist-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("live.snapshot");

        let mut state = four_item_service();
        state.set_persistence(path.clone()).unwrap();
        state
            .register(5, &["music", "movies", "travel", "sports"])
            .unwrap();

        // The snapshot on disk already contains the registration.
        let restored = ServiceState::restore(&path, ServiceConfig::default()).unwrap();
        assert!(restored.tree().active_record(5).is_some());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn protocol_round_trip() {
        let state = RwLock::new(four_item_service());
        assert_eq!(
            handle_request(&state, "REGISTER\t1\tmovies\tsports\tmusic\ttravel"),
            "OK"
        );
        assert_eq!(
            handle_request(&state, "REGISTER\t2\tmusic\ttravel\tmovies\tsports"),
            "OK"
        );
        let response = handle_request(&state, "MATCH\t1\t0.67");
        assert_eq!(response, format!("OK\t1\t2:{}", 2.0 / 3.0));
        assert_eq!(handle_request(&state, "MATCH\t1\t0.5"), "OK\t0");

        let response = handle_request(&state, "UPDATE\t1\tsports\tmovies\ttravel\tmusic");
        assert_eq!(response, "OK");
        let response = handle_request(&state, "RING\t1\t0\t1");
        assert!(response.starts_with("OK\t1\t2:"));

        assert!(handle_request(&state, "MATCH\t99\t0.1").starts_with("ERR\tunknown-user\t"));
        assert!(handle_request(&state, "MATCH\t1\t1.5").starts_with("ERR\tbad-radius\t"));
        assert!(handle_request(&state, "MATCH\t1").starts_with("ERR\tbad-request\t"));
        assert!(handle_request(&state, "NOPE").starts_with("ERR\tbad-request\t"));
        assert!(handle_request(&state, "REGISTER\t1\tmovies").starts_with("ERR\tbad-item-count\t"));
        assert!(handle_request(&state, "SNAPSHOT").starts_with("ERR\tbad-request\t"));
    }

    #[test]
    fn tcp_service_serves_concurrent_clients() {
        let state = Arc::new(RwLock::new(four_item_service()));
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        {
            let state = Arc::clone(&state);
            std::thread::spawn(move || serve(listener, state));
        }

        let send = |line: &str| -> String {
            let stream = TcpStream::connect(addr).unwrap();
            let mut writer = BufWriter::new(stream.try_clone().unwrap());
            let mut reader = BufReader::new(stream);
            writeln!(writer, "{line}").unwrap();
            writer.flush().unwrap();
            let mut response = String::new();
            reader.read_line(&mut response).unwrap();
            response.trim_end().to_string()
        };

        assert_eq!(send("REGISTER\t1\tmovies\tsports\tmusic\ttravel"), "OK");
        assert_eq!(send("REGISTER\t2\tmovies\tsports\tmusic\ttravel"), "OK");
        assert_eq!(send("MATCH\t1\t0"), "OK\t1\t2:0");
        assert!(send("REGISTER\t2\tmovies\tsports\tmusic\ttravel").starts_with("ERR\tduplicate-user"));
    }

    #[test]
    fn concurrent_matches_interleave_with_updates() {
        let names: Vec<String> = (0..6).map(|i| format!("item{i}")).collect();
        let mut state = ServiceState::new(names.clone(), ServiceConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for uid in 0..40u64 {
            let mut order = names.clone();
            order.shuffle(&mut rng);
            state.register(uid, &order).unwrap();
        }
        let state = Arc::new(RwLock::new(state));

        std::thread::scope(|scope| {
            for reader in 0..4u64 {
                let state = Arc::clone(&state);
                scope.spawn(move || {
                    for i in 0..50u64 {
                        let uid = (reader * 7 + i) % 40;
                        let response = handle_request(&state, &format!("MATCH\t{uid}\t0.4"));
                        assert!(response.starts_with("OK\t"), "{response}");
                    }
                });
            }
            let state = Arc::clone(&state);
            scope.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(31);
                for i in 0..20u64 {
                    let mut order = names.clone();
                    order.shuffle(&mut rng);
                    let line = format!("UPDATE\t{}\t{}", i % 40, order.join("\t"));
                    assert_eq!(handle_request(&state, &line), "OK");
                }
            });
        });

        // Every answer is still scan-exact once the dust settles.
        let state = state.read().unwrap();
        for uid in 0..40 {
            assert_eq!(
                state.match_ball(uid, 0.4).unwrap(),
                scan_matches(&state, uid, 0.0, 0.4)
            );
        }
    }

    #[test]
    fn vocabulary_loading_and_validation() {
        let text = "# interests\nmovies\n  sports  \n\nmusic\n";
        let names = load_vocabulary(text.as_bytes()).unwrap();
        assert_eq!(names, vec!["movies", "sports", "music"]);

        assert!(matches!(
            ServiceState::new(vocab(&["solo"]), ServiceConfig::default()),
            Err(Error::InvalidVocabulary(_))
        ));
        assert!(matches!(
            ServiceState::new(vocab(&["a", "a"]), ServiceConfig::default()),
            Err(Error::InvalidVocabulary(_))
        ));
    }
}
