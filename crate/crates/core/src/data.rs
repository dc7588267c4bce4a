//! Interaction logs, chronological sequences with leave-one-out splits and
//! the synthetic hierarchical generator.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u64,
    pub item: u64,
    pub timestamp: i64,
}

/// Parsed interaction records in input order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    /// Rows that could not be parsed and were skipped.
    pub malformed: usize,
}

const REQUIRED: [&str; 3] = ["user_id", "item_id", "timestamp"];

/// Reads header-bearing comma-separated text with columns `user_id`,
/// `item_id`, `timestamp`; extra columns are ignored.
pub fn parse_interactions<R: Read>(reader: R) -> Result<InteractionLog> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?
        .clone();
    let mut cols = [0usize; 3];
    for (slot, name) in cols.iter_mut().zip(REQUIRED) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("missing required column '{name}'")))?;
    }
    let mut log = InteractionLog::default();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) if e.is_io_error() => return Err(Error::Format(e.to_string())),
            Err(_) => {
                log.malformed += 1;
                continue;
            }
        };
        let field = |i: usize| row.get(cols[i]);
        let parsed = (|| {
            Some(Interaction {
                user: field(0)?.parse().ok()?,
                item: field(1)?.parse().ok()?,
                timestamp: field(2)?.parse().ok()?,
            })
        })();
        match parsed {
            Some(r) => log.records.push(r),
            None => log.malformed += 1,
        }
    }
    Ok(log)
}

pub fn load_interactions(path: &Path) -> Result<InteractionLog> {
    parse_interactions(std::fs::File::open(path)?)
}

/// Writes a log in the input format.
pub fn write_interactions(log: &InteractionLog, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(REQUIRED).map_err(io)?;
    for r in &log.records {
        w.write_record([r.user.to_string(), r.item.to_string(), r.timestamp.to_string()])
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// One user's leave-one-out split, in contiguous item ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: u64,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl UserSequence {
    /// Model input when predicting the validation target.
    pub fn valid_input(&self) -> Vec<usize> {
        self.train.clone()
    }

    /// Model input when predicting the test target.
    pub fn test_input(&self) -> Vec<usize> {
        let mut v = self.train.clone();
        v.push(self.valid);
        v
    }
}

pub const DATASET_FORMAT: &str = "hmamba-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Chronological per-user sequences over a contiguous 1-based vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceDataset {
    pub format: String,
    pub version: u32,
    pub max_seq_len: usize,
    /// `item_ids[i]` is the original id of contiguous item `i + 1`.
    pub item_ids: Vec<u64>,
    pub users: Vec<UserSequence>,
}

impl SequenceDataset {
    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Catalog size including the padding id.
    pub fn vocab_size(&self) -> usize {
        self.item_ids.len() + 1
    }

    /// Contiguous id of an original item id.
    pub fn index_of(&self, original: u64) -> Option<usize> {
        self.item_ids.binary_search(&original).ok().map(|i| i + 1)
    }

    /// Sequences used for training: each user's train prefix.
    pub fn train_sequences(&self) -> Vec<Vec<usize>> {
        self.users.iter().map(|u| u.train.clone()).collect()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let ds: SequenceDataset = serde_json::from_slice(bytes)?;
        if ds.format != DATASET_FORMAT {
            return Err(Error::Format(format!("not a dataset file (format '{}')", ds.format)));
        }
        if ds.version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", ds.version)));
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.item_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("vocabulary must be strictly increasing".into()));
        }
        let n = self.n_items();
        for u in &self.users {
            for &i in u.train.iter().chain([&u.valid, &u.test]) {
                if i == 0 || i > n {
                    return Err(Error::Vocabulary { id: i, vocab: n + 1 });
                }
            }
            if u.train.is_empty() {
                return Err(Error::Format(format!("user {} has an empty train prefix", u.user)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    pub min_user_len: usize,
    pub min_item_count: usize,
    pub max_seq_len: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            min_user_len: 3,
            min_item_count: 1,
            max_seq_len: 50,
        }
    }
}

/// Orders each user's events by timestamp (ties keep input order), drops
/// rare items and short users, keeps the latest `max_seq_len + 2` events and
/// splits them leave-one-out.
pub fn build_sequences(log: &InteractionLog, opts: BuildOptions) -> Result<SequenceDataset> {
    if opts.min_user_len < 3 {
        return Err(Error::InvalidArgument("min_user_len must be at least 3 for leave-one-out".into()));
    }
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for r in &log.records {
        *counts.entry(r.item).or_default() += 1;
    }
    let mut per_user: BTreeMap<u64, Vec<(i64, u64)>> = BTreeMap::new();
    for r in &log.records {
        if counts[&r.item] >= opts.min_item_count {
            per_user.entry(r.user).or_default().push((r.timestamp, r.item));
        }
    }
    let keep = opts.max_seq_len + 2;
    let mut kept: Vec<(u64, Vec<u64>)> = Vec::new();
    for (user, mut events) in per_user {
        if events.len() < opts.min_user_len {
            continue;
        }
        events.sort_by_key(|&(t, _)| t);
        let items: Vec<u64> = events[events.len().saturating_sub(keep)..].iter().map(|&(_, i)| i).collect();
        kept.push((user, items));
    }
    if kept.is_empty() {
        return Err(Error::EmptyDataset("no user survives filtering".into()));
    }
    let mut item_ids: Vec<u64> = kept.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    item_ids.sort_unstable();
    item_ids.dedup();
    let index: HashMap<u64, usize> = item_ids.iter().enumerate().map(|(i, &v)| (v, i + 1)).collect();
    let users = kept
        .into_iter()
        .map(|(user, items)| {
            let mut ids: Vec<usize> = items.iter().map(|i| index[i]).collect();
            let test = ids.pop().expect("at least three events");
            let valid = ids.pop().expect("at least three events");
            UserSequence {
                user,
                train: ids,
                valid,
                test,
            }
        })
        .collect();
    Ok(SequenceDataset {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        max_seq_len: opts.max_seq_len,
        item_ids,
        users,
    })
}

/// Probability that a synthetic step stays inside the user's home subtree.
pub const STAY_PROBABILITY: f64 = 0.9;

/// Ground truth of a synthetic dataset: a complete `branching`-ary tree whose
/// leaves are the items `1..=branching^depth` in left-to-right order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyTree {
    pub depth: usize,
    pub branching: usize,
    /// `(user, home subtree index)`, where subtrees are the root's children.
    pub homes: Vec<(u64, usize)>,
}

impl HierarchyTree {
    pub fn n_leaves(&self) -> usize {
        self.branching.pow(self.depth as u32)
    }

    /// Leaves per home subtree.
    pub fn subtree_size(&self) -> usize {
        self.branching.pow(self.depth as u32 - 1)
    }

    /// Index among the root's children of the subtree containing `item`.
    pub fn subtree_of(&self, item: u64) -> usize {
        (item as usize - 1) / self.subtree_size()
    }

    /// Ancestor of `item` at `level` (0 is the root), as an index within that level.
    pub fn ancestor(&self, item: u64, level: usize) -> usize {
        (item as usize - 1) / self.branching.pow((self.depth - level) as u32)
    }

    /// Number of tree edges between two leaves.
    pub fn tree_distance(&self, a: u64, b: u64) -> usize {
        let common = (0..=self.depth)
            .rev()
            .find(|&l| self.ancestor(a, l) == self.ancestor(b, l))
            .unwrap_or(0);
        2 * (self.depth - common)
    }
}

/// Users walk over the leaves of a complete tree. Each user draws a home
/// subtree among the root's children; every step lands uniformly inside it
/// with probability [`STAY_PROBABILITY`] and uniformly outside it otherwise.
/// Timestamps are step indices.
pub fn synth_hierarchical_dataset(
    seed: u64,
    depth: usize,
    branching: usize,
    n_users: usize,
    seq_len: usize,
) -> Result<(InteractionLog, HierarchyTree)> {
    if depth < 1 || branching < 2 {
        return Err(Error::InvalidArgument("depth must be >= 1 and branching >= 2".into()));
    }
    let n_leaves = branching
        .checked_pow(depth as u32)
        .ok_or_else(|| Error::InvalidArgument("tree too large".into()))?;
    let size = n_leaves / branching;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = InteractionLog::default();
    let mut homes = Vec::with_capacity(n_users);
    for u in 0..n_users {
        let user = u as u64 + 1;
        let home = rng.random_range(0..branching);
        homes.push((user, home));
        let lo = home * size;
        for t in 0..seq_len {
            let leaf = if rng.random::<f64>() < STAY_PROBABILITY {
                lo + rng.random_range(0..size)
            } else {
                let j = rng.random_range(0..n_leaves - size);
                if j >= lo {
                    j + size
                } else {
                    j
                }
            };
            log.records.push(Interaction {
                user,
                item: leaf as u64 + 1,
                timestamp: t as i64,
            });
        }
    }
    Ok((
        log,
        HierarchyTree {
            depth,
            branching,
            homes,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<InteractionLog> {
        parse_interactions(s.as_bytes())
    }

    #[test]
    fn parsing_examples() {
        let log = parse("user_id,item_id,timestamp\n1,10,100\n1,11,101\n2,10,50\n").unwrap();
        assert_eq!(log.records.len(), 3);
        assert_eq!(log.malformed, 0);
        assert_eq!(log.records[2], Interaction { user: 2, item: 10, timestamp: 50 });

        let log = parse("user_id,item_id,timestamp\n1,10,100\n1,11,abc\n").unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.malformed, 1);

        let log = parse("user_id,item_id,timestamp\n").unwrap();
        assert!(log.records.is_empty());

        let log = parse("rating,timestamp,item_id,user_id\n5,7,3,9\n").unwrap();
        assert_eq!(log.records, vec![Interaction { user: 9, item: 3, timestamp: 7 }]);

        assert!(matches!(parse("user_id,item_id\n1,2\n"), Err(Error::Format(_))));
        let log = parse("user_id,item_id,timestamp\n1,2\n3,4,5\n").unwrap();
        assert_eq!((log.records.len(), log.malformed), (1, 1));
    }

    fn log_of(rows: &[(u64, u64, i64)]) -> InteractionLog {
        InteractionLog {
            records: rows
                .iter()
                .map(|&(user, item, timestamp)| Interaction { user, item, timestamp })
                .collect(),
            malformed: 0,
        }
    }

    #[test]
    fn leave_one_out_split() {
        let log = log_of(&[
            (1, 50, 5),
            (1, 40, 4),
            (1, 30, 3),
            (1, 20, 2),
            (1, 10, 1),
            (2, 10, 1),
            (2, 20, 2),
        ]);
        let ds = build_sequences(&log, BuildOptions::default()).unwrap();
        assert_eq!(ds.users.len(), 1);
        let u = &ds.users[0];
        assert_eq!(ds.item_ids, vec![10, 20, 30, 40, 50]);
        assert_eq!(u.train, vec![1, 2, 3]);
        assert_eq!(u.valid, 4);
        assert_eq!(u.test, 5);
        assert!(!u.test_input().contains(&u.test));
    }

    #[test]
    fn ties_keep_input_order_and_truncation_keeps_latest() {
        let log = log_of(&[(1, 3, 7), (1, 1, 7), (1, 2, 7), (1, 9, 8)]);
        let ds = build_sequences(&log, BuildOptions::default()).unwrap();
        let orig: Vec<u64> = ds.users[0].train.iter().map(|&i| ds.item_ids[i - 1]).collect();
        assert_eq!(orig, vec![3, 1]);
        let log = log_of(&(0..10).map(|t| (1, t as u64 + 100, t)).collect::<Vec<_>>());
        let ds = build_sequences(&log, BuildOptions { max_seq_len: 3, ..Default::default() }).unwrap();
        assert_eq!(ds.users[0].train.len(), 3);
        assert_eq!(ds.item_ids.first(), Some(&105));
    }

    #[test]
    fn empty_after_filtering_is_an_error() {
        let log = log_of(&[(1, 1, 1), (1, 2, 2)]);
        assert!(matches!(build_sequences(&log, BuildOptions::default()), Err(Error::EmptyDataset(_))));
        let log = log_of(&[(1, 1, 1), (1, 2, 2), (1, 1, 3), (2, 3, 1)]);
        let ds = build_sequences(&log, BuildOptions { min_item_count: 2, ..Default::default() });
        assert!(ds.is_err());
    }

    #[test]
    fn serialized_dataset_round_trips() {
        let (log, _) = synth_hierarchical_dataset(3, 2, 3, 20, 8).unwrap();
        let ds = build_sequences(&log, BuildOptions::default()).unwrap();
        let bytes = ds.to_json().unwrap();
        let back = SequenceDataset::from_json(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_json().unwrap(), bytes);
        let again = build_sequences(&log, BuildOptions::default()).unwrap().to_json().unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn synthetic_generator_properties() {
        let (log, tree) = synth_hierarchical_dataset(1, 2, 3, 10, 5).unwrap();
        assert_eq!(tree.n_leaves(), 9);
        assert!(log.records.iter().all(|r| (1..=9).contains(&r.item)));
        assert_eq!(synth_hierarchical_dataset(1, 2, 3, 10, 5).unwrap(), (log.clone(), tree.clone()));
        assert_ne!(synth_hierarchical_dataset(2, 2, 3, 10, 5).unwrap().0, log);

        let (log, tree) = synth_hierarchical_dataset(7, 3, 3, 100, 100).unwrap();
        let home: HashMap<u64, usize> = tree.homes.iter().copied().collect();
        let inside = log
            .records
            .iter()
            .filter(|r| tree.subtree_of(r.item) == home[&r.user])
            .count();
        let freq = inside as f64 / log.records.len() as f64;
        assert!((0.85..=0.95).contains(&freq), "freq {freq}");

        assert_eq!(tree.tree_distance(1, 1), 0);
        assert_eq!(tree.tree_distance(1, 2), 2);
        assert_eq!(tree.tree_distance(1, 4), 4);
        assert_eq!(tree.tree_distance(1, 27), 6);
        assert!(synth_hierarchical_dataset(0, 0, 3, 1, 1).is_err());
        assert!(synth_hierarchical_dataset(0, 2, 1, 1, 1).is_err());
    }
}
