//! Interaction-log ingestion, sequence building, leave-one-out splits,
//! frequency grouping, and sequence corruption for robustness studies.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeedStream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{malformed} of {total} lines malformed (limit 10%)")]
    Format { malformed: usize, total: usize },
    #[error("{0}")]
    Empty(String),
    #[error("corrupt sequence file: {0}")]
    BadSequenceFile(String),
    #[error("bad manifest: {0}")]
    BadManifest(String),
}

/// One implicit-feedback record. Ratings in the source are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// Raw parsed interaction log. Duplicates are kept: repeat events are
/// signal, and the filtering counts them as separate interactions.
#[derive(Debug, Clone, Default)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

/// Parsing outcome bookkeeping for [`load_interactions`].
#[derive(Debug, Clone, Default)]
pub struct ParseReport {
    pub total_lines: usize,
    pub parsed: usize,
    pub malformed: usize,
    pub skipped_header: bool,
    pub warnings: Vec<String>,
}

/// A user's time-ordered item index sequence. Item indices are 1-based;
/// 0 is reserved for padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user_index: u32,
    pub items: Vec<u32>,
}

/// Dense index assignment produced by filtering. Index 0 is padding and has
/// no name.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    /// item_names[i - 1] is the source id of item index i.
    pub item_names: Vec<String>,
    /// user_names[u] is the source id of user index u.
    pub user_names: Vec<String>,
}

impl Vocab {
    pub fn num_items(&self) -> usize {
        self.item_names.len()
    }
}

/// Leave-one-out views over the filtered sequences. For a user with
/// sequence x_{1..L}: the test target is x_L, the validation target is
/// x_{L-1}, and training uses the prefix x_{1..L-2}.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub sequences: Vec<UserSequence>,
    pub num_items: usize,
    /// Training-portion occurrence count per item index (len num_items + 1,
    /// entry 0 unused).
    pub train_freq: Vec<u32>,
    /// Users dropped for having fewer than 3 items.
    pub dropped_short: usize,
}

impl SplitDataset {
    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    /// Training portion x_{1..L-2}.
    pub fn train_items(&self, user: usize) -> &[u32] {
        let items = &self.sequences[user].items;
        &items[..items.len() - 2]
    }

    /// Validation view: input x_{1..L-2}, target x_{L-1}.
    pub fn validation_example(&self, user: usize) -> (&[u32], u32) {
        let items = &self.sequences[user].items;
        (&items[..items.len() - 2], items[items.len() - 2])
    }

    /// Test view: input x_{1..L-1}, target x_L.
    pub fn test_example(&self, user: usize) -> (&[u32], u32) {
        let items = &self.sequences[user].items;
        (&items[..items.len() - 1], items[items.len() - 1])
    }

    pub fn total_train_positions(&self) -> usize {
        self.sequences.iter().map(|s| s.items.len() - 2).sum()
    }
}

/// The five fixed frequency bins of the grouping analyses.
pub const GROUP_LABELS: [&str; 5] = ["<=10", "(10,20]", "(20,30]", "(30,40]", ">40"];

/// Bin index for a frequency under the fixed boundaries
/// [<=10], (10,20], (20,30], (30,40], (40, inf).
pub fn frequency_bin(freq: u32) -> usize {
    match freq {
        0..=10 => 0,
        11..=20 => 1,
        21..=30 => 2,
        31..=40 => 3,
        _ => 4,
    }
}

/// Bin index for a sequence length under the mirrored boundaries
/// {<10, [10,20), [20,30), [30,40), >=40}.
pub fn length_bin(len: usize) -> usize {
    match len {
        0..=9 => 0,
        10..=19 => 1,
        20..=29 => 2,
        30..=39 => 3,
        _ => 4,
    }
}

/// Per-user frequency-group labels keyed by the test target's training
/// frequency.
#[derive(Debug, Clone)]
pub struct FrequencyGroups {
    /// groups[u] is the bin of user u's test-target item.
    pub groups: Vec<usize>,
    pub counts: [usize; 5],
}

/// Parses a TSV interaction file: `user<TAB>item<TAB>timestamp` with an
/// optional trailing rating column (ignored). A header line is detected by
/// a non-numeric timestamp field. More than 10% malformed lines is a
/// format error.
pub fn load_interactions(path: &Path) -> Result<(InteractionLog, ParseReport), DataError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut log = InteractionLog::default();
    let mut report = ParseReport::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        report.total_lines += 1;
        match parse_line(&line) {
            Some(rec) => {
                log.records.push(rec);
                report.parsed += 1;
            }
            None => {
                if lineno == 0 {
                    // Header line: timestamp field is non-numeric.
                    report.skipped_header = true;
                    report.total_lines -= 1;
                } else {
                    report.malformed += 1;
                }
            }
        }
    }
    if report.total_lines > 0 && report.malformed * 10 > report.total_lines {
        return Err(DataError::Format {
            malformed: report.malformed,
            total: report.total_lines,
        });
    }
    if report.malformed > 0 {
        report
            .warnings
            .push(format!("{} malformed lines skipped", report.malformed));
    }
    if log.records.is_empty() {
        report.warnings.push("input produced an empty log".into());
    }
    Ok((log, report))
}

fn parse_line(line: &str) -> Option<Interaction> {
    let mut fields = line.split('\t');
    let user = fields.next()?.trim();
    let item = fields.next()?.trim();
    let ts = fields.next()?.trim();
    if user.is_empty() || item.is_empty() {
        return None;
    }
    let timestamp: i64 = ts.parse().ok()?;
    if timestamp < 0 {
        return None;
    }
    Some(Interaction {
        user_id: user.to_string(),
        item_id: item.to_string(),
        timestamp,
    })
}

/// Iteratively removes users and items with fewer than `min_count`
/// interactions until a fixpoint (removing an item can push a user below
/// the threshold and vice versa), then assigns dense 1-based item indices
/// and builds per-user time-ordered sequences. Timestamp ties keep input
/// order.
pub fn filter_and_index(
    log: &InteractionLog,
    min_count: usize,
) -> Result<(Vec<UserSequence>, Vocab), DataError> {
    let mut alive: Vec<bool> = vec![true; log.records.len()];
    loop {
        let mut user_count: HashMap<&str, usize> = HashMap::new();
        let mut item_count: HashMap<&str, usize> = HashMap::new();
        for (i, rec) in log.records.iter().enumerate() {
            if alive[i] {
                *user_count.entry(rec.user_id.as_str()).or_default() += 1;
                *item_count.entry(rec.item_id.as_str()).or_default() += 1;
            }
        }
        let mut changed = false;
        for (i, rec) in log.records.iter().enumerate() {
            if alive[i]
                && (user_count[rec.user_id.as_str()] < min_count
                    || item_count[rec.item_id.as_str()] < min_count)
            {
                alive[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // Dense indices by first appearance in input order.
    let mut item_index: HashMap<&str, u32> = HashMap::new();
    let mut user_index: HashMap<&str, u32> = HashMap::new();
    let mut vocab = Vocab::default();
    let mut per_user: Vec<Vec<(i64, usize, u32)>> = Vec::new();
    for (i, rec) in log.records.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        let item = *item_index.entry(rec.item_id.as_str()).or_insert_with(|| {
            vocab.item_names.push(rec.item_id.clone());
            vocab.item_names.len() as u32
        });
        let user = *user_index.entry(rec.user_id.as_str()).or_insert_with(|| {
            vocab.user_names.push(rec.user_id.clone());
            per_user.push(Vec::new());
            (vocab.user_names.len() - 1) as u32
        });
        per_user[user as usize].push((rec.timestamp, i, item));
    }
    if per_user.is_empty() {
        return Err(DataError::Empty(format!(
            "no users or items survive the min_count={} filter",
            min_count
        )));
    }
    let sequences = per_user
        .into_iter()
        .enumerate()
        .map(|(u, mut recs)| {
            // Stable order: timestamp, then original input position.
            recs.sort_by_key(|&(ts, pos, _)| (ts, pos));
            UserSequence {
                user_index: u as u32,
                items: recs.into_iter().map(|(_, _, item)| item).collect(),
            }
        })
        .collect();
    Ok((sequences, vocab))
}

/// Builds the leave-one-out split. Sequences shorter than 3 are dropped
/// (leave-one-out needs a train prefix, a validation target, and a test
/// target). The frequency table counts training-portion occurrences only.
pub fn leave_one_out_split(sequences: Vec<UserSequence>, num_items: usize) -> SplitDataset {
    let mut kept = Vec::with_capacity(sequences.len());
    let mut dropped_short = 0usize;
    for seq in sequences {
        if seq.items.len() >= 3 {
            kept.push(seq);
        } else {
            dropped_short += 1;
        }
    }
    let mut train_freq = vec![0u32; num_items + 1];
    for seq in &kept {
        for &item in &seq.items[..seq.items.len() - 2] {
            train_freq[item as usize] += 1;
        }
    }
    SplitDataset {
        sequences: kept,
        num_items,
        train_freq,
        dropped_short,
    }
}

/// Left-pads with 0 or keeps the most recent `max_len` items.
pub fn pad_or_truncate(items: &[u32], max_len: usize) -> Vec<u32> {
    assert!(max_len >= 1);
    let mut out = vec![0u32; max_len];
    if items.len() >= max_len {
        out.copy_from_slice(&items[items.len() - max_len..]);
    } else {
        out[max_len - items.len()..].copy_from_slice(items);
    }
    out
}

/// Labels each user by the training frequency of its test-target item.
pub fn assign_frequency_groups(split: &SplitDataset) -> FrequencyGroups {
    let mut groups = Vec::with_capacity(split.num_users());
    let mut counts = [0usize; 5];
    for u in 0..split.num_users() {
        let (_, target) = split.test_example(u);
        let bin = frequency_bin(split.train_freq[target as usize]);
        groups.push(bin);
        counts[bin] += 1;
    }
    FrequencyGroups { groups, counts }
}

/// Corruption mode for robustness studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptMode {
    Delete,
    Replace,
}

impl std::str::FromStr for CorruptMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "delete" => Ok(CorruptMode::Delete),
            "replace" => Ok(CorruptMode::Replace),
            other => Err(format!("unknown corruption mode '{other}'")),
        }
    }
}

/// Corrupts the prefix of each sequence, never touching the final (test
/// target) item. Delete removes floor(ratio * prefix_len) uniformly chosen
/// positions; replace substitutes that many positions with uniform random
/// different items from [1, num_items]. Deterministic per (seed, user).
pub fn corrupt_sequences(
    sequences: &[UserSequence],
    mode: CorruptMode,
    ratio: f64,
    num_items: usize,
    seed: u64,
) -> Vec<UserSequence> {
    assert!((0.0..=1.0).contains(&ratio), "ratio must be in [0,1]");
    sequences
        .iter()
        .map(|seq| {
            let mut rng = SeedStream::derive(seed, &[0xC0_44, seq.user_index as u64]);
            let prefix_len = seq.items.len().saturating_sub(1);
            let n_corrupt = (ratio * prefix_len as f64).floor() as usize;
            if n_corrupt == 0 {
                return seq.clone();
            }
            let positions = rng.sample_indices(prefix_len, n_corrupt);
            let mut items = seq.items.clone();
            match mode {
                CorruptMode::Delete => {
                    for &p in positions.iter().rev() {
                        items.remove(p);
                    }
                }
                CorruptMode::Replace => {
                    for &p in &positions {
                        let original = items[p];
                        let replacement = loop {
                            let cand = rng.below(num_items) as u32 + 1;
                            if cand != original {
                                break cand;
                            }
                        };
                        items[p] = replacement;
                    }
                }
            }
            UserSequence {
                user_index: seq.user_index,
                items,
            }
        })
        .collect()
}

// ── Split persistence ────────────────────────────────────────────────

/// Manifest written next to the binary sequence file. Statistics follow
/// the usual dataset-table conventions: interactions, interactions per
/// item, and average sequence length over the retained users.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub interactions_per_item: f64,
    pub avg_seq_len: f64,
    pub train_positions: usize,
    pub validation_targets: usize,
    pub test_targets: usize,
}

impl SplitManifest {
    pub fn from_split(split: &SplitDataset) -> Self {
        let num_interactions: usize = split.sequences.iter().map(|s| s.items.len()).sum();
        let num_users = split.num_users();
        let num_items = split.num_items;
        SplitManifest {
            num_users,
            num_items,
            num_interactions,
            interactions_per_item: if num_items > 0 {
                num_interactions as f64 / num_items as f64
            } else {
                0.0
            },
            avg_seq_len: if num_users > 0 {
                num_interactions as f64 / num_users as f64
            } else {
                0.0
            },
            train_positions: split.total_train_positions(),
            validation_targets: num_users,
            test_targets: num_users,
        }
    }
}

/// File names used inside a split directory.
pub const SEQUENCES_FILE: &str = "sequences.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json` and `sequences.bin` into `dir`. The binary
/// format is one block per user in user-index order: a little-endian u32
/// length followed by that many little-endian u32 item indices.
pub fn write_split(split: &SplitDataset, dir: &Path) -> Result<SplitManifest, DataError> {
    std::fs::create_dir_all(dir)?;
    let manifest = SplitManifest::from_split(split);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DataError::BadManifest(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    let mut buf: Vec<u8> = Vec::new();
    for seq in &split.sequences {
        buf.extend_from_slice(&(seq.items.len() as u32).to_le_bytes());
        for &item in &seq.items {
            buf.extend_from_slice(&item.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(dir.join(SEQUENCES_FILE))?;
    f.write_all(&buf)?;
    Ok(manifest)
}

/// Reads a split directory written by [`write_split`]. The frequency table
/// is rebuilt by rescanning the training portions.
pub fn read_split(dir: &Path) -> Result<(SplitDataset, SplitManifest), DataError> {
    let manifest: SplitManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)
            .map_err(|e| DataError::BadManifest(e.to_string()))?;
    let mut f = std::fs::File::open(dir.join(SEQUENCES_FILE))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let mut sequences = Vec::with_capacity(manifest.num_users);
    let mut off = 0usize;
    let mut user = 0u32;
    while off < bytes.len() {
        if off + 4 > bytes.len() {
            return Err(DataError::BadSequenceFile("truncated length prefix".into()));
        }
        let len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        if off + 4 * len > bytes.len() {
            return Err(DataError::BadSequenceFile(format!(
                "user {} declares {} items past end of file",
                user, len
            )));
        }
        let mut items = Vec::with_capacity(len);
        for i in 0..len {
            let item = u32::from_le_bytes(bytes[off + 4 * i..off + 4 * i + 4].try_into().unwrap());
            if item == 0 || item as usize > manifest.num_items {
                return Err(DataError::BadSequenceFile(format!(
                    "user {} has out-of-range item {}",
                    user, item
                )));
            }
            items.push(item);
        }
        off += 4 * len;
        sequences.push(UserSequence {
            user_index: user,
            items,
        });
        user += 1;
    }
    if sequences.len() != manifest.num_users {
        return Err(DataError::BadSequenceFile(format!(
            "manifest declares {} users, file holds {}",
            manifest.num_users,
            sequences.len()
        )));
    }
    let split = leave_one_out_split(sequences, manifest.num_items);
    Ok((split, manifest))
}
