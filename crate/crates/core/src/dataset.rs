//! Interaction logs, k-core filtering, leave-one-out splits and negative sampling.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which (history -> next item) pairs of a user's training region become examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainPairs {
    #[default]
    All,
    Last,
}

/// A user's split after leave-one-out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user: u64,
    /// Items before the validation target; training pairs are drawn from here.
    pub train: Vec<u32>,
    pub valid_target: u32,
    pub test_target: u32,
}

/// One supervised example: truncated history and the item that followed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub user: u64,
    pub history: Vec<u32>,
    pub target: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    /// Chronological item sequences keyed by user id.
    pub user_sequences: BTreeMap<u64, Vec<u32>>,
    pub splits: Option<Vec<UserSplit>>,
    pub max_history: usize,
}

fn truncate(items: &[u32], max_history: usize) -> Vec<u32> {
    let start = items.len().saturating_sub(max_history);
    items[start..].to_vec()
}

impl InteractionDataset {
    pub fn from_sequences(user_sequences: BTreeMap<u64, Vec<u32>>, max_history: usize) -> Self {
        Self {
            user_sequences,
            splits: None,
            max_history: max_history.max(1),
        }
    }

    pub fn num_interactions(&self) -> usize {
        self.user_sequences.values().map(Vec::len).sum()
    }

    pub fn max_item_id(&self) -> Option<u32> {
        self.user_sequences.values().flatten().copied().max()
    }

    fn require_splits(&self) -> Result<&[UserSplit]> {
        self.splits
            .as_deref()
            .ok_or_else(|| Error::Contract("dataset has not been split".into()))
    }

    /// Training examples over each user's training region.
    pub fn train_examples(&self, mode: TrainPairs) -> Result<Vec<Example>> {
        let mut out = Vec::new();
        for split in self.require_splits()? {
            let region = &split.train;
            let targets = match mode {
                TrainPairs::All => 1..region.len(),
                TrainPairs::Last => region.len().saturating_sub(1).max(1)..region.len(),
            };
            for j in targets {
                out.push(Example {
                    user: split.user,
                    history: truncate(&region[..j], self.max_history),
                    target: region[j],
                });
            }
        }
        Ok(out)
    }

    pub fn valid_examples(&self) -> Result<Vec<Example>> {
        Ok(self
            .require_splits()?
            .iter()
            .map(|s| Example {
                user: s.user,
                history: truncate(&s.train, self.max_history),
                target: s.valid_target,
            })
            .collect())
    }

    pub fn test_examples(&self) -> Result<Vec<Example>> {
        Ok(self
            .require_splits()?
            .iter()
            .map(|s| {
                let mut full = s.train.clone();
                full.push(s.valid_target);
                Example {
                    user: s.user,
                    history: truncate(&full, self.max_history),
                    target: s.test_target,
                }
            })
            .collect())
    }

    /// Writes one JSON record per user next to the dataset for auditing.
    pub fn write_split_manifest(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for split in self.require_splits()? {
            serde_json::to_writer(&mut out, split)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes the interactions as `user_id<TAB>item_id<TAB>timestamp` with
    /// timestamps equal to sequence positions.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for (user, seq) in &self.user_sequences {
            for (ts, item) in seq.iter().enumerate() {
                writeln!(out, "{user}\t{item}\t{ts}")?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Removes users and items with fewer than `min_count` interactions, repeating
/// until nothing changes.
pub fn kcore_filter(mut sequences: BTreeMap<u64, Vec<u32>>, min_count: usize) -> BTreeMap<u64, Vec<u32>> {
    loop {
        let mut item_counts: HashMap<u32, usize> = HashMap::new();
        for seq in sequences.values() {
            for &item in seq {
                *item_counts.entry(item).or_default() += 1;
            }
        }
        let mut changed = false;
        for seq in sequences.values_mut() {
            let before = seq.len();
            seq.retain(|item| item_counts[item] >= min_count);
            changed |= seq.len() != before;
        }
        let before = sequences.len();
        sequences.retain(|_, seq| seq.len() >= min_count);
        changed |= sequences.len() != before;
        if !changed {
            return sequences;
        }
    }
}

/// Loads a `user_id<TAB>item_id<TAB>timestamp` log and applies k-core filtering.
/// Equal timestamps keep file order.
pub fn load_interactions(path: &Path, min_count: usize, max_history: usize) -> Result<InteractionDataset> {
    let text = fs::read_to_string(path)?;
    let mut raw: BTreeMap<u64, Vec<(i64, usize, u32)>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let user: u64 = fields[0].parse().map_err(|e| parse_err(format!("bad user id: {e}")))?;
        let item: u32 = fields[1].parse().map_err(|e| parse_err(format!("bad item id: {e}")))?;
        let ts: i64 = fields[2].parse().map_err(|e| parse_err(format!("bad timestamp: {e}")))?;
        raw.entry(user).or_default().push((ts, line_no, item));
    }
    let sequences: BTreeMap<u64, Vec<u32>> = raw
        .into_iter()
        .map(|(user, mut events)| {
            events.sort();
            (user, events.into_iter().map(|(_, _, item)| item).collect())
        })
        .collect();
    let filtered = kcore_filter(sequences, min_count);
    if filtered.is_empty() {
        return Err(Error::Data(format!(
            "no interactions left in {} after {min_count}-core filtering",
            path.display()
        )));
    }
    Ok(InteractionDataset::from_sequences(filtered, max_history))
}

/// Last item is the test target, second-to-last the validation target.
pub fn split_leave_one_out(mut ds: InteractionDataset) -> Result<InteractionDataset> {
    let mut splits = Vec::with_capacity(ds.user_sequences.len());
    for (&user, seq) in &ds.user_sequences {
        let n = seq.len();
        if n < 3 {
            return Err(Error::Data(format!(
                "user {user} has {n} interactions; leave-one-out needs at least 3"
            )));
        }
        splits.push(UserSplit {
            user,
            train: seq[..n - 2].to_vec(),
            valid_target: seq[n - 2],
            test_target: seq[n - 1],
        });
    }
    ds.splits = Some(splits);
    Ok(ds)
}

/// Distinct negatives drawn uniformly without replacement from `0..num_items`
/// excluding `positive`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSample {
    pub item_ids: Vec<u32>,
}

pub fn sample_negatives<R: Rng + ?Sized>(
    positive: u32,
    n: usize,
    num_items: usize,
    rng: &mut R,
) -> Result<NegativeSample> {
    if num_items == 0 || n > num_items - 1 {
        return Err(Error::Config(format!(
            "cannot draw {n} negatives from a corpus of {num_items} items"
        )));
    }
    let picks = rand::seq::index::sample(rng, num_items - 1, n);
    let item_ids = picks
        .into_iter()
        .map(|i| {
            let i = i as u32;
            if i >= positive {
                i + 1
            } else {
                i
            }
        })
        .collect();
    Ok(NegativeSample { item_ids })
}
