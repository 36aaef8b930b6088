//! Interaction-log ingestion, per-user sequences, leave-one-out splitting and
//! cloze-style masked batches.
//!
//! Item ids inside a [`SequenceDataset`] are dense: `1..=num_items`. Id `0` is
//! the padding token and `num_items + 1` the mask token; neither ever appears
//! in a stored sequence.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::util::{self, Rng};

pub mod synthetic;

pub type ItemId = u32;

/// Padding id, left-fills windows shorter than the model's maximum length.
pub const PAD: ItemId = 0;

const DATASET_MAGIC: &[u8; 4] = b"MRGD";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: u32,
    pub item_id: u32,
    /// Carried through ingestion, never used for training.
    pub rating: u8,
    pub timestamp: u64,
}

/// Parses `UserID::MovieID::Rating::Timestamp` lines. Blank lines are skipped;
/// CRLF endings are accepted.
pub fn parse_ratings<R: BufRead>(reader: R) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line, line_no)?);
    }
    Ok(out)
}

pub fn parse_ratings_str(text: &str) -> Result<Vec<Interaction>> {
    parse_ratings(text.as_bytes())
}

fn parse_line(line: &str, line_no: usize) -> Result<Interaction> {
    let fields: Vec<&str> = line.split("::").collect();
    if fields.len() != 4 {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("expected 4 '::'-separated fields, found {}", fields.len()),
        });
    }
    fn num<T: std::str::FromStr>(field: &str, name: &str, line: usize) -> Result<T> {
        field.trim().parse::<T>().map_err(|_| Error::Parse {
            line,
            msg: format!("non-numeric {name} field {field:?}"),
        })
    }
    let user_id: u32 = num(fields[0], "user", line_no)?;
    let item_id: u32 = num(fields[1], "item", line_no)?;
    let rating: u8 = num(fields[2], "rating", line_no)?;
    let timestamp: u64 = num(fields[3], "timestamp", line_no)?;
    if user_id == 0 || item_id == 0 {
        return Err(Error::Parse {
            line: line_no,
            msg: "user and item ids must be >= 1".into(),
        });
    }
    if !(1..=5).contains(&rating) {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("rating {rating} outside 1..5"),
        });
    }
    Ok(Interaction {
        user_id,
        item_id,
        rating,
        timestamp,
    })
}

/// Per-user chronological item sequences over a dense item-id space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceDataset {
    /// One sequence per user, users ordered by ascending original id.
    sequences: Vec<Vec<ItemId>>,
    /// `original_item_ids[i - 1]` is the original id of dense item `i`.
    original_item_ids: Vec<u32>,
    /// Interaction count per dense item over training positions; index 0 unused.
    popularity: Vec<u64>,
}

impl SequenceDataset {
    /// Builds a dataset from already-dense sequences and their id table.
    pub fn from_parts(sequences: Vec<Vec<ItemId>>, original_item_ids: Vec<u32>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyDataset("no users".into()));
        }
        let num_items = original_item_ids.len() as u32;
        for (u, seq) in sequences.iter().enumerate() {
            if let Some(&bad) = seq.iter().find(|&&i| i == PAD || i > num_items) {
                return Err(Error::Input(format!(
                    "user {u}: item id {bad} outside 1..={num_items}"
                )));
            }
        }
        let popularity = training_popularity(&sequences, num_items as usize);
        Ok(Self {
            sequences,
            original_item_ids,
            popularity,
        })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.original_item_ids.len()
    }

    /// Mask-token id for models over this dataset.
    pub fn mask_token(&self) -> ItemId {
        self.num_items() as ItemId + 1
    }

    pub fn sequences(&self) -> &[Vec<ItemId>] {
        &self.sequences
    }

    pub fn original_item_ids(&self) -> &[u32] {
        &self.original_item_ids
    }

    pub fn original_item_id(&self, dense: ItemId) -> Option<u32> {
        dense
            .checked_sub(1)
            .and_then(|i| self.original_item_ids.get(i as usize))
            .copied()
    }

    pub fn popularity(&self) -> &[u64] {
        &self.popularity
    }

    pub fn total_training_positions(&self) -> u64 {
        self.sequences
            .iter()
            .map(|s| s.len().saturating_sub(2) as u64)
            .sum()
    }

    /// Sequences decoded back to original item ids.
    pub fn decoded_sequences(&self) -> Vec<Vec<u32>> {
        self.sequences
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&i| self.original_item_ids[i as usize - 1])
                    .collect()
            })
            .collect()
    }

    /// Deterministic subsample of at most `max_users` users, re-densified.
    pub fn subsample_users(&self, max_users: usize, rng: &mut Rng) -> Result<Self> {
        if max_users >= self.num_users() {
            return Ok(self.clone());
        }
        let mut picked = rand::seq::index::sample(rng, self.num_users(), max_users).into_vec();
        picked.sort_unstable();
        let decoded = self.decoded_sequences();
        let kept: Vec<Vec<u32>> = picked.into_iter().map(|u| decoded[u].clone()).collect();
        densify(kept)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        util::write_u32(w, DATASET_VERSION)?;
        util::write_u32(w, self.num_users() as u32)?;
        util::write_u32(w, self.num_items() as u32)?;
        for &orig in &self.original_item_ids {
            util::write_u32(w, orig)?;
        }
        for seq in &self.sequences {
            util::write_u32(w, seq.len() as u32)?;
            for &item in seq {
                util::write_u32(w, item)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        util::expect_magic(r, DATASET_MAGIC)?;
        let version = util::read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let num_users = util::read_u32(r)? as usize;
        let num_items = util::read_u32(r)? as usize;
        let mut ids = Vec::with_capacity(num_items);
        for _ in 0..num_items {
            ids.push(util::read_u32(r)?);
        }
        let mut sequences = Vec::with_capacity(num_users);
        for _ in 0..num_users {
            let len = util::read_u32(r)? as usize;
            let mut seq = Vec::with_capacity(len);
            for _ in 0..len {
                seq.push(util::read_u32(r)?);
            }
            sequences.push(seq);
        }
        util::expect_eof(r)?;
        Self::from_parts(sequences, ids)
    }
}

fn training_popularity(sequences: &[Vec<ItemId>], num_items: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_items + 1];
    for seq in sequences {
        for &item in &seq[..seq.len().saturating_sub(2)] {
            counts[item as usize] += 1;
        }
    }
    counts
}

/// Remaps original item ids onto `1..=|V|` in ascending original-id order.
fn densify(sequences: Vec<Vec<u32>>) -> Result<SequenceDataset> {
    let mut ids: Vec<u32> = sequences.iter().flatten().copied().collect();
    ids.sort_unstable();
    ids.dedup();
    let index: BTreeMap<u32, ItemId> = ids
        .iter()
        .enumerate()
        .map(|(i, &orig)| (orig, i as ItemId + 1))
        .collect();
    let dense = sequences
        .into_iter()
        .map(|s| s.into_iter().map(|orig| index[&orig]).collect())
        .collect();
    SequenceDataset::from_parts(dense, ids)
}

/// Groups interactions per user, orders each user's records by
/// `(timestamp, input order)`, drops users shorter than `min_seq_len` and
/// densifies item ids.
pub fn build_dataset(interactions: &[Interaction], min_seq_len: usize) -> Result<SequenceDataset> {
    if min_seq_len < 3 {
        return Err(Error::Config(format!(
            "min_seq_len must be >= 3, got {min_seq_len}"
        )));
    }
    let mut per_user: BTreeMap<u32, Vec<(u64, u32)>> = BTreeMap::new();
    for rec in interactions {
        per_user
            .entry(rec.user_id)
            .or_default()
            .push((rec.timestamp, rec.item_id));
    }
    let sequences: Vec<Vec<u32>> = per_user
        .into_values()
        .filter(|recs| recs.len() >= min_seq_len)
        .map(|mut recs| {
            // stable: equal timestamps keep input order
            recs.sort_by_key(|&(ts, _)| ts);
            recs.into_iter().map(|(_, item)| item).collect()
        })
        .collect();
    if sequences.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no user has at least {min_seq_len} interactions"
        )));
    }
    densify(sequences)
}

/// One user's leave-one-out partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub train: Vec<ItemId>,
    pub valid: ItemId,
    pub test: ItemId,
}

impl UserSplit {
    /// History visible when predicting the test target.
    pub fn test_history(&self) -> Vec<ItemId> {
        let mut h = self.train.clone();
        h.push(self.valid);
        h
    }

    /// Next-item example carved out of the training prefix: every training
    /// item except the last is context, the last is the target.
    pub fn train_example(&self) -> NextItemExample<'_> {
        let (target, context) = self
            .train
            .split_last()
            .expect("training prefix is never empty");
        NextItemExample {
            context,
            target: *target,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NextItemExample<'a> {
    pub context: &'a [ItemId],
    pub target: ItemId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaveOneOutSplit {
    pub users: Vec<UserSplit>,
    pub num_items: usize,
    /// Training-position popularity, index 0 unused.
    pub popularity: Vec<u64>,
}

impl LeaveOneOutSplit {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn mask_token(&self) -> ItemId {
        self.num_items as ItemId + 1
    }

    pub fn train_prefixes(&self) -> Vec<&[ItemId]> {
        self.users.iter().map(|u| u.train.as_slice()).collect()
    }
}

pub fn split_leave_one_out(dataset: &SequenceDataset) -> Result<LeaveOneOutSplit> {
    let users = dataset
        .sequences()
        .iter()
        .enumerate()
        .map(|(u, seq)| {
            if seq.len() < 3 {
                return Err(Error::Input(format!(
                    "user {u} has {} interactions; leave-one-out needs >= 3",
                    seq.len()
                )));
            }
            let n = seq.len();
            Ok(UserSplit {
                train: seq[..n - 2].to_vec(),
                valid: seq[n - 2],
                test: seq[n - 1],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LeaveOneOutSplit {
        users,
        num_items: dataset.num_items(),
        popularity: dataset.popularity().to_vec(),
    })
}

/// Right-aligned window of the last `<= len` items, left-padded with [`PAD`].
pub fn right_aligned(items: &[ItemId], len: usize) -> Vec<ItemId> {
    let take = items.len().min(len);
    let mut w = vec![PAD; len - take];
    w.extend_from_slice(&items[items.len() - take..]);
    w
}

/// Window for predicting the item after `history`: the last `len - 1` items
/// followed by the mask token.
pub fn query_window(history: &[ItemId], len: usize, mask_token: ItemId) -> Vec<ItemId> {
    let mut w = right_aligned(history, len - 1);
    w.push(mask_token);
    w
}

/// Cloze-style training batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub window: usize,
    pub mask_token: ItemId,
    /// Inputs, `window` ids each, masked positions hold `mask_token`.
    pub inputs: Vec<Vec<ItemId>>,
    /// Original item at masked positions, `None` elsewhere.
    pub labels: Vec<Vec<Option<ItemId>>>,
    /// `true` at padding positions.
    pub pad_mask: Vec<Vec<bool>>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.iter().flatten().filter(|l| l.is_some()).count()
    }
}

pub fn make_masked_batch(
    prefixes: &[&[ItemId]],
    window: usize,
    mask_prob: f64,
    mask_token: ItemId,
    rng: &mut Rng,
) -> Result<MaskedBatch> {
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(Error::Config(format!(
            "mask_prob must be in (0, 1), got {mask_prob}"
        )));
    }
    if window == 0 {
        return Err(Error::Config("window must be >= 1".into()));
    }
    let mut inputs = Vec::with_capacity(prefixes.len());
    let mut labels = Vec::with_capacity(prefixes.len());
    let mut pad_mask = Vec::with_capacity(prefixes.len());
    for prefix in prefixes {
        if prefix.is_empty() {
            return Err(Error::Input("cannot mask an empty sequence".into()));
        }
        let mut input = right_aligned(prefix, window);
        let first = window - prefix.len().min(window);
        let mut label = vec![None; window];
        for p in first..window {
            if rng.random::<f64>() < mask_prob {
                label[p] = Some(input[p]);
            }
        }
        if label.iter().all(Option::is_none) {
            let p = rng.random_range(first..window);
            label[p] = Some(input[p]);
        }
        for p in first..window {
            if label[p].is_some() {
                input[p] = mask_token;
            }
        }
        pad_mask.push((0..window).map(|p| p < first).collect());
        inputs.push(input);
        labels.push(label);
    }
    Ok(MaskedBatch {
        window,
        mask_token,
        inputs,
        labels,
        pad_mask,
    })
}
