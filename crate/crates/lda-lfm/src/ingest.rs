//! Review ingestion: JSON-lines parsing, deduplication, k-core filtering,
//! and deterministic train/validation/test splitting with cold-start pruning.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// One (user, item, rating, review, timestamp) record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    /// Star rating, a finite real in [1, 5].
    pub rating: f64,
    /// Raw review text; may be empty.
    pub review_text: String,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
}

/// On-disk schema of one review line (the Amazon dump field names).
#[derive(Serialize, Deserialize)]
struct RawReview {
    #[serde(rename = "reviewerID")]
    reviewer_id: String,
    asin: String,
    overall: f64,
    #[serde(rename = "reviewText", default, skip_serializing_if = "Option::is_none")]
    review_text: Option<String>,
    #[serde(rename = "unixReviewTime")]
    unix_review_time: i64,
    /// Helpfulness votes; parsed for schema fidelity, never used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    helpful: Option<Vec<i64>>,
}

impl From<Interaction> for RawReview {
    fn from(x: Interaction) -> Self {
        RawReview {
            reviewer_id: x.user_id,
            asin: x.item_id,
            overall: x.rating,
            review_text: Some(x.review_text),
            unix_review_time: x.timestamp,
            helpful: None,
        }
    }
}

/// A rejected input line, kept for the parse report.
#[derive(Debug, Clone, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// What happened while parsing a review stream.
#[derive(Debug, Default, Serialize)]
pub struct ParseReport {
    pub valid: usize,
    pub errors: Vec<LineError>,
}

/// Parse a JSON-lines review stream.
///
/// Malformed or out-of-range lines are recorded in the report and skipped;
/// the call fails only when no line at all is valid.
pub fn parse_reviews<R: BufRead>(source: R) -> Result<(Vec<Interaction>, ParseReport)> {
    let mut out = Vec::new();
    let mut report = ParseReport::default();
    for (idx, line) in source.lines().enumerate() {
        let lineno = idx + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                report.errors.push(LineError {
                    line: lineno,
                    message: format!("read error: {e}"),
                });
                continue;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawReview>(&line) {
            Ok(raw) => {
                if !raw.overall.is_finite() || !(1.0..=5.0).contains(&raw.overall) {
                    let msg = format!("rating {} out of range [1, 5]", raw.overall);
                    log::warn!("line {lineno}: {msg}");
                    report.errors.push(LineError {
                        line: lineno,
                        message: msg,
                    });
                    continue;
                }
                out.push(Interaction {
                    user_id: raw.reviewer_id,
                    item_id: raw.asin,
                    rating: raw.overall,
                    review_text: raw.review_text.unwrap_or_default(),
                    timestamp: raw.unix_review_time,
                });
                report.valid += 1;
            }
            Err(e) => {
                log::warn!("line {lineno}: {e}");
                report.errors.push(LineError {
                    line: lineno,
                    message: e.to_string(),
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoValidInteractions);
    }
    Ok((out, report))
}

/// Parse a review file from disk.
pub fn parse_reviews_file(path: &Path) -> Result<(Vec<Interaction>, ParseReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reviews(BufReader::new(file))
}

/// Serialize interactions back to the input JSON-lines schema.
pub fn write_reviews<W: Write>(mut sink: W, data: &[Interaction], path: &Path) -> Result<()> {
    for x in data {
        let raw = RawReview::from(x.clone());
        let line = serde_json::to_string(&raw)?;
        writeln!(sink, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Drop exact repeats, keeping the first occurrence.
///
/// The key is (user, item, timestamp, review text); upstream dumps are
/// already deduplicated, so this is a safety net.
pub fn deduplicate(data: Vec<Interaction>) -> Vec<Interaction> {
    let mut seen: HashSet<(String, String, i64, String)> = HashSet::with_capacity(data.len());
    data.into_iter()
        .filter(|x| {
            seen.insert((
                x.user_id.clone(),
                x.item_id.clone(),
                x.timestamp,
                x.review_text.clone(),
            ))
        })
        .collect()
}

/// Iteratively remove users and items with fewer than `k` interactions until
/// every survivor has at least `k`. The result may be empty.
pub fn k_core_filter(data: Vec<Interaction>, k: usize) -> Vec<Interaction> {
    assert!(k >= 1, "k-core threshold must be >= 1");
    let mut current = data;
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for x in &current {
            *user_counts.entry(x.user_id.as_str()).or_insert(0) += 1;
            *item_counts.entry(x.item_id.as_str()).or_insert(0) += 1;
        }
        let keep: Vec<bool> = current
            .iter()
            .map(|x| user_counts[x.user_id.as_str()] >= k && item_counts[x.item_id.as_str()] >= k)
            .collect();
        if keep.iter().all(|&b| b) {
            return current;
        }
        let mut idx = 0;
        current.retain(|_| {
            let kept = keep[idx];
            idx += 1;
            kept
        });
    }
}

/// Train/validation/test partitions with dense id maps built from train.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    /// user id -> dense index, in order of first appearance in train.
    pub user_index: IndexMap<String, usize>,
    /// item id -> dense index, in order of first appearance in train.
    pub item_index: IndexMap<String, usize>,
    pub seed: u64,
}

/// One interaction with dense ids, the form the numeric code consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseRating {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
}

/// A dense rating list plus the index-space extents it lives in.
#[derive(Debug, Clone, PartialEq)]
pub struct Ratings {
    pub n_users: usize,
    pub n_items: usize,
    pub entries: Vec<DenseRating>,
}

impl Ratings {
    pub fn mean_rating(&self) -> f64 {
        let n = self.entries.len();
        if n == 0 {
            return 0.0;
        }
        self.entries.iter().map(|e| e.rating).sum::<f64>() / n as f64
    }
}

impl DatasetSplit {
    pub fn n_users(&self) -> usize {
        self.user_index.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_index.len()
    }

    fn to_dense(&self, list: &[Interaction]) -> Ratings {
        let entries = list
            .iter()
            .map(|x| DenseRating {
                user: self.user_index[x.user_id.as_str()],
                item: self.item_index[x.item_id.as_str()],
                rating: x.rating,
            })
            .collect();
        Ratings {
            n_users: self.n_users(),
            n_items: self.n_items(),
            entries,
        }
    }

    pub fn train_ratings(&self) -> Ratings {
        self.to_dense(&self.train)
    }

    pub fn validation_ratings(&self) -> Ratings {
        self.to_dense(&self.validation)
    }

    pub fn test_ratings(&self) -> Ratings {
        self.to_dense(&self.test)
    }
}

/// Uniform random 80/10/10 split, then cold-start pruning.
///
/// Assignment is a seeded shuffle followed by an exact 80/10/10 cut (the
/// residual after the 80% train cut is halved, test taking the odd record).
/// Validation/test interactions whose user or item never occurs in train are
/// dropped outright. Each partition keeps the input order of its members.
pub fn split_dataset(data: &[Interaction], seed: u64) -> Result<DatasetSplit> {
    if data.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 interactions to split, got {}",
            data.len()
        )));
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(seed);
    // Fisher-Yates, high index down, so the assignment depends only on the seed.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = n * 8 / 10;
    let rem = n - n_train;
    let n_val = rem / 2;

    let mut train_idx: Vec<usize> = order[..n_train].to_vec();
    let mut val_idx: Vec<usize> = order[n_train..n_train + n_val].to_vec();
    let mut test_idx: Vec<usize> = order[n_train + n_val..].to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    test_idx.sort_unstable();

    let train: Vec<Interaction> = train_idx.iter().map(|&i| data[i].clone()).collect();

    let mut user_index: IndexMap<String, usize> = IndexMap::new();
    let mut item_index: IndexMap<String, usize> = IndexMap::new();
    for x in &train {
        let next = user_index.len();
        user_index.entry(x.user_id.clone()).or_insert(next);
        let next = item_index.len();
        item_index.entry(x.item_id.clone()).or_insert(next);
    }

    let keep = |x: &Interaction| {
        user_index.contains_key(x.user_id.as_str()) && item_index.contains_key(x.item_id.as_str())
    };
    let validation: Vec<Interaction> = val_idx
        .iter()
        .map(|&i| data[i].clone())
        .filter(|x| keep(x))
        .collect();
    let test: Vec<Interaction> = test_idx
        .iter()
        .map(|&i| data[i].clone())
        .filter(|x| keep(x))
        .collect();

    Ok(DatasetSplit {
        train,
        validation,
        test,
        user_index,
        item_index,
        seed,
    })
}

/// Sidecar written next to the three split files.
#[derive(Serialize, Deserialize)]
pub struct SplitIndex {
    pub user_index: IndexMap<String, usize>,
    pub item_index: IndexMap<String, usize>,
    pub seed: u64,
    pub counts: SplitCounts,
}

#[derive(Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const INDEX_FILE: &str = "indices.json";

/// Persist a split as three JSON-lines files plus the index sidecar.
pub fn write_split(split: &DatasetSplit, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, list) in [
        (TRAIN_FILE, &split.train),
        (VALIDATION_FILE, &split.validation),
        (TEST_FILE, &split.test),
    ] {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_reviews(BufWriter::new(file), list, &path)?;
    }
    let sidecar = SplitIndex {
        user_index: split.user_index.clone(),
        item_index: split.item_index.clone(),
        seed: split.seed,
        counts: SplitCounts {
            train: split.train.len(),
            validation: split.validation.len(),
            test: split.test.len(),
        },
    };
    let path = dir.join(INDEX_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &sidecar)?;
    Ok(())
}

/// Load a split previously written by [`write_split`].
pub fn read_split(dir: &Path) -> Result<DatasetSplit> {
    let read_list = |name: &str| -> Result<Vec<Interaction>> {
        let path = dir.join(name);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        // An empty partition is legitimate here (pruning can empty val/test).
        match parse_reviews(BufReader::new(file)) {
            Ok((list, _)) => Ok(list),
            Err(Error::NoValidInteractions) => Ok(Vec::new()),
            Err(e) => Err(e),
        }
    };
    let train = read_list(TRAIN_FILE)?;
    let validation = read_list(VALIDATION_FILE)?;
    let test = read_list(TEST_FILE)?;
    let path = dir.join(INDEX_FILE);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: SplitIndex = serde_json::from_reader(BufReader::new(file))?;
    if sidecar.counts.train != train.len() {
        return Err(Error::format(
            &path,
            format!(
                "index sidecar says {} train interactions, file has {}",
                sidecar.counts.train,
                train.len()
            ),
        ));
    }
    Ok(DatasetSplit {
        train,
        validation,
        test,
        user_index: sidecar.user_index,
        item_index: sidecar.item_index,
        seed: sidecar.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn ix(u: &str, i: &str, r: f64, text: &str, t: i64) -> Interaction {
        Interaction {
            user_id: u.into(),
            item_id: i.into(),
            rating: r,
            review_text: text.into(),
            timestamp: t,
        }
    }

    #[test]
    fn parse_maps_fields_directly() {
        let line = r#"{"reviewerID":"A1","asin":"B1","overall":5.0,"reviewText":"great","unixReviewTime":10}"#;
        let (out, report) = parse_reviews(Cursor::new(line)).unwrap();
        assert_eq!(out, vec![ix("A1", "B1", 5.0, "great", 10)]);
        assert_eq!(report.valid, 1);
        assert!(report.errors.is_empty());
    }

    #[test]
    fn parse_missing_review_text_means_empty() {
        let line = r#"{"reviewerID":"A1","asin":"B1","overall":3.0,"unixReviewTime":10}"#;
        let (out, _) = parse_reviews(Cursor::new(line)).unwrap();
        assert_eq!(out[0].review_text, "");
    }

    #[test]
    fn parse_empty_stream_is_an_error() {
        let err = parse_reviews(Cursor::new("")).unwrap_err();
        assert!(matches!(err, Error::NoValidInteractions));
    }

    #[test]
    fn parse_rejects_out_of_range_rating() {
        let input = concat!(
            r#"{"reviewerID":"A1","asin":"B1","overall":7.0,"reviewText":"x","unixReviewTime":1}"#,
            "\n",
            r#"{"reviewerID":"A2","asin":"B2","overall":4.0,"reviewText":"y","unixReviewTime":2}"#,
        );
        let (out, report) = parse_reviews(Cursor::new(input)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].user_id, "A2");
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.errors[0].line, 1);
        assert!(report.errors[0].message.contains("out of range"));
    }

    #[test]
    fn parse_records_malformed_lines_and_continues() {
        let input = concat!(
            "not json\n",
            r#"{"reviewerID":"A1","asin":"B1","overall":2.0,"reviewText":"","unixReviewTime":1}"#,
        );
        let (out, report) = parse_reviews(Cursor::new(input)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.errors[0].line, 1);
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        let data = vec![
            ix("u", "i", 4.0, "same", 5),
            ix("u", "i", 4.0, "same", 5),
            ix("u", "i", 4.0, "same", 6),
        ];
        let out = deduplicate(data);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn k_core_one_user_five_singleton_items_is_empty() {
        // The user has 5 interactions but every item has only 1, so all
        // items fall, then the user falls: fixed point is empty.
        let data: Vec<_> = (0..5).map(|j| ix("u", &format!("i{j}"), 4.0, "", j)).collect();
        assert!(k_core_filter(data, 5).is_empty());
    }

    #[test]
    fn k_core_fixed_point_is_identity() {
        let mut data = Vec::new();
        for u in 0..3 {
            for i in 0..3 {
                data.push(ix(&format!("u{u}"), &format!("i{i}"), 3.0, "", (u * 3 + i) as i64));
            }
        }
        let out = k_core_filter(data.clone(), 3);
        assert_eq!(out, data);
    }

    #[test]
    fn k_core_k1_is_identity() {
        let data = vec![ix("a", "x", 1.0, "", 0), ix("b", "y", 5.0, "", 1)];
        assert_eq!(k_core_filter(data.clone(), 1), data);
    }

    fn dense_block(n_users: usize, n_items: usize) -> Vec<Interaction> {
        let mut data = Vec::new();
        for u in 0..n_users {
            for i in 0..n_items {
                data.push(ix(
                    &format!("u{u}"),
                    &format!("i{i}"),
                    1.0 + ((u + i) % 5) as f64,
                    "text",
                    (u * n_items + i) as i64,
                ));
            }
        }
        data
    }

    #[test]
    fn split_of_100_is_80_10_10_before_pruning() {
        let data = dense_block(10, 10);
        let split = split_dataset(&data, 3).unwrap();
        // A 10x10 block cannot produce cold-start prunes at these sizes is
        // not guaranteed, so check the arithmetic on the shuffled cut.
        assert_eq!(split.train.len(), 80);
        assert!(split.validation.len() <= 10);
        assert!(split.test.len() <= 10);
    }

    #[test]
    fn split_is_deterministic_in_seed() {
        let data = dense_block(7, 9);
        let a = split_dataset(&data, 11).unwrap();
        let b = split_dataset(&data, 11).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&data, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_rejects_tiny_inputs() {
        let data = dense_block(3, 3);
        assert!(split_dataset(&data[..9], 0).is_err());
    }

    #[test]
    fn singleton_user_landing_outside_train_is_pruned() {
        // 30 interactions from a dense pool plus one single-record user.
        let mut data = dense_block(5, 6);
        data.push(ix("loner", "i0", 5.0, "", 999));
        let n = data.len();
        // Find a seed that sends the loner to validation or test.
        let mut hit = false;
        for seed in 0..200 {
            let split = split_dataset(&data, seed).unwrap();
            let in_train = split.train.iter().any(|x| x.user_id == "loner");
            if in_train {
                continue;
            }
            hit = true;
            let everywhere = split
                .validation
                .iter()
                .chain(&split.test)
                .any(|x| x.user_id == "loner");
            assert!(!everywhere, "seed {seed}: loner survived pruning");
            assert_eq!(
                split.train.len() + split.validation.len() + split.test.len(),
                n - 1
            );
            break;
        }
        assert!(hit, "no seed sent the loner out of train");
    }

    #[test]
    fn cold_start_safety_over_ids() {
        let data = dense_block(6, 7);
        for seed in 0..20 {
            let split = split_dataset(&data, seed).unwrap();
            for x in split.validation.iter().chain(&split.test) {
                assert!(split.user_index.contains_key(x.user_id.as_str()));
                assert!(split.item_index.contains_key(x.item_id.as_str()));
            }
        }
    }

    #[test]
    fn dense_ids_are_contiguous_from_train() {
        let data = dense_block(4, 5);
        let split = split_dataset(&data, 1).unwrap();
        let mut users: Vec<usize> = split.user_index.values().copied().collect();
        users.sort_unstable();
        assert_eq!(users, (0..split.user_index.len()).collect::<Vec<_>>());
        let ratings = split.train_ratings();
        assert_eq!(ratings.entries.len(), split.train.len());
    }

    #[test]
    fn split_roundtrips_through_disk() {
        let data = dense_block(5, 5);
        let split = split_dataset(&data, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_split(&split, dir.path()).unwrap();
        let back = read_split(dir.path()).unwrap();
        assert_eq!(split, back);
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_identity(
            records in proptest::collection::vec(
                ("[a-zA-Z0-9]{1,8}", "[a-zA-Z0-9]{1,8}", 1.0f64..=5.0, ".{0,40}", -1000i64..1_000_000),
                1..20,
            )
        ) {
            let data: Vec<Interaction> = records
                .into_iter()
                .map(|(u, i, r, text, t)| ix(&u, &i, r, &text, t))
                .collect();
            let mut buf = Vec::new();
            write_reviews(&mut buf, &data, Path::new("<mem>")).unwrap();
            let (back, _) = parse_reviews(Cursor::new(buf)).unwrap();
            prop_assert_eq!(back, data);
        }
    }
}
