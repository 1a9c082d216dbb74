//! Interaction dataset ingestion, synthetic graph generation, and splits.
//!
//! The on-disk split format is one user per line: the first ASCII-decimal
//! integer is the user id, every following integer is an item that user
//! interacted with. Ids are 0-based and dense; LF and CRLF both parse.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A user-item interaction dataset with a train/test split.
///
/// Invariants (see [`InteractionDataset::validate`]): ids are in range, no
/// duplicate pair within a split, and no pair occurs in both splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    pub num_users: u32,
    pub num_items: u32,
    pub train_edges: Vec<(u32, u32)>,
    pub test_edges: Vec<(u32, u32)>,
}

/// What was repaired while assembling a dataset from raw edge lists.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CleanupStats {
    /// Duplicate (u,i) pairs dropped within the train file.
    pub train_duplicates: usize,
    /// Duplicate (u,i) pairs dropped within the test file.
    pub test_duplicates: usize,
    /// Pairs present in both splits, removed from test.
    pub overlap_removed: usize,
}

impl InteractionDataset {
    /// Assembles a dataset from raw edge lists, repairing duplicates and
    /// train/test overlap. Sizes are inferred as `1 + max id seen`.
    pub fn from_edge_lists(
        train: Vec<(u32, u32)>,
        test: Vec<(u32, u32)>,
    ) -> Result<(Self, CleanupStats)> {
        let mut stats = CleanupStats::default();

        let mut seen = HashSet::new();
        let mut train_edges = Vec::with_capacity(train.len());
        for e in train {
            if seen.insert(e) {
                train_edges.push(e);
            } else {
                stats.train_duplicates += 1;
            }
        }

        let train_set = seen; // reuse: holds exactly the deduped train pairs
        let mut seen_test = HashSet::new();
        let mut test_edges = Vec::with_capacity(test.len());
        for e in test {
            if !seen_test.insert(e) {
                stats.test_duplicates += 1;
            } else if train_set.contains(&e) {
                stats.overlap_removed += 1;
            } else {
                test_edges.push(e);
            }
        }

        if train_edges.is_empty() {
            return Err(Error::EmptyTrain);
        }

        let mut num_users = 0;
        let mut num_items = 0;
        for &(u, i) in train_edges.iter().chain(test_edges.iter()) {
            num_users = num_users.max(u + 1);
            num_items = num_items.max(i + 1);
        }

        let ds = InteractionDataset {
            num_users,
            num_items,
            train_edges,
            test_edges,
        };
        ds.validate()?;
        Ok((ds, stats))
    }

    /// Checks all structural invariants; cheap enough to run after any load.
    pub fn validate(&self) -> Result<()> {
        let mut train_set = HashSet::with_capacity(self.train_edges.len());
        for &(u, i) in &self.train_edges {
            if u >= self.num_users || i >= self.num_items {
                return Err(Error::InvalidParam(format!(
                    "edge ({u},{i}) out of range {}x{}",
                    self.num_users, self.num_items
                )));
            }
            if !train_set.insert((u, i)) {
                return Err(Error::InvalidParam(format!("duplicate train edge ({u},{i})")));
            }
        }
        let mut test_set = HashSet::with_capacity(self.test_edges.len());
        for &(u, i) in &self.test_edges {
            if u >= self.num_users || i >= self.num_items {
                return Err(Error::InvalidParam(format!(
                    "edge ({u},{i}) out of range {}x{}",
                    self.num_users, self.num_items
                )));
            }
            if !test_set.insert((u, i)) {
                return Err(Error::InvalidParam(format!("duplicate test edge ({u},{i})")));
            }
            if train_set.contains(&(u, i)) {
                return Err(Error::InvalidParam(format!(
                    "edge ({u},{i}) appears in both train and test"
                )));
            }
        }
        Ok(())
    }

    /// Test items grouped per user, each list sorted ascending.
    pub fn test_items_by_user(&self) -> Vec<Vec<u32>> {
        let mut by_user = vec![Vec::new(); self.num_users as usize];
        for &(u, i) in &self.test_edges {
            by_user[u as usize].push(i);
        }
        for items in &mut by_user {
            items.sort_unstable();
        }
        by_user
    }
}

/// Parses one split file into a flattened `(user, item)` edge list, in file
/// order. A line holding only a user id contributes no edges.
pub fn parse_split_file<R: BufRead>(reader: R) -> Result<Vec<(u32, u32)>> {
    let mut edges = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("read failed: {e}"),
        })?;
        let line = line.trim_end_matches('\r');
        let mut tokens = line.split_ascii_whitespace();
        let Some(first) = tokens.next() else {
            continue; // blank line
        };
        let user = parse_id(first, line_no)?;
        for tok in tokens {
            let item = parse_id(tok, line_no)?;
            edges.push((user, item));
        }
    }
    Ok(edges)
}

fn parse_id(token: &str, line: usize) -> Result<u32> {
    let value: i64 = token.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("non-integer token {token:?}"),
    })?;
    if value < 0 {
        return Err(Error::Parse {
            line,
            msg: format!("negative id {value}"),
        });
    }
    u32::try_from(value).map_err(|_| Error::Parse {
        line,
        msg: format!("id {value} exceeds u32 range"),
    })
}

/// Writes an edge list in the split format. Consecutive edges that share a
/// user are grouped onto one line, so parse -> write -> parse round-trips to
/// an identical edge list.
pub fn write_split_file<W: Write>(edges: &[(u32, u32)], mut w: W) -> std::io::Result<()> {
    let mut idx = 0;
    while idx < edges.len() {
        let user = edges[idx].0;
        write!(w, "{user}")?;
        while idx < edges.len() && edges[idx].0 == user {
            write!(w, " {}", edges[idx].1)?;
            idx += 1;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Loads a train/test split pair from disk, repairing anomalies with warnings.
pub fn load_dataset(train_path: &Path, test_path: &Path) -> Result<InteractionDataset> {
    let train = parse_split_file(open(train_path)?)?;
    let test = parse_split_file(open(test_path)?)?;
    let (ds, stats) = InteractionDataset::from_edge_lists(train, test)?;
    if stats.train_duplicates > 0 {
        warn!(
            "{}: dropped {} duplicate edges",
            train_path.display(),
            stats.train_duplicates
        );
    }
    if stats.test_duplicates > 0 {
        warn!(
            "{}: dropped {} duplicate edges",
            test_path.display(),
            stats.test_duplicates
        );
    }
    if stats.overlap_removed > 0 {
        warn!(
            "removed {} test edges that also appear in train",
            stats.overlap_removed
        );
    }
    Ok(ds)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Generates a planted 2-sided community graph: users and items are split
/// into `num_blocks` aligned blocks; a within-block pair is an edge with
/// probability `p_in`, cross-block with `p_out`. Each user's edges are split
/// 80/20 into train/test; a user whose train half came out empty gets one
/// edge moved back from test. Bit-reproducible for a fixed seed.
pub fn generate_synthetic(
    num_users: u32,
    num_items: u32,
    num_blocks: u32,
    p_in: f64,
    p_out: f64,
    seed: u64,
) -> Result<InteractionDataset> {
    if num_users == 0 || num_items == 0 || num_blocks == 0 {
        return Err(Error::InvalidParam("synthetic sizes must be positive".into()));
    }
    if num_users % num_blocks != 0 || num_items % num_blocks != 0 {
        return Err(Error::InvalidParam(format!(
            "num_blocks {num_blocks} must divide both {num_users} users and {num_items} items"
        )));
    }
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) || p_out >= p_in {
        return Err(Error::InvalidParam(format!(
            "need 0 <= p_out < p_in <= 1, got p_in={p_in} p_out={p_out}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users_per_block = num_users / num_blocks;
    let items_per_block = num_items / num_blocks;

    let mut train_edges = Vec::new();
    let mut test_edges = Vec::new();
    for u in 0..num_users {
        let user_block = u / users_per_block;
        let mut items = Vec::new();
        for i in 0..num_items {
            let p = if i / items_per_block == user_block {
                p_in
            } else {
                p_out
            };
            // Always draw so the stream layout is independent of p.
            if rng.gen::<f64>() < p {
                items.push(i);
            }
        }
        let mut train_part = Vec::new();
        let mut test_part = Vec::new();
        for i in items {
            if rng.gen::<f64>() < 0.8 {
                train_part.push(i);
            } else {
                test_part.push(i);
            }
        }
        if train_part.is_empty() && !test_part.is_empty() {
            train_part.push(test_part.remove(0));
        }
        train_edges.extend(train_part.into_iter().map(|i| (u, i)));
        test_edges.extend(test_part.into_iter().map(|i| (u, i)));
    }

    if train_edges.is_empty() {
        return Err(Error::EmptyTrain);
    }
    Ok(InteractionDataset {
        num_users,
        num_items,
        train_edges,
        test_edges,
    })
}

/// Restricts a dataset to its `top_n` most active users (train+test degree,
/// ties by id), keeps only items those users touch, remaps both sides to
/// dense 0-based ids, and re-splits each user's pooled edges 80/20.
pub fn subsample_top_users(
    dataset: &InteractionDataset,
    top_n: u32,
    seed: u64,
) -> Result<InteractionDataset> {
    if top_n == 0 {
        return Err(Error::InvalidParam("top_n must be positive".into()));
    }
    let mut degree = vec![0usize; dataset.num_users as usize];
    for &(u, _) in dataset.train_edges.iter().chain(dataset.test_edges.iter()) {
        degree[u as usize] += 1;
    }
    let mut order: Vec<u32> = (0..dataset.num_users).collect();
    order.sort_by(|&a, &b| {
        degree[b as usize]
            .cmp(&degree[a as usize])
            .then(a.cmp(&b))
    });
    let kept: Vec<u32> = order
        .into_iter()
        .take(top_n as usize)
        .filter(|&u| degree[u as usize] > 0)
        .collect();

    let mut user_map = vec![u32::MAX; dataset.num_users as usize];
    let mut kept_sorted = kept;
    kept_sorted.sort_unstable();
    for (new_id, &old) in kept_sorted.iter().enumerate() {
        user_map[old as usize] = new_id as u32;
    }

    // Pool each kept user's edges (train then test order, both deduped by
    // dataset invariants), remap items densely in first-seen-by-id order.
    let mut pooled: Vec<Vec<u32>> = vec![Vec::new(); kept_sorted.len()];
    for &(u, i) in dataset.train_edges.iter().chain(dataset.test_edges.iter()) {
        let nu = user_map[u as usize];
        if nu != u32::MAX {
            pooled[nu as usize].push(i);
        }
    }
    let mut item_ids: Vec<u32> = pooled.iter().flatten().copied().collect();
    item_ids.sort_unstable();
    item_ids.dedup();
    let mut item_map = vec![u32::MAX; dataset.num_items as usize];
    for (new_id, &old) in item_ids.iter().enumerate() {
        item_map[old as usize] = new_id as u32;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_edges = Vec::new();
    let mut test_edges = Vec::new();
    for (nu, items) in pooled.iter().enumerate() {
        let mut train_part = Vec::new();
        let mut test_part = Vec::new();
        for &i in items {
            let ni = item_map[i as usize];
            if rng.gen::<f64>() < 0.8 {
                train_part.push(ni);
            } else {
                test_part.push(ni);
            }
        }
        if train_part.is_empty() && !test_part.is_empty() {
            train_part.push(test_part.remove(0));
        }
        train_edges.extend(train_part.into_iter().map(|i| (nu as u32, i)));
        test_edges.extend(test_part.into_iter().map(|i| (nu as u32, i)));
    }

    if train_edges.is_empty() {
        return Err(Error::EmptyTrain);
    }
    let ds = InteractionDataset {
        num_users: kept_sorted.len() as u32,
        num_items: item_ids.len() as u32,
        train_edges,
        test_edges,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse_str(s: &str) -> Result<Vec<(u32, u32)>> {
        parse_split_file(Cursor::new(s))
    }

    #[test]
    fn parses_user_with_items() {
        assert_eq!(parse_str("0 3 7").unwrap(), vec![(0, 3), (0, 7)]);
    }

    #[test]
    fn user_without_items_contributes_nothing() {
        assert_eq!(parse_str("5").unwrap(), vec![]);
    }

    #[test]
    fn accepts_crlf_and_blank_lines() {
        let edges = parse_str("0 1\r\n\n1 2\r\n").unwrap();
        assert_eq!(edges, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn rejects_non_integer_with_line_number() {
        let err = parse_str("0 1\n2 x").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("non-integer"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_negative_id() {
        let err = parse_str("0 -3").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 1);
                assert!(msg.contains("negative"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn toy_two_line_file_loads() {
        let train = parse_str("0 1\n1 0 1").unwrap();
        let (ds, stats) = InteractionDataset::from_edge_lists(train, vec![]).unwrap();
        assert_eq!(ds.num_users, 2);
        assert_eq!(ds.num_items, 2);
        assert_eq!(ds.train_edges.len(), 3);
        assert_eq!(stats, CleanupStats::default());
    }

    #[test]
    fn duplicates_and_overlap_are_repaired() {
        let train = vec![(0, 1), (0, 1), (1, 0)];
        let test = vec![(1, 0), (0, 2), (0, 2)];
        let (ds, stats) = InteractionDataset::from_edge_lists(train, test).unwrap();
        assert_eq!(stats.train_duplicates, 1);
        assert_eq!(stats.test_duplicates, 1);
        assert_eq!(stats.overlap_removed, 1);
        assert_eq!(ds.train_edges, vec![(0, 1), (1, 0)]);
        assert_eq!(ds.test_edges, vec![(0, 2)]);
        ds.validate().unwrap();
    }

    #[test]
    fn empty_train_is_fatal() {
        let err = InteractionDataset::from_edge_lists(vec![], vec![(0, 1)]).unwrap_err();
        assert!(matches!(err, Error::EmptyTrain));
    }

    #[test]
    fn round_trips_through_split_format() {
        let edges = vec![(0, 3), (0, 7), (2, 1), (0, 4), (5, 0)];
        let mut buf = Vec::new();
        write_split_file(&edges, &mut buf).unwrap();
        let reparsed = parse_split_file(Cursor::new(buf)).unwrap();
        assert_eq!(reparsed, edges);
    }

    #[test]
    fn synthetic_pure_blocks_connect_within_block_only() {
        let ds = generate_synthetic(20, 20, 2, 1.0, 0.0, 11).unwrap();
        let mut per_user = vec![Vec::new(); 20];
        for &(u, i) in ds.train_edges.iter().chain(ds.test_edges.iter()) {
            per_user[u as usize].push(i);
        }
        for (u, items) in per_user.iter_mut().enumerate() {
            items.sort_unstable();
            let block = u as u32 / 10;
            let expected: Vec<u32> = (block * 10..block * 10 + 10).collect();
            assert_eq!(items, &expected, "user {u}");
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(100, 100, 2, 0.5, 0.05, 7).unwrap();
        let b = generate_synthetic(100, 100, 2, 0.5, 0.05, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_within_block_rate_near_p_in() {
        let ds = generate_synthetic(100, 100, 2, 0.5, 0.05, 7).unwrap();
        let within = ds
            .train_edges
            .iter()
            .chain(ds.test_edges.iter())
            .filter(|&&(u, i)| u / 50 == i / 50)
            .count();
        let rate = within as f64 / (100.0 * 50.0);
        assert!((rate - 0.5).abs() < 0.1, "within-block rate {rate}");
    }

    #[test]
    fn synthetic_rejects_bad_params() {
        assert!(generate_synthetic(10, 10, 3, 0.5, 0.1, 0).is_err()); // 3 does not divide 10
        assert!(generate_synthetic(10, 10, 2, 0.5, 0.5, 0).is_err()); // p_out == p_in
        assert!(generate_synthetic(10, 10, 2, 1.5, 0.1, 0).is_err()); // p_in > 1
    }

    #[test]
    fn synthetic_satisfies_dataset_invariants() {
        let ds = generate_synthetic(60, 40, 2, 0.4, 0.05, 3).unwrap();
        ds.validate().unwrap();
        // Every user with any edges keeps at least one train edge.
        let mut has_train = vec![false; 60];
        let mut has_any = vec![false; 60];
        for &(u, _) in &ds.train_edges {
            has_train[u as usize] = true;
            has_any[u as usize] = true;
        }
        for &(u, _) in &ds.test_edges {
            has_any[u as usize] = true;
        }
        for u in 0..60 {
            assert!(!has_any[u] || has_train[u], "user {u} lost all train edges");
        }
    }

    #[test]
    fn load_dataset_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train.txt");
        let test = dir.path().join("test.txt");
        std::fs::write(&train, "0 1 2\n1 0\n").unwrap();
        std::fs::write(&test, "0 3\n1 2\n").unwrap();
        let ds = load_dataset(&train, &test).unwrap();
        assert_eq!(ds.num_users, 2);
        assert_eq!(ds.num_items, 4);
        assert_eq!(ds.train_edges.len(), 3);
        assert_eq!(ds.test_edges.len(), 2);
    }

    #[test]
    fn load_dataset_missing_file_names_path() {
        let err = load_dataset(Path::new("/nonexistent/train.txt"), Path::new("/nonexistent/test.txt"))
            .unwrap_err();
        assert!(err.to_string().contains("/nonexistent/train.txt"));
    }

    #[test]
    fn subsample_keeps_most_active_users() {
        let ds = generate_synthetic(40, 40, 2, 0.6, 0.05, 9).unwrap();
        let sub = subsample_top_users(&ds, 10, 1).unwrap();
        assert_eq!(sub.num_users, 10);
        sub.validate().unwrap();
        // Pool sizes per kept user match some original user's pool size.
        let total: usize = sub.train_edges.len() + sub.test_edges.len();
        assert!(total > 0);
        // Dense item ids.
        let max_item = sub
            .train_edges
            .iter()
            .chain(sub.test_edges.iter())
            .map(|&(_, i)| i)
            .max()
            .unwrap();
        assert_eq!(max_item + 1, sub.num_items);
    }
}
