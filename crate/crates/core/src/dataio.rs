//! Interaction-log loading, filtering, splitting, and graph construction.
//!
//! The on-disk interaction format is UTF-8 text, one record per line,
//! tab-separated: `user_id<TAB>item_id<TAB>rating[<TAB>timestamp]`.
//! Lines starting with `#` and blank lines are ignored. Ids are free-form
//! strings and are densely re-indexed from 0 in first-appearance order;
//! the original ids are kept so artifacts written back to disk stay in
//! the caller's id vocabulary.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{par, seeds};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("no interactions left after applying min_rating = {min_rating}")]
    Empty { min_rating: f64 },
    #[error("cannot split {n} interactions; at least 5 are required")]
    TooFewInteractions { n: usize },
    #[error("split input must carry the full tag, found {found:?}")]
    NotFull { found: SplitTag },
    #[error("split ratios must all be positive")]
    BadRatios,
    #[error("{path}: unknown {side} id {id:?} not present in the vocabulary")]
    UnknownId { path: PathBuf, side: &'static str, id: String },
    #[error("adjacency requires a nonempty training set")]
    EmptyGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

/// A set of interactions over a fixed user/item id space.
#[derive(Debug, Clone)]
pub struct InteractionDataset {
    pub n_users: usize,
    pub n_items: usize,
    pub interactions: Vec<Interaction>,
    pub split_tag: SplitTag,
    /// Original user ids; index = dense user index.
    pub user_ids: Vec<String>,
    /// Original item ids; index = dense item index.
    pub item_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub density: f64,
}

impl DatasetStats {
    pub fn from_counts(n_users: usize, n_items: usize, n_interactions: usize) -> Self {
        DatasetStats {
            n_users,
            n_items,
            n_interactions,
            density: n_interactions as f64 / (n_users as f64 * n_items as f64),
        }
    }
}

/// The three disjoint parts produced by [`InteractionDataset::split`].
#[derive(Debug, Clone)]
pub struct SplitSet {
    pub train: InteractionDataset,
    pub val: InteractionDataset,
    pub test: InteractionDataset,
}

/// Loads and filters an interaction file.
///
/// Rows with `rating < min_rating` are dropped; of duplicate
/// `(user, item)` rows surviving the filter, the first wins. The dense
/// id spaces cover exactly the nodes of the surviving rows.
pub fn load_interactions(path: &Path, min_rating: f64) -> Result<InteractionDataset, DataError> {
    let text = fs::read_to_string(path)
        .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    let parse_err = |line: usize, message: String| DataError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut user_ids: Vec<String> = Vec::new();
    let mut item_ids: Vec<String> = Vec::new();
    let mut user_index: std::collections::HashMap<String, u32> = std::collections::HashMap::new();
    let mut item_index: std::collections::HashMap<String, u32> = std::collections::HashMap::new();
    let mut seen: HashSet<(u32, u32)> = HashSet::new();
    let mut interactions = Vec::new();

    for (line_no, raw) in text.lines().enumerate() {
        let line = line_no + 1;
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(parse_err(
                line,
                format!("expected 3 or 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let rating: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("rating {:?} is not a number", fields[2])))?;
        let timestamp = match fields.get(3) {
            None => None,
            Some(t) => Some(t.trim().parse::<i64>().map_err(|_| {
                parse_err(line, format!("timestamp {:?} is not an integer", t))
            })?),
        };
        if rating < min_rating {
            continue;
        }
        let user = *user_index.entry(fields[0].to_string()).or_insert_with(|| {
            user_ids.push(fields[0].to_string());
            (user_ids.len() - 1) as u32
        });
        let item = *item_index.entry(fields[1].to_string()).or_insert_with(|| {
            item_ids.push(fields[1].to_string());
            (item_ids.len() - 1) as u32
        });
        if seen.insert((user, item)) {
            interactions.push(Interaction { user, item, rating, timestamp });
        }
    }

    if interactions.is_empty() {
        return Err(DataError::Empty { min_rating });
    }
    Ok(InteractionDataset {
        n_users: user_ids.len(),
        n_items: item_ids.len(),
        interactions,
        split_tag: SplitTag::Full,
        user_ids,
        item_ids,
    })
}

/// Largest-remainder apportionment of `n` into the given ratio parts;
/// leftover units go to the largest remainders, earlier part on ties.
fn apportion(n: usize, ratios: (u32, u32, u32)) -> (usize, usize, usize) {
    let parts = [ratios.0 as usize, ratios.1 as usize, ratios.2 as usize];
    let total: usize = parts.iter().sum();
    let mut sizes = [0usize; 3];
    let mut remainders = [0usize; 3];
    for i in 0..3 {
        sizes[i] = n * parts[i] / total;
        remainders[i] = n * parts[i] % total;
    }
    let mut leftover = n - sizes.iter().sum::<usize>();
    while leftover > 0 {
        let mut best = 0;
        for i in 1..3 {
            if remainders[i] > remainders[best] {
                best = i;
            }
        }
        sizes[best] += 1;
        remainders[best] = 0;
        leftover -= 1;
    }
    (sizes[0], sizes[1], sizes[2])
}

impl InteractionDataset {
    fn with_interactions(&self, interactions: Vec<Interaction>, tag: SplitTag) -> Self {
        InteractionDataset {
            n_users: self.n_users,
            n_items: self.n_items,
            interactions,
            split_tag: tag,
            user_ids: self.user_ids.clone(),
            item_ids: self.item_ids.clone(),
        }
    }

    /// Splits into train/val/test by per-interaction uniform assignment.
    ///
    /// Sizes follow largest-remainder rounding of the ratios, so every
    /// part is within one interaction of its exact share.
    pub fn split(&self, ratios: (u32, u32, u32), seed: u64) -> Result<SplitSet, DataError> {
        if self.split_tag != SplitTag::Full {
            return Err(DataError::NotFull { found: self.split_tag });
        }
        if ratios.0 == 0 || ratios.1 == 0 || ratios.2 == 0 {
            return Err(DataError::BadRatios);
        }
        let n = self.interactions.len();
        if n < 5 {
            return Err(DataError::TooFewInteractions { n });
        }
        let (n_train, n_val, _) = apportion(n, ratios);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeds::rng(seed, "split"));
        let pick = |range: std::ops::Range<usize>| -> Vec<Interaction> {
            let mut idx: Vec<usize> = order[range].to_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| self.interactions[i]).collect()
        };
        Ok(SplitSet {
            train: self.with_interactions(pick(0..n_train), SplitTag::Train),
            val: self.with_interactions(pick(n_train..n_train + n_val), SplitTag::Val),
            test: self.with_interactions(pick(n_train + n_val..n), SplitTag::Test),
        })
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats::from_counts(self.n_users, self.n_items, self.interactions.len())
    }

    /// Item indices interacted with by each user, ascending.
    pub fn items_by_user(&self) -> Vec<Vec<u32>> {
        let mut lists = vec![Vec::new(); self.n_users];
        for it in &self.interactions {
            lists[it.user as usize].push(it.item);
        }
        for l in &mut lists {
            l.sort_unstable();
        }
        lists
    }

    fn format_rows(&self) -> String {
        let mut out = String::new();
        for it in &self.interactions {
            let user = &self.user_ids[it.user as usize];
            let item = &self.item_ids[it.item as usize];
            match it.timestamp {
                Some(t) => writeln!(out, "{user}\t{item}\t{}\t{t}", it.rating),
                None => writeln!(out, "{user}\t{item}\t{}", it.rating),
            }
            .expect("writing to a string cannot fail");
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsSidecar {
    dataset: DatasetStats,
    train: usize,
    val: usize,
    test: usize,
}

/// Writes the three split files, the id vocabularies, and a stats sidecar.
pub fn write_split_dir(dir: &Path, splits: &SplitSet) -> Result<(), DataError> {
    let io = |e: std::io::Error, p: &Path| DataError::Io { path: p.to_path_buf(), source: e };
    fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
    for (name, ds) in [
        ("train.tsv", &splits.train),
        ("val.tsv", &splits.val),
        ("test.tsv", &splits.test),
    ] {
        let p = dir.join(name);
        fs::write(&p, ds.format_rows()).map_err(|e| io(e, &p))?;
    }
    let users = dir.join("users.txt");
    fs::write(&users, splits.train.user_ids.join("\n") + "\n").map_err(|e| io(e, &users))?;
    let items = dir.join("items.txt");
    fs::write(&items, splits.train.item_ids.join("\n") + "\n").map_err(|e| io(e, &items))?;

    let full = splits.train.interactions.len()
        + splits.val.interactions.len()
        + splits.test.interactions.len();
    let sidecar = StatsSidecar {
        dataset: DatasetStats::from_counts(splits.train.n_users, splits.train.n_items, full),
        train: splits.train.interactions.len(),
        val: splits.val.interactions.len(),
        test: splits.test.interactions.len(),
    };
    let p = dir.join("stats.json");
    let json = serde_json::to_string_pretty(&sidecar).expect("stats serialize");
    fs::write(&p, json).map_err(|e| io(e, &p))
}

/// Reads a directory written by [`write_split_dir`]; the vocabulary files
/// fix the id space, so splits stay aligned even when a node is absent
/// from one of them.
pub fn load_split_dir(dir: &Path) -> Result<SplitSet, DataError> {
    let io = |e: std::io::Error, p: &Path| DataError::Io { path: p.to_path_buf(), source: e };
    let read_vocab = |name: &str| -> Result<Vec<String>, DataError> {
        let p = dir.join(name);
        let text = fs::read_to_string(&p).map_err(|e| io(e, &p))?;
        Ok(text.lines().map(str::to_string).collect())
    };
    let user_ids = read_vocab("users.txt")?;
    let item_ids = read_vocab("items.txt")?;
    let user_index: std::collections::HashMap<&str, u32> =
        user_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect();
    let item_index: std::collections::HashMap<&str, u32> =
        item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect();

    let mut parts = Vec::new();
    for (name, tag) in [
        ("train.tsv", SplitTag::Train),
        ("val.tsv", SplitTag::Val),
        ("test.tsv", SplitTag::Test),
    ] {
        let p = dir.join(name);
        let text = fs::read_to_string(&p).map_err(|e| io(e, &p))?;
        let mut interactions = Vec::new();
        for (line_no, raw) in text.lines().enumerate() {
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() < 3 || fields.len() > 4 {
                return Err(DataError::Parse {
                    path: p.clone(),
                    line: line_no + 1,
                    message: format!(
                        "expected 3 or 4 tab-separated fields, found {}",
                        fields.len()
                    ),
                });
            }
            let user = *user_index.get(fields[0]).ok_or_else(|| DataError::UnknownId {
                path: p.clone(),
                side: "user",
                id: fields[0].to_string(),
            })?;
            let item = *item_index.get(fields[1]).ok_or_else(|| DataError::UnknownId {
                path: p.clone(),
                side: "item",
                id: fields[1].to_string(),
            })?;
            let rating: f64 = fields[2].parse().map_err(|_| DataError::Parse {
                path: p.clone(),
                line: line_no + 1,
                message: format!("rating {:?} is not a number", fields[2]),
            })?;
            let timestamp = match fields.get(3) {
                None => None,
                Some(t) => Some(t.parse::<i64>().map_err(|_| DataError::Parse {
                    path: p.clone(),
                    line: line_no + 1,
                    message: format!("timestamp {:?} is not an integer", t),
                })?),
            };
            interactions.push(Interaction { user, item, rating, timestamp });
        }
        parts.push(InteractionDataset {
            n_users: user_ids.len(),
            n_items: item_ids.len(),
            interactions,
            split_tag: tag,
            user_ids: user_ids.clone(),
            item_ids: item_ids.clone(),
        });
    }
    let test = parts.pop().expect("three parts");
    let val = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok(SplitSet { train, val, test })
}

/// Symmetrically normalized bipartite adjacency in compressed sparse rows.
///
/// Node indices run users first, then items offset by `n_users`. An edge
/// `(u, i)` contributes `1/sqrt(deg(u)·deg(i))` in both directions, so
/// the matrix is symmetric with a zero diagonal.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    n_users: usize,
    n_items: usize,
    offsets: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

/// Builds the normalized adjacency over the training interactions.
pub fn build_normalized_adjacency(
    train: &InteractionDataset,
) -> Result<NormalizedAdjacency, DataError> {
    if train.interactions.is_empty() {
        return Err(DataError::EmptyGraph);
    }
    let n = train.n_users + train.n_items;
    let mut degree = vec![0usize; n];
    for it in &train.interactions {
        degree[it.user as usize] += 1;
        degree[train.n_users + it.item as usize] += 1;
    }
    let mut offsets = vec![0usize; n + 1];
    for v in 0..n {
        offsets[v + 1] = offsets[v] + degree[v];
    }
    let mut cols = vec![0u32; offsets[n]];
    let mut weights = vec![0.0; offsets[n]];
    let mut cursor = offsets.clone();
    for it in &train.interactions {
        let u = it.user as usize;
        let i = train.n_users + it.item as usize;
        let w = 1.0 / ((degree[u] as f64) * (degree[i] as f64)).sqrt();
        cols[cursor[u]] = i as u32;
        weights[cursor[u]] = w;
        cursor[u] += 1;
        cols[cursor[i]] = u as u32;
        weights[cursor[i]] = w;
        cursor[i] += 1;
    }
    let mut adj = NormalizedAdjacency {
        n_users: train.n_users,
        n_items: train.n_items,
        offsets,
        cols,
        weights,
    };
    adj.sort_rows();
    Ok(adj)
}

impl NormalizedAdjacency {
    fn sort_rows(&mut self) {
        for v in 0..self.n_nodes() {
            let range = self.offsets[v]..self.offsets[v + 1];
            let mut row: Vec<(u32, f64)> = self.cols[range.clone()]
                .iter()
                .copied()
                .zip(self.weights[range.clone()].iter().copied())
                .collect();
            row.sort_unstable_by_key(|&(c, _)| c);
            for (k, (c, w)) in row.into_iter().enumerate() {
                self.cols[range.start + k] = c;
                self.weights[range.start + k] = w;
            }
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[node]..self.offsets[node + 1];
        self.cols[range.clone()]
            .iter()
            .zip(self.weights[range].iter())
            .map(|(&c, &w)| (c as usize, w))
    }

    /// Entry lookup; O(log deg) via the sorted rows. Test support.
    pub fn entry(&self, row: usize, col: usize) -> f64 {
        let range = self.offsets[row]..self.offsets[row + 1];
        match self.cols[range.clone()].binary_search(&(col as u32)) {
            Ok(k) => self.weights[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// Sparse-dense product `A·x`, parallel over output rows.
    pub fn matmul(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n_nodes(), "row count must match node count");
        let d = x.ncols();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array2::zeros((self.n_nodes(), d));
        {
            let slice = out.as_slice_mut().expect("standard layout");
            par::for_each_chunk(slice, d, |v, row| {
                for (n, w) in self.neighbors(v) {
                    let src = &xs[n * d..(n + 1) * d];
                    for (r, s) in row.iter_mut().zip(src) {
                        *r += w * s;
                    }
                }
            });
        }
        out
    }

    /// Single-threaded twin of [`Self::matmul`]; the two agree bitwise.
    pub fn matmul_sequential(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n_nodes(), "row count must match node count");
        let d = x.ncols();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array2::zeros((self.n_nodes(), d));
        {
            let slice = out.as_slice_mut().expect("standard layout");
            par::for_each_chunk_sequential(slice, d, |v, row| {
                for (n, w) in self.neighbors(v) {
                    let src = &xs[n * d..(n + 1) * d];
                    for (r, s) in row.iter_mut().zip(src) {
                        *r += w * s;
                    }
                }
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::apportion;

    #[test]
    fn apportionment_is_exact_and_breaks_ties_toward_earlier_parts() {
        assert_eq!(apportion(100, (3, 1, 1)), (60, 20, 20));
        // Quotas for 7 are (4.2, 1.4, 1.4); val wins the leftover unit
        // over test because it comes first.
        assert_eq!(apportion(7, (3, 1, 1)), (4, 2, 1));
        for n in 5..400 {
            let (a, b, c) = apportion(n, (3, 1, 1));
            assert_eq!(a + b + c, n);
        }
    }
}
