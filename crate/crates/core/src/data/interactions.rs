use std::fs;
use std::path::Path;

use crate::error::DataError;

/// Per-user item lists, ids dense in `0..n_users` / `0..n_items`.
///
/// `user_ids[u]` and `item_ids[i]` give the id each row had in the source file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawInteractions {
    pub user_items: Vec<Vec<u32>>,
    pub n_items: usize,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
}

impl RawInteractions {
    /// Builds from dense per-user lists; lists are sorted and deduplicated.
    pub fn from_lists(mut user_items: Vec<Vec<u32>>, n_items: usize) -> Self {
        for items in &mut user_items {
            items.sort_unstable();
            items.dedup();
        }
        let n_users = user_items.len();
        RawInteractions {
            user_items,
            n_items,
            user_ids: (0..n_users as u64).collect(),
            item_ids: (0..n_items as u64).collect(),
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_items.len()
    }

    pub fn n_edges(&self) -> usize {
        self.user_items.iter().map(Vec::len).sum()
    }

    /// All `(user, item)` pairs in user-major order.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.user_items
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u as u32, i)))
    }
}

pub(crate) fn parse_id(path: &Path, line: usize, token: &str) -> Result<u64, DataError> {
    token.parse::<u64>().map_err(|_| DataError::Parse {
        path: path.to_path_buf(),
        line,
        token: token.to_string(),
    })
}

pub(crate) fn dense_id(path: &Path, line: usize, id: u64) -> Result<u32, DataError> {
    u32::try_from(id).map_err(|_| DataError::Schema {
        path: path.to_path_buf(),
        line,
        message: format!("id {id} exceeds the 32-bit id space"),
    })
}

pub(crate) fn read_text(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a `u i1 i2 ...` file. Counts are `max id + 1`; duplicates are dropped.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<RawInteractions, DataError> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut user_items: Vec<Vec<u32>> = Vec::new();
    let mut max_item: Option<u32> = None;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let mut tokens = line.split_whitespace();
        let Some(first) = tokens.next() else { continue };
        let user = dense_id(path, lineno, parse_id(path, lineno, first)?)? as usize;
        if user >= user_items.len() {
            user_items.resize_with(user + 1, Vec::new);
        }
        for tok in tokens {
            let item = dense_id(path, lineno, parse_id(path, lineno, tok)?)?;
            max_item = max_item.max(Some(item));
            user_items[user].push(item);
        }
    }
    if user_items.is_empty() {
        return Err(DataError::Empty(format!("{} has no interaction lines", path.display())));
    }
    let n_items = max_item.map_or(0, |m| m as usize + 1);
    Ok(RawInteractions::from_lists(user_items, n_items))
}

/// Writes dense per-user lists in the same `u i1 i2 ...` layout.
pub fn format_interactions(lists: &[Vec<u32>]) -> String {
    let mut out = String::new();
    for (u, items) in lists.iter().enumerate() {
        out.push_str(&u.to_string());
        for i in items {
            out.push(' ');
            out.push_str(&i.to_string());
        }
        out.push('\n');
    }
    out
}

/// Keeps users with at least `k` interactions, then drops items no kept
/// user touches and re-densifies both id spaces (original order preserved).
pub fn apply_k_core(raw: &RawInteractions, k: usize) -> Result<RawInteractions, DataError> {
    if k == 0 {
        return Err(DataError::Consistency("k-core threshold must be at least 1".into()));
    }
    let kept_users: Vec<usize> = (0..raw.n_users())
        .filter(|&u| raw.user_items[u].len() >= k)
        .collect();
    if kept_users.is_empty() {
        return Err(DataError::Empty(format!("no user has {k} or more interactions")));
    }
    let mut used = vec![false; raw.n_items];
    for &u in &kept_users {
        for &i in &raw.user_items[u] {
            used[i as usize] = true;
        }
    }
    let mut remap = vec![u32::MAX; raw.n_items];
    let mut item_ids = Vec::new();
    for (i, _) in used.iter().enumerate().filter(|(_, &b)| b) {
        remap[i] = item_ids.len() as u32;
        item_ids.push(raw.item_ids[i]);
    }
    let user_items = kept_users
        .iter()
        .map(|&u| raw.user_items[u].iter().map(|&i| remap[i as usize]).collect())
        .collect();
    Ok(RawInteractions {
        user_items,
        n_items: item_ids.len(),
        user_ids: kept_users.iter().map(|&u| raw.user_ids[u]).collect(),
        item_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_counts_from_max_id() {
        let f = write_tmp("0 1 2\n1 2\n");
        let raw = load_interactions(f.path()).unwrap();
        assert_eq!(raw.n_users(), 2);
        assert_eq!(raw.n_items, 3);
        assert_eq!(raw.n_edges(), 3);
    }

    #[test]
    fn duplicates_are_dropped() {
        let f = write_tmp("0 1 1 2\n");
        let raw = load_interactions(f.path()).unwrap();
        assert_eq!(raw.user_items[0], vec![1, 2]);
    }

    #[test]
    fn malformed_token_reports_line() {
        let f = write_tmp("0 1\n\n1 x2\n");
        match load_interactions(f.path()) {
            Err(DataError::Parse { line, token, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(token, "x2");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_tmp("\n  \n");
        assert!(matches!(load_interactions(f.path()), Err(DataError::Empty(_))));
    }

    #[test]
    fn k_core_threshold_is_inclusive() {
        let raw = RawInteractions::from_lists(
            vec![(0..9).collect(), (0..10).collect(), (5..20).collect()],
            20,
        );
        let out = apply_k_core(&raw, 10).unwrap();
        assert_eq!(out.user_ids, vec![1, 2]);
        // items 0..20 all still touched by users 1 and 2
        assert_eq!(out.n_items, 20);
    }

    #[test]
    fn k_core_drops_orphans_and_redensifies() {
        let raw = RawInteractions::from_lists(vec![vec![0, 1], vec![5, 7, 9]], 10);
        let out = apply_k_core(&raw, 3).unwrap();
        assert_eq!(out.user_ids, vec![1]);
        assert_eq!(out.item_ids, vec![5, 7, 9]);
        assert_eq!(out.user_items, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn k_core_empty_result() {
        let raw = RawInteractions::from_lists(vec![vec![0, 1]], 2);
        assert!(matches!(apply_k_core(&raw, 3), Err(DataError::Empty(_))));
    }
}
