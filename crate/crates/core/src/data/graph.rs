use std::sync::Arc;

use crate::compute::Index;
use crate::error::DataError;

/// User–item bipartite graph stored as CSR in both directions.
#[derive(Clone, Debug)]
pub struct InteractionGraph {
    n_users: usize,
    n_items: usize,
    user_offsets: Index,
    user_items: Index,
    item_offsets: Index,
    item_users: Index,
    /// Owning user of each edge in user-major order.
    edge_users: Index,
    /// Owning item of each edge in item-major order.
    edge_items: Index,
}

fn csr(n_rows: usize, pairs: &[(u32, u32)]) -> (Vec<u32>, Vec<u32>) {
    let mut offsets = vec![0u32; n_rows + 1];
    for &(r, _) in pairs {
        offsets[r as usize + 1] += 1;
    }
    for k in 0..n_rows {
        offsets[k + 1] += offsets[k];
    }
    let mut cursor = offsets.clone();
    let mut cols = vec![0u32; pairs.len()];
    for &(r, c) in pairs {
        cols[cursor[r as usize] as usize] = c;
        cursor[r as usize] += 1;
    }
    (offsets, cols)
}

fn owners(offsets: &[u32]) -> Vec<u32> {
    offsets
        .windows(2)
        .enumerate()
        .flat_map(|(r, w)| std::iter::repeat_n(r as u32, (w[1] - w[0]) as usize))
        .collect()
}

impl InteractionGraph {
    /// Builds from per-user sorted item lists.
    pub fn from_lists(user_items: &[Vec<u32>], n_items: usize) -> Result<Self, DataError> {
        let n_users = user_items.len();
        let mut pairs: Vec<(u32, u32)> = Vec::new();
        for (u, items) in user_items.iter().enumerate() {
            for &i in items {
                if i as usize >= n_items {
                    return Err(DataError::Consistency(format!(
                        "user {u} references item {i} but there are {n_items} items"
                    )));
                }
                pairs.push((u as u32, i));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        let (user_offsets, user_cols) = csr(n_users, &pairs);
        let mut transposed: Vec<(u32, u32)> = pairs.iter().map(|&(u, i)| (i, u)).collect();
        transposed.sort_unstable();
        let (item_offsets, item_cols) = csr(n_items, &transposed);
        Ok(InteractionGraph {
            n_users,
            n_items,
            edge_users: owners(&user_offsets).into(),
            edge_items: owners(&item_offsets).into(),
            user_offsets: user_offsets.into(),
            user_items: user_cols.into(),
            item_offsets: item_offsets.into(),
            item_users: item_cols.into(),
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_edges(&self) -> usize {
        self.user_items.len()
    }

    pub fn items_of(&self, u: usize) -> &[u32] {
        &self.user_items[self.user_offsets[u] as usize..self.user_offsets[u + 1] as usize]
    }

    pub fn users_of(&self, i: usize) -> &[u32] {
        &self.item_users[self.item_offsets[i] as usize..self.item_offsets[i + 1] as usize]
    }

    pub fn user_degree(&self, u: usize) -> usize {
        (self.user_offsets[u + 1] - self.user_offsets[u]) as usize
    }

    pub fn item_degree(&self, i: usize) -> usize {
        (self.item_offsets[i + 1] - self.item_offsets[i]) as usize
    }

    pub fn contains(&self, u: usize, i: u32) -> bool {
        self.items_of(u).binary_search(&i).is_ok()
    }

    pub fn user_offsets(&self) -> &Index {
        &self.user_offsets
    }

    pub fn user_items(&self) -> &Index {
        &self.user_items
    }

    pub fn item_offsets(&self) -> &Index {
        &self.item_offsets
    }

    pub fn item_users(&self) -> &Index {
        &self.item_users
    }

    pub fn edge_users(&self) -> &Index {
        &self.edge_users
    }

    pub fn edge_items(&self) -> &Index {
        &self.edge_items
    }

    /// Per-user item lists, the inverse of [`InteractionGraph::from_lists`].
    pub fn to_lists(&self) -> Vec<Vec<u32>> {
        (0..self.n_users).map(|u| self.items_of(u).to_vec()).collect()
    }

    /// `1/√(|N_u|·|N_i|)` for each edge, in user-major and item-major order.
    pub fn symmetric_norms(&self) -> (Arc<[f64]>, Arc<[f64]>) {
        let w = |u: usize, i: usize| {
            1.0 / ((self.user_degree(u) as f64).sqrt() * (self.item_degree(i) as f64).sqrt())
        };
        let by_user = self
            .edge_users
            .iter()
            .zip(self.user_items.iter())
            .map(|(&u, &i)| w(u as usize, i as usize))
            .collect();
        let by_item = self
            .edge_items
            .iter()
            .zip(self.item_users.iter())
            .map(|(&i, &u)| w(u as usize, i as usize))
            .collect();
        (by_user, by_item)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn csr_round_trip_and_transpose(
            lists in prop::collection::vec(prop::collection::btree_set(0u32..12, 0..6), 1..10)
        ) {
            let lists: Vec<Vec<u32>> = lists.into_iter().map(|s| s.into_iter().collect()).collect();
            let g = InteractionGraph::from_lists(&lists, 12).unwrap();
            prop_assert_eq!(g.to_lists(), lists.clone());
            let mut fwd = Vec::new();
            for u in 0..g.n_users() {
                prop_assert_eq!(g.user_degree(u), g.items_of(u).len());
                fwd.extend(g.items_of(u).iter().map(|&i| (u as u32, i)));
            }
            let mut back = Vec::new();
            for i in 0..g.n_items() {
                prop_assert_eq!(g.item_degree(i), g.users_of(i).len());
                back.extend(g.users_of(i).iter().map(|&u| (u, i as u32)));
            }
            back.sort_unstable();
            prop_assert_eq!(fwd, back);
        }
    }

    #[test]
    fn out_of_range_item_rejected() {
        assert!(InteractionGraph::from_lists(&[vec![3]], 3).is_err());
    }
}
