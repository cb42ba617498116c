use std::collections::BTreeSet;
use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use super::interactions::{parse_id, read_text};
use crate::compute::Index;
use crate::error::DataError;

/// One `(head, relation, tail)` fact with dense ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
}

/// Relational graph over entities; items occupy entity ids `0..n_items`.
///
/// The propagation CSR holds every stored triplet, including inverse copies
/// `(t, r + n_base_relations, h)` when enabled. Item-side lookups used for
/// overlap and coverage only see the original direction.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    n_entities: usize,
    n_items: usize,
    n_base_relations: usize,
    add_inverse: bool,
    triplets: Vec<Triplet>,
    offsets: Index,
    relations: Index,
    tails: Index,
    isolated: Arc<[bool]>,
    item_offsets: Vec<u32>,
    item_links: Vec<(u32, u32)>,
    item_entity_offsets: Vec<u32>,
    item_entities: Vec<u32>,
    entity_item_offsets: Vec<u32>,
    entity_items: Vec<u32>,
}

/// Dense → original id maps produced while loading a KG file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KgIdMaps {
    pub entities: Vec<u64>,
    pub relations: Vec<u64>,
}

fn offsets_of<T>(n: usize, rows: &[T], key: impl Fn(&T) -> u32) -> Vec<u32> {
    let mut off = vec![0u32; n + 1];
    for r in rows {
        off[key(r) as usize + 1] += 1;
    }
    for k in 0..n {
        off[k + 1] += off[k];
    }
    off
}

impl KnowledgeGraph {
    /// Builds from dense triplets. Duplicate triplets are stored once.
    pub fn from_triplets(
        n_entities: usize,
        n_items: usize,
        n_base_relations: usize,
        triplets: &[Triplet],
        add_inverse: bool,
    ) -> Result<Self, DataError> {
        if n_items > n_entities {
            return Err(DataError::Consistency(format!(
                "{n_items} items do not fit in {n_entities} entities"
            )));
        }
        for t in triplets {
            if t.head as usize >= n_entities || t.tail as usize >= n_entities {
                return Err(DataError::Consistency(format!(
                    "triplet {t:?} references an entity outside 0..{n_entities}"
                )));
            }
            if t.relation as usize >= n_base_relations {
                return Err(DataError::Consistency(format!(
                    "triplet {t:?} references a relation outside 0..{n_base_relations}"
                )));
            }
        }
        let mut base: Vec<Triplet> = triplets.to_vec();
        base.sort_unstable();
        base.dedup();

        let mut stored = base.clone();
        if add_inverse {
            stored.extend(base.iter().map(|t| Triplet {
                head: t.tail,
                relation: t.relation + n_base_relations as u32,
                tail: t.head,
            }));
            stored.sort_unstable();
            stored.dedup();
        }
        let offsets = offsets_of(n_entities, &stored, |t| t.head);
        let isolated: Arc<[bool]> = offsets.windows(2).map(|w| w[0] == w[1]).collect();

        let item_side: Vec<&Triplet> = base.iter().filter(|t| (t.head as usize) < n_items).collect();
        let item_offsets = offsets_of(n_items, &item_side, |t| t.head);
        let item_links = item_side.iter().map(|t| (t.relation, t.tail)).collect();

        let mut item_entity_pairs: Vec<(u32, u32)> =
            item_side.iter().map(|t| (t.head, t.tail)).collect();
        item_entity_pairs.dedup();
        // already sorted by (head, relation, tail); re-sort by (head, tail)
        item_entity_pairs.sort_unstable();
        item_entity_pairs.dedup();
        let item_entity_offsets = offsets_of(n_items, &item_entity_pairs, |p| p.0);
        let item_entities = item_entity_pairs.iter().map(|p| p.1).collect();

        let mut entity_item_pairs: Vec<(u32, u32)> =
            item_entity_pairs.iter().map(|&(i, v)| (v, i)).collect();
        entity_item_pairs.sort_unstable();
        let entity_item_offsets = offsets_of(n_entities, &entity_item_pairs, |p| p.0);
        let entity_items = entity_item_pairs.iter().map(|p| p.1).collect();

        Ok(KnowledgeGraph {
            n_entities,
            n_items,
            n_base_relations,
            add_inverse,
            offsets: offsets.into(),
            relations: stored.iter().map(|t| t.relation).collect(),
            tails: stored.iter().map(|t| t.tail).collect(),
            triplets: base,
            isolated,
            item_offsets,
            item_links,
            item_entity_offsets,
            item_entities,
            entity_item_offsets,
            entity_items,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Relation ids in use, inverse relations included.
    pub fn n_relations(&self) -> usize {
        if self.add_inverse {
            2 * self.n_base_relations
        } else {
            self.n_base_relations
        }
    }

    pub fn n_base_relations(&self) -> usize {
        self.n_base_relations
    }

    pub fn has_inverse(&self) -> bool {
        self.add_inverse
    }

    /// Original triplets, sorted and deduplicated.
    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    /// Number of stored triplets, inverses included.
    pub fn n_stored(&self) -> usize {
        self.tails.len()
    }

    /// `(relation, tail)` pairs leaving `head` in the propagation graph.
    pub fn neighbors(&self, head: usize) -> impl Iterator<Item = (u32, u32)> + '_ {
        let (lo, hi) = (self.offsets[head] as usize, self.offsets[head + 1] as usize);
        self.relations[lo..hi]
            .iter()
            .copied()
            .zip(self.tails[lo..hi].iter().copied())
    }

    pub fn degree(&self, head: usize) -> usize {
        (self.offsets[head + 1] - self.offsets[head]) as usize
    }

    pub fn offsets(&self) -> &Index {
        &self.offsets
    }

    pub fn relation_index(&self) -> &Index {
        &self.relations
    }

    pub fn tail_index(&self) -> &Index {
        &self.tails
    }

    /// True for entities with no stored outgoing triplet.
    pub fn isolated(&self) -> &Arc<[bool]> {
        &self.isolated
    }

    /// Original `(relation, tail)` links of an item.
    pub fn item_links(&self, item: usize) -> &[(u32, u32)] {
        &self.item_links[self.item_offsets[item] as usize..self.item_offsets[item + 1] as usize]
    }

    /// Sorted distinct tails of an item's original links.
    pub fn item_entities(&self, item: usize) -> &[u32] {
        &self.item_entities
            [self.item_entity_offsets[item] as usize..self.item_entity_offsets[item + 1] as usize]
    }

    /// Sorted items that link to `entity` through an original triplet.
    pub fn items_linked_to(&self, entity: usize) -> &[u32] {
        &self.entity_items
            [self.entity_item_offsets[entity] as usize..self.entity_item_offsets[entity + 1] as usize]
    }

    pub fn is_item(&self, entity: u32) -> bool {
        (entity as usize) < self.n_items
    }

    /// Dense `h r t` lines of the original triplets.
    pub fn format_triplets(&self) -> String {
        let mut out = String::new();
        for t in &self.triplets {
            out.push_str(&format!("{} {} {}\n", t.head, t.relation, t.tail));
        }
        out
    }
}

/// Reads `h r t` lines with their original ids.
pub fn read_triplets(path: impl AsRef<Path>) -> Result<Vec<(u64, u64, u64)>, DataError> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 3 {
            return Err(DataError::Schema {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("expected `h r t`, found {} tokens", tokens.len()),
            });
        }
        let h = parse_id(path, lineno, tokens[0])?;
        let r = parse_id(path, lineno, tokens[1])?;
        let t = parse_id(path, lineno, tokens[2])?;
        for id in [h, r, t] {
            if id > u32::MAX as u64 / 2 {
                return Err(DataError::Schema {
                    path: path.to_path_buf(),
                    line: lineno,
                    message: format!("id {id} overflows the entity/relation id space"),
                });
            }
        }
        out.push((h, r, t));
    }
    Ok(out)
}

/// Loads a KG file and re-densifies it so that `item_ids[k]` (original ids
/// of the kept items, in dense item order) becomes entity `k`. Remaining
/// entities follow in ascending original id order, as do relations.
pub fn load_kg(
    path: impl AsRef<Path>,
    item_ids: &[u64],
    add_inverse: bool,
) -> Result<(KnowledgeGraph, KgIdMaps), DataError> {
    let path = path.as_ref();
    let raw = read_triplets(path)?;
    if raw.is_empty() {
        return Err(DataError::Empty(format!("{} has no triplets", path.display())));
    }
    let max_entity = raw.iter().map(|&(h, _, t)| h.max(t)).max().unwrap_or(0);
    if let Some(&missing) = item_ids.iter().find(|&&i| i > max_entity) {
        return Err(DataError::Consistency(format!(
            "item {missing} is outside the KG entity space 0..={max_entity}"
        )));
    }
    let mut entity_map: HashMap<u64, u32> = HashMap::new();
    let mut entities: Vec<u64> = Vec::new();
    for &i in item_ids {
        entity_map.insert(i, entities.len() as u32);
        entities.push(i);
    }
    let others: BTreeSet<u64> = raw
        .iter()
        .flat_map(|&(h, _, t)| [h, t])
        .filter(|e| !entity_map.contains_key(e))
        .collect();
    for e in others {
        entity_map.insert(e, entities.len() as u32);
        entities.push(e);
    }
    let relations: Vec<u64> = raw
        .iter()
        .map(|&(_, r, _)| r)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let relation_map: HashMap<u64, u32> = relations
        .iter()
        .enumerate()
        .map(|(k, &r)| (r, k as u32))
        .collect();
    let triplets: Vec<Triplet> = raw
        .iter()
        .map(|&(h, r, t)| Triplet {
            head: entity_map[&h],
            relation: relation_map[&r],
            tail: entity_map[&t],
        })
        .collect();
    let kg = KnowledgeGraph::from_triplets(
        entities.len(),
        item_ids.len(),
        relations.len(),
        &triplets,
        add_inverse,
    )?;
    Ok((kg, KgIdMaps { entities, relations }))
}
