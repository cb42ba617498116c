//! Dataset ingestion: interaction and KG files, the k-core filter, the
//! per-user split, and the immutable graphs built from them.

mod graph;
mod interactions;
mod kg;
mod split;

use std::fs;
use std::path::Path;

pub use graph::InteractionGraph;
pub use interactions::{apply_k_core, format_interactions, load_interactions, RawInteractions};
pub use kg::{load_kg, read_triplets, KgIdMaps, KnowledgeGraph, Triplet};
pub use split::{split, DatasetSplit, SplitRatios};

use crate::error::DataError;
use crate::kv;

/// Original ids of every dense user, entity (items first) and relation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdMaps {
    pub users: Vec<u64>,
    pub entities: Vec<u64>,
    pub relations: Vec<u64>,
}

impl IdMaps {
    pub fn dense_user(&self, original: u64) -> Option<u32> {
        self.users.iter().position(|&u| u == original).map(|p| p as u32)
    }
}

#[derive(Clone, Debug)]
pub struct PrepareOptions {
    pub k_core: usize,
    pub ratios: SplitRatios,
    pub seed: u64,
    pub add_inverse: bool,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            k_core: 10,
            ratios: SplitRatios::default(),
            seed: 2024,
            add_inverse: true,
        }
    }
}

/// Summary counts in the usual dataset-statistics layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub entities: usize,
    pub relations: usize,
    pub triplets: usize,
}

impl DatasetStats {
    pub fn to_text(&self) -> String {
        format!(
            "users={}\nitems={}\ninteractions={}\nentities={}\nrelations={}\ntriplets={}\n",
            self.users, self.items, self.interactions, self.entities, self.relations, self.triplets
        )
    }
}

/// Everything training and evaluation read: the split, the training graph,
/// the KG and the id maps.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: DatasetSplit,
    pub train: InteractionGraph,
    pub kg: KnowledgeGraph,
    pub maps: IdMaps,
}

fn write(dir: &Path, name: &str, content: &str) -> Result<(), DataError> {
    let path = dir.join(name);
    fs::write(&path, content).map_err(|source| DataError::Io { path, source })
}

fn read_lists(path: &Path, n_users: usize, n_items: usize) -> Result<Vec<Vec<u32>>, DataError> {
    let raw = load_interactions(path)?;
    if raw.n_users() > n_users || raw.n_items > n_items {
        return Err(DataError::Consistency(format!(
            "{} exceeds {n_users} users / {n_items} items",
            path.display()
        )));
    }
    let mut lists = raw.user_items;
    lists.resize_with(n_users, Vec::new);
    Ok(lists)
}

fn format_map(ids: &[u64]) -> String {
    ids.iter().enumerate().map(|(k, o)| format!("{k} {o}\n")).collect()
}

fn read_map(path: &Path) -> Result<Vec<u64>, DataError> {
    let text = interactions::read_text(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let dense = interactions::parse_id(path, lineno + 1, toks[0])?;
        if toks.len() != 2 || dense as usize != out.len() {
            return Err(DataError::Schema {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "expected `dense original` in dense order".into(),
            });
        }
        out.push(interactions::parse_id(path, lineno + 1, toks[1])?);
    }
    Ok(out)
}

impl Dataset {
    /// Full preparation pipeline from raw files.
    pub fn prepare(
        interactions: impl AsRef<Path>,
        kg_path: impl AsRef<Path>,
        opts: &PrepareOptions,
    ) -> Result<Self, DataError> {
        let raw = load_interactions(interactions)?;
        let filtered = apply_k_core(&raw, opts.k_core)?;
        let split = split(&filtered, opts.ratios, opts.seed)?;
        let (kg, kg_maps) = load_kg(kg_path, &filtered.item_ids, opts.add_inverse)?;
        let maps = IdMaps {
            users: filtered.user_ids.clone(),
            entities: kg_maps.entities,
            relations: kg_maps.relations,
        };
        Self::from_parts(split, kg, maps)
    }

    pub fn from_parts(
        split: DatasetSplit,
        kg: KnowledgeGraph,
        maps: IdMaps,
    ) -> Result<Self, DataError> {
        if kg.n_items() != split.n_items {
            return Err(DataError::Consistency(format!(
                "KG has {} items, interactions have {}",
                kg.n_items(),
                split.n_items
            )));
        }
        if let Some(u) = split.train.iter().position(Vec::is_empty) {
            return Err(DataError::Consistency(format!("user {u} has no training items")));
        }
        let train = InteractionGraph::from_lists(&split.train, split.n_items)?;
        Ok(Dataset {
            split,
            train,
            kg,
            maps,
        })
    }

    pub fn n_users(&self) -> usize {
        self.split.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.split.n_items
    }

    pub fn stats(&self) -> DatasetStats {
        let (a, b, c) = self.split.edge_counts();
        DatasetStats {
            users: self.n_users(),
            items: self.n_items(),
            interactions: a + b + c,
            entities: self.kg.n_entities(),
            relations: self.kg.n_base_relations(),
            triplets: self.kg.triplets().len(),
        }
    }

    /// Writes the prepared artifacts (dense ids throughout).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), DataError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write(dir, "train.txt", &format_interactions(&self.split.train))?;
        write(dir, "valid.txt", &format_interactions(&self.split.valid))?;
        write(dir, "test.txt", &format_interactions(&self.split.test))?;
        write(dir, "kg.txt", &self.kg.format_triplets())?;
        write(dir, "user_map.txt", &format_map(&self.maps.users))?;
        write(dir, "entity_map.txt", &format_map(&self.maps.entities))?;
        write(dir, "relation_map.txt", &format_map(&self.maps.relations))?;
        write(dir, "split.txt", &self.split.manifest())?;
        write(dir, "stats.txt", &self.stats().to_text())?;
        write(
            dir,
            "dataset.txt",
            &format!(
                "users={}\nitems={}\nentities={}\nrelations={}\nadd_inverse={}\n",
                self.n_users(),
                self.n_items(),
                self.kg.n_entities(),
                self.kg.n_base_relations(),
                self.kg.has_inverse()
            ),
        )?;
        Ok(())
    }

    /// Reads artifacts written by [`Dataset::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, DataError> {
        let dir = dir.as_ref();
        let meta_path = dir.join("dataset.txt");
        let schema = |message: String| DataError::Schema {
            path: meta_path.clone(),
            line: 0,
            message,
        };
        let meta = kv::parse(&interactions::read_text(&meta_path)?).map_err(schema)?;
        let n_users: usize = kv::get(&meta, "users").map_err(schema)?;
        let n_items: usize = kv::get(&meta, "items").map_err(schema)?;
        let n_entities: usize = kv::get(&meta, "entities").map_err(schema)?;
        let n_relations: usize = kv::get(&meta, "relations").map_err(schema)?;
        let add_inverse: bool = kv::get(&meta, "add_inverse").map_err(schema)?;

        let split_path = dir.join("split.txt");
        let split_meta = kv::parse(&interactions::read_text(&split_path)?).map_err(|message| {
            DataError::Schema {
                path: split_path.clone(),
                line: 0,
                message,
            }
        })?;
        let seed: u64 = kv::get(&split_meta, "seed").unwrap_or(0);
        let ratios = split_meta
            .get("ratios")
            .and_then(|r| {
                let v: Vec<f64> = r.split(',').filter_map(|x| x.parse().ok()).collect();
                (v.len() == 3).then(|| SplitRatios {
                    train: v[0],
                    valid: v[1],
                    test: v[2],
                })
            })
            .unwrap_or_default();

        let split = DatasetSplit {
            train: read_lists(&dir.join("train.txt"), n_users, n_items)?,
            valid: read_lists(&dir.join("valid.txt"), n_users, n_items)?,
            test: read_lists(&dir.join("test.txt"), n_users, n_items)?,
            n_items,
            seed,
            ratios,
        };
        let triplets: Vec<Triplet> = read_triplets(dir.join("kg.txt"))?
            .into_iter()
            .map(|(h, r, t)| Triplet {
                head: h as u32,
                relation: r as u32,
                tail: t as u32,
            })
            .collect();
        let kg = KnowledgeGraph::from_triplets(n_entities, n_items, n_relations, &triplets, add_inverse)?;
        let maps = IdMaps {
            users: read_map(&dir.join("user_map.txt"))?,
            entities: read_map(&dir.join("entity_map.txt"))?,
            relations: read_map(&dir.join("relation_map.txt"))?,
        };
        Self::from_parts(split, kg, maps)
    }
}
