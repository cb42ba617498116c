#![allow(dead_code)]

use std::path::{Path, PathBuf};

use kgdiv_core::data::{Dataset, KnowledgeGraph, PrepareOptions, Triplet};
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Planted four-cluster fixture after the default preparation protocol.
pub fn fixture_dataset() -> Dataset {
    Dataset::prepare(
        fixture("interactions.txt"),
        fixture("kg.txt"),
        &PrepareOptions::default(),
    )
    .expect("fixture prepares")
}

/// Random KG over `n_entities` with the first `n_items` as items.
pub fn random_kg<R: Rng>(
    rng: &mut R,
    n_entities: usize,
    n_items: usize,
    n_relations: usize,
    n_triplets: usize,
) -> KnowledgeGraph {
    let triplets: Vec<Triplet> = (0..n_triplets)
        .map(|_| Triplet {
            head: rng.gen_range(0..n_entities as u32),
            relation: rng.gen_range(0..n_relations as u32),
            tail: rng.gen_range(0..n_entities as u32),
        })
        .collect();
    KnowledgeGraph::from_triplets(n_entities, n_items, n_relations, &triplets, true).unwrap()
}

/// Each user gets between 1 and `max_len` distinct items.
pub fn random_lists<R: Rng>(rng: &mut R, n_users: usize, n_items: usize, max_len: usize) -> Vec<Vec<u32>> {
    (0..n_users)
        .map(|_| {
            let len = rng.gen_range(1..=max_len.min(n_items));
            let mut l: Vec<u32> = rand::seq::index::sample(rng, n_items, len)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            l.sort_unstable();
            l
        })
        .collect()
}
