//! Conditional alignment and uniformity regularisers.
//!
//! Items that share KG entities are pulled together after both are
//! projected onto the mean embedding of the shared entities; a uniformity
//! term spreads item embeddings apart.

use log::warn;
use rand::Rng;

use crate::compute::{Index, Matrix, Scalar, Tape, Var};
use crate::data::KnowledgeGraph;
use crate::error::ComputeError;

/// Two items and the entities both link to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlapPair {
    pub item1: u32,
    pub item2: u32,
    pub entities: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OverlapPairBatch {
    pub pairs: Vec<OverlapPair>,
}

impl OverlapPairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Same pairs with `item1` and `item2` exchanged.
    pub fn swapped(&self) -> Self {
        OverlapPairBatch {
            pairs: self
                .pairs
                .iter()
                .map(|p| OverlapPair {
                    item1: p.item2,
                    item2: p.item1,
                    entities: p.entities.clone(),
                })
                .collect(),
        }
    }
}

/// Sorted intersection of the two items' original 1-hop entity sets.
pub fn overlap_entities(i1: u32, i2: u32, kg: &KnowledgeGraph) -> Vec<u32> {
    let (a, b) = (kg.item_entities(i1 as usize), kg.item_entities(i2 as usize));
    let (mut x, mut y) = (0, 0);
    let mut out = Vec::new();
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[x]);
                x += 1;
                y += 1;
            }
        }
    }
    out
}

/// Distinct items other than `anchor` sharing at least one entity with it.
pub fn co_entity_partners(anchor: u32, kg: &KnowledgeGraph) -> Vec<u32> {
    let mut out: Vec<u32> = kg
        .item_entities(anchor as usize)
        .iter()
        .flat_map(|&v| kg.items_linked_to(v as usize).iter().copied())
        .filter(|&i| i != anchor)
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Draws `count` anchors uniformly from `item_batch`, each paired with a
/// uniformly drawn co-entity partner. Anchors without a partner are skipped.
pub fn sample_overlap_pairs<R: Rng>(
    kg: &KnowledgeGraph,
    item_batch: &[u32],
    count: usize,
    rng: &mut R,
) -> OverlapPairBatch {
    let mut pairs = Vec::with_capacity(count);
    if item_batch.is_empty() {
        return OverlapPairBatch { pairs };
    }
    for _ in 0..count {
        let anchor = item_batch[rng.gen_range(0..item_batch.len())];
        let partners = co_entity_partners(anchor, kg);
        if partners.is_empty() {
            continue;
        }
        let partner = partners[rng.gen_range(0..partners.len())];
        pairs.push(OverlapPair {
            item1: anchor,
            item2: partner,
            entities: overlap_entities(anchor, partner, kg),
        });
    }
    OverlapPairBatch { pairs }
}

/// Mean over pairs of `‖e_i1 ⊙ ē − e_i2 ⊙ ē‖²`, `ē` the mean overlap-entity
/// row. `None` for an empty batch.
pub fn alignment_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    pairs: &OverlapPairBatch,
    items: Var,
    entities: Var,
) -> Result<Option<Var>, ComputeError> {
    if pairs.is_empty() {
        warn!("alignment batch is empty; term contributes 0");
        return Ok(None);
    }
    if pairs.pairs.iter().any(|p| p.entities.is_empty()) {
        return Err(ComputeError::Contract("overlap pair without shared entities".into()));
    }
    let mut offsets = Vec::with_capacity(pairs.len() + 1);
    offsets.push(0u32);
    let mut flat = Vec::new();
    for p in &pairs.pairs {
        flat.extend_from_slice(&p.entities);
        offsets.push(flat.len() as u32);
    }
    let flat: Index = flat.into();
    let offsets: Index = offsets.into();
    let first: Index = pairs.pairs.iter().map(|p| p.item1).collect();
    let second: Index = pairs.pairs.iter().map(|p| p.item2).collect();

    let ev = tape.gather_rows(entities, &flat)?;
    let centre = tape.mean_rows(ev, &offsets)?;
    let a = tape.gather_rows(items, &first)?;
    let b = tape.gather_rows(items, &second)?;
    let ca = tape.elementwise_product(a, centre)?;
    let cb = tape.elementwise_product(b, centre)?;
    let diff = tape.sub(ca, cb)?;
    let sq = tape.squared_norm(diff)?;
    let total = tape.sum(sq)?;
    Ok(Some(tape.scale(total, T::one() / T::lit(pairs.len() as f64))?))
}

/// `log` of the mean over distinct unordered row pairs of
/// `exp(−2‖e_i − e_j‖²)`. `None` for fewer than two rows.
pub fn uniformity_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    rows: Var,
    normalize: bool,
) -> Result<Option<Var>, ComputeError> {
    if tape.value(rows).rows() < 2 {
        warn!("uniformity batch has fewer than two rows; term contributes 0");
        return Ok(None);
    }
    let x = if normalize { tape.normalize_rows(rows)? } else { rows };
    let d2 = tape.pairwise_sq_dist(x)?;
    let scaled = tape.scale(d2, T::lit(-2.0))?;
    Ok(Some(tape.scalar_exp_mean_log(scaled)?))
}

/// Matrix form of [`alignment_loss_on`]; 0 for an empty batch.
pub fn alignment_loss<T: Scalar>(
    pairs: &OverlapPairBatch,
    items: &Matrix<T>,
    entities: &Matrix<T>,
) -> Result<T, ComputeError> {
    let mut tape = Tape::new();
    let i = tape.constant(items.clone());
    let e = tape.constant(entities.clone());
    Ok(alignment_loss_on(&mut tape, pairs, i, e)?.map_or(T::zero(), |v| tape.value(v).item()))
}

/// Matrix form of [`uniformity_loss_on`] on raw rows; 0 below two rows.
pub fn uniformity_loss<T: Scalar>(rows: &Matrix<T>) -> Result<T, ComputeError> {
    let mut tape = Tape::new();
    let r = tape.constant(rows.clone());
    Ok(uniformity_loss_on(&mut tape, r, false)?.map_or(T::zero(), |v| tape.value(v).item()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Triplet;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(head: u32, relation: u32, tail: u32) -> Triplet {
        Triplet { head, relation, tail }
    }

    fn m(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn overlap_examples() {
        // items 0,1,2; entities 5,6,7
        let kg = KnowledgeGraph::from_triplets(
            8,
            3,
            2,
            &[t(0, 0, 5), t(0, 1, 6), t(1, 0, 6), t(1, 1, 7), t(2, 0, 4)],
            true,
        )
        .unwrap();
        assert_eq!(overlap_entities(0, 1, &kg), vec![6]);
        assert_eq!(overlap_entities(1, 0, &kg), vec![6]);
        assert_eq!(overlap_entities(0, 2, &kg), Vec::<u32>::new());
    }

    #[test]
    fn forced_partner_and_skip() {
        let kg = KnowledgeGraph::from_triplets(5, 3, 1, &[t(0, 0, 4), t(1, 0, 4), t(2, 0, 3)], true)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_overlap_pairs(&kg, &[0], 20, &mut rng);
        assert_eq!(batch.len(), 20);
        assert!(batch.pairs.iter().all(|p| p.item2 == 1 && p.entities == vec![4]));
        let none = sample_overlap_pairs(&kg, &[2], 20, &mut rng);
        assert!(none.is_empty());
        let mixed = sample_overlap_pairs(&kg, &[0, 2], 200, &mut rng);
        assert!(mixed.len() < 200 && !mixed.is_empty());
    }

    #[test]
    fn partner_frequencies_are_uniform() {
        // items 0..4 all link entity 4; item 1 also links entity 5 twice over
        let kg = KnowledgeGraph::from_triplets(
            6,
            4,
            2,
            &[t(0, 0, 4), t(1, 0, 4), t(2, 0, 4), t(3, 0, 4), t(1, 1, 5), t(0, 1, 5)],
            true,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let batch = sample_overlap_pairs(&kg, &[0], draws, &mut rng);
        let mut counts = [0usize; 4];
        for p in &batch.pairs {
            counts[p.item2 as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        let (n, prob) = (draws as f64, 1.0 / 3.0);
        let sigma = (n * prob * (1.0 - prob)).sqrt();
        for &c in &counts[1..] {
            assert!((c as f64 - n * prob).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn alignment_examples() {
        let pair = |e: Vec<u32>| OverlapPairBatch {
            pairs: vec![OverlapPair { item1: 0, item2: 1, entities: e }],
        };
        let items = m(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        let ents = m(&[vec![1.0, 1.0], vec![3.0, -2.0]]);
        assert_eq!(alignment_loss(&pair(vec![0]), &items, &ents).unwrap(), 2.0);
        // single entity: ē is that row
        let v = alignment_loss(&pair(vec![1]), &items, &ents).unwrap();
        assert_eq!(v, 9.0 + 4.0);
        let same = OverlapPairBatch {
            pairs: vec![OverlapPair { item1: 0, item2: 2, entities: vec![0, 1] }],
        };
        assert_eq!(alignment_loss(&same, &items, &ents).unwrap(), 0.0);
        assert_eq!(alignment_loss(&OverlapPairBatch::default(), &items, &ents).unwrap(), 0.0);
    }

    #[test]
    fn uniformity_examples() {
        assert_eq!(uniformity_loss(&m(&[vec![1.0, 2.0], vec![1.0, 2.0]])).unwrap(), 0.0);
        let v = uniformity_loss(&m(&[vec![0.0, 0.0], vec![1.0, 0.0]])).unwrap();
        assert!((v + 2.0).abs() < 1e-15);
        assert_eq!(uniformity_loss(&m(&[vec![0.0, 1.0]])).unwrap(), 0.0);
    }

    #[test]
    fn normalized_uniformity_ignores_scale() {
        let a = m(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![-3.0, 1.0]]);
        let b = m(&[vec![5.0, 0.0], vec![0.0, 0.5], vec![-6.0, 2.0]]);
        let run = |x: &Matrix<f64>| {
            let mut tape = Tape::new();
            let r = tape.constant(x.clone());
            let v = uniformity_loss_on(&mut tape, r, true).unwrap().unwrap();
            tape.value(v).item()
        };
        assert!((run(&a) - run(&b)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn loss_signs_and_symmetry(
            vals in prop::collection::vec(-3.0f64..3.0, 5 * 3 + 4 * 3),
            picks in prop::collection::vec((0u32..5, 0u32..5, 0u32..4), 1..6),
        ) {
            let items = Matrix::from_vec(5, 3, vals[..15].to_vec()).unwrap();
            let ents = Matrix::from_vec(4, 3, vals[15..].to_vec()).unwrap();
            let batch = OverlapPairBatch {
                pairs: picks.iter().filter(|p| p.0 != p.1).map(|&(a, b, e)| OverlapPair {
                    item1: a, item2: b, entities: vec![e, (e + 1) % 4],
                }).collect(),
            };
            let al = alignment_loss(&batch, &items, &ents).unwrap();
            prop_assert!(al >= 0.0);
            prop_assert_eq!(al, alignment_loss(&batch.swapped(), &items, &ents).unwrap());
            prop_assert!(uniformity_loss(&items).unwrap() <= 0.0);
        }
    }
}
