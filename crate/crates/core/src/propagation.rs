//! Relational propagation of entity embeddings over the knowledge graph.
//!
//! Each layer replaces every entity row by the mean of `e_r ⊙ e_v` over its
//! stored `(r, v)` neighbours; entities without neighbours keep their row.

use crate::compute::{Matrix, Scalar, Tape, Var};
use crate::data::KnowledgeGraph;
use crate::error::ComputeError;

/// Entity matrices for layers `0..=L` (layer 0 is the learned table) and
/// the shared relation table, as tape variables.
#[derive(Clone, Debug)]
pub struct LayerStack {
    pub entities: Vec<Var>,
    pub relations: Var,
}

impl LayerStack {
    pub fn depth(&self) -> usize {
        self.entities.len() - 1
    }
}

fn check_shapes<T: Scalar>(
    tape: &Tape<T>,
    kg: &KnowledgeGraph,
    prev: Var,
    relations: Var,
) -> Result<(), ComputeError> {
    let (p, r) = (tape.value(prev), tape.value(relations));
    if p.rows() != kg.n_entities() {
        return Err(ComputeError::Shape {
            op: "propagate_layer",
            detail: format!("{} entity rows for {} entities", p.rows(), kg.n_entities()),
        });
    }
    if r.rows() < kg.n_relations() || r.cols() != p.cols() {
        return Err(ComputeError::Shape {
            op: "propagate_layer",
            detail: format!(
                "relation table {:?} for {} relations of width {}",
                r.shape(),
                kg.n_relations(),
                p.cols()
            ),
        });
    }
    Ok(())
}

/// One propagation layer on the tape. With `relation_encoding == false`
/// messages are the neighbour rows themselves (all-ones relations).
pub fn propagate_layer_on<T: Scalar>(
    tape: &mut Tape<T>,
    kg: &KnowledgeGraph,
    prev: Var,
    relations: Var,
    relation_encoding: bool,
) -> Result<Var, ComputeError> {
    check_shapes(tape, kg, prev, relations)?;
    let neighbours = tape.gather_rows(prev, kg.tail_index())?;
    let messages = if relation_encoding {
        let rel = tape.gather_rows(relations, kg.relation_index())?;
        tape.elementwise_product(rel, neighbours)?
    } else {
        neighbours
    };
    let aggregated = tape.mean_rows(messages, kg.offsets())?;
    tape.select_rows(aggregated, prev, kg.isolated())
}

/// Builds the full stack of `layers + 1` entity matrices.
pub fn propagate_all_on<T: Scalar>(
    tape: &mut Tape<T>,
    kg: &KnowledgeGraph,
    entities: Var,
    relations: Var,
    layers: usize,
    relation_encoding: bool,
) -> Result<LayerStack, ComputeError> {
    let mut stack = Vec::with_capacity(layers + 1);
    stack.push(entities);
    for _ in 0..layers {
        let prev = *stack.last().expect("layer 0");
        stack.push(propagate_layer_on(tape, kg, prev, relations, relation_encoding)?);
    }
    Ok(LayerStack {
        entities: stack,
        relations,
    })
}

/// Matrix-in, matrix-out form of [`propagate_layer_on`].
pub fn propagate_layer<T: Scalar>(
    kg: &KnowledgeGraph,
    prev: &Matrix<T>,
    relations: &Matrix<T>,
) -> Result<Matrix<T>, ComputeError> {
    let mut tape = Tape::new();
    let p = tape.constant(prev.clone());
    let r = tape.constant(relations.clone());
    let out = propagate_layer_on(&mut tape, kg, p, r, true)?;
    Ok(tape.value(out).clone())
}

/// Matrix form of [`propagate_all_on`].
pub fn propagate_all<T: Scalar>(
    kg: &KnowledgeGraph,
    entities: &Matrix<T>,
    relations: &Matrix<T>,
    layers: usize,
    relation_encoding: bool,
) -> Result<Vec<Matrix<T>>, ComputeError> {
    let mut tape = Tape::new();
    let e = tape.constant(entities.clone());
    let r = tape.constant(relations.clone());
    let stack = propagate_all_on(&mut tape, kg, e, r, layers, relation_encoding)?;
    Ok(stack.entities.iter().map(|&v| tape.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Triplet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(head: u32, relation: u32, tail: u32) -> Triplet {
        Triplet { head, relation, tail }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn random_kg(rng: &mut ChaCha8Rng, n_ent: usize, n_items: usize, n_rel: usize, n: usize) -> KnowledgeGraph {
        let trip: Vec<Triplet> = (0..n)
            .map(|_| {
                t(
                    rng.gen_range(0..n_ent as u32),
                    rng.gen_range(0..n_rel as u32),
                    rng.gen_range(0..n_ent as u32),
                )
            })
            .collect();
        KnowledgeGraph::from_triplets(n_ent, n_items, n_rel, &trip, true).unwrap()
    }

    #[test]
    fn single_neighbour_is_one_product() {
        let kg = KnowledgeGraph::from_triplets(2, 1, 1, &[t(0, 0, 1)], false).unwrap();
        let prev = Matrix::from_rows(&[vec![9.0, 9.0], vec![1.0, 4.0]]).unwrap();
        let rel = Matrix::from_rows(&[vec![2.0, 0.5]]).unwrap();
        let out = propagate_layer(&kg, &prev, &rel).unwrap();
        assert_eq!(out.row(0), &[2.0, 2.0]);
        // entity 1 has no outgoing triplet without inverses
        assert_eq!(out.row(1), &[1.0, 4.0]);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kg = random_kg(&mut rng, 10, 4, 3, 18);
        let prev = random_matrix(&mut rng, 10, 5);
        let rel = random_matrix(&mut rng, kg.n_relations(), 5);
        let out = propagate_layer(&kg, &prev, &rel).unwrap();
        for h in 0..10 {
            let nbrs: Vec<(u32, u32)> = kg.neighbors(h).collect();
            for c in 0..5 {
                let expect = if nbrs.is_empty() {
                    prev.get(h, c)
                } else {
                    let s: f64 = nbrs
                        .iter()
                        .map(|&(r, v)| rel.get(r as usize, c) * prev.get(v as usize, c))
                        .sum();
                    s / nbrs.len() as f64
                };
                assert!((out.get(h, c) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_layers_is_the_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kg = random_kg(&mut rng, 6, 2, 2, 8);
        let e = random_matrix(&mut rng, 6, 3);
        let r = random_matrix(&mut rng, 4, 3);
        let stack = propagate_all(&kg, &e, &r, 0, true).unwrap();
        assert_eq!(stack, vec![e]);
    }

    #[test]
    fn two_layers_reach_two_hops() {
        // chain item 0 -> v1 -> v2, no inverses
        let kg = KnowledgeGraph::from_triplets(3, 1, 1, &[t(0, 0, 1), t(1, 0, 2)], false).unwrap();
        let e = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let r = Matrix::from_rows(&[vec![0.5]]).unwrap();
        let stack = propagate_all(&kg, &e, &r, 2, true).unwrap();
        // layer 1: item = 0.5*2, v1 = 0.5*3, v2 unchanged
        assert_eq!(stack[1].as_slice(), &[1.0, 1.5, 3.0]);
        // layer 2: item = 0.5 * (0.5*3) depends on v2's layer-0 row
        assert_eq!(stack[2].get(0, 0), 0.25 * 3.0);
        let mut e2 = e.clone();
        e2.row_mut(2)[0] = 7.0;
        let stack2 = propagate_all(&kg, &e2, &r, 2, true).unwrap();
        assert_eq!(stack2[2].get(0, 0), 0.25 * 7.0);
        assert_eq!(stack2[1].get(0, 0), stack[1].get(0, 0));
    }

    #[test]
    fn no_relation_encoding_equals_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kg = random_kg(&mut rng, 12, 5, 3, 25);
        let e = random_matrix(&mut rng, 12, 4);
        let ones = Matrix::filled(kg.n_relations(), 4, 1.0);
        let a = propagate_all(&kg, &e, &ones, 3, true).unwrap();
        let b = propagate_all(&kg, &e, &ones, 3, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn isolated_entities_are_bitwise_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let kg = random_kg(&mut rng, 30, 5, 2, 10);
        let e = random_matrix(&mut rng, 30, 4);
        let r = random_matrix(&mut rng, kg.n_relations(), 4);
        let stack = propagate_all(&kg, &e, &r, 3, true).unwrap();
        let mut seen = 0;
        for h in (0..30).filter(|&h| kg.isolated()[h]) {
            seen += 1;
            for layer in &stack {
                assert_eq!(
                    layer.row(h).iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    e.row(h).iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                );
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn all_ones_output_within_neighbour_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let kg = random_kg(&mut rng, 15, 5, 3, 40);
        let e = random_matrix(&mut rng, 15, 3);
        let ones = Matrix::filled(kg.n_relations(), 3, 1.0);
        let out = propagate_layer(&kg, &e, &ones).unwrap();
        for h in 0..15 {
            let nbrs: Vec<u32> = kg.neighbors(h).map(|(_, v)| v).collect();
            if nbrs.is_empty() {
                continue;
            }
            for c in 0..3 {
                let lo = nbrs.iter().map(|&v| e.get(v as usize, c)).fold(f64::INFINITY, f64::min);
                let hi = nbrs.iter().map(|&v| e.get(v as usize, c)).fold(f64::NEG_INFINITY, f64::max);
                let x = out.get(h, c);
                assert!(x >= lo - 1e-15 && x <= hi + 1e-15);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 12;
        let trip: Vec<Triplet> = (0..30)
            .map(|_| t(rng.gen_range(0..n as u32), rng.gen_range(0..3), rng.gen_range(0..n as u32)))
            .collect();
        let kg = KnowledgeGraph::from_triplets(n, n, 3, &trip, true).unwrap();
        let e = random_matrix(&mut rng, n, 4);
        let r = random_matrix(&mut rng, kg.n_relations(), 4);
        let out = propagate_layer(&kg, &e, &r).unwrap();

        let mut perm: Vec<u32> = (0..n as u32).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let ptrip: Vec<Triplet> = trip
            .iter()
            .map(|x| t(perm[x.head as usize], x.relation, perm[x.tail as usize]))
            .collect();
        let pkg = KnowledgeGraph::from_triplets(n, n, 3, &ptrip, true).unwrap();
        let mut pe = Matrix::zeros(n, 4);
        for k in 0..n {
            pe.row_mut(perm[k] as usize).copy_from_slice(e.row(k));
        }
        let pout = propagate_layer(&pkg, &pe, &r).unwrap();
        for k in 0..n {
            for c in 0..4 {
                assert!((pout.get(perm[k] as usize, c) - out.get(k, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn wrong_entity_rows_rejected() {
        let kg = KnowledgeGraph::from_triplets(3, 1, 1, &[t(0, 0, 1)], true).unwrap();
        let e = Matrix::<f64>::zeros(2, 2);
        let r = Matrix::zeros(2, 2);
        assert!(propagate_layer(&kg, &e, &r).is_err());
    }
}
