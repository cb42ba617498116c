//! Diversified user embeddings.
//!
//! A user's layer-`l` embedding starts from the mean of their interacted
//! item rows. Each item is then weighted by the softmax of its Euclidean
//! distance from that mean, so the items least like the rest of the
//! profile pull hardest. Layers are summed into the final representation.

use std::sync::Arc;

use crate::compute::{Index, Matrix, Scalar, Tape, Var};
use crate::data::InteractionGraph;
use crate::error::ComputeError;

/// Per-user embeddings for one layer, batched over all users on the tape.
///
/// With `diversify == false` the result is the plain mean of each user's
/// items, which is what the `no_del` ablation uses.
pub fn user_layer_on<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &InteractionGraph,
    item_layer: Var,
    diversify: bool,
) -> Result<Var, ComputeError> {
    if tape.value(item_layer).rows() != graph.n_items() {
        return Err(ComputeError::Shape {
            op: "user_layer",
            detail: format!(
                "{} item rows for {} items",
                tape.value(item_layer).rows(),
                graph.n_items()
            ),
        });
    }
    if let Some(u) = (0..graph.n_users()).find(|&u| graph.user_degree(u) == 0) {
        return Err(ComputeError::Contract(format!("user {u} has no training items")));
    }
    let rows = tape.gather_rows(item_layer, graph.user_items())?;
    let temp = tape.mean_rows(rows, graph.user_offsets())?;
    if !diversify {
        return Ok(temp);
    }
    let temp_per_edge = tape.gather_rows(temp, graph.edge_users())?;
    let dist = tape.euclidean_distance(temp_per_edge, rows)?;
    let weights = tape.softmax_vector(dist, graph.user_offsets())?;
    let weighted = tape.scale_rows(weights, rows)?;
    tape.scatter_add_rows(weighted, graph.edge_users(), None, graph.n_users())
}

/// Elementwise sum of a non-empty list of equally shaped layers.
pub fn readout_sum_on<T: Scalar>(tape: &mut Tape<T>, layers: &[Var]) -> Result<Var, ComputeError> {
    let (&first, rest) = layers
        .split_first()
        .ok_or_else(|| ComputeError::Contract("readout over zero layers".into()))?;
    rest.iter().try_fold(first, |acc, &l| tape.add(acc, l))
}

fn rows_of<T: Scalar>(items: &[u32], item_layer: &Matrix<T>) -> Result<Matrix<T>, ComputeError> {
    let mut tape = Tape::new();
    let src = tape.constant(item_layer.clone());
    let index: Index = items.iter().copied().collect();
    let out = tape.gather_rows(src, &index)?;
    Ok(tape.value(out).clone())
}

/// Mean of the listed item rows.
pub fn user_temp<T: Scalar>(items: &[u32], item_layer: &Matrix<T>) -> Result<Vec<T>, ComputeError> {
    if items.is_empty() {
        return Err(ComputeError::Contract("user_temp needs at least one item".into()));
    }
    let mut tape = Tape::new();
    let rows = tape.constant(rows_of(items, item_layer)?);
    let offsets: Index = vec![0, items.len() as u32].into();
    let mean = tape.mean_rows(rows, &offsets)?;
    Ok(tape.value(mean).as_slice().to_vec())
}

/// Softmax of the distances between `temp` and each item row.
pub fn diversity_weights<T: Scalar>(temp: &[T], item_rows: &Matrix<T>) -> Result<Vec<T>, ComputeError> {
    let n = item_rows.rows();
    if n == 0 {
        return Err(ComputeError::Contract("diversity_weights needs at least one row".into()));
    }
    let mut tape = Tape::new();
    let t = tape.constant(Matrix::from_vec(1, temp.len(), temp.to_vec())?);
    let rows = tape.constant(item_rows.clone());
    let zeros: Index = vec![0u32; n].into();
    let tiled = tape.gather_rows(t, &zeros)?;
    let dist = tape.euclidean_distance(tiled, rows)?;
    let offsets: Index = vec![0, n as u32].into();
    let w = tape.softmax_vector(dist, &offsets)?;
    Ok(tape.value(w).as_slice().to_vec())
}

/// `Σ_k weights[k] · item_rows[k]`.
pub fn user_diverse<T: Scalar>(weights: &[T], item_rows: &Matrix<T>) -> Result<Vec<T>, ComputeError> {
    let n = item_rows.rows();
    let mut tape = Tape::new();
    let w = tape.constant(Matrix::column(weights.to_vec()));
    let rows = tape.constant(item_rows.clone());
    let weighted = tape.scale_rows(w, rows)?;
    let target: Index = vec![0u32; n].into();
    let out = tape.scatter_add_rows(weighted, &target, None::<&Arc<[T]>>, 1)?;
    Ok(tape.value(out).as_slice().to_vec())
}

/// Elementwise sum of layers.
pub fn readout_sum<T: Scalar>(layers: &[Matrix<T>]) -> Result<Matrix<T>, ComputeError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = layers.iter().map(|m| tape.constant(m.clone())).collect();
    let out = readout_sum_on(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}
