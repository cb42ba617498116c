use super::matrix::Matrix;
use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::ComputeError;

/// Compares tape gradients with central finite differences in `f64`.
///
/// `loss_builder` must produce the same scalar for the same parameters.
/// At most `max_coords` coordinates are probed, spread evenly over all
/// tables. Returns the maximum of `|analytic − numeric| / max(1, |numeric|)`.
pub fn check_gradients<F>(
    loss_builder: F,
    params: &mut ParameterStore<f64>,
    epsilon: f64,
    max_coords: usize,
) -> Result<f64, ComputeError>
where
    F: Fn(&mut Tape<f64>, &ParameterStore<f64>) -> Result<Var, ComputeError>,
{
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = loss_builder(&mut tape, params)?;
    tape.backward(loss, params)?;
    let analytic: Vec<Matrix<f64>> = params.ids().map(|id| params.grad(id).clone()).collect();

    let eval = |p: &ParameterStore<f64>| -> Result<f64, ComputeError> {
        let mut t = Tape::new();
        let l = loss_builder(&mut t, p)?;
        Ok(t.value(l).item())
    };

    let coords: Vec<(usize, usize)> = params
        .ids()
        .flat_map(|id| (0..params.value(id).as_slice().len()).map(move |k| (id.index(), k)))
        .collect();
    let stride = coords.len().div_ceil(max_coords.max(1)).max(1);
    let ids: Vec<_> = params.ids().collect();

    let mut worst = 0.0f64;
    for &(t, k) in coords.iter().step_by(stride) {
        let id = ids[t];
        let orig = params.value(id).as_slice()[k];
        params.value_mut(id).as_mut_slice()[k] = orig + epsilon;
        let up = eval(params)?;
        params.value_mut(id).as_mut_slice()[k] = orig - epsilon;
        let down = eval(params)?;
        params.value_mut(id).as_mut_slice()[k] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let err = (analytic[t].as_slice()[k] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
