use std::sync::Arc;

use rand::Rng;

use super::config::TrainConfig;
use crate::cau;
use crate::compute::{Index, Matrix, ParamId, ParameterStore, Scalar, Tape, Var};
use crate::data::{InteractionGraph, KnowledgeGraph};
use crate::del;
use crate::error::ComputeError;
use crate::propagation;

pub const USERS: &str = "users";
pub const ENTITIES: &str = "entities";
pub const RELATIONS: &str = "relations";

/// Handles of the three learned tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamIds {
    pub users: ParamId,
    pub entities: ParamId,
    pub relations: ParamId,
}

impl ParamIds {
    pub fn of<T: Scalar>(store: &ParameterStore<T>) -> Result<Self, ComputeError> {
        let find = |n: &str| {
            store
                .id_of(n)
                .ok_or_else(|| ComputeError::Contract(format!("parameter table `{n}` missing")))
        };
        Ok(ParamIds {
            users: find(USERS)?,
            entities: find(ENTITIES)?,
            relations: find(RELATIONS)?,
        })
    }
}

/// Xavier-uniform table: entries in `±sqrt(6 / (rows + cols))`.
pub fn xavier<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.gen_range(-bound..bound)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// User, entity and relation tables for the given graphs.
pub fn init_params<T: Scalar, R: Rng>(
    n_users: usize,
    kg: &KnowledgeGraph,
    dim: usize,
    rng: &mut R,
) -> ParameterStore<T> {
    let mut store = ParameterStore::new();
    store.add(USERS, xavier(n_users, dim, rng));
    store.add(ENTITIES, xavier(kg.n_entities(), dim, rng));
    store.add(RELATIONS, xavier(kg.n_relations(), dim, rng));
    store
}

/// Graph-derived index lists reused by every forward pass.
#[derive(Clone, Debug)]
pub struct ModelGraphs<'a> {
    pub train: &'a InteractionGraph,
    pub kg: &'a KnowledgeGraph,
    item_prefix: Index,
    norm_by_user: Arc<[f64]>,
    norm_by_item: Arc<[f64]>,
}

impl<'a> ModelGraphs<'a> {
    pub fn new(train: &'a InteractionGraph, kg: &'a KnowledgeGraph) -> Result<Self, ComputeError> {
        if kg.n_items() != train.n_items() {
            return Err(ComputeError::Contract(format!(
                "KG has {} items, interaction graph has {}",
                kg.n_items(),
                train.n_items()
            )));
        }
        let (norm_by_user, norm_by_item) = train.symmetric_norms();
        Ok(ModelGraphs {
            train,
            kg,
            item_prefix: (0..train.n_items() as u32).collect(),
            norm_by_user,
            norm_by_item,
        })
    }

    fn norms<T: Scalar>(&self) -> (Arc<[T]>, Arc<[T]>) {
        (
            self.norm_by_user.iter().map(|&w| T::lit(w)).collect(),
            self.norm_by_item.iter().map(|&w| T::lit(w)).collect(),
        )
    }
}

/// Outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Layer-0 user table.
    pub user_ego: Var,
    /// Layer-0 entity table.
    pub entity_ego: Var,
    /// Users and items after the KG/DEL layer sum (inputs to the LGC layers).
    pub users_kg: Var,
    pub items_kg: Var,
    /// Final representations used for scoring.
    pub users: Var,
    pub items: Var,
}

/// One light graph convolution layer with symmetric degree normalisation.
pub fn lgc_layer_on<T: Scalar>(
    tape: &mut Tape<T>,
    train: &InteractionGraph,
    norms: &(Arc<[T]>, Arc<[T]>),
    users: Var,
    items: Var,
) -> Result<(Var, Var), ComputeError> {
    let (ur, ir) = (tape.value(users).rows(), tape.value(items).rows());
    if ur != train.n_users() || ir != train.n_items() {
        return Err(ComputeError::Shape {
            op: "lgc_layer",
            detail: format!("{ur} user / {ir} item rows for {}x{} graph", train.n_users(), train.n_items()),
        });
    }
    let from_items = tape.gather_rows(items, train.user_items())?;
    let next_users =
        tape.scatter_add_rows(from_items, train.edge_users(), Some(&norms.0), train.n_users())?;
    let from_users = tape.gather_rows(users, train.item_users())?;
    let next_items =
        tape.scatter_add_rows(from_users, train.edge_items(), Some(&norms.1), train.n_items())?;
    Ok((next_users, next_items))
}

/// Arithmetic mean over layers `0..=K`.
pub fn lgc_readout_on<T: Scalar>(tape: &mut Tape<T>, layers: &[Var]) -> Result<Var, ComputeError> {
    let sum = del::readout_sum_on(tape, layers)?;
    if layers.len() == 1 {
        return Ok(sum);
    }
    tape.scale(sum, T::one() / T::lit(layers.len() as f64))
}

/// Matrix form of [`lgc_layer_on`].
pub fn lgc_layer<T: Scalar>(
    train: &InteractionGraph,
    users: &Matrix<T>,
    items: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>), ComputeError> {
    let (a, b) = train.symmetric_norms();
    let norms = (
        a.iter().map(|&w| T::lit(w)).collect(),
        b.iter().map(|&w| T::lit(w)).collect(),
    );
    let mut tape = Tape::new();
    let u = tape.constant(users.clone());
    let i = tape.constant(items.clone());
    let (nu, ni) = lgc_layer_on(&mut tape, train, &norms, u, i)?;
    Ok((tape.value(nu).clone(), tape.value(ni).clone()))
}

/// Matrix form of [`lgc_readout_on`].
pub fn lgc_readout<T: Scalar>(layers: &[Matrix<T>]) -> Result<Matrix<T>, ComputeError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = layers.iter().map(|m| tape.constant(m.clone())).collect();
    let out = lgc_readout_on(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

/// Full-graph forward pass: KG propagation, diversified user pooling,
/// layer sum, LGC layers and their mean.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParameterStore<T>,
    ids: ParamIds,
    graphs: &ModelGraphs<'_>,
    config: &TrainConfig,
) -> Result<Forward, ComputeError> {
    let user_ego = tape.leaf(params, ids.users);
    let entity_ego = tape.leaf(params, ids.entities);
    let relations = tape.leaf(params, ids.relations);
    if tape.value(user_ego).rows() != graphs.train.n_users() {
        return Err(ComputeError::Shape {
            op: "forward",
            detail: "user table does not match the interaction graph".into(),
        });
    }
    let ab = config.ablations;
    let stack = propagation::propagate_all_on(
        tape,
        graphs.kg,
        entity_ego,
        relations,
        config.effective_kg_layers(),
        !ab.no_relation_encoding,
    )?;
    let item_layers = stack
        .entities
        .iter()
        .map(|&layer| tape.gather_rows(layer, &graphs.item_prefix))
        .collect::<Result<Vec<_>, _>>()?;

    let mut user_layers = vec![user_ego];
    for &items in &item_layers[1..] {
        user_layers.push(del::user_layer_on(tape, graphs.train, items, !ab.no_del)?);
    }
    if ab.no_kg {
        user_layers.push(del::user_layer_on(tape, graphs.train, item_layers[0], !ab.no_del)?);
    }
    let users_kg = del::readout_sum_on(tape, &user_layers)?;
    let items_kg = del::readout_sum_on(tape, &item_layers)?;

    let norms = graphs.norms::<T>();
    let (mut lu, mut li) = (vec![users_kg], vec![items_kg]);
    for _ in 0..config.lgc_layers {
        let (u, i) = lgc_layer_on(tape, graphs.train, &norms, *lu.last().unwrap(), *li.last().unwrap())?;
        lu.push(u);
        li.push(i);
    }
    let users = lgc_readout_on(tape, &lu)?;
    let items = lgc_readout_on(tape, &li)?;
    Ok(Forward {
        user_ego,
        entity_ego,
        users_kg,
        items_kg,
        users,
        items,
    })
}

/// `(user, positive, negative)` training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainTriple {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

/// Uniform draw from the items `user` has no training edge with.
pub fn sample_negative<R: Rng>(
    train: &InteractionGraph,
    user: usize,
    rng: &mut R,
) -> Result<u32, ComputeError> {
    let n = train.n_items();
    if train.user_degree(user) >= n {
        return Err(ComputeError::Contract(format!(
            "user {user} interacted with all {n} items; no negative exists"
        )));
    }
    loop {
        let j = rng.gen_range(0..n as u32);
        if !train.contains(user, j) {
            return Ok(j);
        }
    }
}

/// `−Σ log σ(e_u·e_i − e_u·e_j)` over the batch (mean when `mean` is set).
pub fn bpr_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    batch: &[TrainTriple],
    users: Var,
    items: Var,
    mean: bool,
) -> Result<Var, ComputeError> {
    if batch.is_empty() {
        return Err(ComputeError::Contract("BPR batch is empty".into()));
    }
    let u: Index = batch.iter().map(|t| t.user).collect();
    let i: Index = batch.iter().map(|t| t.pos).collect();
    let j: Index = batch.iter().map(|t| t.neg).collect();
    let eu = tape.gather_rows(users, &u)?;
    let ei = tape.gather_rows(items, &i)?;
    let ej = tape.gather_rows(items, &j)?;
    let pos = tape.dot(eu, ei)?;
    let neg = tape.dot(eu, ej)?;
    let gap = tape.sub(pos, neg)?;
    let ls = tape.log_sigmoid(gap)?;
    let total = tape.sum(ls)?;
    let scale = if mean {
        -T::one() / T::lit(batch.len() as f64)
    } else {
        -T::one()
    };
    tape.scale(total, scale)
}

/// Matrix form of [`bpr_loss_on`].
pub fn bpr_loss<T: Scalar>(
    batch: &[TrainTriple],
    users: &Matrix<T>,
    items: &Matrix<T>,
    mean: bool,
) -> Result<T, ComputeError> {
    let mut tape = Tape::new();
    let u = tape.constant(users.clone());
    let i = tape.constant(items.clone());
    let l = bpr_loss_on(&mut tape, batch, u, i, mean)?;
    Ok(tape.value(l).item())
}

/// Per-step samples feeding the regularisers.
#[derive(Clone, Debug, Default)]
pub struct StepSamples {
    pub pairs: cau::OverlapPairBatch,
    pub uniform_items: Vec<u32>,
}

/// Values of each loss term for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub bpr: f64,
    pub align: f64,
    pub uniform: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn add(&mut self, other: &LossTerms) {
        self.bpr += other.bpr;
        self.align += other.align;
        self.uniform += other.uniform;
        self.reg += other.reg;
        self.total += other.total;
    }
}

fn in_term(term: &'static str) -> impl Fn(ComputeError) -> ComputeError {
    move |e| ComputeError::Term {
        term,
        source: Box::new(e),
    }
}

/// `L_CF + λ₁ L_align + λ₂ L_uniform + λ₃ ‖Θ_batch‖²` on the tape.
///
/// The regulariser covers the layer-0 rows of the batch's users, positive
/// items and negative items, counted per occurrence.
pub fn total_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    fwd: &Forward,
    batch: &[TrainTriple],
    samples: &StepSamples,
    config: &TrainConfig,
) -> Result<(Var, LossTerms), ComputeError> {
    let mut terms = LossTerms::default();
    let bpr = bpr_loss_on(tape, batch, fwd.users, fwd.items, config.bpr_mean).map_err(in_term("bpr"))?;
    terms.bpr = tape.value(bpr).item().to_f64_lossy();
    let mut total = bpr;

    let (l_align, l_uniform) = config.effective_cau();
    if l_align > 0.0 {
        if let Some(a) = cau::alignment_loss_on(tape, &samples.pairs, fwd.items_kg, fwd.entity_ego)
            .map_err(in_term("alignment"))?
        {
            terms.align = tape.value(a).item().to_f64_lossy();
            let w = tape.scale(a, T::lit(l_align)).map_err(in_term("alignment"))?;
            total = tape.add(total, w).map_err(in_term("alignment"))?;
        }
    }
    if l_uniform > 0.0 {
        let idx: Index = samples.uniform_items.iter().copied().collect();
        let rows = tape.gather_rows(fwd.items_kg, &idx)?;
        if let Some(u) = cau::uniformity_loss_on(tape, rows, config.uniform_normalize)
            .map_err(in_term("uniformity"))?
        {
            terms.uniform = tape.value(u).item().to_f64_lossy();
            let w = tape.scale(u, T::lit(l_uniform)).map_err(in_term("uniformity"))?;
            total = tape.add(total, w).map_err(in_term("uniformity"))?;
        }
    }
    if config.lambda_reg > 0.0 {
        let u: Index = batch.iter().map(|t| t.user).collect();
        let ij: Index = batch.iter().map(|t| t.pos).chain(batch.iter().map(|t| t.neg)).collect();
        let ru = tape.gather_rows(fwd.user_ego, &u)?;
        let ri = tape.gather_rows(fwd.entity_ego, &ij)?;
        let nu = tape.squared_norm(ru)?;
        let ni = tape.squared_norm(ri)?;
        let su = tape.sum(nu)?;
        let si = tape.sum(ni)?;
        let reg = tape.add(su, si).map_err(in_term("regularisation"))?;
        terms.reg = tape.value(reg).item().to_f64_lossy();
        let w = tape.scale(reg, T::lit(config.lambda_reg)).map_err(in_term("regularisation"))?;
        total = tape.add(total, w).map_err(in_term("regularisation"))?;
    }
    terms.total = tape.value(total).item().to_f64_lossy();
    Ok((total, terms))
}
