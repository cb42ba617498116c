//! Reverse-mode tape over row-major matrices.
//!
//! Every primitive evaluates eagerly, stores its output on the tape and records
//! enough of its inputs to run the exact adjoint later. [`Tape::backward`]
//! walks the nodes in reverse execution order and adds leaf gradients into
//! the [`ParameterStore`] accumulators.

use std::sync::Arc;

use super::matrix::{Matrix, Scalar};
use super::params::{ParamId, ParameterStore};
use crate::error::ComputeError;
use crate::par;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Row index list shared between the graph structures and the tape.
pub type Index = Arc<[u32]>;

#[derive(Debug)]
enum Op<T> {
    Leaf(ParamId),
    Constant,
    GatherRows { src: Var, index: Index },
    ScatterAddRows { src: Var, index: Index, weights: Option<Arc<[T]>> },
    Product { a: Var, b: Var },
    ScaleRows { col: Var, x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, factor: T },
    MeanRows { src: Var, offsets: Index },
    SelectRows { primary: Var, fallback: Var, use_fallback: Arc<[bool]> },
    Softmax { src: Var, offsets: Index },
    Distance { a: Var, b: Var },
    SquaredNorm { x: Var },
    Dot { a: Var, b: Var },
    LogSigmoid { x: Var },
    Sum { x: Var },
    ExpMeanLog { x: Var },
    PairwiseSqDist { x: Var },
    NormalizeRows { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, detail: String) -> ComputeError {
    ComputeError::Shape { op, detail }
}

fn finite<T: Scalar>(op: &'static str, m: Matrix<T>) -> Result<Matrix<T>, ComputeError> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(ComputeError::NonFinite { op })
    }
}

fn check_offsets(op: &'static str, offsets: &[u32], rows: usize) -> Result<(), ComputeError> {
    let ok = offsets.first() == Some(&0)
        && offsets.last().map(|&o| o as usize) == Some(rows)
        && offsets.windows(2).all(|w| w[0] <= w[1]);
    if ok {
        Ok(())
    } else {
        Err(shape_err(op, format!("segment offsets do not cover {rows} rows")))
    }
}

const NORM_FLOOR: f64 = 1e-12;

/// Position of the unordered pair (i, j), i < j, in row-major upper-triangle order.
fn pair_slot(n: usize, i: usize, j: usize) -> usize {
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x < T::zero() {
        x - x.exp().ln_1p()
    } else {
        -(-x).exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter table as a differentiable leaf.
    pub fn leaf(&mut self, store: &ParameterStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf(id))
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// `out[k] = src[index[k]]`.
    pub fn gather_rows(&mut self, src: Var, index: &Index) -> Result<Var, ComputeError> {
        let s = self.value(src);
        let (rows, cols) = s.shape();
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= rows) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {rows}")));
        }
        let mut out = Matrix::zeros(index.len(), cols);
        let sd = s.as_slice();
        par::for_each_row(out.as_mut_slice(), cols, |k, row| {
            let r = index[k] as usize;
            row.copy_from_slice(&sd[r * cols..(r + 1) * cols]);
        });
        Ok(self.push(
            out,
            Op::GatherRows {
                src,
                index: index.clone(),
            },
        ))
    }

    /// `out[index[k]] += weights[k] * src[k]`, `out` has `out_rows` rows.
    pub fn scatter_add_rows(
        &mut self,
        src: Var,
        index: &Index,
        weights: Option<&Arc<[T]>>,
        out_rows: usize,
    ) -> Result<Var, ComputeError> {
        let s = self.value(src);
        let cols = s.cols();
        if s.rows() != index.len() {
            return Err(shape_err(
                "scatter_add_rows",
                format!("{} rows but {} targets", s.rows(), index.len()),
            ));
        }
        if let Some(w) = weights {
            if w.len() != index.len() {
                return Err(shape_err("scatter_add_rows", "weight count".into()));
            }
        }
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= out_rows) {
            return Err(shape_err("scatter_add_rows", format!("target {bad} out of {out_rows}")));
        }
        let mut out = Matrix::zeros(out_rows, cols);
        for (k, &t) in index.iter().enumerate() {
            let w = weights.map_or(T::one(), |w| w[k]);
            let src_row = s.row(k);
            for (o, &x) in out.row_mut(t as usize).iter_mut().zip(src_row) {
                *o = *o + w * x;
            }
        }
        let out = finite("scatter_add_rows", out)?;
        Ok(self.push(
            out,
            Op::ScatterAddRows {
                src,
                index: index.clone(),
                weights: weights.cloned(),
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), ComputeError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(())
        } else {
            Err(shape_err(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Matrix<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Matrix::from_vec(va.rows(), va.cols(), data).expect("same shape")
    }

    /// Hadamard product.
    pub fn elementwise_product(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.same_shape("elementwise_product", a, b)?;
        let out = finite("elementwise_product", self.zip_map(a, b, |x, y| x * y))?;
        Ok(self.push(out, Op::Product { a, b }))
    }

    /// Multiplies row `r` of `x` by the scalar `col[r]`.
    pub fn scale_rows(&mut self, col: Var, x: Var) -> Result<Var, ComputeError> {
        let (c, v) = (self.value(col), self.value(x));
        if c.cols() != 1 || c.rows() != v.rows() {
            return Err(shape_err("scale_rows", format!("{:?} vs {:?}", c.shape(), v.shape())));
        }
        let mut out = v.clone();
        let cd = c.as_slice();
        par::for_each_row(out.as_mut_slice(), v.cols(), |r, row| {
            row.iter_mut().for_each(|e| *e = cd[r] * *e);
        });
        let out = finite("scale_rows", out)?;
        Ok(self.push(out, Op::ScaleRows { col, x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.same_shape("add", a, b)?;
        let out = finite("add", self.zip_map(a, b, |x, y| x + y))?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.same_shape("sub", a, b)?;
        let out = finite("sub", self.zip_map(a, b, |x, y| x - y))?;
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var, ComputeError> {
        let v = self.value(x);
        let data = v.as_slice().iter().map(|&e| e * factor).collect();
        let out = finite("scale", Matrix::from_vec(v.rows(), v.cols(), data)?)?;
        Ok(self.push(out, Op::Scale { x, factor }))
    }

    /// Mean of each contiguous row segment `offsets[s]..offsets[s+1]`.
    /// Empty segments produce a zero row.
    pub fn mean_rows(&mut self, src: Var, offsets: &Index) -> Result<Var, ComputeError> {
        let s = self.value(src);
        check_offsets("mean_rows", offsets, s.rows())?;
        let cols = s.cols();
        let mut out = Matrix::zeros(offsets.len() - 1, cols);
        par::for_each_row(out.as_mut_slice(), cols, |seg, row| {
            let (lo, hi) = (offsets[seg] as usize, offsets[seg + 1] as usize);
            if lo == hi {
                return;
            }
            for k in lo..hi {
                for (o, &x) in row.iter_mut().zip(s.row(k)) {
                    *o = *o + x;
                }
            }
            let n = T::lit((hi - lo) as f64);
            row.iter_mut().for_each(|o| *o = *o / n);
        });
        let out = finite("mean_rows", out)?;
        Ok(self.push(
            out,
            Op::MeanRows {
                src,
                offsets: offsets.clone(),
            },
        ))
    }

    /// Row `r` comes from `fallback` where `use_fallback[r]`, else from `primary`.
    pub fn select_rows(
        &mut self,
        primary: Var,
        fallback: Var,
        use_fallback: &Arc<[bool]>,
    ) -> Result<Var, ComputeError> {
        self.same_shape("select_rows", primary, fallback)?;
        let (p, f) = (self.value(primary), self.value(fallback));
        if use_fallback.len() != p.rows() {
            return Err(shape_err("select_rows", "mask length".into()));
        }
        let mut out = p.clone();
        for (r, _) in use_fallback.iter().enumerate().filter(|(_, &m)| m) {
            out.row_mut(r).copy_from_slice(f.row(r));
        }
        Ok(self.push(
            out,
            Op::SelectRows {
                primary,
                fallback,
                use_fallback: use_fallback.clone(),
            },
        ))
    }

    /// Softmax within each contiguous segment of a column vector.
    pub fn softmax_vector(&mut self, src: Var, offsets: &Index) -> Result<Var, ComputeError> {
        let s = self.value(src);
        if s.cols() != 1 {
            return Err(shape_err("softmax_vector", "input must be a column".into()));
        }
        check_offsets("softmax_vector", offsets, s.rows())?;
        if offsets.windows(2).any(|w| w[0] == w[1]) {
            return Err(shape_err("softmax_vector", "empty segment".into()));
        }
        let x = s.as_slice();
        let mut out = vec![T::zero(); x.len()];
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0] as usize, w[1] as usize);
            let seg = &x[lo..hi];
            let m = seg.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (o, &v) in out[lo..hi].iter_mut().zip(seg) {
                *o = (v - m).exp();
                z = z + *o;
            }
            out[lo..hi].iter_mut().for_each(|o| *o = *o / z);
        }
        let out = finite("softmax_vector", Matrix::column(out))?;
        Ok(self.push(
            out,
            Op::Softmax {
                src,
                offsets: offsets.clone(),
            },
        ))
    }

    fn rowwise(&self, a: Var, b: Var, f: impl Fn(&[T], &[T]) -> T + Sync + Send) -> Matrix<T> {
        let (va, vb) = (self.value(a), self.value(b));
        Matrix::column(par::map_range(va.rows(), |r| f(va.row(r), vb.row(r))))
    }

    /// Row-wise `‖a_r − b_r‖₂` as a column.
    pub fn euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.same_shape("euclidean_distance", a, b)?;
        let out = self.rowwise(a, b, |x, y| {
            x.iter()
                .zip(y)
                .map(|(&p, &q)| (p - q) * (p - q))
                .sum::<T>()
                .sqrt()
        });
        let out = finite("euclidean_distance", out)?;
        Ok(self.push(out, Op::Distance { a, b }))
    }

    /// Row-wise `‖x_r‖²` as a column.
    pub fn squared_norm(&mut self, x: Var) -> Result<Var, ComputeError> {
        let out = self.rowwise(x, x, |r, _| r.iter().map(|&v| v * v).sum());
        let out = finite("squared_norm", out)?;
        Ok(self.push(out, Op::SquaredNorm { x }))
    }

    /// Row-wise inner product as a column.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.same_shape("dot", a, b)?;
        let out = self.rowwise(a, b, |x, y| x.iter().zip(y).map(|(&p, &q)| p * q).sum());
        let out = finite("dot", out)?;
        Ok(self.push(out, Op::Dot { a, b }))
    }

    /// Elementwise `log σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var, ComputeError> {
        let v = self.value(x);
        let data = v.as_slice().iter().map(|&e| log_sigmoid(e)).collect();
        let out = finite("log_sigmoid", Matrix::from_vec(v.rows(), v.cols(), data)?)?;
        Ok(self.push(out, Op::LogSigmoid { x }))
    }

    /// Sum of all entries as a 1x1 matrix.
    pub fn sum(&mut self, x: Var) -> Result<Var, ComputeError> {
        let total = self.value(x).as_slice().iter().copied().sum();
        let out = finite("sum", Matrix::scalar(total))?;
        Ok(self.push(out, Op::Sum { x }))
    }

    /// `log(mean_k exp(x_k))` over a non-empty column, max-shifted.
    pub fn scalar_exp_mean_log(&mut self, x: Var) -> Result<Var, ComputeError> {
        let v = self.value(x);
        if v.cols() != 1 || v.rows() == 0 {
            return Err(shape_err("scalar_exp_mean_log", format!("{:?}", v.shape())));
        }
        let xs = v.as_slice();
        let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let s: T = xs.iter().map(|&e| (e - m).exp()).sum();
        let n = T::lit(xs.len() as f64);
        let out = finite("scalar_exp_mean_log", Matrix::scalar(m + (s / n).ln()))?;
        Ok(self.push(out, Op::ExpMeanLog { x }))
    }

    /// Squared distances of all unordered row pairs `(i, j)`, `i < j`, as a
    /// column in row-major upper-triangle order.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var, ComputeError> {
        let v = self.value(x);
        let n = v.rows();
        let blocks: Vec<Vec<T>> = par::map_range(n, |i| {
            let xi = v.row(i);
            (i + 1..n)
                .map(|j| {
                    xi.iter()
                        .zip(v.row(j))
                        .map(|(&p, &q)| (p - q) * (p - q))
                        .sum()
                })
                .collect()
        });
        let out = finite("pairwise_sq_dist", Matrix::column(blocks.concat()))?;
        Ok(self.push(out, Op::PairwiseSqDist { x }))
    }

    /// Scales each row to unit length (rows shorter than 1e-12 are divided by 1e-12).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, ComputeError> {
        let mut out = self.value(x).clone();
        let cols = out.cols();
        let eps = T::lit(NORM_FLOOR);
        par::for_each_row(out.as_mut_slice(), cols, |_, row| {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v = *v / n);
        });
        let out = finite("normalize_rows", out)?;
        Ok(self.push(out, Op::NormalizeRows { x }))
    }

    /// Reverse accumulation from a 1x1 `loss`; leaf gradients are added to `store`.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore<T>) -> Result<(), ComputeError> {
        if self.value(loss).shape() != (1, 1) {
            return Err(shape_err("backward", "loss must be 1x1".into()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf(p) => {
                    let acc = store.grad_mut(*p);
                    if acc.shape() != g.shape() {
                        return Err(shape_err("backward", "leaf shape changed".into()));
                    }
                    acc.add_assign(&g);
                }
                Op::Constant => {}
                Op::GatherRows { src, index } => {
                    let s = self.value(*src);
                    let mut gs = Matrix::zeros(s.rows(), s.cols());
                    for (k, &r) in index.iter().enumerate() {
                        for (o, &x) in gs.row_mut(r as usize).iter_mut().zip(g.row(k)) {
                            *o = *o + x;
                        }
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::ScatterAddRows { src, index, weights } => {
                    let cols = g.cols();
                    let mut gs = Matrix::zeros(index.len(), cols);
                    par::for_each_row(gs.as_mut_slice(), cols, |k, row| {
                        let w = weights.as_ref().map_or(T::one(), |w| w[k]);
                        for (o, &x) in row.iter_mut().zip(g.row(index[k] as usize)) {
                            *o = w * x;
                        }
                    });
                    accumulate(&mut grads, *src, gs);
                }
                Op::Product { a, b } => {
                    let ga = mul(&g, self.value(*b));
                    let gb = mul(&g, self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ScaleRows { col, x } => {
                    let (c, v) = (self.value(*col), self.value(*x));
                    let gc = Matrix::column(
                        (0..v.rows())
                            .map(|r| g.row(r).iter().zip(v.row(r)).map(|(&p, &q)| p * q).sum())
                            .collect(),
                    );
                    let mut gx = g;
                    let cd = c.as_slice();
                    let cols = gx.cols();
                    par::for_each_row(gx.as_mut_slice(), cols, |r, row| {
                        row.iter_mut().for_each(|e| *e = cd[r] * *e);
                    });
                    accumulate(&mut grads, *col, gc);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub { a, b } => {
                    let neg = map(&g, |x| -x);
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    accumulate(&mut grads, *x, map(&g, |e| e * f));
                }
                Op::MeanRows { src, offsets } => {
                    let s = self.value(*src);
                    let cols = s.cols();
                    let mut gs = Matrix::zeros(s.rows(), cols);
                    for (seg, w) in offsets.windows(2).enumerate() {
                        let (lo, hi) = (w[0] as usize, w[1] as usize);
                        if lo == hi {
                            continue;
                        }
                        let n = T::lit((hi - lo) as f64);
                        for k in lo..hi {
                            for (o, &x) in gs.row_mut(k).iter_mut().zip(g.row(seg)) {
                                *o = x / n;
                            }
                        }
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::SelectRows {
                    primary,
                    fallback,
                    use_fallback,
                } => {
                    let cols = g.cols();
                    let mut gp = g.clone();
                    let mut gf = g;
                    par::for_each_row(gp.as_mut_slice(), cols, |r, row| {
                        if use_fallback[r] {
                            row.fill(T::zero());
                        }
                    });
                    par::for_each_row(gf.as_mut_slice(), cols, |r, row| {
                        if !use_fallback[r] {
                            row.fill(T::zero());
                        }
                    });
                    accumulate(&mut grads, *primary, gp);
                    accumulate(&mut grads, *fallback, gf);
                }
                Op::Softmax { src, offsets } => {
                    let y = node.value.as_slice();
                    let gy = g.as_slice();
                    let mut gx = vec![T::zero(); y.len()];
                    for w in offsets.windows(2) {
                        let (lo, hi) = (w[0] as usize, w[1] as usize);
                        let inner: T = (lo..hi).map(|k| gy[k] * y[k]).sum();
                        for k in lo..hi {
                            gx[k] = y[k] * (gy[k] - inner);
                        }
                    }
                    accumulate(&mut grads, *src, Matrix::column(gx));
                }
                Op::Distance { a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let dist = node.value.as_slice();
                    let cols = va.cols();
                    let mut ga = Matrix::zeros(va.rows(), cols);
                    par::for_each_row(ga.as_mut_slice(), cols, |r, row| {
                        // zero distance: take the zero subgradient
                        if dist[r] > T::zero() {
                            let s = g.as_slice()[r] / dist[r];
                            for ((o, &p), &q) in row.iter_mut().zip(va.row(r)).zip(vb.row(r)) {
                                *o = s * (p - q);
                            }
                        }
                    });
                    let gb = map(&ga, |x| -x);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SquaredNorm { x } => {
                    let v = self.value(*x);
                    let mut gx = v.clone();
                    let cols = v.cols();
                    let two = T::lit(2.0);
                    par::for_each_row(gx.as_mut_slice(), cols, |r, row| {
                        let s = two * g.as_slice()[r];
                        row.iter_mut().for_each(|e| *e = s * *e);
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Dot { a, b } => {
                    let mut ga = self.value(*b).clone();
                    let mut gb = self.value(*a).clone();
                    let cols = ga.cols();
                    let gs = g.as_slice();
                    par::for_each_row(ga.as_mut_slice(), cols, |r, row| {
                        row.iter_mut().for_each(|e| *e = gs[r] * *e);
                    });
                    par::for_each_row(gb.as_mut_slice(), cols, |r, row| {
                        row.iter_mut().for_each(|e| *e = gs[r] * *e);
                    });
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::LogSigmoid { x } => {
                    let v = self.value(*x);
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(v.as_slice())
                        .map(|(&gy, &e)| gy * sigmoid(-e))
                        .collect();
                    accumulate(&mut grads, *x, Matrix::from_vec(v.rows(), v.cols(), data)?);
                }
                Op::Sum { x } => {
                    let v = self.value(*x);
                    accumulate(&mut grads, *x, Matrix::filled(v.rows(), v.cols(), g.item()));
                }
                Op::ExpMeanLog { x } => {
                    let xs = self.value(*x).as_slice();
                    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
                    let e: Vec<T> = xs.iter().map(|&v| (v - m).exp()).collect();
                    let z: T = e.iter().copied().sum();
                    let gy = g.item();
                    accumulate(
                        &mut grads,
                        *x,
                        Matrix::column(e.into_iter().map(|w| gy * w / z).collect()),
                    );
                }
                Op::PairwiseSqDist { x } => {
                    let v = self.value(*x);
                    let (n, cols) = v.shape();
                    let gp = g.as_slice();
                    let two = T::lit(2.0);
                    let mut gx = Matrix::zeros(n, cols);
                    par::for_each_row(gx.as_mut_slice(), cols, |i, row| {
                        let xi = v.row(i);
                        for j in (0..n).filter(|&j| j != i) {
                            let slot = if i < j { pair_slot(n, i, j) } else { pair_slot(n, j, i) };
                            let s = two * gp[slot];
                            for ((o, &p), &q) in row.iter_mut().zip(xi).zip(v.row(j)) {
                                *o = *o + s * (p - q);
                            }
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::NormalizeRows { x } => {
                    let v = self.value(*x);
                    let y = &node.value;
                    let cols = v.cols();
                    let eps = T::lit(NORM_FLOOR);
                    let mut gx = g.clone();
                    par::for_each_row(gx.as_mut_slice(), cols, |r, row| {
                        let n = v.row(r).iter().map(|&e| e * e).sum::<T>().sqrt();
                        if n > eps {
                            let yg: T = y.row(r).iter().zip(row.iter()).map(|(&a, &b)| a * b).sum();
                            for (o, &yy) in row.iter_mut().zip(y.row(r)) {
                                *o = (*o - yy * yg) / n;
                            }
                        } else {
                            row.iter_mut().for_each(|o| *o = *o / eps);
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn mul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| x * y)
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn map<T: Scalar>(a: &Matrix<T>, f: impl Fn(T) -> T) -> Matrix<T> {
    let data = a.as_slice().iter().map(|&x| f(x)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Matrix<f64> {
        Matrix::column(v.to_vec())
    }

    #[test]
    fn product_definition() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Matrix::from_rows(&[vec![2.0, 0.5]]).unwrap());
        let b = t.constant(Matrix::from_rows(&[vec![1.0, 4.0]]).unwrap());
        let p = t.elementwise_product(a, b).unwrap();
        assert_eq!(t.value(p).as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(col(&[0.0, 0.0]));
        let off: Index = vec![0u32, 2].into();
        let y = t.softmax_vector(x, &off).unwrap();
        assert_eq!(t.value(y).as_slice(), &[0.5, 0.5]);

        let x = t.constant(col(&[1.0, 2.0]));
        let y = t.softmax_vector(x, &off).unwrap();
        // e/(e+e^2) and e^2/(e+e^2)
        let (e1, e2) = (1f64.exp(), 2f64.exp());
        let v = t.value(y).as_slice();
        assert!((v[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((v[0] - 0.26894).abs() < 1e-5 && (v[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_empty_segment() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(col(&[1.0]));
        let off: Index = vec![0u32, 0, 1].into();
        assert!(matches!(
            t.softmax_vector(x, &off),
            Err(ComputeError::Shape { .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(3, 2));
        assert!(matches!(t.add(a, b), Err(ComputeError::Shape { op: "add", .. })));
        assert!(matches!(t.dot(a, b), Err(ComputeError::Shape { op: "dot", .. })));
    }

    #[test]
    fn overflow_names_the_primitive() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Matrix::filled(1, 1, 1e30f32));
        let err = t.elementwise_product(a, a).unwrap_err();
        assert_eq!(err, ComputeError::NonFinite { op: "elementwise_product" });
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(col(&[-800.0, 0.0, 800.0]));
        let y = t.log_sigmoid(x).unwrap();
        let v = t.value(y).as_slice();
        assert_eq!(v[0], -800.0);
        assert!((v[1] + std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn pair_slots_enumerate_upper_triangle() {
        let n = 5;
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                assert_eq!(pair_slot(n, i, j), k);
                k += 1;
            }
        }
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut store = ParameterStore::<f64>::new();
        let p = store.add("p", Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let mut t = Tape::new();
        let x = t.leaf(&store, p);
        let n = t.squared_norm(x).unwrap();
        let l = t.sum(n).unwrap();
        t.backward(l, &mut store).unwrap();
        let once = store.grad(p).clone();
        t.backward(l, &mut store).unwrap();
        for (a, b) in store.grad(p).as_slice().iter().zip(once.as_slice()) {
            assert_eq!(*a, 2.0 * b);
        }
        assert_eq!(once.as_slice(), &[2.0, -4.0, 1.0, 6.0]);
    }
}
