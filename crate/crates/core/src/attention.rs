//! The point attention block.
//!
//! Each center gathers its K neighbours and builds an augmented feature per
//! neighbour, `[f_j - f_i, f_i, rpe(p_j - p_i)]`. Three independent copies of
//! that tensor feed the query, key and value paths, each with its own
//! positional MLP. Queries are summarized over the neighbourhood with an
//! EdgeConv (shared affine + ReLU per neighbour row, then max), keys and
//! values are plain row-wise projections. The attention itself is the lambda
//! form `y_i = q_i (softmax(k_i)^T v_i)`, with the softmax taken over the
//! neighbour axis independently per key channel, and `h` query heads sharing
//! one content lambda.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{NeighborhoodIndex, Point};
use crate::nn::{Binding, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Which attention paths receive a relative positional embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RpeSet {
    pub query: bool,
    pub key: bool,
    pub value: bool,
}

impl RpeSet {
    pub const ALL: RpeSet = RpeSet {
        query: true,
        key: true,
        value: true,
    };
    pub const NONE: RpeSet = RpeSet {
        query: false,
        key: false,
        value: false,
    };
}

impl fmt::Display for RpeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == RpeSet::NONE {
            return f.write_str("none");
        }
        let mut s = String::new();
        for (on, c) in [(self.query, 'q'), (self.key, 'k'), (self.value, 'v')] {
            if on {
                s.push(c);
            }
        }
        f.write_str(&s)
    }
}

impl FromStr for RpeSet {
    type Err = Error;

    /// Accepts `none` or any combination of the letters `q`, `k`, `v`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(RpeSet::NONE);
        }
        let mut set = RpeSet::NONE;
        for c in s.chars() {
            match c {
                'q' => set.query = true,
                'k' => set.key = true,
                'v' => set.value = true,
                ',' | '+' => {}
                _ => return Err(Error::Argument(format!("unknown positional-embedding path '{c}' in '{s}'"))),
            }
        }
        if set == RpeSet::NONE {
            return Err(Error::Argument(format!("empty positional-embedding set '{s}'")));
        }
        Ok(set)
    }
}

/// Channel widths of one attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub c_in: usize,
    pub c_k: usize,
    pub c_v: usize,
    pub c_h: usize,
    pub heads: usize,
}

impl AttentionDims {
    pub fn out_width(&self) -> usize {
        self.heads * self.c_v
    }

    /// Width of an augmented neighbour row, with or without the positional block.
    pub fn augmented_width(&self, with_rpe: bool) -> usize {
        2 * self.c_in + if with_rpe { self.c_h } else { 0 }
    }
}

/// Two affine layers with a ReLU between, `3 -> C_h -> C_h`, applied to
/// relative offsets row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct RpeMlp {
    pub first: Linear,
    pub second: Linear,
}

impl RpeMlp {
    pub fn new(store: &mut ParamStore, name: &str, c_h: usize, rng: &mut impl Rng) -> Self {
        RpeMlp {
            first: Linear::new(store, &format!("{name}.0"), 3, c_h, true, rng),
            second: Linear::new(store, &format!("{name}.1"), c_h, c_h, true, rng),
        }
    }

    pub fn out_width(&self) -> usize {
        self.second.out_width
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, offsets: Var) -> Result<Var> {
        let h = self.first.forward(tape, params, offsets)?;
        let h = tape.relu(h);
        self.second.forward(tape, params, h)
    }
}

/// Learnable weights of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerParams {
    pub dims: AttentionDims,
    pub rpe_q: Option<RpeMlp>,
    pub rpe_k: Option<RpeMlp>,
    pub rpe_v: Option<RpeMlp>,
    /// Shared per-neighbour affine map of the query EdgeConv.
    pub edge: Linear,
    /// `D_q × (heads · C_k)`, the per-head query projections side by side.
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl AttentionLayerParams {
    pub fn new(store: &mut ParamStore, name: &str, dims: AttentionDims, rpe: RpeSet, rng: &mut impl Rng) -> Self {
        let rpe_q = rpe.query.then(|| RpeMlp::new(store, &format!("{name}.rpe_q"), dims.c_h, rng));
        let rpe_k = rpe.key.then(|| RpeMlp::new(store, &format!("{name}.rpe_k"), dims.c_h, rng));
        let rpe_v = rpe.value.then(|| RpeMlp::new(store, &format!("{name}.rpe_v"), dims.c_h, rng));
        let d_q = dims.augmented_width(rpe.query);
        let d_k = dims.augmented_width(rpe.key);
        let d_v = dims.augmented_width(rpe.value);
        let edge = Linear::new(store, &format!("{name}.edge"), d_q, d_q, true, rng);
        let w_q = store.uniform(format!("{name}.w_q"), &[d_q, dims.heads * dims.c_k], d_q, rng);
        let w_k = store.uniform(format!("{name}.w_k"), &[d_k, dims.c_k], d_k, rng);
        let w_v = store.uniform(format!("{name}.w_v"), &[d_v, dims.c_v], d_v, rng);
        AttentionLayerParams {
            dims,
            rpe_q,
            rpe_k,
            rpe_v,
            edge,
            w_q,
            w_k,
            w_v,
        }
    }

    pub fn rpe_set(&self) -> RpeSet {
        RpeSet {
            query: self.rpe_q.is_some(),
            key: self.rpe_k.is_some(),
            value: self.rpe_v.is_some(),
        }
    }
}

/// `p_j - p_i` for every (center, neighbour) pair, as an `(M·K) × 3` tensor.
pub fn relative_offsets(positions: &[Point], nbr: &NeighborhoodIndex) -> Result<Tensor> {
    let n = positions.len();
    let mut data = Vec::with_capacity(nbr.flat_neighbors().len() * 3);
    for (m, &c) in nbr.centers().iter().enumerate() {
        for &j in nbr.neighbors_of(m) {
            if j >= n || c >= n {
                return Err(Error::Argument(format!("neighbourhood index out of range for {n} points")));
            }
            for k in 0..3 {
                data.push(positions[j][k] - positions[c][k]);
            }
        }
    }
    Tensor::new(&[nbr.flat_neighbors().len(), 3], data)
}

/// The neighbour-difference and center blocks `[f_j - f_i, f_i]`, flattened
/// to `(M·K) × 2C_in`.
pub(crate) fn context_rows(tape: &mut Tape, features: Var, c_in: usize, nbr: &NeighborhoodIndex) -> Result<(Var, Var)> {
    let shape = tape.shape(features);
    if shape.len() != 2 || shape[1] != c_in {
        return Err(Error::dim(
            "local_context_augment",
            format!("features {:?} do not have C_in = {c_in} columns", shape),
        ));
    }
    let f_j = tape.gather_rows(features, nbr.flat_neighbors())?;
    let f_i = tape.gather_rows(features, &nbr.repeated_centers())?;
    let diff = tape.sub(f_j, f_i)?;
    Ok((diff, f_i))
}

pub(crate) fn augmented_rows(
    tape: &mut Tape,
    params: &Binding,
    base: (Var, Var),
    offsets: Var,
    rpe: Option<&RpeMlp>,
) -> Result<Var> {
    match rpe {
        Some(mlp) => {
            let h = mlp.forward(tape, params, offsets)?;
            tape.concat(&[base.0, base.1, h], 1)
        }
        None => tape.concat(&[base.0, base.1], 1),
    }
}

/// Local context augmentation for one path: returns `M × K × D` rows
/// `[f_j - f_i, f_i, rpe(p_j - p_i)]` (the positional block only when `rpe`
/// is given).
pub fn local_context_augment(
    tape: &mut Tape,
    params: &Binding,
    features: Var,
    c_in: usize,
    positions: &[Point],
    nbr: &NeighborhoodIndex,
    rpe: Option<&RpeMlp>,
) -> Result<Var> {
    let base = context_rows(tape, features, c_in, nbr)?;
    let offsets = tape.constant(relative_offsets(positions, nbr)?);
    let rows = augmented_rows(tape, params, base, offsets, rpe)?;
    let d = tape.shape(rows)[1];
    tape.reshape(rows, &[nbr.num_centers(), nbr.k(), d])
}

fn check_rank3(tape: &Tape, x: Var, width: usize, op: &'static str) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != width {
        return Err(Error::dim(op, format!("expected M × K × {width}, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// EdgeConv on the query path followed by the per-head projection:
/// `M × K × D_q -> M × (heads · C_k)`.
pub fn edgeconv_query(tape: &mut Tape, params: &Binding, f_prime_q: Var, layer: &AttentionLayerParams) -> Result<Var> {
    edgeconv_with(tape, params, f_prime_q, &layer.edge, layer.w_q)
}

pub(crate) fn edgeconv_with(tape: &mut Tape, params: &Binding, f_prime_q: Var, edge: &Linear, w_q: ParamId) -> Result<Var> {
    let d = edge.in_width;
    let (m, k) = check_rank3(tape, f_prime_q, d, "edgeconv_query")?;
    let rows = tape.reshape(f_prime_q, &[m * k, d])?;
    let h = edge.forward(tape, params, rows)?;
    let h = tape.relu(h);
    let h = tape.reshape(h, &[m, k, d])?;
    let pooled = tape.max_over(h, 1)?;
    tape.matmul(pooled, params.var(w_q))
}

/// Row-wise key and value projections of the flattened augmented tensors.
pub fn project_kv(
    tape: &mut Tape,
    params: &Binding,
    f_prime_k: Var,
    f_prime_v: Var,
    layer: &AttentionLayerParams,
) -> Result<(Var, Var)> {
    let dims = layer.dims;
    let d_k = dims.augmented_width(layer.rpe_k.is_some());
    let d_v = dims.augmented_width(layer.rpe_v.is_some());
    let (m, k) = check_rank3(tape, f_prime_k, d_k, "project_kv")?;
    let (mv, kv) = check_rank3(tape, f_prime_v, d_v, "project_kv")?;
    if (m, k) != (mv, kv) {
        return Err(Error::dim("project_kv", "key and value tensors cover different neighbourhoods"));
    }
    let rows_k = tape.reshape(f_prime_k, &[m * k, d_k])?;
    let rows_v = tape.reshape(f_prime_v, &[m * k, d_v])?;
    let keys = tape.matmul(rows_k, params.var(layer.w_k))?;
    let values = tape.matmul(rows_v, params.var(layer.w_v))?;
    let keys = tape.reshape(keys, &[m, k, dims.c_k])?;
    let values = tape.reshape(values, &[m, k, dims.c_v])?;
    Ok((keys, values))
}

fn lambda_shapes(q: &[usize], k: &[usize], v: &[usize], heads: usize) -> Result<(usize, usize, usize, usize)> {
    if k.len() != 3 || v.len() != 3 || q.len() != 2 || heads == 0 {
        return Err(Error::dim("lambda_attention", format!("q {q:?}, k {k:?}, v {v:?}")));
    }
    let (m, kk, c_k) = (k[0], k[1], k[2]);
    let c_v = v[2];
    if v[0] != m || v[1] != kk || q[0] != m || q[1] != heads * c_k {
        return Err(Error::dim(
            "lambda_attention",
            format!("q {q:?}, k {k:?}, v {v:?} with {heads} heads"),
        ));
    }
    Ok((m, kk, c_k, c_v))
}

/// Batched lambda attention on the tape.
///
/// `q: M × (heads·C_k)`, `k: M × K × C_k`, `v: M × K × C_v` →
/// `M × (heads·C_v)`.
pub fn lambda_attention_tape(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (m, _, c_k, c_v) = lambda_shapes(tape.shape(q), tape.shape(k), tape.shape(v), heads)?;
    let weights = tape.softmax(k, 1)?;
    let lambda = tape.bmm(weights, v, true, false)?;
    let q3 = tape.reshape(q, &[m, heads, c_k])?;
    let y = tape.bmm(q3, lambda, false, false)?;
    tape.reshape(y, &[m, heads * c_v])
}

/// Value-only batched lambda attention, same kernels and shapes as
/// [`lambda_attention_tape`].
pub fn lambda_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (m, _, c_k, c_v) = lambda_shapes(q.shape(), k.shape(), v.shape(), heads)?;
    let weights = k.softmax_axis(1)?;
    let lambda = weights.bmm(v, true, false)?;
    let y = q.reshape(&[m, heads, c_k])?.bmm(&lambda, false, false)?;
    y.reshape(&[m, heads * c_v])
}

/// Lambda attention for a single point: `y = q (softmax(k)^T v)` with the
/// softmax over the K rows of `k`, column by column.
pub fn lambda_attention_per_point(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.numel() != k.shape().get(1).copied().unwrap_or(0) || k.rank() != 2 || v.rank() != 2 || k.shape()[0] != v.shape()[0] {
        return Err(Error::dim(
            "lambda_attention_per_point",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let c_k = k.shape()[1];
    let c_v = v.shape()[1];
    let weights = k.softmax_axis(0)?;
    let lambda = weights.matmul_t(v, true, false)?;
    let y = q.reshape(&[1, c_k])?.matmul(&lambda)?;
    y.reshape(&[c_v])
}

/// Lambda attention where every one of the `M` rows is context for every
/// query: keys normalized over all rows, one shared `C_k × C_v` lambda.
pub fn global_lambda_attention_tape(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (m, c_k) = match tape.shape(k) {
        [m, c] => (*m, *c),
        s => return Err(Error::dim("global_lambda_attention", format!("keys {s:?}"))),
    };
    let c_v = tape.shape(v)[1];
    if tape.shape(v)[0] != m || tape.shape(q) != [m, heads * c_k] {
        return Err(Error::dim(
            "global_lambda_attention",
            format!("q {:?}, k {:?}, v {:?}", tape.shape(q), tape.shape(k), tape.shape(v)),
        ));
    }
    let k3 = tape.reshape(k, &[1, m, c_k])?;
    let v3 = tape.reshape(v, &[1, m, c_v])?;
    let weights = tape.softmax(k3, 1)?;
    let lambda = tape.bmm(weights, v3, true, false)?;
    let lambda = tape.reshape(lambda, &[c_k, c_v])?;
    let q_rows = tape.reshape(q, &[m * heads, c_k])?;
    let y = tape.matmul(q_rows, lambda)?;
    tape.reshape(y, &[m, heads * c_v])
}

/// Softmax attention `softmax(Q K^T / sqrt(C_k)) V`, quadratic in `N`.
pub fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.shape()[1] != k.shape()[1] || k.shape()[0] != v.shape()[0] {
        return Err(Error::dim(
            "naive_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let c_k = q.shape()[1] as f64;
    let scores = q.matmul_t(k, false, true)?.scale(1.0 / c_k.sqrt());
    scores.softmax_axis(1)?.matmul(v)
}

/// `[f_j - f_i, f_i, r_ij] · W` for every (center, neighbour) pair, as
/// `(M·K) × out` rows, without building the augmented rows. The feature
/// blocks of `W` act on the `N` source points first and the results are
/// gathered, which is exact algebra and much cheaper when `M·K > N`.
pub(crate) fn augmented_product(
    tape: &mut Tape,
    features: Var,
    c_in: usize,
    nbr: &NeighborhoodIndex,
    positional: Option<Var>,
    weight: Var,
) -> Result<Var> {
    let rows = tape.shape(weight)[0];
    let expected = 2 * c_in + positional.map_or(0, |r| tape.shape(r)[1]);
    if rows != expected {
        return Err(Error::dim(
            "augmented_product",
            format!("weight has {rows} rows, augmented width is {expected}"),
        ));
    }
    let idx = |lo: usize, hi: usize| (lo..hi).collect::<Vec<_>>();
    let w_diff = tape.gather_rows(weight, &idx(0, c_in))?;
    let w_center = tape.gather_rows(weight, &idx(c_in, 2 * c_in))?;
    let per_point = tape.matmul(features, w_diff)?;
    let center = tape.matmul(features, w_center)?;
    let center = tape.sub(center, per_point)?;
    let from_j = tape.gather_rows(per_point, nbr.flat_neighbors())?;
    let from_i = tape.gather_rows(center, &nbr.repeated_centers())?;
    let y = tape.add(from_j, from_i)?;
    match positional {
        Some(r) => {
            let w_pos = tape.gather_rows(weight, &idx(2 * c_in, rows))?;
            let pos = tape.matmul(r, w_pos)?;
            tape.add(y, pos)
        }
        None => Ok(y),
    }
}

/// Positional embeddings of the offsets, when the path has an MLP.
pub(crate) fn positional_rows(tape: &mut Tape, params: &Binding, offsets: Var, rpe: Option<&RpeMlp>) -> Result<Option<Var>> {
    rpe.map(|mlp| mlp.forward(tape, params, offsets)).transpose()
}

/// EdgeConv query from the factored augmented product.
pub(crate) fn query_from_features(
    tape: &mut Tape,
    params: &Binding,
    features: Var,
    c_in: usize,
    nbr: &NeighborhoodIndex,
    positional: Option<Var>,
    edge: &Linear,
    w_q: ParamId,
) -> Result<Var> {
    let pre = augmented_product(tape, features, c_in, nbr, positional, params.var(edge.weight))?;
    let pre = match edge.bias {
        Some(b) => tape.add_row(pre, params.var(b))?,
        None => pre,
    };
    let h = tape.relu(pre);
    let h = tape.reshape(h, &[nbr.num_centers(), nbr.k(), edge.out_width])?;
    let pooled = tape.max_over(h, 1)?;
    tape.matmul(pooled, params.var(w_q))
}

/// Full attention block for `M` centers over a source set of `N` points.
///
/// Computes the same function as [`local_context_augment`] on each path
/// followed by [`edgeconv_query`], [`project_kv`] and
/// [`lambda_attention_tape`], with the augmented products factored through
/// the source points.
pub fn attention_block_forward(
    tape: &mut Tape,
    params: &Binding,
    features: Var,
    positions: &[Point],
    nbr: &NeighborhoodIndex,
    layer: &AttentionLayerParams,
) -> Result<Var> {
    let dims = layer.dims;
    let shape = tape.shape(features);
    if shape.len() != 2 || shape[1] != dims.c_in || positions.len() != shape[0] {
        return Err(Error::dim(
            "attention_block",
            format!("{} positions for features {:?}, C_in = {}", positions.len(), shape, dims.c_in),
        ));
    }
    let offsets = tape.constant(relative_offsets(positions, nbr)?);
    let (m, k) = (nbr.num_centers(), nbr.k());
    let r_q = positional_rows(tape, params, offsets, layer.rpe_q.as_ref())?;
    let r_k = positional_rows(tape, params, offsets, layer.rpe_k.as_ref())?;
    let r_v = positional_rows(tape, params, offsets, layer.rpe_v.as_ref())?;
    let q = query_from_features(tape, params, features, dims.c_in, nbr, r_q, &layer.edge, layer.w_q)?;
    let keys = augmented_product(tape, features, dims.c_in, nbr, r_k, params.var(layer.w_k))?;
    let values = augmented_product(tape, features, dims.c_in, nbr, r_v, params.var(layer.w_v))?;
    let keys = tape.reshape(keys, &[m, k, dims.c_k])?;
    let values = tape.reshape(values, &[m, k, dims.c_v])?;
    lambda_attention_tape(tape, q, keys, values, dims.heads)
}

/// Multiply-adds of the lambda attention core: building the content lambda
/// (`N·K·C_k·C_v`) and contracting it with `h` query heads (`h·N·C_k·C_v`).
/// The softmax exponentials are not included.
pub fn count_flops_lambda(n: u64, k: u64, c_k: u64, c_v: u64, heads: u64) -> u64 {
    n * k * c_k * c_v + heads * n * c_k * c_v
}

/// Multiply-adds of softmax attention: `Q K^T` plus the weighting of `V`.
pub fn count_flops_naive(n: u64, c_k: u64, c_v: u64) -> u64 {
    n * n * c_k + n * n * c_v
}
