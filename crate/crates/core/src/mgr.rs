//! Multi-graph reasoning over value channels.
//!
//! Each graph `g` owns a learnable `C_v × C_v` channel adjacency `a_g`. A
//! branch computes `ReLU(V (a_g + I))`, the identity being the self-loop of
//! every channel node. Branch outputs are concatenated and projected back to
//! `C_v`. In the last attention block of a network this replaces the
//! positional embedding on the value path.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{
    attention_block_forward, augmented_product, lambda_attention_tape, positional_rows, query_from_features,
    relative_offsets, AttentionDims, AttentionLayerParams, RpeMlp, RpeSet,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{NeighborhoodIndex, Point};
use crate::nn::{Binding, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum MgrMode {
    /// Final layer is a standard attention block.
    Off,
    SingleGraph,
    /// One graph per key channel.
    #[default]
    MultiGraph,
}

impl MgrMode {
    /// Number of channel graphs for a layer with `c_k` key channels.
    pub fn graphs(self, c_k: usize) -> usize {
        match self {
            MgrMode::Off => 0,
            MgrMode::SingleGraph => 1,
            MgrMode::MultiGraph => c_k,
        }
    }
}

impl fmt::Display for MgrMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MgrMode::Off => "off",
            MgrMode::SingleGraph => "single_graph",
            MgrMode::MultiGraph => "multi_graph",
        })
    }
}

impl FromStr for MgrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "off" => Ok(MgrMode::Off),
            "single_graph" => Ok(MgrMode::SingleGraph),
            "multi_graph" => Ok(MgrMode::MultiGraph),
            other => Err(Error::Argument(format!(
                "unknown mgr mode `{other}` (expected off, single_graph or multi_graph)"
            ))),
        }
    }
}

/// Channel adjacencies and the output projection.
///
/// The adjacencies are stored side by side as one `C_v × (G·C_v)` tensor so
/// all branches come out of a single product.
#[derive(Clone, Debug, PartialEq)]
pub struct MgrParams {
    pub graphs: usize,
    pub c_v: usize,
    pub adjacency: ParamId,
    pub projection: Linear,
}

impl MgrParams {
    /// Adjacencies start at zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        graphs: usize,
        c_v: usize,
        out_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if graphs == 0 || c_v == 0 || out_width == 0 {
            return Err(Error::Config(format!(
                "reasoning layer needs at least one graph and non-zero widths (graphs {graphs}, C_v {c_v}, out {out_width})"
            )));
        }
        let adjacency = store.zeros(format!("{name}.adjacency"), &[c_v, graphs * c_v]);
        let projection = Linear::new(store, &format!("{name}.proj"), graphs * c_v, out_width, true, rng);
        Ok(MgrParams {
            graphs,
            c_v,
            adjacency,
            projection,
        })
    }

    /// Copy of adjacency `g`.
    pub fn adjacency(&self, store: &ParamStore, g: usize) -> Tensor {
        let all = store.get(self.adjacency);
        let width = self.graphs * self.c_v;
        Tensor::from_fn(&[self.c_v, self.c_v], |i| {
            let (r, c) = (i / self.c_v, i % self.c_v);
            all.data()[r * width + g * self.c_v + c]
        })
    }

    pub fn set_adjacency(&self, store: &mut ParamStore, g: usize, a: &Tensor) -> Result<()> {
        if a.shape() != [self.c_v, self.c_v] || g >= self.graphs {
            return Err(Error::dim(
                "set_adjacency",
                format!("graph {g} of {} with shape {:?}", self.graphs, a.shape()),
            ));
        }
        let width = self.graphs * self.c_v;
        let all = store.get_mut(self.adjacency);
        for r in 0..self.c_v {
            for c in 0..self.c_v {
                all.data_mut()[r * width + g * self.c_v + c] = a.at(&[r, c]);
            }
        }
        Ok(())
    }
}

/// Concatenated branch outputs `[ReLU(V (a_g + I))]_g`, `M × (G·C_v)`.
pub fn mgr_branches(tape: &mut Tape, params: &Binding, values: Var, mgr: &MgrParams) -> Result<Var> {
    let s = tape.shape(values);
    if s.len() != 2 || s[1] != mgr.c_v {
        return Err(Error::dim("mgr", format!("values {s:?} do not have C_v = {} columns", mgr.c_v)));
    }
    let mixed = tape.matmul(values, params.var(mgr.adjacency))?;
    let tiled = if mgr.graphs == 1 {
        values
    } else {
        tape.concat(&vec![values; mgr.graphs], 1)?
    };
    let sum = tape.add(mixed, tiled)?;
    Ok(tape.relu(sum))
}

/// Branches followed by the output projection.
pub fn mgr_forward(tape: &mut Tape, params: &Binding, values: Var, mgr: &MgrParams) -> Result<Var> {
    let branches = mgr_branches(tape, params, values, mgr)?;
    mgr.projection.forward(tape, params, branches)
}

/// Final attention layer with reasoning on the value path.
///
/// Queries and keys are built exactly as in a standard block. Values skip the
/// context augmentation and the positional embedding: the raw neighbour
/// features are projected to `C_v` and passed through the channel graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct MgrLayerParams {
    pub dims: AttentionDims,
    pub rpe_q: Option<RpeMlp>,
    pub rpe_k: Option<RpeMlp>,
    pub edge: Linear,
    pub w_q: ParamId,
    pub w_k: ParamId,
    /// `C_in × C_v`.
    pub w_v: ParamId,
    pub mgr: MgrParams,
}

impl MgrLayerParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: AttentionDims,
        rpe: RpeSet,
        graphs: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let rpe_q = rpe.query.then(|| RpeMlp::new(store, &format!("{name}.rpe_q"), dims.c_h, rng));
        let rpe_k = rpe.key.then(|| RpeMlp::new(store, &format!("{name}.rpe_k"), dims.c_h, rng));
        let d_q = dims.augmented_width(rpe.query);
        let d_k = dims.augmented_width(rpe.key);
        let edge = Linear::new(store, &format!("{name}.edge"), d_q, d_q, true, rng);
        let w_q = store.uniform(format!("{name}.w_q"), &[d_q, dims.heads * dims.c_k], d_q, rng);
        let w_k = store.uniform(format!("{name}.w_k"), &[d_k, dims.c_k], d_k, rng);
        let w_v = store.uniform(format!("{name}.w_v"), &[dims.c_in, dims.c_v], dims.c_in, rng);
        let mgr = MgrParams::new(store, &format!("{name}.mgr"), graphs, dims.c_v, dims.c_v, rng)?;
        Ok(MgrLayerParams {
            dims,
            rpe_q,
            rpe_k,
            edge,
            w_q,
            w_k,
            w_v,
            mgr,
        })
    }
}

/// `N × C_in -> M × (heads·C_v)` for the centers of `nbr`.
pub fn mgr_layer_forward(
    tape: &mut Tape,
    params: &Binding,
    features: Var,
    positions: &[Point],
    nbr: &NeighborhoodIndex,
    layer: &MgrLayerParams,
) -> Result<Var> {
    let dims = layer.dims;
    if positions.len() != tape.shape(features)[0] {
        return Err(Error::dim(
            "mgr_layer",
            format!("{} positions for features {:?}", positions.len(), tape.shape(features)),
        ));
    }
    let offsets = tape.constant(relative_offsets(positions, nbr)?);
    let (m, k) = (nbr.num_centers(), nbr.k());
    let r_q = positional_rows(tape, params, offsets, layer.rpe_q.as_ref())?;
    let r_k = positional_rows(tape, params, offsets, layer.rpe_k.as_ref())?;
    let q = query_from_features(tape, params, features, dims.c_in, nbr, r_q, &layer.edge, layer.w_q)?;
    let keys = augmented_product(tape, features, dims.c_in, nbr, r_k, params.var(layer.w_k))?;
    let keys = tape.reshape(keys, &[m, k, dims.c_k])?;
    // reasoning is row-wise, so it runs on the source points before gathering
    let values = tape.matmul(features, params.var(layer.w_v))?;
    let values = mgr_forward(tape, params, values, &layer.mgr)?;
    let values = tape.gather_rows(values, nbr.flat_neighbors())?;
    let values = tape.reshape(values, &[m, k, dims.c_v])?;
    lambda_attention_tape(tape, q, keys, values, dims.heads)
}

/// Last layer of a network, chosen by [`MgrMode`].
#[derive(Clone, Debug, PartialEq)]
pub enum FinalLayer {
    Standard(AttentionLayerParams),
    Reasoning(MgrLayerParams),
}

/// Builds the final layer for an ablation mode. Input and output widths must
/// agree because the layer carries a residual connection.
pub fn mgr_ablation_variant(
    store: &mut ParamStore,
    name: &str,
    mode: MgrMode,
    dims: AttentionDims,
    rpe: RpeSet,
    rng: &mut impl Rng,
) -> Result<FinalLayer> {
    if dims.c_in != dims.out_width() {
        return Err(Error::Config(format!(
            "final layer input width {} differs from its output width {}",
            dims.c_in,
            dims.out_width()
        )));
    }
    match mode {
        MgrMode::Off => Ok(FinalLayer::Standard(AttentionLayerParams::new(store, name, dims, rpe, rng))),
        _ => Ok(FinalLayer::Reasoning(MgrLayerParams::new(store, name, dims, rpe, mode.graphs(dims.c_k), rng)?)),
    }
}

impl FinalLayer {
    pub fn dims(&self) -> AttentionDims {
        match self {
            FinalLayer::Standard(l) => l.dims,
            FinalLayer::Reasoning(l) => l.dims,
        }
    }

    /// Layer output plus the residual input. Every row of `features` must be
    /// a center of `nbr`, in order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Binding,
        features: Var,
        positions: &[Point],
        nbr: &NeighborhoodIndex,
    ) -> Result<Var> {
        let y = match self {
            FinalLayer::Standard(l) => attention_block_forward(tape, params, features, positions, nbr, l)?,
            FinalLayer::Reasoning(l) => mgr_layer_forward(tape, params, features, positions, nbr, l)?,
        };
        tape.add(y, features)
    }
}
