use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_block_forward, AttentionDims, AttentionLayerParams, RpeSet};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample_points, knn_points, Point, PointCloud};
use crate::mgr::{mgr_ablation_variant, FinalLayer, MgrMode};
use crate::nn::{BatchMoments, BatchNorm, Binding, Linear, ParamStore, RunningStats};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Classify,
    Segment,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classify => "classify",
            Task::Segment => "segment",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "classify" => Ok(Task::Classify),
            "segment" => Ok(Task::Segment),
            other => Err(Error::Argument(format!("unknown task `{other}` (expected classify or segment)"))),
        }
    }
}

/// Architecture of a model. Channel widths are shared by every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    pub num_classes: usize,
    /// Width of the per-point input features (3 when only coordinates are used).
    pub in_features: usize,
    pub k: usize,
    /// Points kept by each attention block (classification only).
    pub sample_sizes: Vec<usize>,
    pub c_k: usize,
    pub c_v: usize,
    pub c_h: usize,
    pub heads: usize,
    /// Attention blocks before the final layer.
    pub depth: usize,
    pub mgr_mode: MgrMode,
    pub rpe: RpeSet,
    /// Hidden widths of the output MLP.
    pub head_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            task: Task::Classify,
            num_classes: 2,
            in_features: 3,
            k: 16,
            sample_sizes: vec![128, 64],
            c_k: 32,
            c_v: 16,
            c_h: 16,
            heads: 8,
            depth: 2,
            mgr_mode: MgrMode::MultiGraph,
            rpe: RpeSet::ALL,
            head_widths: vec![64],
        }
    }
}

impl ModelConfig {
    /// Depth-2 model with MGR and every width at 4 or below, sized for
    /// 32-point clouds and exhaustive gradient checks.
    pub fn tiny(task: Task) -> Self {
        ModelConfig {
            task,
            k: 4,
            sample_sizes: if task == Task::Classify { vec![16, 8] } else { Vec::new() },
            c_k: 4,
            c_v: 4,
            c_h: 4,
            heads: 2,
            head_widths: vec![8],
            ..ModelConfig::default()
        }
    }

    /// Smaller widths suited to per-point prediction on every input point.
    pub fn segmentation() -> Self {
        ModelConfig {
            task: Task::Segment,
            k: 12,
            sample_sizes: Vec::new(),
            c_k: 16,
            c_v: 8,
            c_h: 8,
            heads: 4,
            head_widths: vec![32],
            ..ModelConfig::default()
        }
    }

    /// Width of every block output.
    pub fn feature_width(&self) -> usize {
        self.heads * self.c_v
    }

    /// Width of the rows entering the output MLP.
    pub fn head_input_width(&self) -> usize {
        match self.task {
            Task::Classify => self.feature_width(),
            Task::Segment => (self.depth + 2) * self.feature_width(),
        }
    }

    fn block_dims(&self, layer: usize) -> AttentionDims {
        AttentionDims {
            c_in: if layer == 0 { self.in_features } else { self.feature_width() },
            c_k: self.c_k,
            c_v: self.c_v,
            c_h: self.c_h,
            heads: self.heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        for (name, v) in [
            ("in_features", self.in_features),
            ("k", self.k),
            ("c_k", self.c_k),
            ("c_v", self.c_v),
            ("c_h", self.c_h),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.head_widths.contains(&0) {
            return bad("head widths must be positive".into());
        }
        if self.task == Task::Classify {
            if self.sample_sizes.len() != self.depth {
                return bad(format!(
                    "{} sample sizes given for depth {}",
                    self.sample_sizes.len(),
                    self.depth
                ));
            }
            if self.sample_sizes.windows(2).any(|w| w[1] > w[0]) {
                return bad(format!("sample sizes {:?} must be non-increasing", self.sample_sizes));
            }
            let last = *self.sample_sizes.last().expect("depth >= 1");
            if self.k > last {
                return bad(format!("k = {} exceeds the last sample size {last}", self.k));
            }
        }
        Ok(())
    }
}

/// Whether standardization layers use batch moments or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    hidden: Vec<(Linear, BatchNorm)>,
    out: Linear,
}

/// Parameters, layer layout and running statistics of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    blocks: Vec<AttentionLayerParams>,
    final_layer: FinalLayer,
    head: Head,
    stats: Vec<RunningStats>,
}

/// Result of a forward pass recorded on a tape.
pub struct ForwardPass {
    /// `B × classes` for classification, `(B·N) × classes` for segmentation.
    pub logits: Var,
    pub moments: Vec<BatchMoments>,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let blocks = (0..config.depth)
            .map(|l| AttentionLayerParams::new(&mut store, &format!("block{l}"), config.block_dims(l), config.rpe, &mut rng))
            .collect();
        let final_layer = mgr_ablation_variant(
            &mut store,
            "final",
            config.mgr_mode,
            config.block_dims(config.depth),
            config.rpe,
            &mut rng,
        )?;
        let mut width = config.head_input_width();
        let mut hidden = Vec::new();
        for (i, &w) in config.head_widths.iter().enumerate() {
            let lin = Linear::new(&mut store, &format!("head{i}"), width, w, true, &mut rng);
            let bn = BatchNorm::new(&mut store, &format!("head{i}.bn"), w);
            hidden.push((lin, bn));
            width = w;
        }
        let out = Linear::new(&mut store, "head.out", width, config.num_classes, true, &mut rng);
        let stats = config.head_widths.iter().map(|&w| RunningStats::new(w)).collect();
        Ok(Model {
            config,
            store,
            blocks,
            final_layer,
            head: Head { hidden, out },
            stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Folds the batch moments of a training step into the running statistics.
    pub fn commit_moments(&mut self, moments: &[BatchMoments]) -> Result<()> {
        if moments.len() != self.stats.len() {
            return Err(Error::Contract(format!(
                "{} moment sets for {} standardization layers",
                moments.len(),
                self.stats.len()
            )));
        }
        for (s, m) in self.stats.iter_mut().zip(moments) {
            s.update(&m.mean, &m.var);
        }
        Ok(())
    }

    fn check_cloud(&self, cloud: &PointCloud) -> Result<()> {
        let n = cloud.len();
        let needed = match self.config.task {
            Task::Classify => self.config.sample_sizes[0].max(self.config.k),
            Task::Segment => self.config.k,
        };
        if n < needed {
            return Err(Error::Argument(format!("cloud has {n} points, the model needs at least {needed}")));
        }
        let width = cloud.features().map_or(3, |f| f.shape()[1]);
        if width != self.config.in_features {
            return Err(Error::dim(
                "model",
                format!("cloud has {width} input features, model expects {}", self.config.in_features),
            ));
        }
        Ok(())
    }

    /// Per-cloud part of the network: `1 × W` pooled features for
    /// classification, `N × head_input_width` rows for segmentation.
    fn backbone(&self, tape: &mut Tape, params: &Binding, cloud: &PointCloud) -> Result<Var> {
        self.check_cloud(cloud)?;
        let k = self.config.k;
        let mut positions: Vec<Point> = cloud.positions().to_vec();
        let mut features = tape.constant(cloud.input_features());
        match self.config.task {
            Task::Classify => {
                for (block, &size) in self.blocks.iter().zip(&self.config.sample_sizes) {
                    let centers = farthest_point_sample_points(&positions, size)?;
                    let nbr = knn_points(&positions, &centers, k)?;
                    features = attention_block_forward(tape, params, features, &positions, &nbr, block)?;
                    positions = centers.iter().map(|&c| positions[c]).collect();
                }
                let all: Vec<usize> = (0..positions.len()).collect();
                let nbr = knn_points(&positions, &all, k)?;
                let out = self.final_layer.forward(tape, params, features, &positions, &nbr)?;
                let pooled = tape.max_over(out, 0)?;
                tape.reshape(pooled, &[1, self.config.feature_width()])
            }
            Task::Segment => {
                let all: Vec<usize> = (0..positions.len()).collect();
                let nbr = knn_points(&positions, &all, k)?;
                let mut per_layer = Vec::with_capacity(self.config.depth + 2);
                for block in &self.blocks {
                    features = attention_block_forward(tape, params, features, &positions, &nbr, block)?;
                    per_layer.push(features);
                }
                let out = self.final_layer.forward(tape, params, features, &positions, &nbr)?;
                per_layer.push(out);
                let pooled = tape.max_over(out, 0)?;
                let pooled = tape.reshape(pooled, &[1, self.config.feature_width()])?;
                let global = tape.gather_rows(pooled, &vec![0; positions.len()])?;
                per_layer.push(global);
                tape.concat(&per_layer, 1)
            }
        }
    }

    fn head_forward(&self, tape: &mut Tape, params: &Binding, x: Var, mode: Mode) -> Result<(Var, Vec<BatchMoments>)> {
        let mut h = x;
        let mut moments = Vec::new();
        for ((lin, bn), stats) in self.head.hidden.iter().zip(&self.stats) {
            h = lin.forward(tape, params, h)?;
            h = match mode {
                Mode::Train => {
                    let (y, m) = bn.forward_train(tape, params, h)?;
                    moments.push(m);
                    y
                }
                Mode::Eval => bn.forward_eval(tape, params, h, stats)?,
            };
            h = tape.relu(h);
        }
        Ok((self.head.out.forward(tape, params, h)?, moments))
    }

    /// Records the whole network for a batch on `tape`, with parameters
    /// bound through `params`.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &Binding, clouds: &[&PointCloud], mode: Mode) -> Result<ForwardPass> {
        if clouds.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let rows = clouds
            .iter()
            .map(|c| self.backbone(tape, params, c))
            .collect::<Result<Vec<_>>>()?;
        let stacked = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
        let (logits, moments) = self.head_forward(tape, params, stacked, mode)?;
        Ok(ForwardPass { logits, moments })
    }

    /// Evaluation-mode logits: `B × classes`, or `B × N × classes` for
    /// segmentation.
    pub fn predict(&self, clouds: &[&PointCloud]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind_constants(&mut tape);
        let pass = self.forward_on_tape(&mut tape, &params, clouds, Mode::Eval)?;
        let logits = tape.value(pass.logits).clone();
        match self.config.task {
            Task::Classify => Ok(logits),
            Task::Segment => {
                let n = clouds[0].len();
                if clouds.iter().any(|c| c.len() != n) {
                    return Err(Error::Argument("segmentation batch mixes cloud sizes".into()));
                }
                logits.reshape(&[clouds.len(), n, self.config.num_classes])
            }
        }
    }

    fn bind_constants(&self, tape: &mut Tape) -> Binding {
        Binding::from_vars(self.store.values().iter().map(|v| tape.constant(v.clone())).collect())
    }

    /// Named tensors describing the model state: parameters then running
    /// statistics.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .store
            .names()
            .iter()
            .cloned()
            .zip(self.store.values().iter().cloned())
            .collect();
        for (i, s) in self.stats.iter().enumerate() {
            out.push((format!("head{i}.bn.running_mean"), s.mean.clone()));
            out.push((format!("head{i}.bn.running_var"), s.var.clone()));
        }
        out
    }

    /// Restores tensors written by [`Model::state`] into a model built from
    /// the same configuration.
    pub fn load_state(&mut self, state: &[(String, Tensor)]) -> Result<()> {
        let expected = self.state();
        if state.len() != expected.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {}",
                state.len(),
                expected.len()
            )));
        }
        for ((name, t), (want, cur)) in state.iter().zip(&expected) {
            if name != want || t.shape() != cur.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{name}` {:?} does not match `{want}` {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
        }
        let p = self.store.len();
        for (slot, (_, t)) in self.store.values_mut().iter_mut().zip(state) {
            *slot = t.clone();
        }
        for (i, s) in self.stats.iter_mut().enumerate() {
            s.mean = state[p + 2 * i].1.clone();
            s.var = state[p + 2 * i + 1].1.clone();
        }
        Ok(())
    }
}
