//! The assembled accident-risk network.
//!
//! Three branches feed a fusion head, per subgraph sample:
//!
//! * spatial — two stacked GAT layers over 1-hop pairs on static features,
//!   then attention pooling;
//! * temporal — per timestep, multi-scale GAT over hop rings; per node, a
//!   stacked bidirectional GRU across time; per timestep, attention pooling
//!   to a graph-level sequence; a second stacked bidirectional GRU over that
//!   sequence;
//! * external — the Linear/ReLU/BatchNorm/FC embedding of weather and
//!   calendar features.
//!
//! The prediction target is the subgraph's center segment. So that pooled
//! graph-level embeddings can tell the center apart from its context, every
//! node's feature rows are extended with a one-hot encoding of its hop
//! distance from the center (width `subgraph_radius + 1`); the encoding
//! permutes with the nodes, so relabeling invariance is preserved.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Subgraph, SPATIAL_FEATURES};
use crate::nn::{
    attention_pool, bigru_forward_steps, external_mlp, fusion_head, gat_forward, multi_scale_gat,
    AttentionPairs, AttentionPoolBinding, AttentionPoolParams, BiGruStack, BiGruStackBinding,
    ExternalMlpBinding, FusionHeadBinding, FusionHeadParams, GatLayerBinding, GatLayerParams,
    MlpParams,
};
use crate::tensor::{BnStats, Tape, Tensor, TensorId};

/// Per-(node, timestep) dynamic features: speed, vehicle count, occupancy.
pub const TEMPORAL_FEATURES: usize = 3;

/// Per-sample external features: 4 weather readings, a one-hot weather-event
/// code, and 4 calendar fields.
pub const EXTERNAL_FEATURES: usize = 13;

/// Hyperparameters of the network and its sample geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Spatial scales S: attention runs over rings at hop distance 1..=S.
    pub scales: usize,
    /// Attention heads H per GAT layer.
    pub heads: usize,
    /// Hidden width d.
    pub hidden: usize,
    /// Stacked layers in each bidirectional GRU.
    pub gru_depth: usize,
    /// Lookback timesteps T (hourly).
    pub lookback: usize,
    /// Subgraph radius k.
    pub subgraph_radius: usize,
    /// Dropout probability in the fusion head.
    pub dropout_p: f64,
    /// Prediction window in minutes.
    pub horizon_minutes: u32,
    /// Classification cutoff.
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: 3,
            heads: 4,
            hidden: 32,
            gru_depth: 2,
            lookback: 24,
            subgraph_radius: 3,
            dropout_p: 0.3,
            horizon_minutes: 60,
            threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("scales", self.scales),
            ("heads", self.heads),
            ("hidden", self.hidden),
            ("gru_depth", self.gru_depth),
            ("lookback", self.lookback),
            ("subgraph_radius", self.subgraph_radius),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        if self.horizon_minutes == 0 {
            return Err(Error::Config("horizon_minutes must be positive".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        let d_head = (self.hidden / self.heads).max(1);
        let gat_width = self.heads * d_head;
        let ms_width = self.scales * gat_width;
        let hop_channels = self.subgraph_radius + 1;
        ModelDims {
            d_head,
            gat_width,
            ms_width,
            hop_channels,
            spatial_in: SPATIAL_FEATURES + hop_channels,
            temporal_in: TEMPORAL_FEATURES + hop_channels,
            fused_width: 2 * self.hidden + gat_width + self.hidden,
        }
    }
}

/// Derived widths shared by initialization, forward and the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_head: usize,
    pub gat_width: usize,
    pub ms_width: usize,
    pub hop_channels: usize,
    pub spatial_in: usize,
    pub temporal_in: usize,
    pub fused_width: usize,
}

/// Every learnable weight of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spatial_gat: Vec<GatLayerParams>,
    pub spatial_pool: AttentionPoolParams,
    pub temporal_msgat: Vec<GatLayerParams>,
    pub node_bigru: BiGruStack,
    pub temp_pool: AttentionPoolParams,
    pub graph_bigru: BiGruStack,
    pub external: MlpParams,
    pub head: FusionHeadParams,
}

/// Deterministic parameter initialization for `(config, seed)`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let dims = config.dims();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let spatial_gat = vec![
        GatLayerParams::init(dims.spatial_in, dims.d_head, config.heads, &mut rng),
        GatLayerParams::init(dims.gat_width, dims.d_head, config.heads, &mut rng),
    ];
    let spatial_pool = AttentionPoolParams::init(dims.gat_width, &mut rng);
    let temporal_msgat = (0..config.scales)
        .map(|_| GatLayerParams::init(dims.temporal_in, dims.d_head, config.heads, &mut rng))
        .collect();
    let node_bigru = BiGruStack::init(dims.ms_width, config.hidden, config.gru_depth, &mut rng);
    let temp_pool = AttentionPoolParams::init(2 * config.hidden, &mut rng);
    let graph_bigru =
        BiGruStack::init(2 * config.hidden, config.hidden, config.gru_depth, &mut rng);
    let external = MlpParams::init(EXTERNAL_FEATURES, config.hidden, config.hidden, &mut rng);
    let head = FusionHeadParams::init(dims.fused_width, &mut rng);
    Ok(ModelParams {
        spatial_gat,
        spatial_pool,
        temporal_msgat,
        node_bigru,
        temp_pool,
        graph_bigru,
        external,
        head,
    })
}

impl ModelParams {
    /// Fixed-order traversal of learnable tensors.
    pub fn for_each(&self, f: &mut dyn FnMut(String, &Tensor)) {
        for (l, layer) in self.spatial_gat.iter().enumerate() {
            layer.for_each(&format!("spatial_gat.l{l}"), f);
        }
        self.spatial_pool.for_each("spatial_pool", f);
        for (s, layer) in self.temporal_msgat.iter().enumerate() {
            layer.for_each(&format!("temporal_msgat.s{s}"), f);
        }
        self.node_bigru.for_each("node_bigru", f);
        self.temp_pool.for_each("temp_pool", f);
        self.graph_bigru.for_each("graph_bigru", f);
        self.external.for_each("external", f);
        self.head.for_each("head", f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (l, layer) in self.spatial_gat.iter_mut().enumerate() {
            layer.for_each_mut(&format!("spatial_gat.l{l}"), f);
        }
        self.spatial_pool.for_each_mut("spatial_pool", f);
        for (s, layer) in self.temporal_msgat.iter_mut().enumerate() {
            layer.for_each_mut(&format!("temporal_msgat.s{s}"), f);
        }
        self.node_bigru.for_each_mut("node_bigru", f);
        self.temp_pool.for_each_mut("temp_pool", f);
        self.graph_bigru.for_each_mut("graph_bigru", f);
        self.external.for_each_mut("external", f);
        self.head.for_each_mut("head", f);
    }

    /// Non-learnable buffers (batch-norm running statistics).
    pub fn for_each_buffer(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.external.for_each_buffer("external", f);
    }

    pub fn for_each_buffer_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.external.for_each_buffer_mut("external", f);
    }

    /// All learnable scalars in traversal order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each(&mut |_, t| out.extend_from_slice(&t.data));
        out
    }

    /// Write a flat vector (same order as [`ModelParams::flatten`]) back.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        let mut err = None;
        self.for_each_mut(&mut |_, t| {
            if err.is_some() {
                return;
            }
            let n = t.data.len();
            if offset + n > flat.len() {
                err = Some(Error::Dimension {
                    op: "assign_flat",
                    lhs: vec![flat.len()],
                    rhs: vec![offset + n],
                });
                return;
            }
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if offset != flat.len() {
            return Err(Error::Dimension {
                op: "assign_flat",
                lhs: vec![flat.len()],
                rhs: vec![offset],
            });
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.data.len());
        n
    }
}

/// Closed-form count of learnable scalars for a configuration, written as
/// explicit shape arithmetic so it is independent of the initialization
/// path.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let d = config.hidden;
    let dims = config.dims();
    let gat = |d_in: usize| config.heads * (d_in * dims.d_head + 2 * dims.d_head);
    let pool = |w: usize| w * w + w;
    let gru = |d_in: usize| 3 * (d_in * d + d * d + d);
    let bigru_stack = |d_in: usize| {
        let mut total = 0;
        let mut width = d_in;
        for _ in 0..config.gru_depth {
            total += 2 * gru(width);
            width = 2 * d;
        }
        total
    };
    let spatial = gat(dims.spatial_in) + gat(dims.gat_width) + pool(dims.gat_width);
    let temporal = config.scales * gat(dims.temporal_in)
        + bigru_stack(dims.ms_width)
        + pool(2 * d)
        + bigru_stack(2 * d);
    let external = EXTERNAL_FEATURES * d + d + 2 * d + d * d + d;
    let head = 2 * dims.fused_width + dims.fused_width + 1;
    spatial + temporal + external + head
}

// ---- samples ----------------------------------------------------------------

/// One assembled, normalized sample: the k-hop subgraph around a segment at
/// a point in time, with all three feature groups and the label.
#[derive(Debug, Clone)]
pub struct SampleItem {
    pub subgraph: Subgraph,
    /// `[n x SPATIAL_FEATURES]`, normalized static features per local node.
    pub spatial: Tensor,
    /// `lookback` matrices of `[n x TEMPORAL_FEATURES]`, oldest first.
    pub temporal_steps: Vec<Tensor>,
    /// `[EXTERNAL_FEATURES]`, normalized.
    pub external: Vec<f64>,
    pub label: f64,
    /// Provenance id, stable across runs.
    pub id: String,
}

/// A batch of samples; forward output order matches item order.
#[derive(Debug, Clone, Default)]
pub struct SampleBatch {
    pub items: Vec<SampleItem>,
}

impl SampleBatch {
    pub fn labels(&self) -> Vec<f64> {
        self.items.iter().map(|s| s.label).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn check_item(item: &SampleItem, config: &ModelConfig) -> Result<()> {
    let n = item.subgraph.len();
    if item.spatial.dims2() != Some((n, SPATIAL_FEATURES)) {
        return Err(Error::Dimension {
            op: "sample spatial features",
            lhs: item.spatial.shape.clone(),
            rhs: vec![n, SPATIAL_FEATURES],
        });
    }
    if item.temporal_steps.len() != config.lookback {
        return Err(Error::Dimension {
            op: "sample lookback",
            lhs: vec![item.temporal_steps.len()],
            rhs: vec![config.lookback],
        });
    }
    for step in &item.temporal_steps {
        if step.dims2() != Some((n, TEMPORAL_FEATURES)) {
            return Err(Error::Dimension {
                op: "sample temporal features",
                lhs: step.shape.clone(),
                rhs: vec![n, TEMPORAL_FEATURES],
            });
        }
    }
    if item.external.len() != EXTERNAL_FEATURES {
        return Err(Error::Dimension {
            op: "sample external features",
            lhs: vec![item.external.len()],
            rhs: vec![EXTERNAL_FEATURES],
        });
    }
    if item
        .subgraph
        .hop_of
        .iter()
        .any(|&h| h > config.subgraph_radius)
    {
        return Err(Error::Contract(format!(
            "subgraph hop exceeds radius {}",
            config.subgraph_radius
        )));
    }
    Ok(())
}

/// One-hot hop encoding appended to a feature matrix.
fn with_hop_channels(base: &Tensor, hop_of: &[usize], hop_channels: usize) -> Tensor {
    let (n, w) = base.dims2().expect("feature matrix");
    let mut out = Tensor::zeros(vec![n, w + hop_channels]);
    for i in 0..n {
        let dst = &mut out.data[i * (w + hop_channels)..(i + 1) * (w + hop_channels)];
        dst[..w].copy_from_slice(&base.data[i * w..(i + 1) * w]);
        dst[w + hop_of[i]] = 1.0;
    }
    out
}

// ---- bindings ---------------------------------------------------------------

/// Tape bindings for the two per-sample branches.
pub(crate) struct BranchBindings {
    spatial_gat: Vec<GatLayerBinding>,
    spatial_pool: AttentionPoolBinding,
    msgat: Vec<GatLayerBinding>,
    node_bigru: BiGruStackBinding,
    temp_pool: AttentionPoolBinding,
    graph_bigru: BiGruStackBinding,
}

impl BranchBindings {
    /// Rebuild from ids emitted in [`ModelParams::for_each`] order.
    pub(crate) fn from_ids(config: &ModelConfig, next: &mut dyn FnMut() -> TensorId) -> Self {
        BranchBindings {
            spatial_gat: (0..2)
                .map(|_| GatLayerBinding::from_ids(config.heads, next))
                .collect(),
            spatial_pool: AttentionPoolBinding::from_ids(next),
            msgat: (0..config.scales)
                .map(|_| GatLayerBinding::from_ids(config.heads, next))
                .collect(),
            node_bigru: BiGruStackBinding::from_ids(config.gru_depth, config.hidden, next),
            temp_pool: AttentionPoolBinding::from_ids(next),
            graph_bigru: BiGruStackBinding::from_ids(config.gru_depth, config.hidden, next),
        }
    }

    fn for_each(&self, f: &mut dyn FnMut(TensorId)) {
        for l in &self.spatial_gat {
            l.for_each(f);
        }
        self.spatial_pool.for_each(f);
        for l in &self.msgat {
            l.for_each(f);
        }
        self.node_bigru.for_each(f);
        self.temp_pool.for_each(f);
        self.graph_bigru.for_each(f);
    }
}

/// Tape bindings for the shared fusion stage.
pub(crate) struct FusionBindings {
    external: ExternalMlpBinding,
    head: FusionHeadBinding,
}

impl FusionBindings {
    pub(crate) fn from_ids(next: &mut dyn FnMut() -> TensorId) -> Self {
        FusionBindings {
            external: ExternalMlpBinding::from_ids(next),
            head: FusionHeadBinding::from_ids(next),
        }
    }

    fn for_each(&self, f: &mut dyn FnMut(TensorId)) {
        self.external.for_each(f);
        self.head.for_each(f);
    }
}

impl ModelParams {
    pub(crate) fn bind_branches(&self, tape: &mut Tape) -> BranchBindings {
        BranchBindings {
            spatial_gat: self.spatial_gat.iter().map(|l| l.bind(tape)).collect(),
            spatial_pool: self.spatial_pool.bind(tape),
            msgat: self.temporal_msgat.iter().map(|l| l.bind(tape)).collect(),
            node_bigru: self.node_bigru.bind(tape),
            temp_pool: self.temp_pool.bind(tape),
            graph_bigru: self.graph_bigru.bind(tape),
        }
    }

    pub(crate) fn bind_fusion(&self, tape: &mut Tape) -> FusionBindings {
        FusionBindings {
            external: self.external.bind(tape),
            head: self.head.bind(tape),
        }
    }

    /// Scalars in the branch part of the traversal (everything before the
    /// external and head groups).
    fn branch_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |name, t| {
            if !name.starts_with("external") && !name.starts_with("head") {
                n += t.data.len();
            }
        });
        n
    }
}

// ---- forward ----------------------------------------------------------------

/// Spatial and temporal branch embeddings for one sample on one tape.
/// Returns `(h_temp [1 x 2d], h_spatial [1 x gat_width])`.
pub(crate) fn branch_embeddings(
    tape: &mut Tape,
    bindings: &BranchBindings,
    item: &SampleItem,
    config: &ModelConfig,
) -> Result<(TensorId, TensorId)> {
    let dims = config.dims();
    let sg = &item.subgraph;
    let rings = sg.local_rings(config.scales);
    let one_hop = AttentionPairs::one_hop(&sg.local_adjacency());

    // spatial branch
    let spatial_feats =
        tape.input(with_hop_channels(&item.spatial, &sg.hop_of, dims.hop_channels));
    let g1 = gat_forward(tape, spatial_feats, &one_hop, &bindings.spatial_gat[0])?;
    let g2 = gat_forward(tape, g1.out, &one_hop, &bindings.spatial_gat[1])?;
    let (h_spatial, _) = attention_pool(tape, g2.out, &bindings.spatial_pool)?;

    // temporal branch: spatial mixing per timestep, then recurrence
    let mut mixed_steps = Vec::with_capacity(config.lookback);
    for step in &item.temporal_steps {
        let feats = tape.input(with_hop_channels(step, &sg.hop_of, dims.hop_channels));
        let ms = multi_scale_gat(tape, feats, &rings, &bindings.msgat)?;
        mixed_steps.push(ms.out);
    }
    let (node_outputs, _) = bigru_forward_steps(tape, &mixed_steps, &bindings.node_bigru)?;
    let mut pooled_steps = Vec::with_capacity(config.lookback);
    for out in node_outputs {
        let (pooled, _) = attention_pool(tape, out, &bindings.temp_pool)?;
        pooled_steps.push(pooled);
    }
    let (_, h_temp) = bigru_forward_steps(tape, &pooled_steps, &bindings.graph_bigru)?;

    Ok((h_temp, h_spatial))
}

/// How a forward pass treats dropout and batch-norm statistics.
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode {
    Eval,
    /// Batch statistics + dropout masks drawn from the given seed; running
    /// statistics are updated.
    Train { dropout_seed: u64 },
}

/// Run the model over a batch. Eval mode is a pure function of
/// `(batch, params, config)`; samples are independent, so the batch fans out
/// across one tape per sample. Train mode couples samples through batch
/// normalization and updates the running statistics.
pub fn forward(
    batch: &SampleBatch,
    params: &mut ModelParams,
    config: &ModelConfig,
    mode: ForwardMode,
) -> Result<Vec<f64>> {
    match mode {
        ForwardMode::Eval => forward_eval(batch, params, config),
        ForwardMode::Train { dropout_seed } => {
            let staged = staged_train_forward(batch, params, config, dropout_seed)?;
            params.external.update_running(&staged.bn_stats);
            Ok(staged.probs)
        }
    }
}

/// Deterministic evaluation-mode forward; does not touch `params`.
pub fn forward_eval(
    batch: &SampleBatch,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    for item in &batch.items {
        check_item(item, config)?;
    }
    batch
        .items
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let bindings = params.bind_branches(&mut tape);
            let fusion = params.bind_fusion(&mut tape);
            let (h_temp, h_spatial) = branch_embeddings(&mut tape, &bindings, item, config)?;
            let x_ext =
                tape.input(Tensor::new(vec![1, EXTERNAL_FEATURES], item.external.clone())?);
            let (z_ext, _) = external_mlp(
                &mut tape,
                x_ext,
                &fusion.external,
                (
                    &params.external.running_mean.data,
                    &params.external.running_var.data,
                ),
                false,
            )?;
            let mut rng = ChaCha20Rng::seed_from_u64(0);
            let prob = fusion_head(
                &mut tape,
                h_temp,
                h_spatial,
                z_ext,
                &fusion.head,
                config.dropout_p,
                false,
                &mut rng,
            )?;
            Ok(tape.data(prob)[0])
        })
        .collect()
}

/// Everything produced by one training-mode forward/backward step.
pub struct TrainStep {
    pub probs: Vec<f64>,
    pub loss: f64,
    /// Gradient of the mean BCE loss, aligned with [`ModelParams::flatten`].
    pub grads: Vec<f64>,
    /// Batch statistics the external branch used (for running updates).
    pub bn_stats: BnStats,
}

struct StagedForward {
    per_sample: Vec<(Tape, BranchBindings, TensorId, TensorId)>,
    batch_tape: Tape,
    fusion: FusionBindings,
    h_temp_leaf: TensorId,
    h_spatial_leaf: TensorId,
    probs_id: TensorId,
    probs: Vec<f64>,
    bn_stats: BnStats,
}

/// Training forward in two stages: per-sample branch tapes (parallel), then
/// one shared tape for the batch-norm-coupled external branch and head.
fn staged_train_forward(
    batch: &SampleBatch,
    params: &ModelParams,
    config: &ModelConfig,
    dropout_seed: u64,
) -> Result<StagedForward> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::Precondition("training on an empty batch".into()));
    }
    for item in &batch.items {
        check_item(item, config)?;
    }
    let dims = config.dims();

    // stage 1: branch embeddings, one tape per sample
    let per_sample: Vec<(Tape, BranchBindings, TensorId, TensorId)> = batch
        .items
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let bindings = params.bind_branches(&mut tape);
            let (h_temp, h_spatial) = branch_embeddings(&mut tape, &bindings, item, config)?;
            Ok((tape, bindings, h_temp, h_spatial))
        })
        .collect::<Result<_>>()?;

    // stage 2: fused head over the whole batch on one tape
    let b = batch.len();
    let mut h_temp_rows = Vec::with_capacity(b * 2 * config.hidden);
    let mut h_spatial_rows = Vec::with_capacity(b * dims.gat_width);
    for (tape, _, h_temp, h_spatial) in &per_sample {
        h_temp_rows.extend_from_slice(tape.data(*h_temp));
        h_spatial_rows.extend_from_slice(tape.data(*h_spatial));
    }
    let mut batch_tape = Tape::new();
    let fusion = params.bind_fusion(&mut batch_tape);
    let h_temp_leaf = batch_tape.var(Tensor::new(vec![b, 2 * config.hidden], h_temp_rows)?);
    let h_spatial_leaf = batch_tape.var(Tensor::new(vec![b, dims.gat_width], h_spatial_rows)?);
    let mut ext_rows = Vec::with_capacity(b * EXTERNAL_FEATURES);
    for item in &batch.items {
        ext_rows.extend_from_slice(&item.external);
    }
    let x_ext = batch_tape.input(Tensor::new(vec![b, EXTERNAL_FEATURES], ext_rows)?);
    let (z_ext, stats) = external_mlp(
        &mut batch_tape,
        x_ext,
        &fusion.external,
        (
            &params.external.running_mean.data,
            &params.external.running_var.data,
        ),
        true,
    )?;
    let mut rng = ChaCha20Rng::seed_from_u64(dropout_seed);
    let probs_id = fusion_head(
        &mut batch_tape,
        h_temp_leaf,
        h_spatial_leaf,
        z_ext,
        &fusion.head,
        config.dropout_p,
        true,
        &mut rng,
    )?;
    let probs = batch_tape.data(probs_id).to_vec();
    Ok(StagedForward {
        per_sample,
        batch_tape,
        fusion,
        h_temp_leaf,
        h_spatial_leaf,
        probs_id,
        probs,
        bn_stats: stats.expect("training mode returns stats"),
    })
}

/// One full forward/backward over a batch: mean BCE loss and its gradient
/// with respect to every parameter, deterministically.
pub fn train_step(
    batch: &SampleBatch,
    params: &ModelParams,
    config: &ModelConfig,
    dropout_seed: u64,
) -> Result<TrainStep> {
    let mut staged = staged_train_forward(batch, params, config, dropout_seed)?;
    let labels = batch.labels();
    let loss_id = staged.batch_tape.bce_loss(staged.probs_id, &labels)?;
    let loss = staged.batch_tape.data(loss_id)[0];
    staged.batch_tape.backward(loss_id)?;

    // cotangents of the per-sample cut points
    let d_h_temp = staged
        .batch_tape
        .grad(staged.h_temp_leaf)
        .expect("h_temp gradient")
        .to_vec();
    let d_h_spatial = staged
        .batch_tape
        .grad(staged.h_spatial_leaf)
        .expect("h_spatial gradient")
        .to_vec();

    // stage 3: per-sample backward seeded with the cut-point cotangents
    let temp_w = 2 * config.hidden;
    let sp_w = config.dims().gat_width;
    let branch_grads: Vec<Vec<f64>> = staged
        .per_sample
        .par_iter_mut()
        .enumerate()
        .map(|(i, (tape, bindings, h_temp, h_spatial))| {
            let seeds = vec![
                (*h_temp, d_h_temp[i * temp_w..(i + 1) * temp_w].to_vec()),
                (*h_spatial, d_h_spatial[i * sp_w..(i + 1) * sp_w].to_vec()),
            ];
            tape.backward_seeded(&seeds)?;
            let mut flat = Vec::new();
            bindings.for_each(&mut |id| match tape.grad(id) {
                Some(g) => flat.extend_from_slice(g),
                None => flat.extend(std::iter::repeat(0.0).take(tape.value(id).numel())),
            });
            Ok(flat)
        })
        .collect::<Result<_>>()?;

    // assemble the full gradient in flatten order (branch part, then fusion)
    let n_branch = params.branch_scalars();
    let mut grads = vec![0.0; n_branch];
    for sample in &branch_grads {
        debug_assert_eq!(sample.len(), n_branch);
        for (acc, &g) in grads.iter_mut().zip(sample) {
            *acc += g;
        }
    }
    staged.fusion.for_each(&mut |id| match staged.batch_tape.grad(id) {
        Some(g) => grads.extend_from_slice(g),
        None => grads.extend(std::iter::repeat(0.0).take(staged.batch_tape.value(id).numel())),
    });

    Ok(TrainStep {
        probs: staged.probs,
        loss,
        grads,
        bn_stats: staged.bn_stats,
    })
}

/// Build the complete eval-mode forward (branches, external MLP with the
/// given running statistics, fusion head, BCE against `label`) for one
/// sample on a caller-supplied tape, binding parameters from `ids` in
/// [`ModelParams::for_each`] order. This is the hook the gradient checker
/// uses to verify the full model on a single tape.
pub fn single_sample_loss_from_ids(
    tape: &mut Tape,
    ids: &[TensorId],
    item: &SampleItem,
    config: &ModelConfig,
    running: (&[f64], &[f64]),
    label: f64,
) -> Result<TensorId> {
    check_item(item, config)?;
    let mut cursor = 0;
    let mut next = || {
        let id = ids[cursor];
        cursor += 1;
        id
    };
    let bindings = BranchBindings::from_ids(config, &mut next);
    let fusion = FusionBindings::from_ids(&mut next);
    if cursor != ids.len() {
        return Err(Error::Contract(format!(
            "expected {cursor} parameter tensors, got {}",
            ids.len()
        )));
    }
    let (h_temp, h_spatial) = branch_embeddings(tape, &bindings, item, config)?;
    let x_ext = tape.input(Tensor::new(vec![1, EXTERNAL_FEATURES], item.external.clone())?);
    let (z_ext, _) = external_mlp(tape, x_ext, &fusion.external, running, false)?;
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let prob = fusion_head(
        tape,
        h_temp,
        h_spatial,
        z_ext,
        &fusion.head,
        0.0,
        false,
        &mut rng,
    )?;
    tape.bce_loss(prob, &[label])
}

// ---- checkpointing ----------------------------------------------------------

/// SHA-256 of the canonical JSON encoding of the configuration.
pub fn config_hash(config: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hasher.finalize().into()
}

/// Write parameters + buffers + embedded config as one checkpoint.
pub fn save_checkpoint<W: std::io::Write>(
    w: W,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<()> {
    let hash = config_hash(config);
    let extra = serde_json::to_vec(config)?;
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    params.for_each(&mut |name, t| entries.push((name, t.clone())));
    params.for_each_buffer(&mut |name, t| entries.push((name, t.clone())));
    let borrowed: Vec<(String, &Tensor)> =
        entries.iter().map(|(n, t)| (n.clone(), t)).collect();
    crate::nn::params_io::save(w, &hash, &extra, &borrowed)
}

/// Load a checkpoint, validating the embedded config against its hash and
/// every parameter name and shape.
pub fn load_checkpoint<R: std::io::Read>(r: R) -> Result<(ModelParams, ModelConfig)> {
    let container = crate::nn::params_io::load(r)?;
    let config: ModelConfig = serde_json::from_slice(&container.extra)?;
    if config_hash(&config) != container.config_hash {
        return Err(Error::Contract(
            "checkpoint config hash does not match embedded config".into(),
        ));
    }
    let mut params = init_params(&config, 0)?;
    let lookup: std::collections::HashMap<&str, &Tensor> = container
        .entries
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    let mut problems = Vec::new();
    let mut apply = |name: String, t: &mut Tensor| match lookup.get(name.as_str()) {
        Some(loaded) if loaded.shape == t.shape => t.data.copy_from_slice(&loaded.data),
        Some(loaded) => problems.push(format!(
            "{name}: shape {:?} != expected {:?}",
            loaded.shape, t.shape
        )),
        None => problems.push(format!("{name}: absent")),
    };
    params.for_each_mut(&mut apply);
    params.for_each_buffer_mut(&mut apply);
    if !problems.is_empty() {
        return Err(Error::Contract(format!(
            "checkpoint does not match config: {}",
            problems.join("; ")
        )));
    }
    Ok((params, config))
}
