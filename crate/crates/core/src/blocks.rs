//! Network building blocks: convolution + BN units, the relation branch
//! (square-pooling), the SMART block and residual basic blocks.
//!
//! Parameters live in a [`ParamStore`]; layers hold typed ids into it. A
//! forward pass runs inside a [`Session`], which binds parameters into an
//! autodiff [`Graph`] on first use.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{contract_err, shape_err, Result};
use crate::ops::{ConvSpec, Mode, BN_EPSILON, BN_MOMENTUM};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Batch-norm running statistics for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push(RunningStats {
            name: name.into(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        StatsId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn all_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn all_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// One forward (and optionally backward) pass over a graph.
pub struct Session<'a> {
    pub graph: &'a mut Graph,
    store: &'a mut ParamStore,
    bound: Vec<Option<NodeId>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a mut ParamStore, mode: Mode, seed: u64) -> Self {
        let n = store.params.len();
        Session {
            graph,
            store,
            bound: vec![None; n],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph node for a parameter, creating a trainable leaf on first use.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.bound[id.0] {
            return node;
        }
        let node = self.graph.param(self.store.params[id.0].value.clone());
        self.bound[id.0] = Some(node);
        node
    }

    /// Routes a parameter to an existing node (used by gradient checks).
    pub fn bind(&mut self, id: ParamId, node: NodeId) {
        self.bound[id.0] = Some(node);
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.bound[id.0].and_then(|n| self.graph.grad(n))
    }

    pub fn batch_norm(&mut self, x: NodeId, bn: &BatchNorm) -> Result<NodeId> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let stats = &mut self.store.stats[bn.stats.0];
        self.graph
            .batch_norm(x, gamma, beta, &mut stats.mean, &mut stats.var, BN_EPSILON, BN_MOMENTUM, self.mode)
    }

    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        let mode = self.mode;
        self.graph.dropout(x, p, mode, &mut self.rng)
    }
}

/// He-normal initialization: `N(0, 2 / fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        spec: ConvSpec,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = spec.weight_shape(in_channels);
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&shape, in_channels * spec.kernel_volume(), rng)?,
        );
        let bias = if with_bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels])?))
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            spec,
            in_channels,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv3d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)?),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])?),
            stats: store.add_stats(name, channels),
            channels,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        s.batch_norm(x, self)
    }
}

/// Convolution followed by batch normalization (no activation).
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_channels: usize, spec: ConvSpec, rng: &mut R) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv::new(store, &format!("{name}.conv"), in_channels, spec, false, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), spec.out_channels)?,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let y = self.conv.forward(s, x)?;
        self.bn.forward(s, y)
    }
}

/// Geometry and channel plan of a SMART block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmartBlockConfig {
    /// Relation-branch 3D convolution geometry (`out_channels` is `C_t`).
    pub conv: ConvSpec,
    pub in_channels: usize,
    pub appearance_out: usize,
    pub relation_hidden: usize,
    pub relation_codes: usize,
    pub fused_out: usize,
    pub pool_group: usize,
    pub pool_weight: f64,
}

pub const POOL_GROUP: usize = 2;
pub const POOL_WEIGHT: f64 = 0.5;

impl SmartBlockConfig {
    /// Default plan for a block with kernel `k x k x t` and `c` outputs:
    /// `C_s = C_t = C_f = c`, `C'_t = c / 2`.
    pub fn new(in_channels: usize, k: usize, t: usize, spatial_stride: usize, temporal_stride: usize, c: usize) -> Self {
        SmartBlockConfig {
            conv: ConvSpec::new(k, t, spatial_stride, temporal_stride, c),
            in_channels,
            appearance_out: c,
            relation_hidden: c,
            relation_codes: c / POOL_GROUP,
            fused_out: c,
            pool_group: POOL_GROUP,
            pool_weight: POOL_WEIGHT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(contract_err!("invalid SMART config ({what}): {:?}", self));
        if self.appearance_out != self.relation_hidden {
            return bad("C_s must equal C_t");
        }
        if self.relation_hidden != self.pool_group * self.relation_codes {
            return bad("C_t must equal group * C'_t");
        }
        if self.pool_group != POOL_GROUP || self.pool_weight != POOL_WEIGHT {
            return bad("pooling must use group 2 and weight 0.5");
        }
        if self.fused_out != self.appearance_out {
            return bad("C_f must equal C_s");
        }
        if self.conv.out_channels != self.relation_hidden {
            return bad("relation conv outputs must equal C_t");
        }
        Ok(())
    }

    /// Per-frame convolution of the appearance branch: same spatial kernel and strides.
    pub fn appearance_spec(&self) -> ConvSpec {
        ConvSpec {
            temporal_kernel: 1,
            temporal_pad: 0,
            out_channels: self.appearance_out,
            ..self.conv
        }
    }

    pub fn relation_spec(&self) -> ConvSpec {
        self.conv
    }

    /// 1x1x1 reduction over the `C_s + C'_t` concatenated channels.
    pub fn reduction_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.fused_out)
    }

    /// Output `[C_f, T', H', W']` for input `[T, H, W]`; errors when the two
    /// branches would disagree on extents.
    pub fn out_shape(&self, thw: [usize; 3]) -> Result<[usize; 4]> {
        let a = self.appearance_spec().out_extents(thw)?;
        let r = self.relation_spec().out_extents(thw)?;
        if a != r {
            return Err(shape_err!(
                "SMART branches disagree on extents: appearance {:?}, relation {:?}",
                a,
                r
            ));
        }
        Ok([self.fused_out, a[0], a[1], a[2]])
    }
}

/// 3D conv -> BN -> square -> cross-channel pooling -> BN -> ReLU.
#[derive(Clone, Debug)]
pub struct RelationBranch {
    pub conv: Conv,
    pub bn_hidden: BatchNorm,
    pub bn_codes: BatchNorm,
    pub pool_group: usize,
    pub pool_weight: f64,
}

impl RelationBranch {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        spec: ConvSpec,
        codes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.out_channels != POOL_GROUP * codes {
            return Err(contract_err!(
                "relation branch needs {} hidden units for {codes} codes, got {}",
                POOL_GROUP * codes,
                spec.out_channels
            ));
        }
        Ok(RelationBranch {
            conv: Conv::new(store, &format!("{name}.conv"), in_channels, spec, false, rng)?,
            bn_hidden: BatchNorm::new(store, &format!("{name}.bn_hidden"), spec.out_channels)?,
            bn_codes: BatchNorm::new(store, &format!("{name}.bn_codes"), codes)?,
            pool_group: POOL_GROUP,
            pool_weight: POOL_WEIGHT,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let u = self.conv.forward(s, x)?;
        let u = self.bn_hidden.forward(s, u)?;
        let u = s.graph.square(u);
        let z = s.graph.cross_channel_pool(u, self.pool_group, self.pool_weight)?;
        let z = self.bn_codes.forward(s, z)?;
        Ok(s.graph.relu(z))
    }

    pub fn out_channels(&self) -> usize {
        self.bn_codes.channels
    }
}

/// Appearance branch (per-frame conv -> BN -> ReLU) and relation branch,
/// concatenated and reduced by a 1x1x1 conv -> BN -> ReLU.
#[derive(Clone, Debug)]
pub struct SmartBlock {
    pub cfg: SmartBlockConfig,
    pub appearance: ConvBn,
    pub relation: RelationBranch,
    pub reduce: Conv,
    pub bn_out: BatchNorm,
}

impl SmartBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: SmartBlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(SmartBlock {
            cfg,
            appearance: ConvBn::new(store, &format!("{name}.appearance"), cfg.in_channels, cfg.appearance_spec(), rng)?,
            relation: RelationBranch::new(
                store,
                &format!("{name}.relation"),
                cfg.in_channels,
                cfg.relation_spec(),
                cfg.relation_codes,
                rng,
            )?,
            reduce: Conv::new(
                store,
                &format!("{name}.reduce"),
                cfg.appearance_out + cfg.relation_codes,
                cfg.reduction_spec(),
                true,
                rng,
            )?,
            bn_out: BatchNorm::new(store, &format!("{name}.bn_out"), cfg.fused_out)?,
        })
    }

    pub fn appearance_forward(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let f = self.appearance.forward(s, x)?;
        Ok(s.graph.relu(f))
    }

    pub fn forward(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let f = self.appearance_forward(s, x)?;
        let z = self.relation.forward(s, x)?;
        let (fs, zs) = (s.graph.value(f).shape(), s.graph.value(z).shape());
        if fs[0] != zs[0] || fs[2..] != zs[2..] {
            return Err(contract_err!("SMART branch outputs disagree: {:?} vs {:?}", fs, zs));
        }
        let cat = s.graph.concat_channels(f, z)?;
        let h = self.reduce.forward(s, cat)?;
        let h = self.bn_out.forward(s, h)?;
        Ok(s.graph.relu(h))
    }
}

/// A network unit occupying the slot of one convolution.
#[derive(Clone, Debug)]
pub enum Unit {
    Conv(ConvBn),
    Smart(SmartBlock),
    Relation(RelationBranch),
}

impl Unit {
    /// Raw unit output; plain convolutions stop after BN.
    pub fn forward(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        match self {
            Unit::Conv(c) => c.forward(s, x),
            Unit::Smart(b) => b.forward(s, x),
            Unit::Relation(r) => r.forward(s, x),
        }
    }

    /// Unit output followed by ReLU where the unit does not already end in one.
    pub fn forward_activated(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let y = self.forward(s, x)?;
        Ok(match self {
            Unit::Conv(_) => s.graph.relu(y),
            _ => y,
        })
    }

    pub fn is_smart(&self) -> bool {
        matches!(self, Unit::Smart(_))
    }

    pub fn is_relation(&self) -> bool {
        matches!(self, Unit::Relation(_))
    }
}

/// Which unit fills the second slot of a residual pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResidualKind {
    ConvPair,
    ConvThenSmart,
    ConvThenRelation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualBlockSpec {
    pub kind: ResidualKind,
    pub in_channels: usize,
    pub channels: usize,
    /// Stride 2x2x2 on the first conv and a projection shortcut.
    pub downsample: bool,
    /// 3 for spatiotemporal blocks, 1 for per-frame (C2D) blocks.
    pub temporal_kernel: usize,
}

impl ResidualBlockSpec {
    pub fn stride(&self) -> usize {
        if self.downsample {
            2
        } else {
            1
        }
    }

    pub fn first_spec(&self) -> ConvSpec {
        let s = self.stride();
        ConvSpec::new(3, self.temporal_kernel, s, s, self.channels)
    }

    pub fn second_spec(&self) -> ConvSpec {
        ConvSpec::new(3, self.temporal_kernel, 1, 1, self.channels)
    }

    pub fn smart_config(&self) -> SmartBlockConfig {
        SmartBlockConfig::new(self.channels, 3, self.temporal_kernel, 1, 1, self.channels)
    }

    /// Relation units keep the block width: `2c` hidden units pooled into `c` codes.
    pub fn relation_spec(&self) -> ConvSpec {
        ConvSpec::new(3, self.temporal_kernel, 1, 1, POOL_GROUP * self.channels)
    }

    pub fn needs_projection(&self) -> bool {
        self.downsample || self.in_channels != self.channels
    }

    pub fn shortcut_spec(&self) -> ConvSpec {
        let s = self.stride();
        ConvSpec::new(1, 1, s, s, self.channels)
    }
}

/// Post-activation basic block: `relu(second(relu(first(x))) + shortcut(x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub spec: ResidualBlockSpec,
    pub first: ConvBn,
    pub second: Unit,
    pub shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: ResidualBlockSpec, rng: &mut R) -> Result<Self> {
        let first = ConvBn::new(store, &format!("{name}.unit1"), spec.in_channels, spec.first_spec(), rng)?;
        let second_name = format!("{name}.unit2");
        let second = match spec.kind {
            ResidualKind::ConvPair => Unit::Conv(ConvBn::new(store, &second_name, spec.channels, spec.second_spec(), rng)?),
            ResidualKind::ConvThenSmart => Unit::Smart(SmartBlock::new(store, &second_name, spec.smart_config(), rng)?),
            ResidualKind::ConvThenRelation => Unit::Relation(RelationBranch::new(
                store,
                &second_name,
                spec.channels,
                spec.relation_spec(),
                spec.channels,
                rng,
            )?),
        };
        let shortcut = if spec.needs_projection() {
            Some(ConvBn::new(
                store,
                &format!("{name}.shortcut"),
                spec.in_channels,
                spec.shortcut_spec(),
                rng,
            )?)
        } else {
            None
        };
        Ok(ResidualBlock {
            spec,
            first,
            second,
            shortcut,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let h = self.first.forward(s, x)?;
        let h = s.graph.relu(h);
        let h = self.second.forward(s, h)?;
        let sc = match &self.shortcut {
            Some(p) => p.forward(s, x)?,
            None => x,
        };
        if s.graph.value(h).shape() != s.graph.value(sc).shape() {
            return Err(shape_err!(
                "residual path {:?} does not match shortcut {:?}",
                s.graph.value(h).shape(),
                s.graph.value(sc).shape()
            ));
        }
        let sum = s.graph.add(h, sc)?;
        Ok(s.graph.relu(sum))
    }
}
