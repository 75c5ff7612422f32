//! ResNet-18 family builders, symbolic shape inference and the
//! parameter/FLOP analyzer.
//!
//! An [`ArchSpec`] is a declarative stage table. [`Model::new`] allocates
//! parameters for it; [`infer_shapes`] and [`analyze`] work on the spec alone,
//! so full-size networks can be traced and counted without allocating them.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::blocks::{
    ConvBn, ParamId, ParamStore, RelationBranch, ResidualBlock, ResidualBlockSpec, ResidualKind, Session, SmartBlock, SmartBlockConfig,
    Unit, POOL_GROUP,
};
use crate::error::{config_err, shape_err, Result};
use crate::ops::{ConvSpec, Mode};
use crate::tensor::Tensor;

/// What fills a convolution slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitKind {
    Conv,
    Smart,
    Relation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kind: UnitKind,
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
    pub spatial_stride: usize,
    pub temporal_stride: usize,
    pub channels: usize,
}

impl StemSpec {
    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec::new(
            self.spatial_kernel,
            self.temporal_kernel,
            self.spatial_stride,
            self.temporal_stride,
            self.channels,
        )
    }

    pub fn smart_config(&self, in_channels: usize) -> SmartBlockConfig {
        SmartBlockConfig::new(
            in_channels,
            self.spatial_kernel,
            self.temporal_kernel,
            self.spatial_stride,
            self.temporal_stride,
            self.channels,
        )
    }

    /// Relation stems keep the stem width with `2c` hidden units.
    pub fn relation_spec(&self) -> ConvSpec {
        ConvSpec {
            out_channels: POOL_GROUP * self.channels,
            ..self.conv_spec()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub channels: usize,
    pub repeats: usize,
    /// Stride 2x2x2 in the first block of the stage.
    pub downsample: bool,
    pub kind: ResidualKind,
    pub temporal_kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub dropout: f64,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input_channels: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
}

/// The six ResNet-18 variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchName {
    C2dR18,
    C3dR18,
    RelationR18S,
    RelationR18D,
    ArtnetR18S,
    ArtnetR18D,
}

impl ArchName {
    pub const ALL: [ArchName; 6] = [
        ArchName::C2dR18,
        ArchName::C3dR18,
        ArchName::RelationR18S,
        ArchName::RelationR18D,
        ArchName::ArtnetR18S,
        ArchName::ArtnetR18D,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchName::C2dR18 => "c2d_r18",
            ArchName::C3dR18 => "c3d_r18",
            ArchName::RelationR18S => "relation_r18_s",
            ArchName::RelationR18D => "relation_r18_d",
            ArchName::ArtnetR18S => "artnet_r18_s",
            ArchName::ArtnetR18D => "artnet_r18_d",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|a| a.as_str()).join(", ")
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchName {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| config_err!("unknown architecture '{s}'; valid names: {}", Self::valid_names()))
    }
}

pub const DEFAULT_DROPOUT: f64 = 0.2;

impl ArchSpec {
    /// ResNet-18 column for `name` with a `classes`-way head over RGB input.
    pub fn named(name: ArchName, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(config_err!("need at least 2 classes, got {classes}"));
        }
        let (stem_kind, deep, t) = match name {
            ArchName::C2dR18 => (UnitKind::Conv, None, 1),
            ArchName::C3dR18 => (UnitKind::Conv, None, 3),
            ArchName::RelationR18S => (UnitKind::Relation, None, 3),
            ArchName::RelationR18D => (UnitKind::Relation, Some(ResidualKind::ConvThenRelation), 3),
            ArchName::ArtnetR18S => (UnitKind::Smart, None, 3),
            ArchName::ArtnetR18D => (UnitKind::Smart, Some(ResidualKind::ConvThenSmart), 3),
        };
        let stages = [
            ("conv2_x", 64, false),
            ("conv3_x", 128, true),
            ("conv4_x", 256, true),
            ("conv5_x", 512, true),
        ]
        .into_iter()
        .map(|(stage, channels, downsample)| StageSpec {
            name: stage.to_string(),
            channels,
            repeats: 2,
            downsample,
            // conv5_x stays plain in every column
            kind: match deep {
                Some(k) if stage != "conv5_x" => k,
                _ => ResidualKind::ConvPair,
            },
            temporal_kernel: t,
        })
        .collect();
        Ok(ArchSpec {
            name: name.as_str().to_string(),
            input_channels: 3,
            stem: StemSpec {
                kind: stem_kind,
                spatial_kernel: 7,
                temporal_kernel: t,
                spatial_stride: 2,
                temporal_stride: 2,
                channels: 64,
            },
            stages,
            head: HeadSpec {
                dropout: DEFAULT_DROPOUT,
                classes,
            },
        })
    }

    /// A one-stage network for desk-scale experiments: a `3x3xt` stem with
    /// spatial stride 2, then one residual block of width `channels`.
    pub fn tiny(variant: TinyVariant, channels: usize, input_channels: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(config_err!("need at least 2 classes, got {classes}"));
        }
        if channels < 2 || channels % 2 != 0 {
            return Err(config_err!("tiny networks need an even channel count >= 2, got {channels}"));
        }
        let (stem_kind, kind, t) = match variant {
            TinyVariant::Artnet => (UnitKind::Smart, ResidualKind::ConvThenSmart, 3),
            TinyVariant::Relation => (UnitKind::Relation, ResidualKind::ConvThenRelation, 3),
            TinyVariant::C3d => (UnitKind::Conv, ResidualKind::ConvPair, 3),
            TinyVariant::C2d => (UnitKind::Conv, ResidualKind::ConvPair, 1),
        };
        Ok(ArchSpec {
            name: variant.as_str().to_string(),
            input_channels,
            stem: StemSpec {
                kind: stem_kind,
                spatial_kernel: 3,
                temporal_kernel: t,
                spatial_stride: 2,
                temporal_stride: 1,
                channels,
            },
            stages: vec![StageSpec {
                name: "conv2_x".into(),
                channels,
                repeats: 1,
                downsample: false,
                kind,
                temporal_kernel: t,
            }],
            head: HeadSpec {
                dropout: DEFAULT_DROPOUT,
                classes,
            },
        })
    }

    /// Resolves a CLI architecture name: one of the ResNet-18 columns or a `tiny_*` variant.
    pub fn from_name(name: &str, classes: usize, tiny_channels: usize, input_channels: usize) -> Result<Self> {
        if let Ok(v) = name.parse::<TinyVariant>() {
            return Self::tiny(v, tiny_channels, input_channels, classes);
        }
        let mut spec = Self::named(name.parse()?, classes)?;
        spec.input_channels = input_channels;
        Ok(spec)
    }

    /// Residual block specs in order, with their stage name.
    pub fn block_specs(&self) -> Vec<(String, ResidualBlockSpec)> {
        let mut out = Vec::new();
        let mut in_channels = self.stem.channels;
        for stage in &self.stages {
            for r in 0..stage.repeats {
                out.push((
                    format!("{}_{}", stage.name.trim_end_matches("_x"), r + 1),
                    ResidualBlockSpec {
                        kind: stage.kind,
                        in_channels,
                        channels: stage.channels,
                        downsample: stage.downsample && r == 0,
                        temporal_kernel: stage.temporal_kernel,
                    },
                ));
                in_channels = stage.channels;
            }
        }
        out
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(self.stem.channels, |s| s.channels)
    }

    /// Number of SMART units, counting the stem.
    pub fn smart_count(&self) -> usize {
        self.unit_count(UnitKind::Smart, ResidualKind::ConvThenSmart)
    }

    pub fn relation_count(&self) -> usize {
        self.unit_count(UnitKind::Relation, ResidualKind::ConvThenRelation)
    }

    fn unit_count(&self, stem: UnitKind, block: ResidualKind) -> usize {
        usize::from(self.stem.kind == stem) + self.stages.iter().filter(|s| s.kind == block).map(|s| s.repeats).sum::<usize>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TinyVariant {
    Artnet,
    Relation,
    C3d,
    C2d,
}

impl TinyVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            TinyVariant::Artnet => "tiny_artnet",
            TinyVariant::Relation => "tiny_relation",
            TinyVariant::C3d => "tiny_c3d",
            TinyVariant::C2d => "tiny_c2d",
        }
    }
}

impl FromStr for TinyVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        [TinyVariant::Artnet, TinyVariant::Relation, TinyVariant::C3d, TinyVariant::C2d]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| config_err!("unknown tiny variant '{s}'"))
    }
}

/// Layer graph of an instantiated network; parameters live in a separate store.
#[derive(Clone, Debug)]
pub struct Network {
    pub stem: Unit,
    pub blocks: Vec<(String, ResidualBlock)>,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
    pub dropout: f64,
}

impl Network {
    pub fn build(spec: &ArchSpec, store: &mut ParamStore, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cin = spec.input_channels;
        let stem = match spec.stem.kind {
            UnitKind::Conv => Unit::Conv(ConvBn::new(store, "conv1", cin, spec.stem.conv_spec(), &mut rng)?),
            UnitKind::Smart => Unit::Smart(SmartBlock::new(store, "conv1", spec.stem.smart_config(cin), &mut rng)?),
            UnitKind::Relation => Unit::Relation(RelationBranch::new(
                store,
                "conv1",
                cin,
                spec.stem.relation_spec(),
                spec.stem.channels,
                &mut rng,
            )?),
        };
        let blocks = spec
            .block_specs()
            .into_iter()
            .map(|(name, b)| Ok((name.clone(), ResidualBlock::new(store, &name, b, &mut rng)?)))
            .collect::<Result<Vec<_>>>()?;
        let feat = spec.feature_channels();
        let k = spec.head.classes;
        let fc_weight = store.add("fc.weight", crate::blocks::he_normal(&[k, feat], feat, &mut rng)?);
        let fc_bias = store.add("fc.bias", Tensor::zeros(&[k])?);
        Ok(Network {
            stem,
            blocks,
            fc_weight,
            fc_bias,
            dropout: spec.head.dropout,
        })
    }

    /// Logits `[N, classes]` for an input `[N, C, T, H, W]`.
    pub fn forward(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let mut h = self.stem.forward_activated(s, x)?;
        for (_, block) in &self.blocks {
            h = block.forward(s, h)?;
        }
        let pooled = s.graph.global_avg_pool(h)?;
        let dropped = s.dropout(pooled, self.dropout)?;
        let w = s.param(self.fc_weight);
        let b = s.param(self.fc_bias);
        s.graph.linear(dropped, w, b)
    }

    pub fn smart_count(&self) -> usize {
        usize::from(self.stem.is_smart()) + self.blocks.iter().filter(|(_, b)| b.second.is_smart()).count()
    }

    pub fn relation_count(&self) -> usize {
        usize::from(self.stem.is_relation()) + self.blocks.iter().filter(|(_, b)| b.second.is_relation()).count()
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ArchSpec,
    pub net: Network,
    pub store: ParamStore,
}

impl Model {
    pub fn new(spec: ArchSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::build(&spec, &mut store, seed)?;
        Ok(Model { spec, net, store })
    }

    pub fn classes(&self) -> usize {
        self.spec.head.classes
    }

    /// Forward pass without gradient bookkeeping of interest; returns logits.
    pub fn logits(&mut self, x: &Tensor, mode: Mode, seed: u64) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &mut self.store, mode, seed);
        let xi = s.graph.input(x.clone());
        let y = self.net.forward(&mut s, xi)?;
        Ok(s.graph.value(y).clone())
    }
}

// ---------------------------------------------------------------------------
// Shape inference and counting

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub layer: String,
    /// `[C, T, H, W]` per sample.
    pub shape: [usize; 4],
}

impl LayerShape {
    /// `H x W x T`, matching the output-size column convention.
    pub fn spatial_label(&self) -> String {
        format!("{} x {} x {}", self.shape[2], self.shape[3], self.shape[1])
    }
}

#[derive(Clone, Debug, PartialEq)]
enum PrimKind {
    Conv {
        spec: ConvSpec,
        in_channels: usize,
        built_with_bias: bool,
    },
    Bn {
        channels: usize,
    },
    Fc {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Primitive {
    name: String,
    kind: PrimKind,
    out: [usize; 4],
}

struct Tracer {
    prims: Vec<Primitive>,
}

impl Tracer {
    fn conv(&mut self, name: &str, input: [usize; 4], spec: ConvSpec, bias: bool) -> Result<[usize; 4]> {
        let [c, t, h, w] = input;
        let [ot, oh, ow] = spec.out_extents([t, h, w])?;
        let out = [spec.out_channels, ot, oh, ow];
        self.prims.push(Primitive {
            name: format!("{name}.conv"),
            kind: PrimKind::Conv {
                spec,
                in_channels: c,
                built_with_bias: bias,
            },
            out,
        });
        Ok(out)
    }

    fn bn(&mut self, name: &str, shape: [usize; 4]) {
        self.prims.push(Primitive {
            name: format!("{name}.bn"),
            kind: PrimKind::Bn { channels: shape[0] },
            out: shape,
        });
    }

    fn conv_bn(&mut self, name: &str, input: [usize; 4], spec: ConvSpec) -> Result<[usize; 4]> {
        let out = self.conv(name, input, spec, false)?;
        self.bn(name, out);
        Ok(out)
    }

    fn relation(&mut self, name: &str, input: [usize; 4], spec: ConvSpec) -> Result<[usize; 4]> {
        let hidden = self.conv(name, input, spec, false)?;
        self.bn(&format!("{name}.hidden"), hidden);
        let codes = [hidden[0] / POOL_GROUP, hidden[1], hidden[2], hidden[3]];
        self.bn(&format!("{name}.codes"), codes);
        Ok(codes)
    }

    fn smart(&mut self, name: &str, input: [usize; 4], cfg: SmartBlockConfig) -> Result<[usize; 4]> {
        cfg.validate()?;
        let out = cfg.out_shape([input[1], input[2], input[3]])?;
        let f = self.conv_bn(&format!("{name}.appearance"), input, cfg.appearance_spec())?;
        let z = self.relation(&format!("{name}.relation"), input, cfg.relation_spec())?;
        let cat = [f[0] + z[0], f[1], f[2], f[3]];
        let h = self.conv(&format!("{name}.reduce"), cat, cfg.reduction_spec(), true)?;
        self.bn(&format!("{name}.out"), h);
        debug_assert_eq!(h, out);
        Ok(h)
    }

    fn block(&mut self, name: &str, input: [usize; 4], b: &ResidualBlockSpec) -> Result<[usize; 4]> {
        let h = self.conv_bn(&format!("{name}.unit1"), input, b.first_spec())?;
        let second = format!("{name}.unit2");
        let h = match b.kind {
            ResidualKind::ConvPair => self.conv_bn(&second, h, b.second_spec())?,
            ResidualKind::ConvThenSmart => self.smart(&second, h, b.smart_config())?,
            ResidualKind::ConvThenRelation => self.relation(&second, h, b.relation_spec())?,
        };
        let sc = if b.needs_projection() {
            self.conv_bn(&format!("{name}.shortcut"), input, b.shortcut_spec())?
        } else {
            input
        };
        if h != sc {
            return Err(shape_err!("{name}: residual path {:?} does not match shortcut {:?}", h, sc));
        }
        Ok(h)
    }
}

fn trace(spec: &ArchSpec, input_thw: [usize; 3]) -> Result<(Vec<LayerShape>, Vec<Primitive>)> {
    let [t, h, w] = input_thw;
    if t == 0 || h == 0 || w == 0 {
        return Err(shape_err!("input extents must be >= 1, got {:?}", input_thw));
    }
    let mut tr = Tracer { prims: Vec::new() };
    let mut shapes = Vec::new();
    let input = [spec.input_channels, t, h, w];
    let mut x = match spec.stem.kind {
        UnitKind::Conv => tr.conv_bn("conv1", input, spec.stem.conv_spec())?,
        UnitKind::Smart => tr.smart("conv1", input, spec.stem.smart_config(spec.input_channels))?,
        UnitKind::Relation => tr.relation("conv1", input, spec.stem.relation_spec())?,
    };
    shapes.push(LayerShape {
        layer: "conv1".into(),
        shape: x,
    });
    let blocks = spec.block_specs();
    for stage in &spec.stages {
        let prefix = stage.name.trim_end_matches("_x");
        for (name, b) in blocks.iter().filter(|(n, _)| n.rsplit_once('_').map(|p| p.0) == Some(prefix)) {
            x = tr.block(name, x, b)?;
        }
        shapes.push(LayerShape {
            layer: stage.name.clone(),
            shape: x,
        });
    }
    shapes.push(LayerShape {
        layer: "pool".into(),
        shape: [x[0], 1, 1, 1],
    });
    let k = spec.head.classes;
    tr.prims.push(Primitive {
        name: "fc".into(),
        kind: PrimKind::Fc { inputs: x[0], outputs: k },
        out: [k, 1, 1, 1],
    });
    shapes.push(LayerShape {
        layer: "fc".into(),
        shape: [k, 1, 1, 1],
    });
    Ok((shapes, tr.prims))
}

/// Per-stage output shapes for an input `[T, H, W]`: conv1, each stage, pool, fc.
pub fn infer_shapes(spec: &ArchSpec, input_thw: [usize; 3]) -> Result<Vec<LayerShape>> {
    Ok(trace(spec, input_thw)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlopConvention {
    /// One multiply-accumulate counts as one operation.
    MacsAsOne,
    /// Multiplies and adds counted separately.
    MultsAndAdds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BiasConvention {
    /// Every convolution carries a bias.
    WithBias,
    /// Convolutions followed by BN carry none.
    NoBiasBeforeBn,
    /// Biases exactly where the runtime network has them.
    AsBuilt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Conventions {
    pub flops: FlopConvention,
    pub bias: BiasConvention,
    pub count_bn: bool,
}

/// The convention that best matches the reference table (see [`calibrate`]).
pub const CALIBRATED: Conventions = Conventions {
    flops: FlopConvention::MacsAsOne,
    bias: BiasConvention::NoBiasBeforeBn,
    count_bn: true,
};

impl fmt::Display for Conventions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flops = match self.flops {
            FlopConvention::MacsAsOne => "macs",
            FlopConvention::MultsAndAdds => "mults-adds",
        };
        let bias = match self.bias {
            BiasConvention::WithBias => "bias",
            BiasConvention::NoBiasBeforeBn => "no-bias",
            BiasConvention::AsBuilt => "as-built",
        };
        let bn = if self.count_bn { "bn" } else { "no-bn" };
        write!(f, "{flops},{bias},{bn}")
    }
}

impl FromStr for Conventions {
    type Err = crate::Error;

    /// `calibrated` or a comma list such as `macs,no-bias,bn`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "calibrated" {
            return Ok(CALIBRATED);
        }
        let mut c = CALIBRATED;
        for part in s.split(',').map(str::trim) {
            match part {
                "macs" => c.flops = FlopConvention::MacsAsOne,
                "mults-adds" => c.flops = FlopConvention::MultsAndAdds,
                "bias" => c.bias = BiasConvention::WithBias,
                "no-bias" => c.bias = BiasConvention::NoBiasBeforeBn,
                "as-built" => c.bias = BiasConvention::AsBuilt,
                "bn" => c.count_bn = true,
                "no-bn" => c.count_bn = false,
                other => return Err(config_err!("unknown counting convention '{other}'")),
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    pub output_shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelStats {
    pub arch: String,
    pub input_thw: [usize; 3],
    pub params_millions: f64,
    pub flops_giga: f64,
    pub per_layer: Vec<LayerStats>,
    pub shapes: Vec<LayerShape>,
    pub conventions: Conventions,
}

impl ModelStats {
    pub fn total_params(&self) -> u64 {
        self.per_layer.iter().map(|l| l.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.per_layer.iter().map(|l| l.flops).sum()
    }
}

/// Parameter and FLOP counts for one convolution (per sample).
pub fn conv_counts(spec: &ConvSpec, in_channels: usize, out_positions: usize, bias: bool, flops: FlopConvention) -> (u64, u64) {
    let weights = (spec.out_channels * in_channels * spec.kernel_volume()) as u64;
    let params = weights + if bias { spec.out_channels as u64 } else { 0 };
    let macs = weights * out_positions as u64;
    let ops = match flops {
        FlopConvention::MacsAsOne => macs,
        FlopConvention::MultsAndAdds => 2 * macs,
    };
    (params, ops)
}

fn primitive_stats(p: &Primitive, conventions: Conventions) -> LayerStats {
    let (params, flops) = match &p.kind {
        PrimKind::Conv {
            spec,
            in_channels,
            built_with_bias,
        } => {
            let bias = match conventions.bias {
                BiasConvention::WithBias => true,
                BiasConvention::NoBiasBeforeBn => false,
                BiasConvention::AsBuilt => *built_with_bias,
            };
            conv_counts(spec, *in_channels, p.out[1] * p.out[2] * p.out[3], bias, conventions.flops)
        }
        PrimKind::Bn { channels } => (if conventions.count_bn { 2 * *channels as u64 } else { 0 }, 0),
        PrimKind::Fc { inputs, outputs } => {
            let macs = (inputs * outputs) as u64;
            let flops = match conventions.flops {
                FlopConvention::MacsAsOne => macs,
                FlopConvention::MultsAndAdds => 2 * macs,
            };
            (macs + *outputs as u64, flops)
        }
    };
    LayerStats {
        name: p.name.clone(),
        params,
        flops,
        output_shape: p.out,
    }
}

/// Geometry of a single network unit, for counting it in isolation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnitGeometry {
    ConvBn(ConvSpec),
    Smart(SmartBlockConfig),
    /// Relation branch whose conv has `2c` outputs pooled to `c` codes.
    Relation(ConvSpec),
}

/// `(params, flops, output [C, T, H, W])` of one unit on a `[C, T, H, W]` input.
pub fn unit_counts(unit: &UnitGeometry, input: [usize; 4], conventions: Conventions) -> Result<(u64, u64, [usize; 4])> {
    let mut tr = Tracer { prims: Vec::new() };
    let out = match unit {
        UnitGeometry::ConvBn(spec) => tr.conv_bn("unit", input, *spec)?,
        UnitGeometry::Smart(cfg) => tr.smart("unit", input, *cfg)?,
        UnitGeometry::Relation(spec) => tr.relation("unit", input, *spec)?,
    };
    let stats: Vec<LayerStats> = tr.prims.iter().map(|p| primitive_stats(p, conventions)).collect();
    Ok((stats.iter().map(|l| l.params).sum(), stats.iter().map(|l| l.flops).sum(), out))
}

pub fn analyze(spec: &ArchSpec, input_thw: [usize; 3], conventions: Conventions) -> Result<ModelStats> {
    let (shapes, prims) = trace(spec, input_thw)?;
    let per_layer: Vec<LayerStats> = prims.iter().map(|p| primitive_stats(p, conventions)).collect();
    let params: u64 = per_layer.iter().map(|l| l.params).sum();
    let flops: u64 = per_layer.iter().map(|l| l.flops).sum();
    Ok(ModelStats {
        arch: spec.name.clone(),
        input_thw,
        params_millions: params as f64 / 1e6,
        flops_giga: flops as f64 / 1e9,
        per_layer,
        shapes,
        conventions,
    })
}

/// Reference input `[T, H, W]` for the published counts.
pub const REFERENCE_INPUT: [usize; 3] = [16, 112, 112];
pub const REFERENCE_CLASSES: usize = 400;

/// Published `(params M, FLOPs G)` for the three counted columns.
pub const TABLE1_REFERENCE: [(ArchName, f64, f64); 3] = [
    (ArchName::C3dR18, 33.37, 19.58),
    (ArchName::ArtnetR18S, 33.39, 19.97),
    (ArchName::ArtnetR18D, 35.20, 23.70),
];

pub fn reference_for(name: &str) -> Option<(f64, f64)> {
    TABLE1_REFERENCE
        .iter()
        .find(|(a, _, _)| a.as_str() == name)
        .map(|&(_, p, f)| (p, f))
}

/// Relative deviations `(params, flops)` from the published values at the reference input.
pub fn reference_deviation(stats: &ModelStats) -> Option<(f64, f64)> {
    if stats.input_thw != REFERENCE_INPUT || stats.per_layer.last().map(|l| l.output_shape[0]) != Some(REFERENCE_CLASSES) {
        return None;
    }
    let (p, f) = reference_for(&stats.arch)?;
    Some((stats.params_millions / p - 1.0, stats.flops_giga / f - 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationRow {
    pub conventions: Conventions,
    /// Largest absolute relative deviation over all six published numbers.
    pub max_deviation: f64,
}

/// Sweeps flop x bias x BN conventions and returns rows sorted best first.
pub fn calibrate() -> Result<Vec<CalibrationRow>> {
    let mut rows = Vec::new();
    for flops in [FlopConvention::MacsAsOne, FlopConvention::MultsAndAdds] {
        for bias in [BiasConvention::WithBias, BiasConvention::NoBiasBeforeBn] {
            for count_bn in [true, false] {
                let conventions = Conventions { flops, bias, count_bn };
                let mut worst: f64 = 0.0;
                for (name, _, _) in TABLE1_REFERENCE {
                    let spec = ArchSpec::named(name, REFERENCE_CLASSES)?;
                    let stats = analyze(&spec, REFERENCE_INPUT, conventions)?;
                    let (dp, df) = reference_deviation(&stats).expect("reference input");
                    worst = worst.max(dp.abs()).max(df.abs());
                }
                rows.push(CalibrationRow {
                    conventions,
                    max_deviation: worst,
                });
            }
        }
    }
    rows.sort_by(|a, b| a.max_deviation.total_cmp(&b.max_deviation));
    Ok(rows)
}

/// Plain-text report: shape trace, totals, and deviation from the published
/// values when analyzed at the reference input.
pub fn text_report(stats: &ModelStats) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "architecture: {}", stats.arch);
    let [t, h, w] = stats.input_thw;
    let _ = writeln!(s, "input: {h} x {w} x {t}");
    let _ = writeln!(s, "convention: {}", stats.conventions);
    for l in &stats.shapes {
        let _ = writeln!(s, "  {:<8} {:>4} ch  {}", l.layer, l.shape[0], l.spatial_label());
    }
    let trail: Vec<String> = stats.shapes.iter().filter(|l| l.layer != "fc").map(|l| l.spatial_label()).collect();
    let _ = writeln!(s, "trace: {}", trail.join(" -> "));
    let _ = writeln!(s, "params: {:.2} M", stats.params_millions);
    let _ = writeln!(s, "flops: {:.2} G", stats.flops_giga);
    if let (Some((dp, df)), Some((rp, rf))) = (reference_deviation(stats), reference_for(&stats.arch)) {
        let _ = writeln!(
            s,
            "reference: {rp:.2} M / {rf:.2} G  (deviation {:+.2}% / {:+.2}%)",
            dp * 100.0,
            df * 100.0
        );
    }
    s
}

/// Line-delimited `key=value` report, one record per layer followed by totals.
pub fn kv_report(stats: &ModelStats) -> String {
    let mut s = String::new();
    for l in &stats.per_layer {
        let [c, t, h, w] = l.output_shape;
        let _ = writeln!(s, "layer={} params={} flops={} shape={c}x{t}x{h}x{w}", l.name, l.params, l.flops);
    }
    let _ = writeln!(
        s,
        "arch={} convention={} params_m={:.4} flops_g={:.4}",
        stats.arch, stats.conventions, stats.params_millions, stats.flops_giga
    );
    if let Some((dp, df)) = reference_deviation(stats) {
        let _ = writeln!(s, "params_dev={dp:.6} flops_dev={df:.6}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_parse_and_errors() {
        for a in ArchName::ALL {
            assert_eq!(a.as_str().parse::<ArchName>().unwrap(), a);
        }
        let err = "resnet50".parse::<ArchName>().unwrap_err().to_string();
        assert!(err.contains("artnet_r18_d") && err.contains("c2d_r18"));
        assert!(ArchSpec::named(ArchName::C3dR18, 1).is_err());
    }

    #[test]
    fn structure_counts() {
        let d = ArchSpec::named(ArchName::ArtnetR18D, 400).unwrap();
        assert_eq!(d.smart_count(), 7);
        assert_eq!(d.relation_count(), 0);
        assert_eq!(d.stages[3].kind, ResidualKind::ConvPair);
        assert_eq!(ArchSpec::named(ArchName::ArtnetR18S, 400).unwrap().smart_count(), 1);
        assert_eq!(ArchSpec::named(ArchName::RelationR18D, 400).unwrap().relation_count(), 7);
        assert_eq!(ArchSpec::named(ArchName::RelationR18S, 400).unwrap().relation_count(), 1);
        let c3d = ArchSpec::named(ArchName::C3dR18, 400).unwrap();
        assert_eq!(c3d.smart_count() + c3d.relation_count(), 0);
        assert_eq!(c3d.stem.conv_spec(), ConvSpec::new(7, 3, 2, 2, 64));
        assert_eq!((c3d.stem.conv_spec().temporal_pad, c3d.stem.conv_spec().spatial_pad), (1, 3));
        let c2d = ArchSpec::named(ArchName::C2dR18, 400).unwrap();
        assert!(c2d.stem.temporal_kernel == 1 && c2d.stages.iter().all(|s| s.temporal_kernel == 1));
    }

    #[test]
    fn head_is_classes_wide() {
        let spec = ArchSpec::named(ArchName::ArtnetR18D, 400).unwrap();
        let shapes = infer_shapes(&spec, REFERENCE_INPUT).unwrap();
        assert_eq!(shapes.last().unwrap().shape, [400, 1, 1, 1]);
        assert_eq!(spec.head.dropout, 0.2);
    }

    #[test]
    fn shape_trace_matches_table() {
        let expected = [[8, 56, 56], [8, 56, 56], [4, 28, 28], [2, 14, 14], [1, 7, 7], [1, 1, 1]];
        for a in ArchName::ALL {
            let shapes = infer_shapes(&ArchSpec::named(a, 400).unwrap(), REFERENCE_INPUT).unwrap();
            let got: Vec<[usize; 3]> = shapes[..6].iter().map(|l| [l.shape[1], l.shape[2], l.shape[3]]).collect();
            assert_eq!(got, expected, "{a}");
        }
    }

    #[test]
    fn halved_input_halves_extents() {
        let spec = ArchSpec::named(ArchName::C3dR18, 400).unwrap();
        let shapes = infer_shapes(&spec, [8, 56, 56]).unwrap();
        let got: Vec<[usize; 3]> = shapes[..5].iter().map(|l| [l.shape[1], l.shape[2], l.shape[3]]).collect();
        // layerwise extent formula: ceil halving at each stride-2 layer
        assert_eq!(got, vec![[4, 28, 28], [4, 28, 28], [2, 14, 14], [1, 7, 7], [1, 4, 4]]);
    }

    #[test]
    fn c2d_and_c3d_traces_agree() {
        for input in [[16, 112, 112], [8, 56, 56], [12, 40, 40]] {
            let a = infer_shapes(&ArchSpec::named(ArchName::C2dR18, 10).unwrap(), input).unwrap();
            let b = infer_shapes(&ArchSpec::named(ArchName::C3dR18, 10).unwrap(), input).unwrap();
            assert_eq!(a, b);
        }
    }

    /// Closed-form counts for the stem and one block of each kind, written out by hand.
    #[test]
    fn per_layer_hand_counts() {
        let c = CALIBRATED;
        let c3d = analyze(&ArchSpec::named(ArchName::C3dR18, 400).unwrap(), REFERENCE_INPUT, c).unwrap();
        let find = |s: &ModelStats, n: &str| s.per_layer.iter().find(|l| l.name == n).unwrap().clone();
        let stem = find(&c3d, "conv1.conv");
        assert_eq!(stem.params, 7 * 7 * 3 * 3 * 64);
        assert_eq!(stem.flops, 7 * 7 * 3 * 3 * 64 * (56 * 56 * 8));
        assert_eq!(find(&c3d, "conv1.bn").params, 128);
        assert_eq!(find(&c3d, "conv3_1.unit1.conv").params, 3 * 3 * 3 * 64 * 128);
        assert_eq!(find(&c3d, "conv3_1.shortcut.conv").params, 64 * 128);

        let art = analyze(&ArchSpec::named(ArchName::ArtnetR18D, 400).unwrap(), REFERENCE_INPUT, c).unwrap();
        assert_eq!(find(&art, "conv1.appearance.conv").params, 7 * 7 * 3 * 64);
        assert_eq!(find(&art, "conv1.relation.conv").params, 7 * 7 * 3 * 3 * 64);
        assert_eq!(find(&art, "conv1.reduce.conv").params, (64 + 32) * 64);
        assert_eq!(find(&art, "conv1.relation.codes.bn").params, 2 * 32);
        assert_eq!(find(&art, "conv2_1.unit2.appearance.conv").params, 3 * 3 * 64 * 64);
        assert_eq!(find(&art, "conv2_1.unit2.reduce.conv").flops, 96 * 64 * (56 * 56 * 8));
        let fc = find(&art, "fc");
        assert_eq!((fc.params, fc.flops), (512 * 400 + 400, 512 * 400));

        let rel = analyze(&ArchSpec::named(ArchName::RelationR18D, 400).unwrap(), REFERENCE_INPUT, c).unwrap();
        assert_eq!(find(&rel, "conv2_1.unit2.conv").params, 3 * 3 * 3 * 64 * 128);

        for s in [&c3d, &art, &rel] {
            assert_eq!(s.total_params() as f64 / 1e6, s.params_millions);
        }
    }

    #[test]
    fn analyzer_matches_allocated_model() {
        for v in [TinyVariant::Artnet, TinyVariant::Relation, TinyVariant::C3d, TinyVariant::C2d] {
            let spec = ArchSpec::tiny(v, 8, 1, 4).unwrap();
            let model = Model::new(spec.clone(), 1).unwrap();
            let as_built = Conventions {
                bias: BiasConvention::AsBuilt,
                ..CALIBRATED
            };
            let stats = analyze(&spec, [8, 16, 16], as_built).unwrap();
            assert_eq!(stats.total_params(), model.store.num_scalars() as u64, "{v:?}");
        }
        // a mid-sized named network, allocated
        let spec = ArchSpec::named(ArchName::ArtnetR18D, 5).unwrap();
        let model = Model::new(spec.clone(), 2).unwrap();
        let stats = analyze(
            &spec,
            REFERENCE_INPUT,
            Conventions {
                bias: BiasConvention::AsBuilt,
                ..CALIBRATED
            },
        )
        .unwrap();
        assert_eq!(stats.total_params(), model.store.num_scalars() as u64);
        assert_eq!(model.net.smart_count(), 7);
    }

    #[test]
    fn parameter_ordering() {
        let p = |a| {
            analyze(&ArchSpec::named(a, 400).unwrap(), REFERENCE_INPUT, CALIBRATED)
                .unwrap()
                .params_millions
        };
        assert!(p(ArchName::ArtnetR18D) > p(ArchName::ArtnetR18S));
        assert!(p(ArchName::ArtnetR18S) > p(ArchName::C3dR18));
    }

    #[test]
    fn convention_strings() {
        assert_eq!("calibrated".parse::<Conventions>().unwrap(), CALIBRATED);
        let c: Conventions = "mults-adds,bias,no-bn".parse().unwrap();
        assert_eq!(c.to_string(), "mults-adds,bias,no-bn");
        assert!("flops".parse::<Conventions>().is_err());
    }

    #[test]
    fn report_mentions_reference_only_at_reference_input() {
        let spec = ArchSpec::named(ArchName::C3dR18, 400).unwrap();
        let full = text_report(&analyze(&spec, REFERENCE_INPUT, CALIBRATED).unwrap());
        assert!(full.contains("33.37 M / 19.58 G"));
        let small = text_report(&analyze(&spec, [8, 56, 56], CALIBRATED).unwrap());
        assert!(!small.contains("reference"));
        let d = text_report(&analyze(&ArchSpec::named(ArchName::ArtnetR18D, 400).unwrap(), REFERENCE_INPUT, CALIBRATED).unwrap());
        assert!(d.contains("7 x 7 x 1 -> 1 x 1 x 1"));
    }
}
