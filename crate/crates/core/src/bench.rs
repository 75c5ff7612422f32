//! Forward/backward timing of a single unit, with throughput taken from the
//! analyzer's FLOP count.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::architectures::{unit_counts, Conventions, UnitGeometry, CALIBRATED};
use crate::autodiff::Graph;
use crate::blocks::{ConvBn, ParamStore, RelationBranch, Session, SmartBlock, SmartBlockConfig};
use crate::error::{config_err, Result};
use crate::ops::{ConvSpec, Mode};
use crate::tensor::Tensor;

pub const DEFAULT_REPEATS: usize = 20;
pub const WARMUP_RUNS: usize = 3;
/// Set to `1` to make [`ratio_gate`] enforce its band.
pub const GATE_ENV: &str = "ARTNET_BENCH_GATE";
/// Measured time ratios may differ from FLOP ratios by this factor either way.
pub const RATIO_BAND: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchBlock {
    Conv3d,
    Smart,
    Relation,
}

impl BenchBlock {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchBlock::Conv3d => "conv3d",
            BenchBlock::Smart => "smart",
            BenchBlock::Relation => "relation",
        }
    }

    /// 3x3x3 unit mapping `channels` to `channels` at unit stride.
    pub fn geometry(self, channels: usize) -> UnitGeometry {
        match self {
            BenchBlock::Conv3d => UnitGeometry::ConvBn(ConvSpec::new(3, 3, 1, 1, channels)),
            BenchBlock::Smart => UnitGeometry::Smart(SmartBlockConfig::new(channels, 3, 3, 1, 1, channels)),
            BenchBlock::Relation => UnitGeometry::Relation(ConvSpec::new(3, 3, 1, 1, 2 * channels)),
        }
    }
}

impl FromStr for BenchBlock {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv3d" => Ok(BenchBlock::Conv3d),
            "smart" => Ok(BenchBlock::Smart),
            "relation" => Ok(BenchBlock::Relation),
            _ => Err(config_err!("unknown bench block '{s}'; valid: conv3d, smart, relation")),
        }
    }
}

/// Parses `CxTxHxW`.
pub fn parse_shape(s: &str) -> Result<[usize; 4]> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse().map_err(|_| config_err!("bad shape '{s}', expected CxTxHxW")))
        .collect::<Result<_>>()?;
    let dims: [usize; 4] = dims.try_into().map_err(|_| config_err!("bad shape '{s}', expected CxTxHxW"))?;
    if dims.contains(&0) {
        return Err(config_err!("shape extents must be positive, got '{s}'"));
    }
    Ok(dims)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub block: BenchBlock,
    /// `[C, T, H, W]` of a single-sample input.
    pub shape: [usize; 4],
    pub repeats: usize,
    pub conventions: Conventions,
}

impl BenchConfig {
    pub fn new(block: BenchBlock, shape: [usize; 4], repeats: usize) -> Self {
        BenchConfig {
            block,
            shape,
            repeats,
            conventions: CALIBRATED,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub block: BenchBlock,
    pub shape: [usize; 4],
    pub repeats: usize,
    pub threads: usize,
    pub flops: u64,
    pub params: u64,
    pub forward_median_s: f64,
    pub train_median_s: f64,
    pub noisy: bool,
}

impl BenchResult {
    pub fn forward_gflops(&self) -> f64 {
        self.flops as f64 / self.forward_median_s / 1e9
    }
}

impl fmt::Display for BenchResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, t, h, w] = self.shape;
        write!(
            f,
            "block={} shape={c}x{t}x{h}x{w} repeats={} warmup={WARMUP_RUNS} threads={} params={} flops={} \
             forward_median_s={:.6} train_median_s={:.6} forward_gflops={:.3} noisy={}",
            self.block.as_str(),
            self.repeats,
            self.threads,
            self.params,
            self.flops,
            self.forward_median_s,
            self.train_median_s,
            self.forward_gflops(),
            self.noisy
        )
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

enum BuiltUnit {
    Conv(ConvBn),
    Smart(SmartBlock),
    Relation(RelationBranch),
}

pub fn run(cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.repeats == 0 {
        return Err(config_err!("repeats must be at least 1"));
    }
    let geometry = cfg.block.geometry(cfg.shape[0]);
    let (params, flops, _) = unit_counts(&geometry, cfg.shape, cfg.conventions)?;

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = cfg.shape[0];
    let unit = match geometry {
        UnitGeometry::ConvBn(spec) => BuiltUnit::Conv(ConvBn::new(&mut store, "unit", c, spec, &mut rng)?),
        UnitGeometry::Smart(sc) => BuiltUnit::Smart(SmartBlock::new(&mut store, "unit", sc, &mut rng)?),
        UnitGeometry::Relation(spec) => BuiltUnit::Relation(RelationBranch::new(&mut store, "unit", c, spec, c, &mut rng)?),
    };
    let [_, t, h, w] = cfg.shape;
    let x = Tensor::uniform(&[1, c, t, h, w], -1.0, 1.0, &mut rng)?;

    let mut once = |backward: bool| -> Result<f64> {
        let start = Instant::now();
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &mut store, Mode::Train, 0);
        let xi = s.graph.input(x.clone());
        let y = match &unit {
            BuiltUnit::Conv(u) => u.forward(&mut s, xi)?,
            BuiltUnit::Smart(u) => u.forward(&mut s, xi)?,
            BuiltUnit::Relation(u) => u.forward(&mut s, xi)?,
        };
        if backward {
            let loss = s.graph.mean(y);
            s.graph.backward(loss)?;
        }
        Ok(start.elapsed().as_secs_f64())
    };

    let mut timings = |backward: bool| -> Result<f64> {
        for _ in 0..WARMUP_RUNS {
            once(backward)?;
        }
        let runs = (0..cfg.repeats).map(|_| once(backward)).collect::<Result<Vec<_>>>()?;
        Ok(median(runs))
    };
    let forward_median_s = timings(false)?;
    let train_median_s = timings(true)?;

    Ok(BenchResult {
        block: cfg.block,
        shape: cfg.shape,
        repeats: cfg.repeats,
        threads: 1,
        flops,
        params,
        forward_median_s,
        train_median_s,
        noisy: cfg.repeats == 1,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioCheck {
    pub time_ratio: f64,
    pub flop_ratio: f64,
    pub within_band: bool,
    pub enforced: bool,
}

impl fmt::Display for RatioCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "time_ratio={:.3} flop_ratio={:.3} band={RATIO_BAND} within_band={} enforced={}",
            self.time_ratio, self.flop_ratio, self.within_band, self.enforced
        )
    }
}

/// Compares `other / baseline` forward times with the analyzer's FLOP ratio.
/// Only enforced when [`GATE_ENV`] is `1`.
pub fn ratio_gate(baseline: &BenchResult, other: &BenchResult) -> RatioCheck {
    let time_ratio = other.forward_median_s / baseline.forward_median_s;
    let flop_ratio = other.flops as f64 / baseline.flops as f64;
    let q = time_ratio / flop_ratio;
    RatioCheck {
        time_ratio,
        flop_ratio,
        within_band: (1.0 / RATIO_BAND..=RATIO_BAND).contains(&q),
        enforced: std::env::var(GATE_ENV).is_ok_and(|v| v == "1"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_block_parsing() {
        assert_eq!(parse_shape("16x4x28x28").unwrap(), [16, 4, 28, 28]);
        assert!(parse_shape("16x4x28").is_err());
        assert!(parse_shape("16x0x28x28").is_err());
        assert_eq!("smart".parse::<BenchBlock>().unwrap(), BenchBlock::Smart);
        assert!("lstm".parse::<BenchBlock>().is_err());
    }

    #[test]
    fn zero_repeats_rejected_single_flagged() {
        let shape = [2, 2, 4, 4];
        assert!(run(&BenchConfig::new(BenchBlock::Conv3d, shape, 0)).is_err());
        let r = run(&BenchConfig::new(BenchBlock::Conv3d, shape, 1)).unwrap();
        assert!(r.noisy);
        assert!(r.to_string().contains("noisy=true"));
        assert!(r.to_string().contains("threads=1"));
    }

    #[test]
    fn flops_are_deterministic_and_match_hand_count() {
        let shape = [4, 3, 5, 5];
        let a = run(&BenchConfig::new(BenchBlock::Smart, shape, 2)).unwrap();
        let b = run(&BenchConfig::new(BenchBlock::Smart, shape, 2)).unwrap();
        assert_eq!(a.flops, b.flops);
        let pos = 3 * 5 * 5;
        // appearance 3x3, relation 3x3x3 to c hidden, 1x1x1 fuse of c + c/2
        let hand = (4 * 4 * 9 + 4 * 4 * 27 + 4 * 6) * pos;
        assert_eq!(a.flops, hand as u64);
        let conv = run(&BenchConfig::new(BenchBlock::Conv3d, shape, 2)).unwrap();
        assert_eq!(conv.flops, (4 * 4 * 27 * pos) as u64);
    }

    #[test]
    fn smart_over_conv_ratio() {
        let shape = [16, 4, 14, 14];
        let conv = run(&BenchConfig::new(BenchBlock::Conv3d, shape, 3)).unwrap();
        let smart = run(&BenchConfig::new(BenchBlock::Smart, shape, 3)).unwrap();
        let check = ratio_gate(&conv, &smart);
        assert!((check.flop_ratio - 37.5 / 27.0).abs() < 1e-12);
        if check.enforced {
            assert!(check.within_band, "{check}");
        }
    }
}
