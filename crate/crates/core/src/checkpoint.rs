//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ARTC" | version u32
//! arch spec   : u32 length + JSON
//! conventions : u32 length + text
//! iteration u64 | lr f64
//! params      : u32 count, then name, u32 rank, u32 dims, f32 data
//! stats       : u32 count, then name, u32 channels, f32 mean, f32 var
//! velocities  : u8 flag, then one f32 payload per param when set
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::architectures::{ArchSpec, Conventions, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::{PlateauSchedule, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ARTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StatsRecord {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ArchSpec,
    pub conventions: Conventions,
    pub iteration: u64,
    pub lr: f64,
    pub params: Vec<(String, Tensor)>,
    pub stats: Vec<StatsRecord>,
    pub velocities: Option<Vec<Tensor>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, conventions: Conventions, state: Option<&TrainState>) -> Self {
        Checkpoint {
            spec: model.spec.clone(),
            conventions,
            iteration: state.map_or(0, |s| s.iteration as u64),
            lr: state.map_or(0.0, |s| s.schedule.lr),
            params: model.store.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            stats: model
                .store
                .all_stats()
                .iter()
                .map(|s| StatsRecord {
                    name: s.name.clone(),
                    mean: s.mean.clone(),
                    var: s.var.clone(),
                })
                .collect(),
            velocities: state.map(|s| s.velocities.clone()),
        }
    }

    /// Rebuilds the model, checking every record against the architecture.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.spec.clone(), 0)?;
        if model.store.params().len() != self.params.len() || model.store.all_stats().len() != self.stats.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} params / {} stats, architecture {} expects {} / {}",
                self.params.len(),
                self.stats.len(),
                self.spec.name,
                model.store.params().len(),
                model.store.all_stats().len()
            )));
        }
        for (p, (name, value)) in model.store.params_mut().iter_mut().zip(&self.params) {
            if p.name != *name || p.value.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "param '{name}' {:?} does not match '{}' {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        for (s, rec) in model.store.all_stats_mut().iter_mut().zip(&self.stats) {
            if s.name != rec.name || s.mean.len() != rec.mean.len() {
                return Err(Error::Format(format!("stats '{}' do not match '{}'", rec.name, s.name)));
            }
            s.mean = rec.mean.clone();
            s.var = rec.var.clone();
        }
        Ok(model)
    }

    /// Optimizer state to resume from; velocities default to zero.
    pub fn train_state(&self, model: &Model, cfg: &TrainConfig) -> TrainState {
        let mut state = TrainState::new(model, cfg);
        state.iteration = self.iteration as usize;
        if self.lr > 0.0 {
            state.schedule = PlateauSchedule::new(self.lr, cfg.lr_decay_factor, cfg.decay_patience);
        }
        if let Some(v) = &self.velocities {
            state.velocities = v.clone();
        }
        state
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let json = serde_json::to_string(&self.spec).map_err(|e| Error::Format(e.to_string()))?;
        write_str(out, &json)?;
        write_str(out, &self.conventions.to_string())?;
        out.write_all(&self.iteration.to_le_bytes())?;
        out.write_all(&self.lr.to_le_bytes())?;
        write_u32(out, self.params.len())?;
        for (name, t) in &self.params {
            write_str(out, name)?;
            write_u32(out, t.rank())?;
            for &d in t.shape() {
                write_u32(out, d)?;
            }
            write_f32s(out, t.data())?;
        }
        write_u32(out, self.stats.len())?;
        for s in &self.stats {
            write_str(out, &s.name)?;
            write_u32(out, s.mean.len())?;
            write_f32s(out, &s.mean)?;
            write_f32s(out, &s.var)?;
        }
        match &self.velocities {
            None => out.write_all(&[0])?,
            Some(v) => {
                if v.len() != self.params.len() {
                    return Err(Error::Format("velocity count differs from parameter count".into()));
                }
                out.write_all(&[1])?;
                for (t, (name, p)) in v.iter().zip(&self.params) {
                    if t.shape() != p.shape() {
                        return Err(Error::Format(format!("velocity for '{name}' has the wrong shape")));
                    }
                    write_f32s(out, t.data())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(input)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let spec: ArchSpec = serde_json::from_str(&read_str(input)?).map_err(|e| Error::Format(e.to_string()))?;
        let conventions = read_str(input)?.parse().map_err(|e| Error::Format(format!("conventions: {e}")))?;
        let iteration = u64::from_le_bytes(read_array(input)?);
        let lr = f64::from_le_bytes(read_array(input)?);
        let n = read_u32(input)? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = read_str(input)?;
            let rank = read_u32(input)? as usize;
            if rank == 0 || rank > crate::tensor::MAX_RANK {
                return Err(Error::Format(format!("param '{name}' has rank {rank}")));
            }
            let shape = (0..rank).map(|_| read_u32(input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            params.push((name, Tensor::from_vec(&shape, read_f32s(input, len)?)?));
        }
        let n = read_u32(input)? as usize;
        let mut stats = Vec::with_capacity(n);
        for _ in 0..n {
            let name = read_str(input)?;
            let c = read_u32(input)? as usize;
            let mean = read_f32s(input, c)?;
            let var = read_f32s(input, c)?;
            stats.push(StatsRecord { name, mean, var });
        }
        let velocities = match read_array::<1, _>(input)?[0] {
            0 => None,
            1 => Some(
                params
                    .iter()
                    .map(|(_, p)| Tensor::from_vec(p.shape(), read_f32s(input, p.len())?))
                    .collect::<Result<Vec<_>>>()?,
            ),
            f => return Err(Error::Format(format!("bad velocity flag {f}"))),
        };
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            spec,
            conventions,
            iteration,
            lr,
            params,
            stats,
            velocities,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn write_u32<W: Write>(out: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(out: &mut W, s: &str) -> Result<()> {
    write_u32(out, s.len())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f32s<W: Write>(out: &mut W, v: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    out.write_all(&bytes)?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    input
        .read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(input)?))
}

fn read_str<R: Read>(input: &mut R) -> Result<String> {
    let n = read_u32(input)? as usize;
    if n > 1 << 20 {
        return Err(Error::Format(format!("string of {n} bytes is implausible")));
    }
    let mut b = vec![0u8; n];
    input
        .read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    String::from_utf8(b).map_err(|e| Error::Format(e.to_string()))
}

fn read_f32s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut b = vec![0u8; n * 4];
    input
        .read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architectures::{TinyVariant, CALIBRATED};
    use crate::data::{generate, TaskSpec};
    use crate::training::train;

    fn trained() -> (Model, TrainState) {
        let data = generate(&TaskSpec::default(), 8).unwrap();
        let mut model = Model::new(ArchSpec::tiny(TinyVariant::Artnet, 4, 1, 4).unwrap(), 1).unwrap();
        let cfg = TrainConfig {
            max_iters: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&model, &cfg);
        train(&mut model, &data, None, &cfg, &mut state, |_| {}).unwrap();
        (model, state)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (model, state) = trained();
        for st in [None, Some(&state)] {
            let ck = Checkpoint::from_model(&model, CALIBRATED, st);
            let mut a = Vec::new();
            ck.write_to(&mut a).unwrap();
            let back = Checkpoint::read_from(&mut a.as_slice()).unwrap();
            let mut b = Vec::new();
            back.write_to(&mut b).unwrap();
            assert_eq!(a, b);
            // through a rebuilt model as well
            let rebuilt = back.to_model().unwrap();
            let resumed = back.train_state(&rebuilt, &TrainConfig::default());
            let mut c = Vec::new();
            Checkpoint::from_model(&rebuilt, CALIBRATED, st.map(|_| &resumed))
                .write_to(&mut c)
                .unwrap();
            assert_eq!(a, c);
        }
    }

    #[test]
    fn resume_keeps_iteration() {
        let (model, state) = trained();
        let ck = Checkpoint::from_model(&model, CALIBRATED, Some(&state));
        let m = ck.to_model().unwrap();
        let s = ck.train_state(&m, &TrainConfig::default());
        assert_eq!(s.iteration, 2);
        assert_eq!(s.schedule.lr, 0.1);
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let (model, _) = trained();
        let ck = Checkpoint::from_model(&model, CALIBRATED, None);
        let mut a = Vec::new();
        ck.write_to(&mut a).unwrap();
        let mut bad = a.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        assert!(Checkpoint::read_from(&mut &a[..a.len() - 1]).is_err());

        let mut wrong = ck.clone();
        wrong.spec = ArchSpec::tiny(TinyVariant::C3d, 4, 1, 4).unwrap();
        assert!(matches!(wrong.to_model(), Err(Error::Format(_))));
    }
}
