//! Plain-text `key = value` run configuration.
//!
//! Every key is listed in [`SCHEMA`]; unknown keys are rejected. Values are
//! resolved as built-in default, then config file, then command-line flag.

use std::fmt::Write as _;

use crate::data::{AugmentConfig, Task, TaskSpec};
use crate::error::{config_err, Result};
use crate::training::{EvalConfig, TrainConfig};

pub struct KeyInfo {
    pub name: &'static str,
    pub help: &'static str,
    /// Two distinct valid values in canonical form.
    pub examples: [&'static str; 2],
}

pub const SCHEMA: &[KeyInfo] = &[
    KeyInfo {
        name: "arch",
        help: "architecture name",
        examples: ["artnet_r18_d", "tiny_c2d"],
    },
    KeyInfo {
        name: "tiny_channels",
        help: "width of tiny_* networks",
        examples: ["8", "32"],
    },
    KeyInfo {
        name: "task",
        help: "motion or appearance",
        examples: ["appearance", "motion"],
    },
    KeyInfo {
        name: "classes",
        help: "number of classes",
        examples: ["8", "2"],
    },
    KeyInfo {
        name: "frames",
        help: "clip length",
        examples: ["6", "7"],
    },
    KeyInfo {
        name: "height",
        help: "frame height",
        examples: ["40", "44"],
    },
    KeyInfo {
        name: "width",
        help: "frame width",
        examples: ["40", "44"],
    },
    KeyInfo {
        name: "channels",
        help: "1 or 3",
        examples: ["3", "1"],
    },
    KeyInfo {
        name: "patch",
        help: "patch side in pixels",
        examples: ["5", "4"],
    },
    KeyInfo {
        name: "speed",
        help: "pixels per frame",
        examples: ["1", "3"],
    },
    KeyInfo {
        name: "texture_bank",
        help: "number of textures",
        examples: ["32", "8"],
    },
    KeyInfo {
        name: "directions",
        help: "4 or 8",
        examples: ["8", "4"],
    },
    KeyInfo {
        name: "margin",
        help: "minimum patch distance from the frame edge",
        examples: ["4", "0"],
    },
    KeyInfo {
        name: "noise_std",
        help: "pixel noise standard deviation",
        examples: ["0.1", "0"],
    },
    KeyInfo {
        name: "data_seed",
        help: "dataset seed",
        examples: ["7", "9"],
    },
    KeyInfo {
        name: "n",
        help: "samples to generate",
        examples: ["512", "64"],
    },
    KeyInfo {
        name: "batch_size",
        help: "mini-batch size",
        examples: ["8", "32"],
    },
    KeyInfo {
        name: "momentum",
        help: "SGD momentum",
        examples: ["0.8", "0"],
    },
    KeyInfo {
        name: "lr",
        help: "initial learning rate",
        examples: ["0.05", "0.01"],
    },
    KeyInfo {
        name: "lr_decay_factor",
        help: "divisor applied on plateau",
        examples: ["5", "2"],
    },
    KeyInfo {
        name: "decay_patience",
        help: "stale evaluations before a decay",
        examples: ["2", "5"],
    },
    KeyInfo {
        name: "max_iters",
        help: "total training iterations",
        examples: ["300", "10"],
    },
    KeyInfo {
        name: "dropout_p",
        help: "dropout before the classifier",
        examples: ["0.3", "0"],
    },
    KeyInfo {
        name: "seed",
        help: "training seed",
        examples: ["1", "2"],
    },
    KeyInfo {
        name: "segments",
        help: "TSN segments (1 disables)",
        examples: ["2", "3"],
    },
    KeyInfo {
        name: "eval_every",
        help: "iterations between validations",
        examples: ["50", "10"],
    },
    KeyInfo {
        name: "stop_below",
        help: "early-stop training loss, or none",
        examples: ["0.05", "0.5"],
    },
    KeyInfo {
        name: "crop",
        help: "TxHxW crop, or full",
        examples: ["4x32x32", "2x16x16"],
    },
    KeyInfo {
        name: "resize",
        help: "HxW resize before cropping, or none",
        examples: ["40x40", "48x48"],
    },
    KeyInfo {
        name: "flip_prob",
        help: "horizontal flip probability",
        examples: ["0.5", "1"],
    },
    KeyInfo {
        name: "mean",
        help: "per-channel mean, comma separated",
        examples: ["0.1", "0.2"],
    },
    KeyInfo {
        name: "clips",
        help: "clips per video at evaluation",
        examples: ["1", "3"],
    },
    KeyInfo {
        name: "crops",
        help: "1 or 10 crops per clip",
        examples: ["1", "10"],
    },
    KeyInfo {
        name: "log_every",
        help: "iterations between printed log lines",
        examples: ["1", "50"],
    },
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: String,
    pub tiny_channels: usize,
    pub task: TaskSpec,
    pub n: usize,
    pub train: TrainConfig,
    pub crop: Option<[usize; 3]>,
    pub resize: Option<[usize; 2]>,
    pub flip_prob: f64,
    pub mean: Vec<f64>,
    pub clips: usize,
    pub crops: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: "tiny_artnet".into(),
            tiny_channels: 16,
            task: TaskSpec::default(),
            n: 256,
            train: TrainConfig::default(),
            crop: None,
            resize: None,
            flip_prob: 0.0,
            mean: vec![0.0],
            clips: 5,
            crops: 10,
            log_every: 10,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err!("invalid value '{v}' for key '{key}'"))
}

fn extents<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let parts: Vec<usize> = v.split('x').map(|p| num(key, p.trim())).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| config_err!("key '{key}' expects {N} extents separated by 'x', got '{v}'"))
}

fn join_extents(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "arch" => self.arch = v.to_string(),
            "tiny_channels" => self.tiny_channels = num(key, v)?,
            "task" => self.task.task = v.parse::<Task>()?,
            "classes" => self.task.classes = num(key, v)?,
            "frames" => self.task.frames = num(key, v)?,
            "height" => self.task.height = num(key, v)?,
            "width" => self.task.width = num(key, v)?,
            "channels" => self.task.channels = num(key, v)?,
            "patch" => self.task.patch = num(key, v)?,
            "speed" => self.task.speed = num(key, v)?,
            "texture_bank" => self.task.texture_bank = num(key, v)?,
            "directions" => self.task.directions = num(key, v)?,
            "margin" => self.task.margin = num(key, v)?,
            "noise_std" => self.task.noise_std = num(key, v)?,
            "data_seed" => self.task.seed = num(key, v)?,
            "n" => self.n = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "momentum" => self.train.momentum = num(key, v)?,
            "lr" => self.train.lr = num(key, v)?,
            "lr_decay_factor" => self.train.lr_decay_factor = num(key, v)?,
            "decay_patience" => self.train.decay_patience = num(key, v)?,
            "max_iters" => self.train.max_iters = num(key, v)?,
            "dropout_p" => self.train.dropout_p = num(key, v)?,
            "seed" => self.train.seed = num(key, v)?,
            "segments" => self.train.segments = num(key, v)?,
            "eval_every" => self.train.eval_every = num(key, v)?,
            "stop_below" => self.train.stop_below = if v == "none" { None } else { Some(num(key, v)?) },
            "crop" => self.crop = if v == "full" { None } else { Some(extents(key, v)?) },
            "resize" => self.resize = if v == "none" { None } else { Some(extents(key, v)?) },
            "flip_prob" => self.flip_prob = num(key, v)?,
            "mean" => self.mean = v.split(',').map(|p| num(key, p.trim())).collect::<Result<_>>()?,
            "clips" => self.clips = num(key, v)?,
            "crops" => self.crops = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            _ => return Err(config_err!("unknown config key '{key}'")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "arch" => self.arch.clone(),
            "tiny_channels" => self.tiny_channels.to_string(),
            "task" => self.task.task.as_str().to_string(),
            "classes" => self.task.classes.to_string(),
            "frames" => self.task.frames.to_string(),
            "height" => self.task.height.to_string(),
            "width" => self.task.width.to_string(),
            "channels" => self.task.channels.to_string(),
            "patch" => self.task.patch.to_string(),
            "speed" => self.task.speed.to_string(),
            "texture_bank" => self.task.texture_bank.to_string(),
            "directions" => self.task.directions.to_string(),
            "margin" => self.task.margin.to_string(),
            "noise_std" => self.task.noise_std.to_string(),
            "data_seed" => self.task.seed.to_string(),
            "n" => self.n.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "momentum" => self.train.momentum.to_string(),
            "lr" => self.train.lr.to_string(),
            "lr_decay_factor" => self.train.lr_decay_factor.to_string(),
            "decay_patience" => self.train.decay_patience.to_string(),
            "max_iters" => self.train.max_iters.to_string(),
            "dropout_p" => self.train.dropout_p.to_string(),
            "seed" => self.train.seed.to_string(),
            "segments" => self.train.segments.to_string(),
            "eval_every" => self.train.eval_every.to_string(),
            "stop_below" => self.train.stop_below.map_or("none".into(), |v| v.to_string()),
            "crop" => self.crop.map_or("full".into(), |c| join_extents(&c)),
            "resize" => self.resize.map_or("none".into(), |c| join_extents(&c)),
            "flip_prob" => self.flip_prob.to_string(),
            "mean" => self.mean.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            "clips" => self.clips.to_string(),
            "crops" => self.crops.to_string(),
            "log_every" => self.log_every.to_string(),
            _ => return None,
        })
    }

    /// Applies a config file's `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected 'key = value', got '{line}'", i + 1))?;
            self.set(k.trim(), v).map_err(|e| config_err!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    /// Default, then `file` contents, then `overrides` (flag values).
    pub fn resolve(file: Option<&str>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(text) = file {
            cfg.apply_text(text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// The whole configuration as a config file.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in SCHEMA {
            let _ = writeln!(s, "{} = {}", k.name, self.get(k.name).unwrap_or_default());
        }
        s
    }

    fn crop_for(&self, spec: &TaskSpec) -> [usize; 3] {
        self.crop.unwrap_or(match self.resize {
            Some([h, w]) => [spec.frames, h, w],
            None => [spec.frames, spec.height, spec.width],
        })
    }

    fn mean_for(&self, spec: &TaskSpec) -> Result<Vec<f64>> {
        match &self.mean {
            m if m.len() == 1 => Ok(vec![m[0]; spec.channels]),
            m if m.len() == spec.channels => Ok(m.clone()),
            m => Err(config_err!("mean has {} entries for {} channels", m.len(), spec.channels)),
        }
    }

    /// Training settings for a dataset with task spec `spec`.
    pub fn train_config(&self, spec: &TaskSpec) -> Result<TrainConfig> {
        let mut t = self.train.clone();
        t.augment = Some(AugmentConfig {
            resize: self.resize,
            crop: self.crop_for(spec),
            flip_prob: self.flip_prob,
            mean: self.mean_for(spec)?,
        });
        t.validate()?;
        Ok(t)
    }

    pub fn eval_config(&self, spec: &TaskSpec) -> Result<EvalConfig> {
        let e = EvalConfig {
            clips: self.clips,
            crops: self.crops,
            crop: self.crop_for(spec),
            mean: self.mean_for(spec)?,
            batch_size: 32,
        };
        e.validate()?;
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn schema_round_trips_every_key() {
        let d = RunConfig::default();
        for k in SCHEMA {
            let default = d.get(k.name).expect("key readable");
            let mut c = d.clone();
            c.set(k.name, &default).unwrap();
            assert_eq!(c, d, "{}", k.name);
            assert_ne!(k.examples[0], k.examples[1]);
        }
        let text = d.to_text();
        assert_eq!(RunConfig::resolve(Some(&text), &[]).unwrap(), d);
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let d = RunConfig::default();
        for k in SCHEMA {
            let default = d.get(k.name).unwrap();
            let [file_v, flag_v] = k.examples;
            assert_ne!(default, file_v, "{} example equals its default", k.name);
            let file = format!("# run\n{} = {file_v}  # from file\n", k.name);

            let only_default = RunConfig::resolve(None, &[]).unwrap();
            assert_eq!(only_default.get(k.name).unwrap(), default);
            let from_file = RunConfig::resolve(Some(&file), &[]).unwrap();
            assert_eq!(from_file.get(k.name).unwrap(), file_v, "{}", k.name);
            let from_flag = RunConfig::resolve(Some(&file), &[(k.name, flag_v.to_string())]).unwrap();
            assert_eq!(from_flag.get(k.name).unwrap(), flag_v, "{}", k.name);
        }
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        assert!(matches!(RunConfig::resolve(Some("colour = red"), &[]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::resolve(Some("lr 0.1"), &[]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::resolve(Some("lr = fast"), &[]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::resolve(Some("crop = 4x4"), &[]), Err(Error::Config(_))));
        assert!(RunConfig::resolve(None, &[("bogus", "1".into())]).is_err());
        let err = RunConfig::resolve(Some("\n\nmomentum = x"), &[]).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn derived_configs() {
        let c = RunConfig::resolve(Some("crop = 4x32x32\nmean = 0.5\nchannels = 3\nflip_prob = 0.5"), &[]).unwrap();
        let t = c.train_config(&c.task).unwrap();
        let aug = t.augment.unwrap();
        assert_eq!(aug.crop, [4, 32, 32]);
        assert_eq!(aug.mean, vec![0.5; 3]);
        let e = c.eval_config(&c.task).unwrap();
        assert_eq!((e.clips, e.crops), (5, 10));
        let bad = RunConfig::resolve(Some("crops = 3"), &[]).unwrap();
        assert!(bad.eval_config(&bad.task).is_err());
        let bad = RunConfig::resolve(Some("momentum = 1"), &[]).unwrap();
        assert!(bad.train_config(&bad.task).is_err());
    }
}
