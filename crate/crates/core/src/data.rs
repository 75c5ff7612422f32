//! Synthetic clip generator, augmentation and the binary dataset format.
//!
//! Each sample is a textured square patch on a zero background translating
//! at a fixed integer speed. For the motion task the direction is the label
//! and the texture is random; for the appearance task the texture is the
//! label and the direction is random. Start positions are drawn from a
//! central region that keeps every direction inside the frame, so frame 0
//! carries no information about the direction.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

/// Which factor carries the label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Appearance,
    Motion,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Appearance => "appearance",
            Task::Motion => "motion",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "appearance" => Ok(Task::Appearance),
            "motion" => Ok(Task::Motion),
            _ => Err(config_err!("unknown task '{s}' (expected appearance or motion)")),
        }
    }
}

/// Unit steps `(dy, dx)`; the first four are right, left, down, up.
pub const DIRECTIONS: [(i64, i64); 8] = [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1)];

pub const TEXTURE_MIN: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub task: Task,
    pub classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    /// Pixels per frame along each moving axis.
    pub speed: usize,
    pub texture_bank: usize,
    /// Number of translation directions (4 or 8) the patch may take.
    pub directions: usize,
    /// Minimum distance in pixels between the patch and the frame edge.
    pub margin: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            task: Task::Motion,
            classes: 4,
            frames: 5,
            height: 36,
            width: 36,
            channels: 1,
            patch: 6,
            speed: 2,
            texture_bank: 16,
            directions: 4,
            margin: 6,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    /// `[C, T, H, W]`, values in `[0, 1]`.
    pub volume: Tensor,
    pub label: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.directions, 4 | 8) {
            return Err(config_err!("directions must be 4 or 8, got {}", self.directions));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(config_err!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.frames == 0 || self.patch == 0 || self.texture_bank == 0 {
            return Err(config_err!("frames, patch and texture_bank must be >= 1"));
        }
        if self.classes < 2 || self.classes > u8::MAX as usize + 1 {
            return Err(config_err!("classes must be in [2, 256], got {}", self.classes));
        }
        match self.task {
            Task::Motion if self.classes != self.directions => {
                return Err(config_err!(
                    "motion task needs classes == directions, got {} and {}",
                    self.classes,
                    self.directions
                ))
            }
            Task::Appearance if self.texture_bank < self.classes => {
                return Err(config_err!(
                    "appearance task needs texture_bank >= classes, got {} < {}",
                    self.texture_bank,
                    self.classes
                ))
            }
            _ => {}
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(config_err!("noise_std must be a finite non-negative number"));
        }
        let travel = (self.frames - 1) * self.speed;
        for (axis, extent) in [("height", self.height), ("width", self.width)] {
            if self.patch + 2 * (travel + self.margin) > extent {
                return Err(config_err!(
                    "patch {} moving {} pixels with margin {} does not fit in {axis} {extent}",
                    self.patch,
                    travel,
                    self.margin
                ));
            }
        }
        Ok(())
    }

    pub fn volume_shape(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }

    /// Label after a horizontal flip of the clip.
    pub fn flipped_label(&self, label: usize) -> usize {
        match self.task {
            Task::Appearance => label,
            Task::Motion => {
                let (dy, dx) = DIRECTIONS[label];
                DIRECTIONS[..self.directions].iter().position(|&d| d == (dy, -dx)).unwrap_or(label)
            }
        }
    }

    /// `flipped_label` for every class, as a permutation.
    pub fn flip_permutation(&self) -> Vec<usize> {
        (0..self.classes).map(|l| self.flipped_label(l)).collect()
    }

    /// The procedural texture bank, `[C, patch, patch]` each.
    pub fn textures(&self) -> Vec<Tensor> {
        let mut rng = stream(self.seed, u64::MAX);
        let n = self.channels * self.patch * self.patch;
        (0..self.texture_bank)
            .map(|_| {
                let v = (0..n).map(|_| rng.random_range(TEXTURE_MIN..1.0)).collect();
                Tensor::from_vec(&[self.channels, self.patch, self.patch], v).expect("texture shape")
            })
            .collect()
    }

    /// Sample `index`; depends only on `(self, index)`.
    pub fn sample(&self, index: u64, textures: &[Tensor]) -> Result<VideoSample> {
        let mut label_rng = stream(self.seed, 3 * index);
        let mut content_rng = stream(self.seed, 3 * index + 1);
        let mut noise_rng = stream(self.seed, 3 * index + 2);

        let label = label_rng.random_range(0..self.classes);
        let travel = ((self.frames - 1) * self.speed) as i64;
        let lo = travel + self.margin as i64;
        // content draws happen in a fixed order regardless of the label
        let texture_idx = content_rng.random_range(0..self.texture_bank);
        let direction_idx = content_rng.random_range(0..self.directions);
        let y0 = content_rng.random_range(lo..=self.height as i64 - self.patch as i64 - lo);
        let x0 = content_rng.random_range(lo..=self.width as i64 - self.patch as i64 - lo);
        let (texture, direction) = match self.task {
            Task::Motion => (texture_idx, label),
            Task::Appearance => (label, direction_idx),
        };
        let (dy, dx) = DIRECTIONS[direction];

        let [c, t, h, w] = self.volume_shape();
        let tex = textures[texture].data();
        let p = self.patch;
        let mut v = vec![0.0; c * t * h * w];
        for f in 0..t {
            let step = (f * self.speed) as i64;
            let (py, px) = ((y0 + dy * step) as usize, (x0 + dx * step) as usize);
            for ch in 0..c {
                for r in 0..p {
                    let dst = ((ch * t + f) * h + py + r) * w + px;
                    v[dst..dst + p].copy_from_slice(&tex[(ch * p + r) * p..(ch * p + r + 1) * p]);
                }
            }
        }
        if self.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.noise_std).map_err(|e| config_err!("noise: {e}"))?;
            for x in &mut v {
                *x = (*x + normal.sample(&mut noise_rng)).clamp(0.0, 1.0);
            }
        }
        Ok(VideoSample {
            volume: Tensor::from_vec(&[c, t, h, w], v)?,
            label,
        })
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// A task spec together with its samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub samples: Vec<VideoSample>,
}

pub fn generate(spec: &TaskSpec, n: usize) -> Result<Dataset> {
    generate_range(spec, 0, n)
}

/// Samples `start..start + n`; disjoint ranges give disjoint splits of one task.
pub fn generate_range(spec: &TaskSpec, start: u64, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(config_err!("sample count must be >= 1"));
    }
    let textures = spec.textures();
    let samples = (start..start + n as u64)
        .map(|i| spec.sample(i, &textures))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.spec.classes];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    /// Stacks the given samples into `[N, C, T, H, W]` plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let vols: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].volume).collect();
        let labels = indices.iter().map(|&i| self.samples[i].label).collect();
        Ok((Tensor::stack(&vols)?, labels))
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let s = &self.spec;
        out.write_all(DATASET_MAGIC)?;
        out.write_all(&DATASET_VERSION.to_le_bytes())?;
        out.write_all(&[u8::from(s.task == Task::Motion)])?;
        for v in [
            s.classes,
            s.frames,
            s.height,
            s.width,
            s.channels,
            s.patch,
            s.speed,
            s.texture_bank,
            s.directions,
            s.margin,
        ] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        out.write_all(&s.noise_std.to_le_bytes())?;
        out.write_all(&s.seed.to_le_bytes())?;
        out.write_all(&(self.samples.len() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.spec.volume_shape().iter().product::<usize>() * 4 + 1);
        for sample in &self.samples {
            buf.clear();
            for &x in sample.volume.data() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
            buf.push(sample.label as u8);
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = read_u32(input)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let mut task = [0u8];
        input.read_exact(&mut task)?;
        let task = match task[0] {
            0 => Task::Appearance,
            1 => Task::Motion,
            t => return Err(Error::Format(format!("unknown task tag {t}"))),
        };
        let mut f = [0usize; 10];
        for v in &mut f {
            *v = read_u32(input)? as usize;
        }
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b8)?;
        let noise_std = f64::from_le_bytes(b8);
        input.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let spec = TaskSpec {
            task,
            classes: f[0],
            frames: f[1],
            height: f[2],
            width: f[3],
            channels: f[4],
            patch: f[5],
            speed: f[6],
            texture_bank: f[7],
            directions: f[8],
            margin: f[9],
            noise_std,
            seed,
        };
        spec.validate().map_err(|e| Error::Format(format!("invalid header: {e}")))?;
        let count = read_u32(input)? as usize;
        let shape = spec.volume_shape();
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 4 + 1];
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            input
                .read_exact(&mut raw)
                .map_err(|e| Error::Format(format!("sample {i} truncated: {e}")))?;
            let data = raw[..len * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let label = raw[len * 4] as usize;
            if label >= spec.classes {
                return Err(Error::Format(format!("sample {i} label {label} out of range")));
            }
            samples.push(VideoSample {
                volume: Tensor::from_vec(&shape, data)?,
                label,
            });
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after last sample".into()));
        }
        Ok(Dataset { spec, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub const DATASET_MAGIC: &[u8; 4] = b"ARTD";
pub const DATASET_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Optional spatial resize `[H, W]` applied before cropping.
    pub resize: Option<[usize; 2]>,
    /// Crop extents `[T, H, W]`.
    pub crop: [usize; 3],
    pub flip_prob: f64,
    /// Per-channel mean subtracted after cropping.
    pub mean: Vec<f64>,
}

impl AugmentConfig {
    /// Full-volume crop, no flips, no mean subtraction.
    pub fn identity(spec: &TaskSpec) -> Self {
        AugmentConfig {
            resize: None,
            crop: [spec.frames, spec.height, spec.width],
            flip_prob: 0.0,
            mean: vec![0.0; spec.channels],
        }
    }
}

/// Augmented clip plus whether it was flipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub volume: Tensor,
    pub flipped: bool,
}

/// Train mode: random crop, flip with `flip_prob`, mean subtraction.
/// Eval mode: center crop and mean subtraction.
pub fn augment<R: Rng + ?Sized>(volume: &Tensor, train: bool, cfg: &AugmentConfig, rng: &mut R) -> Result<Augmented> {
    let resized;
    let src = match cfg.resize {
        Some(hw) => {
            resized = resize_bilinear(volume, hw)?;
            &resized
        }
        None => volume,
    };
    let [c, t, h, w] = dims4(src)?;
    if cfg.mean.len() != c {
        return Err(config_err!("mean has {} entries for {c} channels", cfg.mean.len()));
    }
    let [ct, ch, cw] = cfg.crop;
    if ct > t || ch > h || cw > w || ct == 0 || ch == 0 || cw == 0 {
        return Err(config_err!("crop {:?} does not fit source [{t}, {h}, {w}]", cfg.crop));
    }
    let (offset, flipped) = if train {
        let o = [
            rng.random_range(0..=t - ct),
            rng.random_range(0..=h - ch),
            rng.random_range(0..=w - cw),
        ];
        let f = cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob;
        (o, f)
    } else {
        ([(t - ct) / 2, (h - ch) / 2, (w - cw) / 2], false)
    };
    let mut out = crop(src, offset, cfg.crop)?;
    if flipped {
        out = flip_horizontal(&out)?;
    }
    let plane = ct * ch * cw;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v -= cfg.mean[i / plane];
    }
    Ok(Augmented { volume: out, flipped })
}

fn dims4(x: &Tensor) -> Result<[usize; 4]> {
    match *x.shape() {
        [c, t, h, w] => Ok([c, t, h, w]),
        _ => Err(crate::error::shape_err!("expected a [C, T, H, W] clip, got {:?}", x.shape())),
    }
}

/// Sub-volume of `[C, T, H, W]` at `offset` with extents `size` (`[T, H, W]`).
pub fn crop(x: &Tensor, offset: [usize; 3], size: [usize; 3]) -> Result<Tensor> {
    let [c, t, h, w] = dims4(x)?;
    let [ot, oh, ow] = offset;
    let [st, sh, sw] = size;
    if ot + st > t || oh + sh > h || ow + sw > w {
        return Err(config_err!("crop {size:?} at {offset:?} exceeds [{t}, {h}, {w}]"));
    }
    let d = x.data();
    let mut out = Vec::with_capacity(c * st * sh * sw);
    for ch in 0..c {
        for f in ot..ot + st {
            for r in oh..oh + sh {
                let base = ((ch * t + f) * h + r) * w + ow;
                out.extend_from_slice(&d[base..base + sw]);
            }
        }
    }
    Tensor::from_vec(&[c, st, sh, sw], out)
}

/// Mirrors the width axis of a `[C, T, H, W]` clip.
pub fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    let [_, _, _, w] = dims4(x)?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Bilinear spatial resize with aligned corners.
pub fn resize_bilinear(x: &Tensor, [nh, nw]: [usize; 2]) -> Result<Tensor> {
    let [c, t, h, w] = dims4(x)?;
    if nh == 0 || nw == 0 {
        return Err(config_err!("resize target must be non-empty"));
    }
    let coord = |i: usize, n: usize, src: usize| -> (usize, usize, f64) {
        if n == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let p = i as f64 * (src - 1) as f64 / (n - 1) as f64;
        let lo = (p.floor() as usize).min(src - 2);
        (lo, lo + 1, p - lo as f64)
    };
    let d = x.data();
    let mut out = Vec::with_capacity(c * t * nh * nw);
    for plane in d.chunks_exact(h * w) {
        for r in 0..nh {
            let (r0, r1, fr) = coord(r, nh, h);
            for q in 0..nw {
                let (q0, q1, fq) = coord(q, nw, w);
                let top = plane[r0 * w + q0] * (1.0 - fq) + plane[r0 * w + q1] * fq;
                let bot = plane[r1 * w + q0] * (1.0 - fq) + plane[r1 * w + q1] * fq;
                out.push(top * (1.0 - fr) + bot * fr);
            }
        }
    }
    Tensor::from_vec(&[c, t, nh, nw], out)
}

/// Four corners, center, then the horizontal flips of those five.
/// `crop` is spatial `[H, W]`; the full temporal extent is kept.
pub fn ten_crop(clip: &Tensor, [ch, cw]: [usize; 2]) -> Result<Vec<Tensor>> {
    let [_, t, h, w] = dims4(clip)?;
    if ch > h || cw > w || ch == 0 || cw == 0 {
        return Err(config_err!("crop [{ch}, {cw}] does not fit clip [{h}, {w}]"));
    }
    let offsets = [[0, 0], [0, w - cw], [h - ch, 0], [h - ch, w - cw], [(h - ch) / 2, (w - cw) / 2]];
    let mut crops = offsets
        .iter()
        .map(|&[r, q]| crop(clip, [0, r, q], [t, ch, cw]))
        .collect::<Result<Vec<_>>>()?;
    let flips = crops.iter().map(flip_horizontal).collect::<Result<Vec<_>>>()?;
    crops.extend(flips);
    Ok(crops)
}

/// Intensity-weighted `(y, x)` centroid of every frame (channels summed).
pub fn frame_centroids(volume: &Tensor) -> Result<Vec<(f64, f64)>> {
    let [c, t, h, w] = dims4(volume)?;
    let d = volume.data();
    Ok((0..t)
        .map(|f| {
            let (mut m, mut my, mut mx) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                for r in 0..h {
                    for q in 0..w {
                        let v = d[((ch * t + f) * h + r) * w + q];
                        m += v;
                        my += v * r as f64;
                        mx += v * q as f64;
                    }
                }
            }
            if m > 0.0 {
                (my / m, mx / m)
            } else {
                (f64::NAN, f64::NAN)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn motion(noise: f64, seed: u64) -> TaskSpec {
        TaskSpec {
            noise_std: noise,
            seed,
            ..TaskSpec::default()
        }
    }

    /// Nearest direction to the first-to-last centroid displacement.
    fn centroid_oracle(spec: &TaskSpec, s: &VideoSample) -> usize {
        let c = frame_centroids(&s.volume).unwrap();
        let (y0, x0) = c[0];
        let (y1, x1) = c[c.len() - 1];
        let (dy, dx) = (y1 - y0, x1 - x0);
        (0..spec.directions)
            .max_by(|&a, &b| {
                let score = |k: usize| DIRECTIONS[k].0 as f64 * dy + DIRECTIONS[k].1 as f64 * dx;
                let norm = |k: usize| ((DIRECTIONS[k].0.pow(2) + DIRECTIONS[k].1.pow(2)) as f64).sqrt();
                (score(a) / norm(a)).total_cmp(&(score(b) / norm(b)))
            })
            .unwrap()
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let spec = motion(0.05, 7);
        let a = generate(&spec, 20).unwrap();
        let b = generate(&spec, 20).unwrap();
        assert_eq!(a, b);
        let c = generate(&motion(0.05, 8), 20).unwrap();
        assert_ne!(a, c);
        // sample i is independent of how many were generated
        let tail = generate_range(&spec, 10, 10).unwrap();
        assert_eq!(tail.samples[..], a.samples[10..]);
    }

    #[test]
    fn values_in_unit_interval_and_labels_in_range() {
        let spec = motion(0.3, 1);
        for s in generate(&spec, 30).unwrap().samples {
            assert!(s.volume.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.label < 4);
        }
    }

    #[test]
    fn rightward_centroid_strictly_increases() {
        let spec = motion(0.0, 3);
        let data = generate(&spec, 40).unwrap();
        let right: Vec<_> = data.samples.iter().filter(|s| s.label == 0).collect();
        assert!(!right.is_empty());
        for s in right {
            let c = frame_centroids(&s.volume).unwrap();
            assert!(c.windows(2).all(|p| p[1].1 > p[0].1), "{c:?}");
            assert!(c.windows(2).all(|p| (p[1].0 - p[0].0).abs() < 1e-12));
        }
    }

    #[test]
    fn centroid_oracle_recovers_every_direction() {
        for directions in [4, 8] {
            let spec = TaskSpec {
                classes: directions,
                directions,
                ..motion(0.0, 11)
            };
            let data = generate(&spec, 200).unwrap();
            for s in &data.samples {
                assert_eq!(centroid_oracle(&spec, s), s.label);
            }
        }
    }

    #[test]
    fn appearance_frames_are_shifted_copies() {
        let spec = TaskSpec {
            task: Task::Appearance,
            noise_std: 0.0,
            speed: 1,
            ..TaskSpec::default()
        };
        let textures = spec.textures();
        for i in 0..20 {
            let s = spec.sample(i, &textures).unwrap();
            let [_, t, h, w] = spec.volume_shape();
            let d = s.volume.data();
            let c = frame_centroids(&s.volume).unwrap();
            let (vy, vx) = ((c[1].0 - c[0].0).round() as i64, (c[1].1 - c[0].1).round() as i64);
            for f in 0..t {
                for r in 0..h {
                    for q in 0..w {
                        let (sr, sq) = (r as i64 - vy * f as i64, q as i64 - vx * f as i64);
                        let src = if (0..h as i64).contains(&sr) && (0..w as i64).contains(&sq) {
                            d[sr as usize * w + sq as usize]
                        } else {
                            0.0
                        };
                        assert_eq!(d[(f * h + r) * w + q], src);
                    }
                }
            }
            // the texture is the label
            let tex = &textures[s.label];
            let (py, px) = (c[0].0, c[0].1);
            assert!(py.is_finite() && px.is_finite());
            let sum: f64 = tex.data().iter().sum();
            let frame0: f64 = d[..h * w].iter().sum();
            assert!((sum - frame0).abs() < 1e-9);
        }
    }

    #[test]
    fn frame_zero_draws_ignore_the_label() {
        // Content and label come from separate streams, so the texture and
        // start position of sample i are the same whatever its label is.
        let spec = motion(0.0, 5);
        let textures = spec.textures();
        let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); 4];
        for i in 0..400 {
            let s = spec.sample(i, &textures).unwrap();
            let mut content = stream(spec.seed, 3 * i + 1);
            let tex = content.random_range(0..spec.texture_bank);
            let _dir = content.random_range(0..spec.directions);
            let y0 = content.random_range(14i64..=36 - 6 - 14);
            let x0 = content.random_range(14i64..=36 - 6 - 14);
            let hw = spec.height * spec.width;
            let frame0 = &s.volume.data()[..hw];
            let expect = textures[tex].data()[0];
            assert_eq!(frame0[y0 as usize * spec.width + x0 as usize], expect);
            per_class[s.label].push(frame0.iter().sum());
        }
        // frame-0 mass has the same mean in every class
        let means: Vec<f64> = per_class.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
        let all = means.iter().sum::<f64>() / 4.0;
        for m in means {
            assert!((m - all).abs() / all < 0.05, "{m} vs {all}");
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let too_big = TaskSpec {
            patch: 11,
            ..TaskSpec::default()
        };
        assert!(matches!(generate(&too_big, 1), Err(Error::Config(_))));
        assert!(matches!(generate(&TaskSpec::default(), 0), Err(Error::Config(_))));
        let wrong_classes = TaskSpec {
            classes: 5,
            ..TaskSpec::default()
        };
        assert!(wrong_classes.validate().is_err());
    }

    #[test]
    fn histogram_roughly_uniform() {
        let data = generate(&motion(0.05, 7), 256).unwrap();
        let h = data.class_histogram();
        let (n, k): (f64, f64) = (256.0, 4.0);
        let sigma = (n * (1.0 / k) * (1.0 - 1.0 / k)).sqrt();
        for c in h {
            assert!((c as f64 - n / k).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn flip_permutation_swaps_left_and_right() {
        let spec = TaskSpec::default();
        assert_eq!(spec.flip_permutation(), vec![1, 0, 2, 3]);
        let spec8 = TaskSpec {
            classes: 8,
            directions: 8,
            ..TaskSpec::default()
        };
        let p = spec8.flip_permutation();
        assert!((0..8).all(|l| p[p[l]] == l));
        // a flipped rightward clip moves left
        let data = generate(&motion(0.0, 2), 30).unwrap();
        for s in data.samples.iter().filter(|s| s.label == 0) {
            let flipped = flip_horizontal(&s.volume).unwrap();
            let c = frame_centroids(&flipped).unwrap();
            assert!(c.windows(2).all(|p| p[1].1 < p[0].1));
        }
    }

    #[test]
    fn dataset_round_trip_is_byte_identical() {
        let data = generate(&motion(0.05, 9), 12).unwrap();
        let mut a = Vec::new();
        data.write_to(&mut a).unwrap();
        let back = Dataset::read_from(&mut a.as_slice()).unwrap();
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.spec, data.spec);
        let labels: Vec<_> = back.samples.iter().map(|s| s.label).collect();
        assert_eq!(labels, data.samples.iter().map(|s| s.label).collect::<Vec<_>>());
        assert_eq!(a.len(), 4 + 4 + 1 + 10 * 4 + 16 + 4 + 12 * (5 * 36 * 36 * 4 + 1));
    }

    #[test]
    fn dataset_read_rejects_corruption() {
        let data = generate(&TaskSpec::default(), 2).unwrap();
        let mut a = Vec::new();
        data.write_to(&mut a).unwrap();
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        let truncated = &a[..a.len() - 3];
        assert!(Dataset::read_from(&mut &truncated[..]).is_err());
        let mut extra = a.clone();
        extra.push(0);
        assert!(Dataset::read_from(&mut extra.as_slice()).is_err());
    }

    #[test]
    fn eval_augment_is_deterministic_center_crop() {
        let s = &generate(&TaskSpec::default(), 1).unwrap().samples[0];
        let cfg = AugmentConfig {
            resize: None,
            crop: [4, 8, 8],
            flip_prob: 0.5,
            mean: vec![0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = augment(&s.volume, false, &cfg, &mut rng).unwrap();
        let b = augment(&s.volume, false, &cfg, &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(!a.flipped);
        assert_eq!(a.volume, crop(&s.volume, [0, 14, 14], [4, 8, 8]).unwrap());
    }

    #[test]
    fn train_augment_seeded_and_flip_involution() {
        let s = &generate(&TaskSpec::default(), 1).unwrap().samples[0];
        let cfg = AugmentConfig {
            resize: None,
            crop: [4, 8, 8],
            flip_prob: 1.0,
            mean: vec![0.0],
        };
        let a = augment(&s.volume, true, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = augment(&s.volume, true, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.flipped);
        let twice = flip_horizontal(&a.volume).unwrap();
        assert_eq!(flip_horizontal(&twice).unwrap(), a.volume);
    }

    #[test]
    fn mean_subtraction_of_constant() {
        let x = Tensor::full(&[1, 4, 6, 6], 0.5).unwrap();
        let cfg = AugmentConfig {
            resize: None,
            crop: [4, 6, 6],
            flip_prob: 0.0,
            mean: vec![0.5],
        };
        let out = augment(&x, true, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.volume.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_too_large_rejected() {
        let x = Tensor::zeros(&[1, 4, 6, 6]).unwrap();
        let cfg = AugmentConfig {
            resize: None,
            crop: [4, 7, 6],
            flip_prob: 0.0,
            mean: vec![0.0],
        };
        assert!(matches!(
            augment(&x, false, &cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(ten_crop(&x, [7, 2]), Err(Error::Config(_))));
    }

    #[test]
    fn resize_then_crop() {
        let x = Tensor::full(&[1, 2, 4, 4], 0.25).unwrap();
        let cfg = AugmentConfig {
            resize: Some([8, 10]),
            crop: [2, 6, 6],
            flip_prob: 0.0,
            mean: vec![0.0],
        };
        let out = augment(&x, false, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.volume.shape(), &[1, 2, 6, 6]);
        assert!(out.volume.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        // corners are preserved exactly
        let ramp = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = resize_bilinear(&ramp, [3, 3]).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn ten_crop_order_and_degenerate_case() {
        let s = &generate(&TaskSpec::default(), 1).unwrap().samples[0];
        let crops = ten_crop(&s.volume, [10, 10]).unwrap();
        assert_eq!(crops.len(), 10);
        assert!(crops.iter().all(|c| c.shape() == [1, 5, 10, 10]));
        assert_eq!(crops[0], crop(&s.volume, [0, 0, 0], [5, 10, 10]).unwrap());
        assert_eq!(crops[3], crop(&s.volume, [0, 26, 26], [5, 10, 10]).unwrap());
        assert_eq!(crops[5], flip_horizontal(&crops[0]).unwrap());
        assert_eq!(crops[6], flip_horizontal(&crops[1]).unwrap());

        let full = ten_crop(&s.volume, [36, 36]).unwrap();
        assert!(full[..5].iter().all(|c| *c == s.volume));
    }
}
