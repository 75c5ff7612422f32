//! SGD with momentum, plateau learning-rate decay, TSN segment consensus and
//! multi-clip, multi-crop evaluation.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::architectures::Model;
use crate::autodiff::{Graph, NodeId};
use crate::blocks::Session;
use crate::data::{augment, crop, flip_horizontal, ten_crop, AugmentConfig, Dataset};
use crate::error::{config_err, contract_err, Error, Result};
use crate::ops::{softmax, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// Evaluations without improvement of the smoothed validation loss before a decay.
    pub decay_patience: usize,
    pub max_iters: usize,
    pub dropout_p: f64,
    pub seed: u64,
    pub segments: usize,
    pub eval_every: usize,
    /// Stop once the mean training loss over the last [`SMOOTHING_WINDOW`] iterations drops below this.
    pub stop_below: Option<f64>,
    /// `None` trains on full, unflipped clips.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            momentum: 0.9,
            lr: 0.1,
            lr_decay_factor: 10.0,
            decay_patience: 3,
            max_iters: 2000,
            dropout_p: 0.2,
            seed: 0,
            segments: 1,
            eval_every: 200,
            stop_below: None,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be positive, got {}", self.lr));
        }
        if self.lr_decay_factor <= 1.0 {
            return Err(config_err!("lr_decay_factor must exceed 1, got {}", self.lr_decay_factor));
        }
        if self.segments == 0 || self.batch_size == 0 || self.eval_every == 0 || self.decay_patience == 0 {
            return Err(config_err!("segments, batch_size, eval_every and decay_patience must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(config_err!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub clips: usize,
    /// 1 (center) or 10 (corners, center and flips).
    pub crops: usize,
    /// `[T, H, W]` of each evaluated volume.
    pub crop: [usize; 3],
    pub mean: Vec<f64>,
    pub batch_size: usize,
}

impl EvalConfig {
    pub fn for_dataset(data: &Dataset) -> Self {
        let s = &data.spec;
        EvalConfig {
            clips: 1,
            crops: 1,
            crop: [s.frames, s.height, s.width],
            mean: vec![0.0; s.channels],
            batch_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 {
            return Err(config_err!("clips must be >= 1"));
        }
        if !matches!(self.crops, 1 | 10) {
            return Err(config_err!("crops must be 1 or 10, got {}", self.crops));
        }
        if self.batch_size == 0 {
            return Err(config_err!("eval batch size must be >= 1"));
        }
        Ok(())
    }
}

/// `v <- momentum * v + g; p <- p - lr * v`, elementwise over aligned lists.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[&Tensor], velocity: &mut [Tensor], lr: f64, momentum: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(contract_err!(
            "sgd lists differ: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        ));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(contract_err!(
                "sgd shape mismatch: {:?} / {:?} / {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            ));
        }
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

pub const SMOOTHING_WINDOW: usize = 5;
pub const PLATEAU_THRESHOLD: f64 = 1e-3;

/// Divides the learning rate when the smoothed validation loss stops improving.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    history: Vec<f64>,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauSchedule {
            lr,
            factor,
            patience,
            history: Vec::new(),
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn smoothed(&self) -> f64 {
        let tail = &self.history[self.history.len().saturating_sub(SMOOTHING_WINDOW)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    /// Records one validation loss; returns true when it triggered a decay.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.history.push(loss);
        let s = self.smoothed();
        if s < self.best - PLATEAU_THRESHOLD {
            self.best = s;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr /= self.factor;
            self.stale = 0;
            return true;
        }
        false
    }
}

/// Average consensus of per-segment logits.
pub fn tsn_consensus(graph: &mut Graph, segment_logits: &[NodeId]) -> Result<NodeId> {
    if segment_logits.is_empty() {
        return Err(contract_err!("TSN consensus over an empty segment list"));
    }
    graph.mean_of(segment_logits)
}

/// Runs the network on every segment and averages the pre-softmax scores.
pub fn tsn_forward(model: &Model, s: &mut Session<'_>, segments: &[NodeId]) -> Result<NodeId> {
    if segments.is_empty() {
        return Err(contract_err!("TSN forward over an empty segment list"));
    }
    let shape = s.graph.value(segments[0]).shape().to_vec();
    let mut logits = Vec::with_capacity(segments.len());
    for &x in segments {
        if s.graph.value(x).shape() != shape {
            return Err(contract_err!("TSN segments differ in shape"));
        }
        logits.push(model.net.forward(s, x)?);
    }
    tsn_consensus(s.graph, &logits)
}

/// Start frame of each segment's sub-clip: the temporal extent is split into
/// `segments` equal spans and one start is drawn uniformly inside each span
/// (or its center when `rng` is `None`).
pub fn segment_starts<R: Rng + ?Sized>(frames: usize, clip: usize, segments: usize, rng: Option<&mut R>) -> Result<Vec<usize>> {
    if segments == 0 {
        return Err(contract_err!("segments must be >= 1"));
    }
    if clip == 0 || clip > frames {
        return Err(config_err!("sub-clip of {clip} frames does not fit {frames}"));
    }
    let last = frames - clip;
    let spans: Vec<(usize, usize)> = (0..segments)
        .map(|k| {
            let lo = (k * frames / segments).min(last);
            let hi = ((k + 1) * frames / segments).saturating_sub(1).clamp(lo, last);
            (lo, hi)
        })
        .collect();
    Ok(match rng {
        Some(r) => spans.iter().map(|&(lo, hi)| r.random_range(lo..=hi)).collect(),
        None => spans.iter().map(|&(lo, hi)| (lo + hi) / 2).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iter: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
    pub lr: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let split = match self.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        write!(
            f,
            "iter={} split={split} loss={:.6} top1={:.4} lr={}",
            self.iter, self.loss, self.top1, self.lr
        )
    }
}

/// Optimizer state that survives across `train` calls and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub velocities: Vec<Tensor>,
    pub schedule: PlateauSchedule,
}

impl TrainState {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        TrainState {
            iteration: 0,
            velocities: model.store.params().iter().map(|p| Tensor::zeros_like(&p.value)).collect(),
            schedule: PlateauSchedule::new(cfg.lr, cfg.lr_decay_factor, cfg.decay_patience),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    /// Mean training loss over the last [`SMOOTHING_WINDOW`] iterations.
    pub final_loss: f64,
    pub stopped_early: bool,
}

fn seed_for(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

const ORDER: u64 = 1;
const AUGMENT: u64 = 2;
const DROPOUT: u64 = 3;

/// Sample indices of iteration `it`: consecutive slices of per-epoch shuffles.
fn batch_indices(n: usize, batch: usize, seed: u64, it: usize) -> Vec<usize> {
    let start = it * batch;
    let mut out = Vec::with_capacity(batch);
    let mut epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for pos in start..start + batch {
        let e = pos / n;
        if e != epoch {
            epoch = e;
            perm = (0..n).collect();
            perm.shuffle(&mut seed_for(seed, ORDER, e as u64));
        }
        out.push(perm[pos % n]);
    }
    out
}

/// Per-segment input batches and labels for one iteration.
fn training_batch(data: &Dataset, indices: &[usize], cfg: &TrainConfig, it: usize) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let aug = cfg.augment.clone().unwrap_or_else(|| AugmentConfig::identity(&data.spec));
    let mut rng = seed_for(cfg.seed, AUGMENT, it as u64);
    let mut per_segment: Vec<Vec<Tensor>> = vec![Vec::with_capacity(indices.len()); cfg.segments];
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let sample = &data.samples[i];
        let flip = aug.flip_prob > 0.0 && rng.random::<f64>() < aug.flip_prob;
        let frames = sample.volume.shape()[1];
        let starts = if cfg.segments == 1 {
            vec![0]
        } else {
            segment_starts(frames, aug.crop[0], cfg.segments, Some(&mut rng))?
        };
        for (k, &t0) in starts.iter().enumerate() {
            let (h, w) = (sample.volume.shape()[2], sample.volume.shape()[3]);
            let src = if cfg.segments == 1 {
                sample.volume.clone()
            } else {
                crop(&sample.volume, [t0, 0, 0], [aug.crop[0], h, w])?
            };
            let seg_cfg = AugmentConfig {
                flip_prob: 0.0,
                ..aug.clone()
            };
            let mut v = augment(&src, true, &seg_cfg, &mut rng)?.volume;
            if flip {
                v = flip_horizontal(&v)?;
            }
            per_segment[k].push(v);
        }
        labels.push(if flip {
            data.spec.flipped_label(sample.label)
        } else {
            sample.label
        });
    }
    let inputs = per_segment.iter().map(|v| Tensor::stack(v)).collect::<Result<Vec<_>>>()?;
    Ok((inputs, labels))
}

fn top1_of(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l)
        .count();
    hits as f64 / labels.len() as f64
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// One forward/backward/update step; returns `(loss, batch top-1)`.
pub fn train_step(
    model: &mut Model,
    state: &mut TrainState,
    inputs: &[Tensor],
    labels: &[usize],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let dropout_seed = seed_for(cfg.seed, DROPOUT, state.iteration as u64).random();
    let ids: Vec<_> = model.store.ids().collect();
    let (loss, top1, grads) = {
        let Model { net, store, .. } = model;
        let mut net = net.clone();
        net.dropout = cfg.dropout_p;
        let mut s = Session::new(&mut g, store, Mode::Train, dropout_seed);
        let xs: Vec<NodeId> = inputs.iter().map(|x| s.graph.input(x.clone())).collect();
        let mut logits = Vec::with_capacity(xs.len());
        for &x in &xs {
            logits.push(net.forward(&mut s, x)?);
        }
        let scores = tsn_consensus(s.graph, &logits)?;
        let loss = s.graph.softmax_cross_entropy(scores, labels)?;
        s.graph.backward(loss)?;
        let value = s.graph.value(loss).item();
        let top1 = top1_of(s.graph.value(scores), labels);
        let grads: Vec<Option<Tensor>> = ids.iter().map(|&id| s.param_grad(id).cloned()).collect();
        (value, top1, grads)
    };
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("iteration {}: loss is {loss}", state.iteration)));
    }
    // parameters the graph never touched get a zero gradient
    let grads: Vec<Tensor> = grads
        .into_iter()
        .zip(model.store.params())
        .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros_like(&p.value)))
        .collect();
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    let mut params: Vec<&mut Tensor> = model.store.params_mut().iter_mut().map(|p| &mut p.value).collect();
    sgd_step(&mut params, &grad_refs, &mut state.velocities, lr, cfg.momentum)?;
    state.iteration += 1;
    Ok((loss, top1))
}

/// Mean cross-entropy and top-1 of a dataset in eval mode (full clips, center segments).
pub fn validation_loss(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let aug = cfg.augment.clone().unwrap_or_else(|| AugmentConfig::identity(&data.spec));
    let (mut loss_sum, mut hits) = (0.0, 0.0);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(32) {
        let mut per_segment: Vec<Vec<Tensor>> = vec![Vec::new(); cfg.segments];
        let mut labels = Vec::new();
        for &i in chunk {
            let v = &data.samples[i].volume;
            let starts = if cfg.segments == 1 {
                vec![None]
            } else {
                segment_starts::<ChaCha8Rng>(v.shape()[1], aug.crop[0], cfg.segments, None)?
                    .into_iter()
                    .map(Some)
                    .collect()
            };
            for (k, t0) in starts.into_iter().enumerate() {
                let src = match t0 {
                    Some(t0) => crop(v, [t0, 0, 0], [aug.crop[0], v.shape()[2], v.shape()[3]])?,
                    None => v.clone(),
                };
                per_segment[k].push(augment(&src, false, &aug, &mut ChaCha8Rng::seed_from_u64(0))?.volume);
            }
            labels.push(data.samples[i].label);
        }
        let mut g = Graph::new();
        let Model { net, store, .. } = model;
        let mut s = Session::new(&mut g, store, Mode::Eval, 0);
        let xs: Vec<NodeId> = per_segment
            .iter()
            .map(|v| Ok(s.graph.input(Tensor::stack(v)?)))
            .collect::<Result<_>>()?;
        let mut logits = Vec::new();
        for &x in &xs {
            logits.push(net.forward(&mut s, x)?);
        }
        let scores = tsn_consensus(s.graph, &logits)?;
        let loss = s.graph.softmax_cross_entropy(scores, &labels)?;
        loss_sum += s.graph.value(loss).item() * labels.len() as f64;
        hits += top1_of(s.graph.value(scores), &labels) * labels.len() as f64;
    }
    Ok((loss_sum / data.len() as f64, hits / data.len() as f64))
}

/// Trains from `state` until `cfg.max_iters` total iterations (or early stop).
pub fn train(
    model: &mut Model,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(config_err!("training set is empty"));
    }
    if data.spec.classes != model.classes() {
        return Err(config_err!(
            "dataset has {} classes but the network has {}",
            data.spec.classes,
            model.classes()
        ));
    }
    if state.velocities.len() != model.store.params().len() {
        return Err(contract_err!("optimizer state does not match the model"));
    }
    let mut log = Vec::new();
    let mut recent: Vec<f64> = Vec::new();
    let mut stopped_early = false;
    while state.iteration < cfg.max_iters {
        let it = state.iteration;
        let indices = batch_indices(data.len(), cfg.batch_size, cfg.seed, it);
        let (inputs, labels) = training_batch(data, &indices, cfg, it)?;
        let lr = state.schedule.lr;
        let (loss, top1) = train_step(model, state, &inputs, &labels, lr, cfg)?;
        let rec = LogRecord {
            iter: state.iteration,
            split: Split::Train,
            loss,
            top1,
            lr,
        };
        on_record(&rec);
        log.push(rec);
        recent.push(loss);
        if recent.len() > SMOOTHING_WINDOW {
            recent.remove(0);
        }
        if state.iteration % cfg.eval_every == 0 {
            let (vloss, vtop1) = match val {
                Some(v) => validation_loss(model, v, cfg)?,
                None => (recent.iter().sum::<f64>() / recent.len() as f64, top1),
            };
            if !vloss.is_finite() {
                return Err(Error::Diverged(format!(
                    "iteration {}: validation loss is {vloss}",
                    state.iteration
                )));
            }
            state.schedule.observe(vloss);
            let rec = LogRecord {
                iter: state.iteration,
                split: Split::Val,
                loss: vloss,
                top1: vtop1,
                lr: state.schedule.lr,
            };
            on_record(&rec);
            log.push(rec);
        }
        if let Some(target) = cfg.stop_below {
            if recent.len() == SMOOTHING_WINDOW && recent.iter().sum::<f64>() / (SMOOTHING_WINDOW as f64) < target {
                stopped_early = true;
                break;
            }
        }
    }
    let final_loss = if recent.is_empty() {
        f64::NAN
    } else {
        recent.iter().sum::<f64>() / recent.len() as f64
    };
    Ok(TrainOutcome {
        log,
        final_loss,
        stopped_early,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

/// Anything that maps a batch `[N, C, T, H, W]` to class scores `[N, K]`.
pub trait Classifier {
    fn classes(&self) -> usize;
    fn scores(&mut self, batch: &Tensor) -> Result<Tensor>;
}

impl Classifier for Model {
    fn classes(&self) -> usize {
        Model::classes(self)
    }

    fn scores(&mut self, batch: &Tensor) -> Result<Tensor> {
        self.logits(batch, Mode::Eval, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    /// Mean of top-1 and top-5 accuracy.
    pub avg: f64,
    pub videos: usize,
    /// Volumes passed through the network.
    pub volumes: usize,
}

/// Start frames of `clips` uniformly spaced clips of length `clip`.
pub fn clip_starts(frames: usize, clip: usize, clips: usize) -> Result<Vec<usize>> {
    if clip == 0 || clip > frames {
        return Err(config_err!("clip of {clip} frames is longer than the {frames}-frame video"));
    }
    let last = frames - clip;
    Ok(if clips == 1 {
        vec![last / 2]
    } else {
        (0..clips).map(|i| (i * last + (clips - 1) / 2) / (clips - 1)).collect()
    })
}

/// Volumes for one video in evaluation order, each tagged with whether it is flipped.
pub fn eval_volumes(video: &Tensor, cfg: &EvalConfig) -> Result<Vec<(Tensor, bool)>> {
    let [_, t, h, w] = match *video.shape() {
        [c, t, h, w] => [c, t, h, w],
        _ => return Err(crate::error::shape_err!("expected a [C, T, H, W] video, got {:?}", video.shape())),
    };
    let [ct, ch, cw] = cfg.crop;
    if ch > h || cw > w {
        return Err(config_err!("crop {:?} larger than frame {h}x{w}", cfg.crop));
    }
    let mut out = Vec::with_capacity(cfg.clips * cfg.crops);
    for t0 in clip_starts(t, ct, cfg.clips)? {
        let clip = crop(video, [t0, 0, 0], [ct, h, w])?;
        if cfg.crops == 1 {
            out.push((crop(&clip, [0, (h - ch) / 2, (w - cw) / 2], [ct, ch, cw])?, false));
        } else {
            for (i, v) in ten_crop(&clip, [ch, cw])?.into_iter().enumerate() {
                out.push((v, i >= 5));
            }
        }
    }
    let plane = ct * ch * cw;
    for (v, _) in &mut out {
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x -= cfg.mean[i / plane];
        }
    }
    Ok(out)
}

/// Per-video score = mean softmax over clips x crops; flipped crops are
/// mapped back through the dataset's flip permutation.
pub fn evaluate<C: Classifier>(net: &mut C, data: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if cfg.mean.len() != data.spec.channels {
        return Err(config_err!(
            "mean has {} entries for {} channels",
            cfg.mean.len(),
            data.spec.channels
        ));
    }
    let k = net.classes();
    let perm = data.spec.flip_permutation();
    let topk = k.min(5);
    let (mut top1, mut top5, mut volumes) = (0usize, 0usize, 0usize);
    for sample in &data.samples {
        let vols = eval_volumes(&sample.volume, cfg)?;
        let mut acc = vec![0.0; k];
        for chunk in vols.chunks(cfg.batch_size) {
            let batch = Tensor::stack(&chunk.iter().map(|(v, _)| v).collect::<Vec<_>>())?;
            let probs = softmax(&net.scores(&batch)?)?;
            for (row, (_, flipped)) in probs.data().chunks_exact(k).zip(chunk) {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += if *flipped { row[perm[c]] } else { row[c] };
                }
            }
            volumes += chunk.len();
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| acc[b].total_cmp(&acc[a]).then(a.cmp(&b)));
        top1 += usize::from(order[0] == sample.label);
        top5 += usize::from(order[..topk].contains(&sample.label));
    }
    let n = data.len() as f64;
    let (t1, t5) = (top1 as f64 / n, top5 as f64 / n);
    Ok(EvalReport {
        top1: t1,
        top5: t5,
        avg: (t1 + t5) / 2.0,
        videos: data.len(),
        volumes,
    })
}
