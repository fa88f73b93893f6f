//! The three stage-2 heads. The motion encoder is frozen, so its codes of the
//! clean training frames are computed once per run.

use candle_core::{Device, Tensor};
use rand::Rng;

use crate::augment::{build_av_pairs, composite_eyes};
use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::losses::{eye_contrastive_loss, infonce, pose_loss, LossAccumulator, LossReport, Sign};
use crate::nets::{images_to_tensor, Checkpoint, Nets, ParamStore};
use crate::synthworld::{readout_slice, MotionFactor};

use super::{
    assert_frozen, encode_in_chunks, stream_rng, Optimizers, Session, StageConfig, StageId, StageRunner,
    TrainData,
};

const CHUNK: usize = 128;

/// Motion codes of every frame, `[N, mot_dim]`.
pub(crate) fn motion_cache(nets: &Nets, data: &TrainData, dtype: candle_core::DType) -> Result<Tensor> {
    let all: Vec<usize> = (0..data.len()).collect();
    encode_in_chunks(&all, CHUNK, |c| nets.motion_encode(&data.images(c, dtype)?))
}

pub(crate) fn select(t: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
    Ok(t.contiguous()?.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?, 0)?)
}

fn train_step(
    store: &ParamStore,
    opt: &mut Optimizers,
    cfg: &StageConfig,
    acc: LossAccumulator,
    step: u64,
    total: u64,
) -> Result<LossReport> {
    let (loss, report) = acc.finish()?;
    if let Some(loss) = loss {
        let grads = loss.backward()?;
        let trainable = cfg.stage.trainable();
        assert_frozen(store, &grads, trainable)?;
        opt.step(store, &grads, cfg, cfg.lr_scale(step, total), trainable)?;
    }
    Ok(report)
}

/// Lip head and audio encoder, contrastive in both directions.
pub(crate) struct LipRunner<'a> {
    cfg: &'a StageConfig,
    data: &'a TrainData,
    nets: Nets,
    f_mot: Tensor,
    opt: Optimizers,
}

impl<'a> LipRunner<'a> {
    pub fn new(cfg: &'a StageConfig, data: &'a TrainData, sess: &mut Session) -> Result<Self> {
        let nets = sess.nets(StageId::Lip.trainable())?;
        Ok(Self {
            f_mot: motion_cache(&nets, data, sess.store.dtype())?,
            cfg,
            data,
            nets,
            opt: Optimizers::new(&sess.store, cfg, StageId::Lip.trainable())?,
        })
    }
}

impl StageRunner for LipRunner<'_> {
    fn step(&mut self, store: &mut ParamStore, step: u64, total: u64) -> Result<LossReport> {
        let cfg = self.cfg;
        let c = cfg.contrastive()?;
        let dtype = store.dtype();
        let ids = self.data.batch(cfg.seed, "2-lip", step, cfg.batch_size);
        let mut rng = stream_rng(cfg.seed, "2-lip/negatives", step);
        let mut neg = Vec::with_capacity(ids.len() * c.negatives);
        for &i in &ids {
            let (ci, t) = self.data.locate(i);
            let pairs = build_av_pairs(&self.data.clips[ci], t, c.negatives, c.min_offset, &mut rng)?;
            neg.extend(pairs.negatives.iter().map(|&u| self.data.flat_index(ci, u)));
        }
        let (b, k) = (ids.len(), c.negatives);
        let lip = self.nets.lip_head(&select(&self.f_mot, &ids)?)?;
        let lip_neg = self.nets.lip_head(&select(&self.f_mot, &neg)?)?;
        let d = lip.dim(1)?;
        let lip_neg = lip_neg.reshape((b, k, d))?;
        let aud = self.nets.audio_encode(&self.data.audio(&ids, dtype)?)?;
        let aud_neg = self
            .nets
            .audio_encode(&self.data.audio(&neg, dtype)?)?
            .reshape((b, k, d))?;

        let mut acc = LossAccumulator::new();
        acc.add("audio_to_video", cfg.weight("audio_to_video"), &infonce(&aud, &lip, &lip_neg)?, Sign::NonNegative)?;
        acc.add("video_to_audio", cfg.weight("video_to_audio"), &infonce(&lip, &aud, &aud_neg)?, Sign::NonNegative)?;
        train_step(store, &mut self.opt, cfg, acc, step, total)
    }

    fn export_state(&self, ckpt: &mut Checkpoint) -> Result<()> {
        self.opt.export(ckpt)
    }

    fn import_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.opt.import(ckpt)
    }
}

/// A frame of a different clip than flat frame `i`.
pub(crate) fn other_clip_frame(data: &TrainData, i: usize, rng: &mut impl Rng) -> usize {
    let (c, _) = data.locate(i);
    if data.clips.len() == 1 {
        return rng.random_range(0..data.len());
    }
    loop {
        let j = rng.random_range(0..data.len());
        if data.locate(j).0 != c {
            return j;
        }
    }
}

/// Draws a composited triplet for eye donor `i`, retrying the base frame when
/// the compositing signals a skip. Returns `(base, anchor)`.
pub(crate) fn eye_triplet_for(
    data: &TrainData,
    i: usize,
    rng: &mut impl Rng,
) -> Result<Option<(usize, FloatImage)>> {
    let (c1, t1) = data.locate(i);
    let img1 = data.float_frame(i);
    for _ in 0..8 {
        let j = other_clip_frame(data, i, rng);
        let (c2, t2) = data.locate(j);
        let img2 = data.float_frame(j);
        let trip = composite_eyes(
            (&img1, &data.clips[c1].factors[t1]),
            (&img2, &data.clips[c2].factors[t2]),
        )?;
        if let Some(trip) = trip {
            return Ok(Some((j, trip.anchor)));
        }
    }
    Ok(None)
}

/// Eye head on composited anchors: `(v1, anchor)` positive, `(v2, anchor)` negative.
pub(crate) struct EyeRunner<'a> {
    cfg: &'a StageConfig,
    data: &'a TrainData,
    nets: Nets,
    f_mot: Tensor,
    opt: Optimizers,
}

impl<'a> EyeRunner<'a> {
    pub fn new(cfg: &'a StageConfig, data: &'a TrainData, sess: &mut Session) -> Result<Self> {
        let nets = sess.nets(StageId::Eye.trainable())?;
        Ok(Self {
            f_mot: motion_cache(&nets, data, sess.store.dtype())?,
            cfg,
            data,
            nets,
            opt: Optimizers::new(&sess.store, cfg, StageId::Eye.trainable())?,
        })
    }
}

impl StageRunner for EyeRunner<'_> {
    fn step(&mut self, store: &mut ParamStore, step: u64, total: u64) -> Result<LossReport> {
        let cfg = self.cfg;
        let dtype = store.dtype();
        let ids = self.data.batch(cfg.seed, "2-eye", step, cfg.batch_size);
        let mut rng = stream_rng(cfg.seed, "2-eye/pairs", step);
        let (mut v1, mut v2, mut anchors) = (Vec::new(), Vec::new(), Vec::new());
        for &i in &ids {
            if let Some((j, anchor)) = eye_triplet_for(self.data, i, &mut rng)? {
                v1.push(i);
                v2.push(j);
                anchors.push(anchor);
            }
        }
        if anchors.is_empty() {
            return Err(Error::Data("no usable eye triplet in batch".into()));
        }
        let f_a = self
            .nets
            .motion_encode(&images_to_tensor(&anchors.iter().collect::<Vec<_>>(), dtype)?)?;
        let e1 = self.nets.eye_head(&select(&self.f_mot, &v1)?)?;
        let e2 = self.nets.eye_head(&select(&self.f_mot, &v2)?)?;
        let ea = self.nets.eye_head(&f_a)?;
        let mut acc = LossAccumulator::new();
        acc.add("eye", cfg.weight("eye"), &eye_contrastive_loss(&e1, &e2, &ea)?, Sign::NonNegative)?;
        train_step(store, &mut self.opt, cfg, acc, step, total)
    }

    fn export_state(&self, ckpt: &mut Checkpoint) -> Result<()> {
        self.opt.export(ckpt)
    }

    fn import_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.opt.import(ckpt)
    }
}

/// Pose head regressing the probe's pose readout of each frame.
pub(crate) struct PoseRunner<'a> {
    cfg: &'a StageConfig,
    data: &'a TrainData,
    nets: Nets,
    f_mot: Tensor,
    labels: Tensor,
    opt: Optimizers,
}

impl<'a> PoseRunner<'a> {
    pub fn new(cfg: &'a StageConfig, data: &'a TrainData, sess: &mut Session) -> Result<Self> {
        let nets = sess.nets(StageId::Pose.trainable())?;
        let dtype = sess.store.dtype();
        let all: Vec<usize> = (0..data.len()).collect();
        let r = readout_slice(MotionFactor::Pose);
        let labels = encode_in_chunks(&all, CHUNK, |c| {
            Ok(nets
                .probe_extract(&data.images(c, dtype)?)?
                .readout
                .narrow(1, r.start, r.len())?)
        })?;
        Ok(Self {
            f_mot: motion_cache(&nets, data, dtype)?,
            labels,
            cfg,
            data,
            nets,
            opt: Optimizers::new(&sess.store, cfg, StageId::Pose.trainable())?,
        })
    }
}

impl StageRunner for PoseRunner<'_> {
    fn step(&mut self, store: &mut ParamStore, step: u64, total: u64) -> Result<LossReport> {
        let cfg = self.cfg;
        let ids = self.data.batch(cfg.seed, "2-pose", step, cfg.batch_size);
        let pred = self.nets.pose_head(&select(&self.f_mot, &ids)?)?;
        let mut acc = LossAccumulator::new();
        acc.add("pose", cfg.weight("pose"), &pose_loss(&pred, &select(&self.labels, &ids)?)?, Sign::NonNegative)?;
        train_step(store, &mut self.opt, cfg, acc, step, total)
    }

    fn export_state(&self, ckpt: &mut Checkpoint) -> Result<()> {
        self.opt.export(ckpt)
    }

    fn import_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.opt.import(ckpt)
    }
}
