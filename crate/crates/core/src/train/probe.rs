use crate::augment::{motion_branch_augment, ColorJitter};
use crate::error::Result;
use crate::image::FloatImage;
use crate::losses::{LossAccumulator, LossReport, Sign};
use crate::nets::{images_to_tensor, prefix, Checkpoint, Nets, ParamStore};

use super::{assert_frozen, stream_rng, Optimizers, Session, StageConfig, StageId, StageRunner, TrainData};

/// Regresses keypoints and factor readouts from (mildly augmented) frames.
pub(crate) struct ProbeRunner<'a> {
    cfg: &'a StageConfig,
    data: &'a TrainData,
    nets: Nets,
    jitter: ColorJitter,
    opt: Optimizers,
}

impl<'a> ProbeRunner<'a> {
    pub fn new(cfg: &'a StageConfig, data: &'a TrainData, sess: &mut Session) -> Result<Self> {
        let trainable = StageId::Probe.trainable();
        let nets = sess.nets(trainable)?;
        Ok(Self {
            cfg,
            data,
            nets,
            jitter: cfg.augment()?.clone(),
            opt: Optimizers::new(&sess.store, cfg, trainable)?,
        })
    }
}

impl StageRunner for ProbeRunner<'_> {
    fn step(&mut self, store: &mut ParamStore, step: u64, total: u64) -> Result<LossReport> {
        let cfg = self.cfg;
        let ids = self.data.batch(cfg.seed, "probe", step, cfg.batch_size);
        let mut rng = stream_rng(cfg.seed, "probe/augment", step);
        let imgs: Vec<FloatImage> = ids
            .iter()
            .map(|&i| motion_branch_augment(&self.data.float_frame(i), &self.jitter, &mut rng))
            .collect();
        let dtype = store.dtype();
        let x = images_to_tensor(&imgs.iter().collect::<Vec<_>>(), dtype)?;
        let out = self.nets.probe_extract(&x)?;
        let kp = (&out.keypoints - self.data.keypoint_targets(&ids, dtype)?)?.sqr()?.mean_all()?;
        let ro = (&out.readout - self.data.readout_targets(&ids, dtype)?)?.sqr()?.mean_all()?;

        let mut acc = LossAccumulator::new();
        acc.add("keypoints", cfg.weight("keypoints"), &kp, Sign::NonNegative)?;
        acc.add("readout", cfg.weight("readout"), &ro, Sign::NonNegative)?;
        let (loss, report) = acc.finish()?;
        if let Some(loss) = loss {
            let grads = loss.backward()?;
            assert_frozen(store, &grads, &[prefix::PROBE])?;
            self.opt
                .step(store, &grads, cfg, cfg.lr_scale(step, total), &[prefix::PROBE])?;
        }
        Ok(report)
    }

    fn export_state(&self, ckpt: &mut Checkpoint) -> Result<()> {
        self.opt.export(ckpt)
    }

    fn import_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.opt.import(ckpt)
    }
}
