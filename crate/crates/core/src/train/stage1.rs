use rand::Rng;

use crate::augment::{motion_branch_augment, ColorJitter};
use crate::error::Result;
use crate::image::FloatImage;
use crate::losses::{adversarial_losses, motion_recon_from_outputs, LossAccumulator, LossReport, Sign};
use crate::nets::{images_to_tensor, prefix, Checkpoint, Nets, ParamStore};

use super::{assert_frozen, stream_rng, Optimizers, Session, StageConfig, StageId, StageRunner, TrainData};

/// Self-driving reconstruction: appearance from a clean frame of the clip,
/// motion from an augmented copy of the target frame.
pub(crate) struct Stage1Runner<'a> {
    cfg: &'a StageConfig,
    data: &'a TrainData,
    nets: Nets,
    jitter: ColorJitter,
    opt: Optimizers,
}

impl<'a> Stage1Runner<'a> {
    pub fn new(cfg: &'a StageConfig, data: &'a TrainData, sess: &mut Session) -> Result<Self> {
        let trainable = StageId::One.trainable();
        Ok(Self {
            cfg,
            data,
            nets: sess.nets(trainable)?,
            jitter: cfg.augment()?.clone(),
            opt: Optimizers::new(&sess.store, cfg, trainable)?,
        })
    }
}

/// Another frame of the same clip as flat frame `i`, when the clip has one.
pub(crate) fn appearance_partner(data: &TrainData, i: usize, rng: &mut impl Rng) -> usize {
    let (c, t) = data.locate(i);
    let n = data.clips[c].len();
    if n == 1 {
        return i;
    }
    let mut u = rng.random_range(0..n - 1);
    if u >= t {
        u += 1;
    }
    data.flat_index(c, u)
}

impl StageRunner for Stage1Runner<'_> {
    fn step(&mut self, store: &mut ParamStore, step: u64, total: u64) -> Result<LossReport> {
        let cfg = self.cfg;
        let dtype = store.dtype();
        let ids = self.data.batch(cfg.seed, "1", step, cfg.batch_size);
        let mut rng = stream_rng(cfg.seed, "1/sample", step);
        let app_ids: Vec<usize> = ids
            .iter()
            .map(|&i| appearance_partner(self.data, i, &mut rng))
            .collect();
        let drivers: Vec<FloatImage> = ids
            .iter()
            .map(|&i| motion_branch_augment(&self.data.float_frame(i), &self.jitter, &mut rng))
            .collect();

        let app = self.data.images(&app_ids, dtype)?;
        let gt = self.data.images(&ids, dtype)?;
        let drv = images_to_tensor(&drivers.iter().collect::<Vec<_>>(), dtype)?;
        let out = self.nets.generate0(&self.nets.appearance_encode(&app)?, &self.nets.motion_encode(&drv)?)?;

        let recon = (&out - &gt)?.abs()?.mean_all()?;
        let p_gt = self.nets.probe_extract(&gt)?;
        let mot = motion_recon_from_outputs(&self.nets.probe_extract(&out)?, &p_gt)?;
        let adv = adversarial_losses(&self.nets.disc0, &out, &gt)?;

        let mut acc = LossAccumulator::new();
        acc.add("recon", cfg.weight("recon"), &recon, Sign::NonNegative)?;
        acc.add("adv", cfg.weight("adv"), &adv.gen, Sign::Any)?;
        acc.add("mot", cfg.weight("mot"), &mot, Sign::NonNegative)?;
        acc.add("disc", 0.0, &adv.disc, Sign::NonNegative)?;
        acc.add("fm", 0.0, &adv.feature_match, Sign::NonNegative)?;
        let (loss, report) = acc.finish()?;

        let trainable = StageId::One.trainable();
        let gens = [prefix::E_APP, prefix::E_MOT, prefix::G0];
        let scale = cfg.lr_scale(step, total);
        let grads_d = adv.disc.backward()?;
        assert_frozen(store, &grads_d, trainable)?;
        if let Some(loss) = loss {
            let grads_g = loss.backward()?;
            assert_frozen(store, &grads_g, trainable)?;
            self.opt.step(store, &grads_g, cfg, scale, &gens)?;
        }
        self.opt.step(store, &grads_d, cfg, scale, &[prefix::DISC0])?;
        Ok(report)
    }

    fn export_state(&self, ckpt: &mut Checkpoint) -> Result<()> {
        self.opt.export(ckpt)
    }

    fn import_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.opt.import(ckpt)
    }
}
