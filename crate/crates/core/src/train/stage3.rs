//! Expression encoder and final generator. Every other network is frozen, so
//! their codes of the training frames are computed once per run; expression
//! windows draw from a fixed number of augmented copies per frame.

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::augment::{reflect_index, window_sample, WindowAugment};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_losses, bank_correlation, consistency_loss, decorrelation_loss, window_average,
    LossAccumulator, LossReport, MemoryBank, PerceptualPyramid, Sign,
};
use crate::nets::{images_to_tensor, prefix, Checkpoint, Nets, ParamStore};

use super::stage1::appearance_partner;
use super::stage2::{motion_cache, select};
use super::{
    assert_frozen, encode_in_chunks, stream_rng, Optimizers, Session, StageConfig, StageId, StageRunner,
    TrainData,
};

const CHUNK: usize = 128;

/// Motion codes of `variants` independently augmented copies of every frame,
/// `[variants · N, mot_dim]` with copy `v` of frame `i` at row `v · N + i`.
pub fn window_feature_cache(
    nets: &Nets,
    data: &TrainData,
    aug: &WindowAugment,
    variants: usize,
    seed: u64,
    dtype: DType,
) -> Result<Tensor> {
    let n = data.len();
    let rows: Vec<usize> = (0..variants * n).collect();
    encode_in_chunks(&rows, CHUNK, |chunk| {
        let imgs = chunk
            .iter()
            .map(|&r| {
                let (c, t) = data.locate(r % n);
                let mut rng = stream_rng(seed, "3/window", r as u64);
                Ok(window_sample(&data.clips[c], t, 1, aug, &mut rng)?.remove(0).image)
            })
            .collect::<Result<Vec<_>>>()?;
        nets.motion_encode(&images_to_tensor(&imgs.iter().collect::<Vec<_>>(), dtype)?)
    })
}

pub(crate) struct Stage3Runner<'a> {
    cfg: &'a StageConfig,
    data: &'a TrainData,
    sess_nets: Nets,
    exp_frozen: bool,
    f_app: Tensor,
    f_aud: Tensor,
    f_eye: Tensor,
    f_pose: Tensor,
    window: Tensor,
    perceptual: PerceptualPyramid,
    bank_e: MemoryBank,
    bank_a: MemoryBank,
    opt: Optimizers,
}

fn trainable(exp_frozen: bool) -> &'static [&'static str] {
    if exp_frozen {
        &[prefix::G, prefix::DISC]
    } else {
        StageId::Three.trainable()
    }
}

impl<'a> Stage3Runner<'a> {
    pub fn new(cfg: &'a StageConfig, data: &'a TrainData, sess: &mut Session) -> Result<Self> {
        let e = cfg.expression()?;
        let dtype = sess.store.dtype();
        let nets = sess.nets(StageId::Three.trainable())?;
        let all: Vec<usize> = (0..data.len()).collect();
        let f_mot = motion_cache(&nets, data, dtype)?;
        let f_app = encode_in_chunks(&all, CHUNK, |c| nets.appearance_encode(&data.images(c, dtype)?))?;
        let f_aud = encode_in_chunks(&all, CHUNK, |c| nets.audio_encode(&data.audio(c, dtype)?))?;
        let f_eye = nets.eye_head(&f_mot)?.detach();
        let f_pose = nets.pose_head(&f_mot)?.detach();
        let window = window_feature_cache(&nets, data, &e.window_augment, e.window_variants, cfg.seed, dtype)?;
        let cfgn = &sess.net_cfg;
        Ok(Self {
            cfg,
            data,
            exp_frozen: false,
            f_app,
            f_aud,
            f_eye,
            f_pose,
            window,
            perceptual: PerceptualPyramid::new(e.perceptual_seed, dtype)?,
            bank_e: MemoryBank::new(e.bank_capacity, cfgn.exp_dim)?,
            bank_a: MemoryBank::new(e.bank_capacity, cfgn.lip_dim)?,
            opt: Optimizers::new(&sess.store, cfg, StageId::Three.trainable())?,
            sess_nets: nets,
        })
    }

    fn freeze_step(&self, total: u64) -> u64 {
        let f = self.cfg.expression().map(|e| e.freeze_fraction).unwrap_or(1.0);
        (f * total as f64).floor() as u64
    }

    /// Rows of the window cache for the window centered on each frame.
    fn window_rows(&self, ids: &[usize], k_win: usize, variants: usize, rng: &mut impl Rng) -> Vec<usize> {
        let n = self.data.len();
        let half = (k_win / 2) as isize;
        let mut rows = Vec::with_capacity(ids.len() * k_win);
        for &i in ids {
            let (c, t) = self.data.locate(i);
            let len = self.data.clips[c].len();
            for o in 0..k_win as isize {
                let u = reflect_index(t as isize + o - half, len);
                let v = rng.random_range(0..variants);
                rows.push(v * n + self.data.flat_index(c, u));
            }
        }
        rows
    }
}

fn bank_tensor(bank: &MemoryBank) -> Result<Tensor> {
    Ok(match bank.to_tensor()? {
        Some(t) => t,
        None => Tensor::zeros((0, bank.dim()), DType::F64, &candle_core::Device::Cpu)?,
    })
}

fn load_bank(ckpt: &Checkpoint, name: &str, capacity: usize, dim: usize) -> Result<MemoryBank> {
    let pushed = ckpt
        .meta
        .get(&format!("bank/{name}/pushed"))
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint(format!("missing bank/{name}/pushed")))?;
    let rows = ckpt
        .tensor(&format!("bank/{name}"), &candle_core::Device::Cpu)?
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?;
    MemoryBank::restore(capacity, dim, rows, pushed)
}

impl StageRunner for Stage3Runner<'_> {
    fn step(&mut self, store: &mut ParamStore, step: u64, total: u64) -> Result<LossReport> {
        let cfg = self.cfg;
        let e = cfg.expression()?;
        let dtype = store.dtype();

        let frozen_now = step >= self.freeze_step(total);
        if frozen_now != self.exp_frozen {
            self.exp_frozen = frozen_now;
            self.sess_nets = Nets::build(store, &self.sess_nets.cfg.clone(), |p| trainable(frozen_now).contains(&p))?;
        }
        let nets = &self.sess_nets;

        let ids = self.data.batch(cfg.seed, "3", step, cfg.batch_size);
        let mut rng = stream_rng(cfg.seed, "3/sample", step);
        let app_ids: Vec<usize> = ids
            .iter()
            .map(|&i| appearance_partner(self.data, i, &mut rng))
            .collect();
        let rows = self.window_rows(&ids, e.k_win, e.window_variants, &mut rng);
        let b = ids.len();
        let exp = nets.exp_head(&select(&self.window, &rows)?)?;
        let f_exp = window_average(&exp.reshape((b, e.k_win, exp.dim(1)?))?)?;
        let f_aud = select(&self.f_aud, &ids)?;
        let out = nets.generate(
            &select(&self.f_app, &app_ids)?,
            &f_aud,
            &select(&self.f_eye, &ids)?,
            &select(&self.f_pose, &ids)?,
            &f_exp,
        )?;
        let gt = self.data.images(&ids, dtype)?;

        let vgg = self.perceptual.loss(&out, &gt)?;
        let adv = adversarial_losses(&nets.disc, &out, &gt)?;
        let con = consistency_loss(nets, &out, &gt, &self.data.audio(&ids, dtype)?)?;
        let (decor, zero_var) = match bank_correlation(Some(&f_exp), &self.bank_e, Some(&f_aud), &self.bank_a) {
            Ok(c) => (decorrelation_loss(&c)?.to_dtype(dtype)?, c.zero_variance_columns),
            Err(Error::InsufficientSamples { .. }) => (Tensor::new(0f32, &candle_core::Device::Cpu)?.to_dtype(dtype)?, 0),
            Err(err) => return Err(err),
        };

        let mut acc = LossAccumulator::new();
        acc.add("vgg", cfg.weight("vgg"), &vgg, Sign::NonNegative)?;
        acc.add("adv", cfg.weight("adv"), &adv.gen, Sign::Any)?;
        acc.add("fm", cfg.weight("fm"), &adv.feature_match, Sign::NonNegative)?;
        acc.add("con", cfg.weight("con"), &con.total()?, Sign::NonNegative)?;
        let w_decor = if e.decorrelation && !self.exp_frozen { cfg.weight("decor") } else { 0.0 };
        acc.add("decor", w_decor, &decor, Sign::NonNegative)?;
        acc.add("con_sync", 0.0, &con.sync, Sign::NonNegative)?;
        acc.add("con_gaze", 0.0, &con.gaze, Sign::NonNegative)?;
        acc.add("con_mot", 0.0, &con.motion, Sign::NonNegative)?;
        acc.add("disc", 0.0, &adv.disc, Sign::NonNegative)?;
        acc.add(
            "decor_zero_var",
            0.0,
            &Tensor::new(zero_var as f64, &candle_core::Device::Cpu)?,
            Sign::NonNegative,
        )?;
        let (loss, report) = acc.finish()?;

        let train = trainable(self.exp_frozen);
        let scale = cfg.lr_scale(step, total);
        let grads_d = adv.disc.backward()?;
        assert_frozen(store, &grads_d, train)?;
        if let Some(loss) = loss {
            let grads_g = loss.backward()?;
            assert_frozen(store, &grads_g, train)?;
            let gens: Vec<&str> = train.iter().copied().filter(|p| *p != prefix::DISC).collect();
            self.opt.step(store, &grads_g, cfg, scale, &gens)?;
        }
        self.opt.step(store, &grads_d, cfg, scale, &[prefix::DISC])?;

        self.bank_e.push(&f_exp)?;
        self.bank_a.push(&f_aud)?;
        Ok(report)
    }

    fn export_state(&self, ckpt: &mut Checkpoint) -> Result<()> {
        self.opt.export(ckpt)?;
        for (name, bank) in [("exp", &self.bank_e), ("aud", &self.bank_a)] {
            ckpt.put_tensor(&format!("bank/{name}"), &bank_tensor(bank)?)?;
            ckpt.meta.insert(format!("bank/{name}/pushed"), bank.pushed().into());
        }
        Ok(())
    }

    fn import_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.opt.import(ckpt)?;
        self.bank_e = load_bank(ckpt, "exp", self.bank_e.capacity(), self.bank_e.dim())?;
        self.bank_a = load_bank(ckpt, "aud", self.bank_a.capacity(), self.bank_a.dim())?;
        Ok(())
    }
}
