//! Every learned function of the pipeline, plus parameter storage, the
//! optimizer and checkpoints.

mod checkpoint;
mod conv;
mod layers;
mod models;
mod params;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::Checkpoint;
pub use conv::{conv2d, upsample2x};
pub use layers::{leaky_relu, sigmoid, Conv, Linear, Mlp};
pub use models::{ConvEncoder, Discriminator, Generator, Probe, ProbeOutput, PROBE_OUT_DIM};
pub use params::{Adam, AdamConfig, Binder, Init, ParamStore};

use crate::augment::AUDIO_WINDOW_DIM;
use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::synthworld::POSE_DIM;

/// Parameter path prefixes, one per network.
pub mod prefix {
    pub const E_APP: &str = "e_app";
    pub const E_MOT: &str = "e_mot";
    pub const G0: &str = "g0";
    pub const DISC0: &str = "disc0";
    pub const E_LIP: &str = "e_lip";
    pub const E_AUD: &str = "e_aud";
    pub const E_EYE: &str = "e_eye";
    pub const E_POSE: &str = "e_pose";
    pub const E_EXP: &str = "e_exp";
    pub const G: &str = "g";
    pub const DISC: &str = "disc";
    pub const PROBE: &str = "probe";

    pub const ALL: [&str; 12] = [
        E_APP, E_MOT, G0, DISC0, E_LIP, E_AUD, E_EYE, E_POSE, E_EXP, G, DISC, PROBE,
    ];
}

/// Architecture hyperparameters. Its hash is stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub image_size: usize,
    pub app_dim: usize,
    pub mot_dim: usize,
    pub lip_dim: usize,
    pub eye_dim: usize,
    pub pose_dim: usize,
    pub exp_dim: usize,
    pub enc_channels: Vec<usize>,
    pub enc_hidden: usize,
    pub head_hidden: usize,
    pub audio_hidden: Vec<usize>,
    pub gen_channels: Vec<usize>,
    pub disc_channels: Vec<usize>,
    pub probe_channels: Vec<usize>,
    pub probe_hidden: usize,
    pub leaky_slope: f64,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            app_dim: 128,
            mot_dim: 64,
            lip_dim: 32,
            eye_dim: 8,
            pose_dim: 4,
            exp_dim: 16,
            enc_channels: vec![16, 32, 64, 64],
            enc_hidden: 256,
            head_hidden: 64,
            audio_hidden: vec![128, 64],
            gen_channels: vec![128, 64, 32, 16, 8],
            disc_channels: vec![16, 32, 64],
            probe_channels: vec![16, 32, 64, 64],
            probe_hidden: 256,
            leaky_slope: 0.2,
            init_seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 8 || !s.is_power_of_two() {
            return Err(Error::Config(format!(
                "image_size must be a power of two >= 8, got {s}"
            )));
        }
        let levels = (s / 4).trailing_zeros() as usize;
        if self.enc_channels.len() < levels || self.probe_channels.len() < levels {
            return Err(Error::Config(format!(
                "encoders need {levels} channel entries for {s}x{s} images"
            )));
        }
        if self.gen_channels.len() < levels + 1 {
            return Err(Error::Config(format!(
                "generator needs {} channel entries for {s}x{s} images",
                levels + 1
            )));
        }
        if self.disc_channels.is_empty() {
            return Err(Error::Config("discriminator needs at least one layer".into()));
        }
        if self.pose_dim != POSE_DIM {
            return Err(Error::Config(format!(
                "pose_dim must equal the world's pose dimension {POSE_DIM}"
            )));
        }
        let dims = [
            self.app_dim,
            self.mot_dim,
            self.lip_dim,
            self.eye_dim,
            self.exp_dim,
            self.enc_hidden,
            self.head_hidden,
            self.probe_hidden,
        ];
        if dims.contains(&0)
            || self.enc_channels.contains(&0)
            || self.gen_channels.contains(&0)
            || self.disc_channels.contains(&0)
            || self.probe_channels.contains(&0)
            || self.audio_hidden.contains(&0)
        {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config("leaky_slope must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Narrow networks for tests and quick checks at any supported size up to 64.
    pub fn small(image_size: usize) -> Self {
        Self {
            image_size,
            app_dim: 16,
            mot_dim: 16,
            lip_dim: 8,
            eye_dim: 4,
            exp_dim: 4,
            enc_channels: vec![4, 8, 8, 8],
            enc_hidden: 16,
            head_hidden: 8,
            audio_hidden: vec![16],
            gen_channels: vec![8, 8, 4, 4, 4],
            disc_channels: vec![4, 8],
            probe_channels: vec![4, 8, 8, 8],
            probe_hidden: 16,
            ..Self::default()
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Input width of the final generator: appearance, lip (audio), eye, pose, expression.
    pub fn g_latent_dim(&self) -> usize {
        self.app_dim + self.lip_dim + self.eye_dim + self.pose_dim + self.exp_dim
    }
}

/// Learned codes of a batch of frames, one row per frame.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub app: Tensor,
    pub mot: Tensor,
    pub lip: Tensor,
    pub aud: Tensor,
    pub eye: Tensor,
    pub pose: Tensor,
    pub exp: Tensor,
}

/// All networks, each bound trainable or frozen.
#[derive(Clone, Debug)]
pub struct Nets {
    pub cfg: NetConfig,
    pub e_app: ConvEncoder,
    pub e_mot: ConvEncoder,
    pub g0: Generator,
    pub disc0: Discriminator,
    pub e_lip: Mlp,
    pub e_aud: Mlp,
    pub e_eye: Mlp,
    pub e_pose: Mlp,
    pub e_exp: Mlp,
    pub g: Generator,
    pub disc: Discriminator,
    pub probe: Probe,
}

impl Nets {
    /// Binds every network; `trainable(prefix)` decides which receive gradients.
    pub fn build(
        store: &mut ParamStore,
        cfg: &NetConfig,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg;
        let head = |store: &mut ParamStore, name: &str, out: usize| {
            Mlp::new(
                &mut store.binder(name, trainable(name)),
                &[c.mot_dim, c.head_hidden, out],
            )
        };
        let mut audio_dims = vec![AUDIO_WINDOW_DIM];
        audio_dims.extend(&c.audio_hidden);
        audio_dims.push(c.lip_dim);
        Ok(Self {
            e_app: ConvEncoder::new(
                &mut store.binder(prefix::E_APP, trainable(prefix::E_APP)),
                c,
                &c.enc_channels,
                c.enc_hidden,
                c.app_dim,
            )?,
            e_mot: ConvEncoder::new(
                &mut store.binder(prefix::E_MOT, trainable(prefix::E_MOT)),
                c,
                &c.enc_channels,
                c.enc_hidden,
                c.mot_dim,
            )?,
            g0: Generator::new(
                &mut store.binder(prefix::G0, trainable(prefix::G0)),
                c,
                c.app_dim + c.mot_dim,
            )?,
            disc0: Discriminator::new(&mut store.binder(prefix::DISC0, trainable(prefix::DISC0)), c)?,
            e_lip: head(store, prefix::E_LIP, c.lip_dim)?,
            e_aud: Mlp::new(&mut store.binder(prefix::E_AUD, trainable(prefix::E_AUD)), &audio_dims)?,
            e_eye: head(store, prefix::E_EYE, c.eye_dim)?,
            e_pose: head(store, prefix::E_POSE, c.pose_dim)?,
            e_exp: head(store, prefix::E_EXP, c.exp_dim)?,
            g: Generator::new(
                &mut store.binder(prefix::G, trainable(prefix::G)),
                c,
                c.g_latent_dim(),
            )?,
            disc: Discriminator::new(&mut store.binder(prefix::DISC, trainable(prefix::DISC)), c)?,
            probe: Probe::new(&mut store.binder(prefix::PROBE, trainable(prefix::PROBE)), c)?,
            cfg: cfg.clone(),
        })
    }

    pub fn appearance_encode(&self, images: &Tensor) -> Result<Tensor> {
        self.e_app.forward(images)
    }

    pub fn motion_encode(&self, images: &Tensor) -> Result<Tensor> {
        self.e_mot.forward(images)
    }

    pub fn lip_head(&self, f_mot: &Tensor) -> Result<Tensor> {
        self.e_lip.forward(f_mot)
    }

    /// `audio: [B, 100]`, the flattened 5-frame window.
    pub fn audio_encode(&self, audio: &Tensor) -> Result<Tensor> {
        self.e_aud.forward(audio)
    }

    pub fn eye_head(&self, f_mot: &Tensor) -> Result<Tensor> {
        self.e_eye.forward(f_mot)
    }

    pub fn pose_head(&self, f_mot: &Tensor) -> Result<Tensor> {
        self.e_pose.forward(f_mot)
    }

    pub fn exp_head(&self, f_mot: &Tensor) -> Result<Tensor> {
        self.e_exp.forward(f_mot)
    }

    pub fn generate0(&self, f_app: &Tensor, f_mot: &Tensor) -> Result<Tensor> {
        self.g0.forward(&Tensor::cat(&[f_app, f_mot], 1)?)
    }

    pub fn generate(
        &self,
        f_app: &Tensor,
        f_lip: &Tensor,
        f_eye: &Tensor,
        pose: &Tensor,
        f_exp: &Tensor,
    ) -> Result<Tensor> {
        self.g.forward(&Tensor::cat(&[f_app, f_lip, f_eye, pose, f_exp], 1)?)
    }

    pub fn discriminate(&self, images: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.disc.forward(images)
    }

    pub fn probe_extract(&self, images: &Tensor) -> Result<ProbeOutput> {
        self.probe.forward(images)
    }

    /// Codes of one batch of frames with their audio windows.
    pub fn encode_all(&self, app_images: &Tensor, images: &Tensor, audio: &Tensor) -> Result<FeatureBundle> {
        let mot = self.motion_encode(images)?;
        Ok(FeatureBundle {
            app: self.appearance_encode(app_images)?,
            lip: self.lip_head(&mot)?,
            aud: self.audio_encode(audio)?,
            eye: self.eye_head(&mot)?,
            pose: self.pose_head(&mot)?,
            exp: self.exp_head(&mot)?,
            mot,
        })
    }
}

/// Stacks HWC images into an NCHW tensor.
pub fn images_to_tensor(images: &[&FloatImage], dtype: DType) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::Shape("images in a batch must share a size".into()));
        }
        for ch in 0..3 {
            data.extend(img.data.iter().skip(ch).step_by(3).copied());
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Inverse of [`images_to_tensor`].
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<FloatImage>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok((0..b)
        .map(|i| {
            let mut img = FloatImage::new(w, h);
            for ch in 0..3 {
                for p in 0..w * h {
                    img.data[p * 3 + ch] = v[((i * 3 + ch) * h * w) + p];
                }
            }
            img
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig {
            image_size: 16,
            enc_channels: vec![4, 8],
            enc_hidden: 16,
            head_hidden: 8,
            audio_hidden: vec![16],
            gen_channels: vec![8, 8, 4],
            disc_channels: vec![4, 8],
            probe_channels: vec![4, 8],
            probe_hidden: 16,
            ..NetConfig::default()
        }
    }

    fn batch(cfg: &NetConfig, b: usize) -> Tensor {
        let n = b * 3 * cfg.image_size * cfg.image_size;
        let v: Vec<f32> = (0..n).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
        Tensor::from_vec(v, (b, 3, cfg.image_size, cfg.image_size), &Device::Cpu).unwrap()
    }

    #[test]
    fn outputs_have_declared_shapes_and_are_finite() {
        let cfg = small();
        let mut store = ParamStore::new(1, DType::F32);
        let nets = Nets::build(&mut store, &cfg, |_| true).unwrap();
        let x = batch(&cfg, 2);
        let audio = Tensor::zeros((2, AUDIO_WINDOW_DIM), DType::F32, &Device::Cpu).unwrap();
        let f = nets.encode_all(&x, &x, &audio).unwrap();
        assert_eq!(f.app.dims(), &[2, 128]);
        assert_eq!(f.mot.dims(), &[2, 64]);
        assert_eq!(f.lip.dims(), &[2, 32]);
        assert_eq!(f.aud.dims(), &[2, 32]);
        assert_eq!(f.eye.dims(), &[2, 8]);
        assert_eq!(f.pose.dims(), &[2, 4]);
        assert_eq!(f.exp.dims(), &[2, 16]);
        let zero = f.mot.zeros_like().unwrap();
        for head in [
            nets.lip_head(&zero).unwrap(),
            nets.eye_head(&zero).unwrap(),
            nets.pose_head(&zero).unwrap(),
            nets.exp_head(&zero).unwrap(),
        ] {
            let v = head.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|x| x.is_finite()));
        }
        let img = nets.generate(&f.app, &f.aud, &f.eye, &f.pose, &f.exp).unwrap();
        assert_eq!(img.dims(), &[2, 3, 16, 16]);
        let v = img.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        let again = nets.generate(&f.app, &f.aud, &f.eye, &f.pose, &f.exp).unwrap();
        assert_eq!(v, again.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(nets.generate0(&f.app, &f.mot).unwrap().dims(), &[2, 3, 16, 16]);
        let (score, feats) = nets.discriminate(&img).unwrap();
        assert_eq!(score.dims(), &[2, 1, 4, 4]);
        assert_eq!(feats.len(), 2);
        let probe = nets.probe_extract(&x).unwrap();
        assert_eq!(probe.keypoints.dims(), &[2, 16]);
        assert_eq!(probe.readout.dims(), &[2, 12]);
    }

    #[test]
    fn wrong_image_size_is_a_shape_error() {
        let cfg = small();
        let mut store = ParamStore::new(1, DType::F32);
        let nets = Nets::build(&mut store, &cfg, |_| true).unwrap();
        let x = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(nets.motion_encode(&x), Err(Error::Shape(_))));
        let audio = Tensor::zeros((1, 99), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(nets.audio_encode(&audio), Err(Error::Shape(_))));
    }

    #[test]
    fn frozen_networks_receive_no_gradient() {
        let cfg = small();
        let mut store = ParamStore::new(1, DType::F32);
        let nets = Nets::build(&mut store, &cfg, |p| p == prefix::E_EXP).unwrap();
        let x = batch(&cfg, 2);
        let mot = nets.motion_encode(&x).unwrap();
        let loss = nets.exp_head(&mot).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        for name in store.names_under(&[prefix::E_MOT]) {
            assert!(grads.get(store.get(&name).unwrap().as_tensor()).is_none(), "{name}");
        }
        let live = store.names_under(&[prefix::E_EXP]);
        assert!(live
            .iter()
            .any(|n| grads.get(store.get(n).unwrap().as_tensor()).is_some()));
    }

    #[test]
    fn image_tensor_round_trip() {
        let mut img = FloatImage::new(4, 2);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f32 / 24.0;
        }
        let t = images_to_tensor(&[&img, &img], DType::F32).unwrap();
        assert_eq!(t.dims(), &[2, 3, 2, 4]);
        assert_eq!(t.get(0).unwrap().get(1).unwrap().get(0).unwrap().get(0).unwrap().to_scalar::<f32>().unwrap(), img.data[1]);
        assert_eq!(tensor_to_images(&t).unwrap()[1], img);
    }

    #[test]
    fn config_hash_tracks_changes() {
        let a = NetConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.exp_dim = 15;
        assert_ne!(a.hash(), b.hash());
        let mut bad = a.clone();
        bad.image_size = 48;
        assert!(bad.validate().is_err());
    }
}
