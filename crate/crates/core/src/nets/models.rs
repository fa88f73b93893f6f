use candle_core::{Tensor, D};

use super::conv::upsample2x;
use super::layers::{leaky_relu, sigmoid, Conv, Linear, Mlp};
use super::params::{Binder, Init};
use super::NetConfig;
use crate::error::{Error, Result};
use crate::synthworld::{NUM_KEYPOINTS, READOUT_DIM};

fn levels(image_size: usize) -> usize {
    (image_size / 4).trailing_zeros() as usize
}

fn check_images(x: &Tensor, size: usize) -> Result<()> {
    let d = x.dims();
    if d.len() != 4 || d[1] != 3 || d[2] != size || d[3] != size {
        return Err(Error::Shape(format!(
            "expected images [B, 3, {size}, {size}], got {d:?}"
        )));
    }
    Ok(())
}

/// Strided 4×4 convolutions down to 4×4, then an MLP.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    convs: Vec<Conv>,
    fc: Mlp,
    image_size: usize,
    slope: f64,
}

impl ConvEncoder {
    pub fn new(
        p: &mut Binder,
        cfg: &NetConfig,
        channels: &[usize],
        hidden: usize,
        out: usize,
    ) -> Result<Self> {
        let n = levels(cfg.image_size);
        let mut convs = Vec::with_capacity(n);
        let mut cin = 3;
        for (i, &c) in channels[..n].iter().enumerate() {
            let init = Init::kaiming(cin * 16, cfg.leaky_slope);
            convs.push(Conv::new(&mut p.sub(&format!("conv{i}")), cin, c, 4, 2, 1, init)?);
            cin = c;
        }
        Ok(Self {
            convs,
            fc: Mlp::new(&mut p.sub("fc"), &[cin * 16, hidden, out])?,
            image_size: cfg.image_size,
            slope: cfg.leaky_slope,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.fc.out_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_images(x, self.image_size)?;
        let mut h = x.clone();
        for c in &self.convs {
            h = leaky_relu(&c.forward(&h)?, self.slope)?;
        }
        self.fc.forward(&h.flatten_from(1)?)
    }
}

/// Upsampling decoder with per-block feature modulation by the latent.
#[derive(Clone, Debug)]
pub struct Generator {
    fc: Linear,
    blocks: Vec<(Conv, Linear)>,
    to_rgb: Conv,
    base_channels: usize,
    latent_dim: usize,
    slope: f64,
}

impl Generator {
    pub fn new(p: &mut Binder, cfg: &NetConfig, latent_dim: usize) -> Result<Self> {
        let n = levels(cfg.image_size);
        let ch = &cfg.gen_channels;
        let c0 = ch[0];
        let fc = Linear::new(
            &mut p.sub("fc"),
            latent_dim,
            c0 * 16,
            Init::kaiming(latent_dim, cfg.leaky_slope),
        )?;
        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            let (cin, cout) = (ch[i], ch[i + 1]);
            let conv = Conv::new(
                &mut p.sub(&format!("up{i}")),
                cin,
                cout,
                3,
                1,
                1,
                Init::kaiming(cin * 9, cfg.leaky_slope),
            )?;
            let film = Linear::new(
                &mut p.sub(&format!("film{i}")),
                latent_dim,
                2 * cout,
                Init::Uniform(0.1 / (latent_dim as f64).sqrt()),
            )?;
            blocks.push((conv, film));
        }
        let to_rgb = Conv::new(&mut p.sub("rgb"), ch[n], 3, 3, 1, 1, Init::kaiming(ch[n] * 9, 1.0))?;
        Ok(Self {
            fc,
            blocks,
            to_rgb,
            base_channels: c0,
            latent_dim,
            slope: cfg.leaky_slope,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// `z: [B, latent]` → images `[B, 3, S, S]` in `[0, 1]`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let b = z.dim(0)?;
        let mut h = leaky_relu(&self.fc.forward(z)?, self.slope)?
            .reshape((b, self.base_channels, 4, 4))?;
        for (conv, film) in &self.blocks {
            h = conv.forward(&upsample2x(&h)?)?;
            let c = conv.out_channels();
            let gb = film.forward(z)?;
            let gamma = gb.narrow(1, 0, c)?.reshape((b, c, 1, 1))?;
            let beta = gb.narrow(1, c, c)?.reshape((b, c, 1, 1))?;
            h = h.broadcast_mul(&(gamma + 1.0)?)?.broadcast_add(&beta)?;
            h = leaky_relu(&h, self.slope)?;
        }
        sigmoid(&self.to_rgb.forward(&h)?)
    }
}

/// Patch discriminator returning per-location scores and intermediate features.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv>,
    head: Conv,
    image_size: usize,
    slope: f64,
}

impl Discriminator {
    pub fn new(p: &mut Binder, cfg: &NetConfig) -> Result<Self> {
        let n = levels(cfg.image_size).min(cfg.disc_channels.len());
        let mut convs = Vec::with_capacity(n);
        let mut cin = 3;
        for (i, &c) in cfg.disc_channels[..n].iter().enumerate() {
            let init = Init::kaiming(cin * 16, cfg.leaky_slope);
            convs.push(Conv::new(&mut p.sub(&format!("conv{i}")), cin, c, 4, 2, 1, init)?);
            cin = c;
        }
        let head = Conv::new(&mut p.sub("head"), cin, 1, 3, 1, 1, Init::kaiming(cin * 9, 1.0))?;
        Ok(Self {
            convs,
            head,
            image_size: cfg.image_size,
            slope: cfg.leaky_slope,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        check_images(x, self.image_size)?;
        let mut feats = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for c in &self.convs {
            h = leaky_relu(&c.forward(&h)?, self.slope)?;
            feats.push(h.clone());
        }
        Ok((self.head.forward(&h)?, feats))
    }
}

/// Frozen keypoint and factor regressor.
#[derive(Clone, Debug)]
pub struct Probe {
    net: ConvEncoder,
}

/// Probe outputs for a batch.
#[derive(Clone, Debug)]
pub struct ProbeOutput {
    /// `[B, 16]`: keypoint `(x, y)` pairs mapped to `[-1, 1]` by `2p/S − 1`.
    pub keypoints: Tensor,
    /// `[B, 12]`: normalized factor readout (pose 4, gaze 2, blink 1, expression 4, lip 1).
    pub readout: Tensor,
}

pub const PROBE_OUT_DIM: usize = 2 * NUM_KEYPOINTS + READOUT_DIM;

impl Probe {
    pub fn new(p: &mut Binder, cfg: &NetConfig) -> Result<Self> {
        Ok(Self {
            net: ConvEncoder::new(p, cfg, &cfg.probe_channels, cfg.probe_hidden, PROBE_OUT_DIM)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<ProbeOutput> {
        let y = self.net.forward(x)?;
        Ok(ProbeOutput {
            keypoints: y.narrow(D::Minus1, 0, 2 * NUM_KEYPOINTS)?,
            readout: y.narrow(D::Minus1, 2 * NUM_KEYPOINTS, READOUT_DIM)?,
        })
    }
}
