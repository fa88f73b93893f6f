use candle_core::{DType, Device, Tensor};

use crate::augment::{audio_window, AUDIO_WINDOW_DIM};
use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::nets::{images_to_tensor, tensor_to_images, Checkpoint, Nets};
use crate::synthworld::{render_frame, AudioFeature, FactorVector, Keypoints, FRAME_SIZE};
use crate::train::Session;

use super::metrics::Readout;

/// Frames per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

/// Driving frames with their ground-truth factors.
#[derive(Clone, Copy)]
pub struct Signal<'a> {
    pub frames: &'a [FloatImage],
    pub factors: &'a [FactorVector],
}

/// Audio of a clip, with the lip factors that produced it.
#[derive(Clone, Copy)]
pub struct AudioSignal<'a> {
    pub audio: &'a [AudioFeature],
    pub factors: &'a [FactorVector],
}

/// What drives each factor. `None` holds the factor at its canonical value.
#[derive(Clone, Copy)]
pub struct Controls<'a> {
    pub appearance: (&'a FloatImage, &'a FactorVector),
    pub lip: Option<AudioSignal<'a>>,
    pub eye: Option<Signal<'a>>,
    pub pose: Option<Signal<'a>>,
    pub expression: Option<Signal<'a>>,
    pub len: usize,
}

impl Controls<'_> {
    fn check(&self) -> Result<()> {
        let short = |n: usize| n < self.len;
        if self.len == 0
            || self.lip.is_some_and(|s| short(s.audio.len()) || short(s.factors.len()))
            || [self.eye, self.pose, self.expression]
                .iter()
                .flatten()
                .any(|s| short(s.frames.len()) || short(s.factors.len()))
        {
            return Err(Error::Shape(format!("every driving signal needs {} frames", self.len)));
        }
        Ok(())
    }
}

pub trait ControllableModel {
    fn generate(&self, controls: &Controls) -> Result<Vec<FloatImage>>;
}

/// Landmarks (pixels) and normalized factor readouts of frames.
pub struct Readings {
    pub keypoints: Vec<Keypoints>,
    pub readouts: Vec<Readout>,
}

pub trait FactorReader {
    fn read(&self, frames: &[FloatImage]) -> Result<Readings>;
}

pub(crate) fn to_rows(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}

/// Runs `f` over chunks of `frames` and concatenates the outputs.
pub(crate) fn chunked(
    frames: &[FloatImage],
    dtype: DType,
    mut f: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let parts = frames
        .chunks(EVAL_CHUNK)
        .map(|c| f(&images_to_tensor(&c.iter().collect::<Vec<_>>(), dtype)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

/// `[T, 100]` centered audio windows of the first `len` frames.
pub fn audio_windows(audio: &[AudioFeature], len: usize, dtype: DType) -> Result<Tensor> {
    let v: Vec<f32> = (0..len).flat_map(|t| audio_window(audio, t)).collect();
    Ok(Tensor::from_vec(v, (len, AUDIO_WINDOW_DIM), &Device::Cpu)?.to_dtype(dtype)?)
}

/// A trained checkpoint with every network frozen.
pub struct TrainedModel {
    pub nets: Nets,
    dtype: DType,
}

impl TrainedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut sess = Session::from_checkpoint(ckpt)?;
        let dtype = sess.store.dtype();
        Ok(Self { nets: sess.nets(&[])?, dtype })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn motion(&self, frames: &[FloatImage]) -> Result<Tensor> {
        chunked(frames, self.dtype, |x| self.nets.motion_encode(x))
    }

    pub fn appearance(&self, frame: &FloatImage) -> Result<Tensor> {
        self.nets.appearance_encode(&images_to_tensor(&[frame], self.dtype)?)
    }

    /// Lip codes of frames through the motion encoder.
    pub fn lip_codes(&self, frames: &[FloatImage]) -> Result<Tensor> {
        self.nets.lip_head(&self.motion(frames)?)
    }

    pub fn audio_codes(&self, audio: &[AudioFeature], len: usize) -> Result<Tensor> {
        self.nets.audio_encode(&audio_windows(audio, len, self.dtype)?)
    }

    /// Per-frame expression codes; windows are a training device only.
    pub fn expression_codes(&self, frames: &[FloatImage]) -> Result<Tensor> {
        self.nets.exp_head(&self.motion(frames)?)
    }

    fn zeros(&self, len: usize, dim: usize) -> Result<Tensor> {
        Ok(Tensor::zeros((len, dim), self.dtype, &Device::Cpu)?)
    }

    /// Renders frames from explicit codes; `app` is `[1, D]` and broadcast.
    pub fn render_codes(&self, app: &Tensor, lip: &Tensor, eye: &Tensor, pose: &Tensor, exp: &Tensor) -> Result<Vec<FloatImage>> {
        let len = lip.dim(0)?;
        let mut out = Vec::with_capacity(len);
        for s in (0..len).step_by(EVAL_CHUNK) {
            let n = EVAL_CHUNK.min(len - s);
            let t = self.nets.generate(
                &app.broadcast_as((n, app.dim(1)?))?.contiguous()?,
                &lip.narrow(0, s, n)?,
                &eye.narrow(0, s, n)?,
                &pose.narrow(0, s, n)?,
                &exp.narrow(0, s, n)?,
            )?;
            out.extend(tensor_to_images(&t)?);
        }
        Ok(out)
    }
}

impl ControllableModel for TrainedModel {
    fn generate(&self, c: &Controls) -> Result<Vec<FloatImage>> {
        c.check()?;
        let cfg = &self.nets.cfg;
        let n = c.len;
        let app = self.appearance(c.appearance.0)?;
        let lip = match c.lip {
            Some(a) => self.audio_codes(a.audio, n)?,
            None => self.zeros(n, cfg.lip_dim)?,
        };
        let head = |s: Option<Signal>, dim: usize, f: &dyn Fn(&Tensor) -> Result<Tensor>| match s {
            Some(s) => f(&self.motion(&s.frames[..n])?),
            None => self.zeros(n, dim),
        };
        let eye = head(c.eye, cfg.eye_dim, &|m| self.nets.eye_head(m))?;
        let pose = head(c.pose, cfg.pose_dim, &|m| self.nets.pose_head(m))?;
        let exp = head(c.expression, cfg.exp_dim, &|m| self.nets.exp_head(m))?;
        self.render_codes(&app, &lip, &eye, &pose, &exp)
    }
}

/// Renders the ground-truth factors of the drivers directly: a model with
/// perfect disentanglement.
pub struct OracleRenderer;

impl OracleRenderer {
    /// Ground truth of every frame the oracle renders.
    pub fn factors(c: &Controls) -> Result<Vec<FactorVector>> {
        c.check()?;
        let base = FactorVector {
            appearance: c.appearance.1.appearance,
            ..FactorVector::neutral(c.appearance.1.identity_seed)
        };
        Ok((0..c.len)
            .map(|t| {
                let mut f = base.clone();
                if let Some(a) = c.lip {
                    f.lip_aperture = a.factors[t].lip_aperture;
                }
                if let Some(s) = c.eye {
                    f.gaze = s.factors[t].gaze;
                    f.blink = s.factors[t].blink;
                }
                if let Some(s) = c.pose {
                    f.pose = s.factors[t].pose;
                }
                if let Some(s) = c.expression {
                    f.expression = s.factors[t].expression;
                }
                f
            })
            .collect())
    }
}

impl ControllableModel for OracleRenderer {
    fn generate(&self, c: &Controls) -> Result<Vec<FloatImage>> {
        Ok(Self::factors(c)?.iter().map(|f| render_frame(f).to_float()).collect())
    }
}

/// The factor probe of a checkpoint.
pub struct ProbeReader<'a> {
    pub nets: &'a Nets,
    pub dtype: DType,
}

impl FactorReader for ProbeReader<'_> {
    fn read(&self, frames: &[FloatImage]) -> Result<Readings> {
        let mut keypoints = Vec::with_capacity(frames.len());
        let mut readouts = Vec::with_capacity(frames.len());
        let half = FRAME_SIZE as f32 / 2.0;
        for c in frames.chunks(EVAL_CHUNK) {
            let out = self
                .nets
                .probe_extract(&images_to_tensor(&c.iter().collect::<Vec<_>>(), self.dtype)?)?;
            for row in to_rows(&out.keypoints)? {
                keypoints.push(std::array::from_fn(|k| [(row[2 * k] + 1.0) * half, (row[2 * k + 1] + 1.0) * half]));
            }
            for row in to_rows(&out.readout)? {
                readouts.push(row.try_into().map_err(|_| Error::Shape("probe readout width".into()))?);
            }
        }
        Ok(Readings { keypoints, readouts })
    }
}
