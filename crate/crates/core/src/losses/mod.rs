//! Training objectives: motion reconstruction, contrastive lip and eye losses,
//! pose regression, expression decorrelation, perceptual, consistency and
//! adversarial terms, plus the weighted report written to the training log.

mod bank;
pub mod gradcheck;
mod perceptual;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

pub use bank::{bank_correlation, bank_push, decorrelation_loss, Correlation, MemoryBank, MIN_CORRELATION_ROWS};
pub use perceptual::{PerceptualPyramid, PYRAMID_LEVELS};

use crate::error::{Error, Result};
use crate::nets::{Discriminator, Nets, Probe, ProbeOutput};
use crate::synthworld::{readout_slice, MotionFactor};

/// Smallest vector norm accepted by the cosine similarity.
pub const MIN_NORM: f64 = 1e-12;

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Scales vectors along the last axis to unit length.
pub fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min = norm
        .flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if !(min > MIN_NORM) {
        return Err(Error::Numeric(format!(
            "cosine similarity of a vector with norm {min:e}"
        )));
    }
    Ok(x.broadcast_div(&norm)?)
}

/// Row-wise cosine similarity of two `[B, D]` tensors, `[B]`.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "cosine similarity of {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((unit_rows(a)? * unit_rows(b)?)?.sum(D::Minus1)?)
}

/// Mean squared difference of probe keypoints plus that of probe factor readouts.
pub fn motion_recon_from_outputs(out: &ProbeOutput, gt: &ProbeOutput) -> Result<Tensor> {
    let kp = (&out.keypoints - &gt.keypoints)?.sqr()?.mean_all()?;
    let ro = (&out.readout - &gt.readout)?.sqr()?.mean_all()?;
    Ok((kp + ro)?)
}

/// Distance between the probe features of two image batches.
pub fn motion_recon_loss(probe: &Probe, out: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if out.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "motion reconstruction of {:?} against {:?}",
            out.dims(),
            gt.dims()
        )));
    }
    motion_recon_from_outputs(&probe.forward(out)?, &probe.forward(gt)?)
}

/// Contrastive loss of `anchor [B, D]` against one `positive [B, D]` and
/// `negatives [B, K, D]`, with cosine similarity and no temperature. Mean over the batch.
pub fn infonce(anchor: &Tensor, positive: &Tensor, negatives: &Tensor) -> Result<Tensor> {
    let (b, k, d) = negatives.dims3()?;
    if anchor.dims() != [b, d] || positive.dims() != [b, d] || k == 0 {
        return Err(Error::Shape(format!(
            "infonce: anchor {:?}, positive {:?}, negatives {:?}",
            anchor.dims(),
            positive.dims(),
            negatives.dims()
        )));
    }
    let a = unit_rows(anchor)?;
    let s_pos = (&a * unit_rows(positive)?)?.sum_keepdim(1)?;
    let s_neg = unit_rows(negatives)?
        .broadcast_mul(&a.unsqueeze(1)?)?
        .sum(2)?;
    let logits = Tensor::cat(&[&s_pos, &s_neg], 1)?;
    // similarities lie in [-1, 1], so the plain sum of exponentials cannot overflow
    let lse = logits.exp()?.sum(1)?.log()?;
    Ok((lse - s_pos.squeeze(1)?)?.mean_all()?)
}

/// Eye loss: `(f1, f_a)` is the positive pair and `(f2, f_a)` the negative.
pub fn eye_contrastive_loss(f1: &Tensor, f2: &Tensor, f_a: &Tensor) -> Result<Tensor> {
    infonce(f_a, f1, &f2.unsqueeze(1)?)
}

/// Sum of absolute differences per row, averaged over the batch.
pub fn pose_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() || pred.rank() != 2 {
        return Err(Error::Shape(format!(
            "pose loss of {:?} against {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok((pred - gt)?.abs()?.sum(1)?.mean_all()?)
}

/// Mean over the window axis of `[B, K_win, D]` features.
pub fn window_average(features: &Tensor) -> Result<Tensor> {
    let (_, k, _) = features.dims3()?;
    if k == 0 {
        return Err(Error::Shape("window_average over an empty window".into()));
    }
    Ok(features.mean(1)?)
}

/// The three parts of the motion-level consistency loss.
#[derive(Clone, Debug)]
pub struct ConsistencyTerms {
    /// `exp(−S(lip(out), audio))`, in `[1/e, e]`.
    pub sync: Tensor,
    /// L1 distance of the probe's gaze and blink readouts.
    pub gaze: Tensor,
    /// Probe feature distance, as in [`motion_recon_loss`].
    pub motion: Tensor,
}

impl ConsistencyTerms {
    pub fn total(&self) -> Result<Tensor> {
        Ok(((&self.sync + &self.gaze)? + &self.motion)?)
    }
}

fn gaze_blink(readout: &Tensor) -> Result<Tensor> {
    let g = readout_slice(MotionFactor::Gaze);
    let b = readout_slice(MotionFactor::Blink);
    debug_assert_eq!(g.end, b.start);
    Ok(readout.narrow(1, g.start, b.end - g.start)?)
}

/// Consistency of a generated batch with its ground truth and audio windows.
/// Uses the motion encoder, lip head, audio encoder and probe, all of which
/// should be bound frozen.
pub fn consistency_loss(nets: &Nets, out: &Tensor, gt: &Tensor, audio: &Tensor) -> Result<ConsistencyTerms> {
    let lip = nets.lip_head(&nets.motion_encode(out)?)?;
    let aud = nets.audio_encode(audio)?;
    let sync = cosine_similarity(&lip, &aud)?.neg()?.exp()?.mean_all()?;
    let p_out = nets.probe_extract(out)?;
    let p_gt = nets.probe_extract(gt)?;
    let gaze = (gaze_blink(&p_out.readout)? - gaze_blink(&p_gt.readout)?)?
        .abs()?
        .mean_all()?;
    Ok(ConsistencyTerms {
        sync,
        gaze,
        motion: motion_recon_from_outputs(&p_out, &p_gt)?,
    })
}

#[derive(Clone, Debug)]
pub struct AdversarialTerms {
    /// `−mean D(out)`; may be negative.
    pub gen: Tensor,
    /// Hinge loss of the discriminator; `out` is detached here.
    pub disc: Tensor,
    /// L1 between discriminator features of `out` and of (detached) `gt`, summed over layers.
    pub feature_match: Tensor,
}

pub fn hinge_disc_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = (1.0 - real)?.relu()?.mean_all()?;
    let f = (fake + 1.0)?.relu()?.mean_all()?;
    Ok((r + f)?)
}

pub fn adversarial_losses(disc: &Discriminator, out: &Tensor, gt: &Tensor) -> Result<AdversarialTerms> {
    let (s_real, f_real) = disc.forward(gt)?;
    let (s_fake, f_fake) = disc.forward(out)?;
    let (s_fake_d, _) = disc.forward(&out.detach())?;
    let mut fm = s_real.zeros_like()?.sum_all()?;
    for (a, b) in f_fake.iter().zip(&f_real) {
        fm = (fm + (a - b.detach())?.abs()?.mean_all()?)?;
    }
    Ok(AdversarialTerms {
        gen: s_fake.mean_all()?.neg()?,
        disc: hinge_disc_loss(&s_real, &s_fake_d)?,
        feature_match: fm,
    })
}

/// Whether a logged loss must be non-negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    NonNegative,
    Any,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub name: String,
    pub weight: f64,
    pub value: f64,
    pub sign: Sign,
}

/// Named losses of one step with their weights; `total = Σ weight · value`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub entries: Vec<LossEntry>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.value)
    }

    pub fn weighted_sum(&self) -> f64 {
        self.entries.iter().fold(0.0, |acc, e| acc + e.weight * e.value)
    }

    /// Every value finite and inside its documented range.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !e.value.is_finite() {
                return Err(Error::Numeric(format!("loss {} is {}", e.name, e.value)));
            }
            if e.sign == Sign::NonNegative && e.value < 0.0 {
                return Err(Error::Numeric(format!("loss {} is negative: {}", e.name, e.value)));
            }
        }
        if !self.total.is_finite() {
            return Err(Error::Numeric(format!("total loss is {}", self.total)));
        }
        Ok(())
    }
}

/// Builds the differentiable weighted total and its report side by side.
#[derive(Default)]
pub struct LossAccumulator {
    total: Option<Tensor>,
    report: LossReport,
}

impl LossAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `weight · loss` to the total. A zero weight only logs the value.
    pub fn add(&mut self, name: &str, weight: f64, loss: &Tensor, sign: Sign) -> Result<()> {
        let value = scalar(loss)?;
        self.report.entries.push(LossEntry {
            name: name.to_string(),
            weight,
            value,
            sign,
        });
        if weight != 0.0 {
            let term = (loss * weight)?;
            self.total = Some(match self.total.take() {
                Some(t) => (t + term)?,
                None => term,
            });
        }
        Ok(())
    }

    /// Validated report and the total tensor (`None` when every weight was zero).
    pub fn finish(mut self) -> Result<(Option<Tensor>, LossReport)> {
        self.report.total = self.report.weighted_sum();
        self.report.validate()?;
        Ok((self.total, self.report))
    }
}
