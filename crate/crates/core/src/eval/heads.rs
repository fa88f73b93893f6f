//! Held-out checks of the stage-2 heads and of the factor probe.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_av_pairs, composite_eyes};
use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::synthworld::{normalized_pose, readout_slice, Clip, MotionFactor};
use crate::train::stream_rng;

use super::metrics::lmd;
use super::model::{to_rows, FactorReader, TrainedModel};
use super::protocol::float_frames;

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-24)
}

/// Fraction of frames whose audio picks its own frame among `1 + negatives`
/// candidates of the same clip, by lip/audio code cosine.
pub fn lip_retrieval_accuracy(
    model: &TrainedModel,
    clips: &[Clip],
    negatives: usize,
    min_offset: usize,
    seed: u64,
) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for (ci, clip) in clips.iter().enumerate() {
        let lip = to_rows(&model.lip_codes(&float_frames(clip))?)?;
        let aud = to_rows(&model.audio_codes(&clip.audio, clip.len())?)?;
        let mut rng = stream_rng(seed, "eval/lip", ci as u64);
        for t in 0..clip.len() {
            let pairs = build_av_pairs(clip, t, negatives, min_offset, &mut rng)?;
            let pos = cosine(&aud[t], &lip[t]);
            if pairs.negatives.iter().all(|&u| cosine(&aud[t], &lip[u]) < pos) {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data("no frames to retrieve".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Fraction of composited eye triplets whose anchor code is closer to the eye
/// donor than to the frame the rest of the face came from.
pub fn eye_triplet_accuracy(model: &TrainedModel, clips: &[Clip], seed: u64) -> Result<f64> {
    if clips.len() < 2 {
        return Err(Error::Data("eye triplets need at least two clips".into()));
    }
    let mut rng = stream_rng(seed, "eval/eye", 0);
    let (mut v1, mut v2, mut anchors) = (Vec::new(), Vec::new(), Vec::new());
    for (ci, clip) in clips.iter().enumerate() {
        for t in 0..clip.len() {
            let mut cj = rng.random_range(0..clips.len() - 1);
            if cj >= ci {
                cj += 1;
            }
            let tj = rng.random_range(0..clips[cj].len());
            let a = clip.frames[t].to_float();
            let b = clips[cj].frames[tj].to_float();
            if let Some(trip) = composite_eyes((&a, &clip.factors[t]), (&b, &clips[cj].factors[tj]))? {
                v1.push(a);
                v2.push(b);
                anchors.push(trip.anchor);
            }
        }
    }
    if anchors.is_empty() {
        return Err(Error::Data("no usable eye triplet".into()));
    }
    let eye = |f: &[FloatImage]| to_rows(&model.nets.eye_head(&model.motion(f)?)?);
    let (e1, e2, ea) = (eye(&v1)?, eye(&v2)?, eye(&anchors)?);
    let hits = (0..ea.len()).filter(|&i| cosine(&ea[i], &e1[i]) > cosine(&ea[i], &e2[i])).count();
    Ok(hits as f64 / ea.len() as f64)
}

/// Mean squared error of the pose head against the normalized ground-truth pose.
pub fn pose_head_mse(model: &TrainedModel, clips: &[Clip]) -> Result<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for clip in clips {
        let pred = to_rows(&model.nets.pose_head(&model.motion(&float_frames(clip))?)?)?;
        for (p, f) in pred.iter().zip(&clip.factors) {
            for (a, b) in p.iter().zip(normalized_pose(f)) {
                s += ((a - b) as f64).powi(2);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Data("no frames".into()));
    }
    Ok(s / n as f64)
}

/// How well the probe reads rendered frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeValidation {
    /// Mean distance between probe and ground-truth keypoints, in pixels.
    pub keypoint_error_px: f64,
    /// Largest gap between probe-based and ground-truth LMD of consecutive frames, per clip.
    pub max_lmd_gap_px: f64,
    /// Mean squared readout error per factor, ordered as [`MotionFactor::ALL`].
    pub readout_mse: [f64; 5],
}

pub fn probe_validation(reader: &dyn FactorReader, clips: &[Clip]) -> Result<ProbeValidation> {
    let (mut kp_err, mut kp_n) = (0.0, 0usize);
    let mut gap: f64 = 0.0;
    let mut mse = [0.0; 5];
    let mut frames = 0usize;
    for clip in clips {
        let r = reader.read(&float_frames(clip))?;
        for (p, g) in r.keypoints.iter().zip(&clip.keypoints) {
            for (a, b) in p.iter().zip(g) {
                kp_err += ((a[0] - b[0]) as f64).hypot((a[1] - b[1]) as f64);
                kp_n += 1;
            }
        }
        if clip.len() > 1 {
            let n = clip.len();
            let probe = lmd(&r.keypoints[1..], &r.keypoints[..n - 1])?.0;
            let truth = lmd(&clip.keypoints[1..], &clip.keypoints[..n - 1])?.0;
            gap = gap.max((probe - truth).abs());
        }
        for (ro, f) in r.readouts.iter().zip(&clip.factors) {
            let gt = f.normalized_readout();
            for (k, &factor) in MotionFactor::ALL.iter().enumerate() {
                let sl = readout_slice(factor);
                let w = sl.len() as f64;
                mse[k] += sl.map(|i| ((ro[i] - gt[i]) as f64).powi(2)).sum::<f64>() / w;
            }
            frames += 1;
        }
    }
    if frames == 0 {
        return Err(Error::Data("no frames".into()));
    }
    Ok(ProbeValidation {
        keypoint_error_px: kp_err / kp_n as f64,
        max_lmd_gap_px: gap,
        readout_mse: mse.map(|v| v / frames as f64),
    })
}
