//! Training views: photometric augmentation of the motion branch, eye-region
//! compositing, audio-visual pairs and augmented expression windows.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Affine2, FloatImage, Mask};
use crate::synthworld::{
    eye_polygon, eye_region_contains, AudioFeature, Clip, FactorVector, AUDIO_CONTEXT, AUDIO_DIM,
    FRAME_SIZE,
};

/// Audio frames consumed per window.
pub const AUDIO_WINDOW: usize = 2 * AUDIO_CONTEXT + 1;
pub const AUDIO_WINDOW_DIM: usize = AUDIO_WINDOW * AUDIO_DIM;

/// Strengths of the appearance-perturbing augmentation. Every field at zero is
/// the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    /// Additive brightness offset drawn from `±brightness`.
    pub brightness: f32,
    /// Contrast factor drawn from `1 ± contrast`, about the image mean.
    pub contrast: f32,
    /// Saturation factor drawn from `1 ± saturation`, about the per-pixel gray.
    pub saturation: f32,
    /// Per-channel gain drawn from `1 ± channel_gain`.
    pub channel_gain: f32,
    /// Probability of a 3×3 Gaussian blur.
    pub blur_prob: f32,
    pub blur_sigma_max: f32,
    /// Noise standard deviation drawn from `[0, noise_std]`.
    pub noise_std: f32,
}

impl ColorJitter {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            channel_gain: 0.0,
            blur_prob: 0.0,
            blur_sigma_max: 0.0,
            noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("channel_gain", self.channel_gain),
            ("blur_prob", self.blur_prob),
            ("blur_sigma_max", self.blur_sigma_max),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("jitter.{name} must be >= 0, got {v}")));
            }
        }
        if self.contrast >= 1.0 || self.channel_gain >= 1.0 || self.blur_prob > 1.0 {
            return Err(Error::Config(
                "jitter contrast and channel_gain must be < 1, blur_prob <= 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.12,
            contrast: 0.3,
            saturation: 0.4,
            channel_gain: 0.15,
            blur_prob: 0.3,
            blur_sigma_max: 0.9,
            noise_std: 0.03,
        }
    }
}

fn symmetric(rng: &mut impl Rng, half: f32) -> f32 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

fn blur3(img: &FloatImage, sigma: f32) -> FloatImage {
    let w1 = (-1.0 / (2.0 * sigma * sigma)).exp();
    let k = [w1, 1.0, w1].map(|v| v / (1.0 + 2.0 * w1));
    let (w, h) = (img.width, img.height);
    let pass = |src: &FloatImage, horizontal: bool| {
        let mut out = FloatImage::new(w, h);
        for row in 0..h {
            for col in 0..w {
                for ch in 0..3 {
                    let mut acc = 0.0;
                    for (o, kv) in k.iter().enumerate() {
                        let (r, c) = if horizontal {
                            (row, (col + o).saturating_sub(1).min(w - 1))
                        } else {
                            ((row + o).saturating_sub(1).min(h - 1), col)
                        };
                        acc += kv * src.get(r, c, ch);
                    }
                    out.data[(row * w + col) * 3 + ch] = acc;
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Photometric augmentation for the motion branch. Geometry is untouched, so
/// stored keypoints stay valid.
pub fn motion_branch_augment(img: &FloatImage, cfg: &ColorJitter, rng: &mut impl Rng) -> FloatImage {
    let brightness = symmetric(rng, cfg.brightness);
    let contrast = 1.0 + symmetric(rng, cfg.contrast);
    let saturation = 1.0 + symmetric(rng, cfg.saturation);
    let gain = [0; 3].map(|_| 1.0 + symmetric(rng, cfg.channel_gain));
    let blur = cfg.blur_prob > 0.0 && rng.random::<f32>() < cfg.blur_prob;
    let sigma = if blur { rng.random_range(0.3..=cfg.blur_sigma_max.max(0.3)) } else { 0.0 };
    let noise_std = if cfg.noise_std > 0.0 { rng.random_range(0.0..=cfg.noise_std) } else { 0.0 };

    let mut out = img.clone();
    if brightness == 0.0 && contrast == 1.0 && saturation == 1.0 && gain == [1.0; 3] {
        // keep exact pixels for the identity setting
    } else {
        let n = (img.width * img.height) as f32;
        let mean: f32 = img.data.iter().sum::<f32>() / (3.0 * n);
        for px in out.data.chunks_exact_mut(3) {
            let gray = (px[0] + px[1] + px[2]) / 3.0;
            for (c, v) in px.iter_mut().enumerate() {
                let s = gray + (*v - gray) * saturation;
                let s = mean + (s - mean) * contrast + brightness;
                *v = (s * gain[c]).clamp(0.0, 1.0);
            }
        }
    }
    if blur {
        out = blur3(&out, sigma);
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0f32, noise_std).expect("finite std");
        for v in out.data.iter_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Anchor frame whose eyes come from `v1` and everything else from `v2`.
#[derive(Clone, Debug)]
pub struct EyeTriplet {
    pub v1: FloatImage,
    pub v2: FloatImage,
    pub anchor: FloatImage,
    /// Pixels of `anchor` taken from `v1`.
    pub mask: Mask,
    /// Maps `v2` image coordinates to `v1` image coordinates.
    pub warp: Affine2,
    /// Ground truth of the anchor: `v2` with `v1`'s gaze and blink.
    pub anchor_factors: FactorVector,
}

/// Composites the eye region of `v1` into `v2`.
///
/// The warp is the least-squares affine map between the two frames' eye-socket
/// extreme points. Returns `Ok(None)` when the pair must be skipped: the warp is
/// degenerate or the warped mask is empty.
pub fn composite_eyes(
    v1: (&FloatImage, &FactorVector),
    v2: (&FloatImage, &FactorVector),
) -> Result<Option<EyeTriplet>> {
    let (img1, f1) = v1;
    let (img2, f2) = v2;
    if img1.width != img2.width || img1.height != img2.height {
        return Err(Error::Shape(format!(
            "eye compositing needs equal sizes, got {}x{} and {}x{}",
            img1.width, img1.height, img2.width, img2.height
        )));
    }
    let Some(warp) = Affine2::fit(&eye_polygon(f2), &eye_polygon(f1)) else {
        return Ok(None);
    };
    if warp.determinant().abs() < 1e-6 {
        return Ok(None);
    }
    let (w, h) = (img2.width, img2.height);
    let mut anchor = img2.clone();
    let mut bits = vec![false; w * h];
    for row in 0..h {
        for col in 0..w {
            let q = warp.apply([col as f64 + 0.5, row as f64 + 0.5]);
            if eye_region_contains(f1, q) {
                bits[row * w + col] = true;
                let px = img1.sample(q[0], q[1]);
                let i = (row * w + col) * 3;
                anchor.data[i..i + 3].copy_from_slice(&px);
            }
        }
    }
    let mask = Mask {
        width: w,
        height: h,
        bits,
    };
    if mask.count() == 0 {
        return Ok(None);
    }
    let mut anchor_factors = f2.clone();
    anchor_factors.gaze = f1.gaze;
    anchor_factors.blink = f1.blink;
    Ok(Some(EyeTriplet {
        v1: img1.clone(),
        v2: img2.clone(),
        anchor,
        mask,
        warp,
        anchor_factors,
    }))
}

/// Flattened centered audio window `audio[t-2..=t+2]`, edges clamped.
pub fn audio_window(audio: &[AudioFeature], t: usize) -> Vec<f32> {
    let n = audio.len() as isize;
    let mut out = Vec::with_capacity(AUDIO_WINDOW_DIM);
    for k in 0..AUDIO_WINDOW as isize {
        let idx = (t as isize + k - AUDIO_CONTEXT as isize).clamp(0, n - 1) as usize;
        out.extend_from_slice(&audio[idx]);
    }
    out
}

/// One synchronized audio/frame pair and `K` unsynchronized frames of the same
/// clip. The same indices serve the video-anchored direction: anchor frame `t`,
/// positive audio `t`, negative audio at `negatives`.
#[derive(Clone, Debug, PartialEq)]
pub struct AVPairBatch {
    pub clip_id: String,
    pub t: usize,
    pub negatives: Vec<usize>,
    /// Audio window at `t`.
    pub anchor_audio: Vec<f32>,
    /// Audio windows at each negative index.
    pub negative_audio: Vec<Vec<f32>>,
}

impl AVPairBatch {
    pub fn positive_frame<'a>(&self, clip: &'a Clip) -> &'a crate::image::RgbImage {
        &clip.frames[self.t]
    }

    pub fn negative_frames<'a>(&self, clip: &'a Clip) -> Vec<&'a crate::image::RgbImage> {
        self.negatives.iter().map(|&i| &clip.frames[i]).collect()
    }
}

/// Draws `k` negatives at least `min_offset` frames from `t`.
///
/// Negatives are distinct when the clip offers enough candidates and are drawn
/// with replacement otherwise.
pub fn build_av_pairs(
    clip: &Clip,
    t: usize,
    k: usize,
    min_offset: usize,
    rng: &mut impl Rng,
) -> Result<AVPairBatch> {
    let n = clip.len();
    if k == 0 || min_offset == 0 {
        return Err(Error::Config("negatives and min_offset must be positive".into()));
    }
    if n < k + min_offset {
        return Err(Error::Data(format!(
            "clip {} has {n} frames, needs at least {} for {k} negatives at offset {min_offset}",
            clip.clip_id,
            k + min_offset
        )));
    }
    if t >= n {
        return Err(Error::Validation(format!("t = {t} outside clip of {n} frames")));
    }
    let mut candidates: Vec<usize> = (0..n).filter(|&i| i.abs_diff(t) >= min_offset).collect();
    let negatives = if candidates.len() >= k {
        // partial Fisher-Yates
        for i in 0..k {
            let j = rng.random_range(i..candidates.len());
            candidates.swap(i, j);
        }
        candidates.truncate(k);
        candidates
    } else {
        (0..k)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect()
    };
    Ok(AVPairBatch {
        clip_id: clip.clip_id.clone(),
        t,
        anchor_audio: audio_window(&clip.audio, t),
        negative_audio: negatives.iter().map(|&i| audio_window(&clip.audio, i)).collect(),
        negatives,
    })
}

/// Geometric and photometric strengths for expression windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowAugment {
    /// Rotation drawn from `±max_rotation` radians about the canvas center.
    pub max_rotation: f32,
    /// Scale drawn from `1 ± max_scale`.
    pub max_scale: f32,
    pub jitter: ColorJitter,
}

impl Default for WindowAugment {
    fn default() -> Self {
        Self {
            max_rotation: 10f32.to_radians(),
            max_scale: 0.1,
            jitter: ColorJitter::default(),
        }
    }
}

impl WindowAugment {
    pub fn identity() -> Self {
        Self {
            max_rotation: 0.0,
            max_scale: 0.0,
            jitter: ColorJitter::identity(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct WindowFrame {
    pub index: usize,
    pub image: FloatImage,
    /// Similarity applied about the canvas center, original → augmented coordinates.
    pub transform: Affine2,
    pub angle: f64,
    pub log_scale: f64,
}

/// Reflects an index into `0..n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// `k_win` frames around `center`, offsets `-⌊k_win/2⌋..`, each independently
/// rotated, scaled and jittered.
pub fn window_sample(
    clip: &Clip,
    center: usize,
    k_win: usize,
    cfg: &WindowAugment,
    rng: &mut impl Rng,
) -> Result<Vec<WindowFrame>> {
    if k_win == 0 {
        return Err(Error::Config("window size must be positive".into()));
    }
    if center >= clip.len() {
        return Err(Error::Validation(format!(
            "center {center} outside clip of {} frames",
            clip.len()
        )));
    }
    let half = (k_win / 2) as isize;
    let c = FRAME_SIZE as f64 / 2.0;
    (0..k_win as isize)
        .map(|o| {
            let index = reflect_index(center as isize + o - half, clip.len());
            let angle = symmetric(rng, cfg.max_rotation) as f64;
            let scale = 1.0 + symmetric(rng, cfg.max_scale) as f64;
            let transform = Affine2::similarity_about([c, c], angle, scale);
            let src = clip.frames[index].to_float();
            let warped = if angle == 0.0 && scale == 1.0 {
                src
            } else {
                let inv = transform.inverse().expect("scale is positive");
                src.warp(&inv)
            };
            Ok(WindowFrame {
                index,
                image: motion_branch_augment(&warped, &cfg.jitter, rng),
                transform,
                angle,
                log_scale: scale.ln(),
            })
        })
        .collect()
}
