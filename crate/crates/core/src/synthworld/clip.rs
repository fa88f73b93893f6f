use serde::{Deserialize, Serialize};

use super::audio::{synth_audio, AudioFeature};
use super::dynamics::{sample_factors, DynamicsSpec};
use super::factors::FactorVector;
use super::render::{keypoints, render_frame, Keypoints};
use crate::error::{Error, Result};
use crate::image::RgbImage;

/// A synthetic talking-head clip with synchronized audio and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub clip_id: String,
    pub fps: u32,
    pub frames: Vec<RgbImage>,
    pub audio: Vec<AudioFeature>,
    pub factors: Vec<FactorVector>,
    pub keypoints: Vec<Keypoints>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn identity_seed(&self) -> u64 {
        self.factors.first().map(|f| f.identity_seed).unwrap_or(0)
    }

    pub fn check_consistent(&self) -> Result<()> {
        let n = self.frames.len();
        if self.audio.len() != n || self.factors.len() != n || self.keypoints.len() != n {
            return Err(Error::Data(format!(
                "clip {}: {} frames, {} audio, {} factors, {} keypoints",
                self.clip_id,
                n,
                self.audio.len(),
                self.factors.len(),
                self.keypoints.len()
            )));
        }
        if self.fps == 0 {
            return Err(Error::Data(format!("clip {}: fps must be positive", self.clip_id)));
        }
        Ok(())
    }

    /// Builds a clip by rendering an explicit factor track.
    pub fn from_factors(
        clip_id: impl Into<String>,
        fps: u32,
        factors: Vec<FactorVector>,
        audio_seed: u64,
    ) -> Result<Self> {
        for f in &factors {
            f.validate()?;
        }
        let lip: Vec<f32> = factors.iter().map(|f| f.lip_aperture).collect();
        let audio = synth_audio(&lip, audio_seed)?;
        Ok(Self {
            clip_id: clip_id.into(),
            fps,
            frames: factors.iter().map(render_frame).collect(),
            keypoints: factors.iter().map(keypoints).collect(),
            audio,
            factors,
        })
    }
}

/// Generates one clip: samples a factor track, renders it and synthesizes its audio.
pub fn generate_clip(
    identity_seed: u64,
    motion_seed: u64,
    length: usize,
    spec: &DynamicsSpec,
) -> Result<Clip> {
    let factors = sample_factors(identity_seed, motion_seed, spec, length)?;
    Clip::from_factors(
        format!("id{identity_seed:016x}-m{motion_seed:016x}"),
        25,
        factors,
        motion_seed ^ 0xA0D1_0000_0000_0000,
    )
}

/// Shape of a generated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub identities: usize,
    pub clips_per_identity: usize,
    pub clip_length: usize,
    #[serde(default)]
    pub dynamics: DynamicsSpec,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            identities: 200,
            clips_per_identity: 4,
            clip_length: 32,
            dynamics: DynamicsSpec::default(),
        }
    }
}

/// Named dataset splits; identities never overlap across splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7A41_0000_0000_0000,
            Split::Test => 0x7E57_0000_0000_0000,
        }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.rotate_left(29) ^ 0x9E37_79B9_7F4A_7C15;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_split(cfg: &WorldConfig, split: Split) -> Result<Vec<Clip>> {
    cfg.dynamics.validate()?;
    if cfg.identities == 0 || cfg.clips_per_identity == 0 || cfg.clip_length == 0 {
        return Err(Error::Config("world config sizes must be positive".into()));
    }
    let mut clips = Vec::with_capacity(cfg.identities * cfg.clips_per_identity);
    for i in 0..cfg.identities {
        let identity = mix(cfg.seed ^ split.tag(), i as u64);
        for c in 0..cfg.clips_per_identity {
            let motion = mix(identity, c as u64 + 1);
            clips.push(generate_clip(identity, motion, cfg.clip_length, &cfg.dynamics)?);
        }
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_lengths_agree() {
        let clip = generate_clip(1, 2, 12, &DynamicsSpec::default()).unwrap();
        clip.check_consistent().unwrap();
        assert_eq!(clip.len(), 12);
    }

    #[test]
    fn splits_use_disjoint_identities() {
        let cfg = WorldConfig {
            identities: 5,
            clips_per_identity: 1,
            clip_length: 2,
            ..Default::default()
        };
        let train = generate_split(&cfg, Split::Train).unwrap();
        let test = generate_split(&cfg, Split::Test).unwrap();
        for a in &train {
            assert!(test.iter().all(|b| b.identity_seed() != a.identity_seed()));
        }
    }
}
