//! Training clips, seeded batch order and batched encoders.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::augment::audio_window;
use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::nets::images_to_tensor;
use crate::synthworld::{Clip, FRAME_SIZE, NUM_KEYPOINTS, READOUT_DIM};

/// Independent seed for a named stream and counter.
pub fn stream_seed(seed: u64, tag: &str, counter: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(counter.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

pub fn stream_rng(seed: u64, tag: &str, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, tag, counter))
}

/// Frames of a set of clips addressed by a flat index.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub clips: Vec<Clip>,
    index: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    digest: String,
}

impl TrainData {
    pub fn new(clips: Vec<Clip>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Data("no clips".into()));
        }
        let mut index = Vec::new();
        let mut offsets = Vec::with_capacity(clips.len());
        let mut h = Sha256::new();
        for (c, clip) in clips.iter().enumerate() {
            clip.check_consistent()?;
            if clip.factors.len() != clip.len() || clip.keypoints.len() != clip.len() {
                return Err(Error::Data(format!("clip {} is missing factor tracks", clip.clip_id)));
            }
            if let Some(f) = clip.frames.first() {
                if f.width != FRAME_SIZE || f.height != FRAME_SIZE {
                    return Err(Error::Data(format!(
                        "clip {} has {}x{} frames, expected {FRAME_SIZE}x{FRAME_SIZE}",
                        clip.clip_id, f.width, f.height
                    )));
                }
            }
            h.update(clip.clip_id.as_bytes());
            for f in &clip.frames {
                h.update(&f.data);
            }
            offsets.push(index.len());
            index.extend((0..clip.len()).map(|t| (c, t)));
        }
        if index.is_empty() {
            return Err(Error::Data("clips hold no frames".into()));
        }
        let digest = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self {
            clips,
            index,
            offsets,
            digest,
        })
    }

    /// Content hash of every clip id and frame.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// `(clip, t)` of a flat frame index.
    pub fn locate(&self, i: usize) -> (usize, usize) {
        self.index[i]
    }

    pub fn flat_index(&self, clip: usize, t: usize) -> usize {
        self.offsets[clip] + t
    }

    pub fn clip_of(&self, i: usize) -> &Clip {
        &self.clips[self.index[i].0]
    }

    pub fn float_frame(&self, i: usize) -> FloatImage {
        let (c, t) = self.index[i];
        self.clips[c].frames[t].to_float()
    }

    pub fn images(&self, ids: &[usize], dtype: DType) -> Result<Tensor> {
        let imgs: Vec<FloatImage> = ids.iter().map(|&i| self.float_frame(i)).collect();
        images_to_tensor(&imgs.iter().collect::<Vec<_>>(), dtype)
    }

    /// `[B, 100]` centered audio windows.
    pub fn audio(&self, ids: &[usize], dtype: DType) -> Result<Tensor> {
        let mut v = Vec::with_capacity(ids.len() * crate::augment::AUDIO_WINDOW_DIM);
        for &i in ids {
            let (c, t) = self.index[i];
            v.extend(audio_window(&self.clips[c].audio, t));
        }
        Ok(Tensor::from_vec(v, (ids.len(), crate::augment::AUDIO_WINDOW_DIM), &candle_core::Device::Cpu)?
            .to_dtype(dtype)?)
    }

    /// `[B, 16]` keypoints mapped to `[-1, 1]` by `2p/S − 1`.
    pub fn keypoint_targets(&self, ids: &[usize], dtype: DType) -> Result<Tensor> {
        let s = FRAME_SIZE as f32;
        let mut v = Vec::with_capacity(ids.len() * 2 * NUM_KEYPOINTS);
        for &i in ids {
            let (c, t) = self.index[i];
            for p in &self.clips[c].keypoints[t] {
                v.push(2.0 * p[0] / s - 1.0);
                v.push(2.0 * p[1] / s - 1.0);
            }
        }
        Ok(Tensor::from_vec(v, (ids.len(), 2 * NUM_KEYPOINTS), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
    }

    /// `[B, 12]` normalized factor readouts.
    pub fn readout_targets(&self, ids: &[usize], dtype: DType) -> Result<Tensor> {
        let mut v = Vec::with_capacity(ids.len() * READOUT_DIM);
        for &i in ids {
            let (c, t) = self.index[i];
            v.extend(self.clips[c].factors[t].normalized_readout());
        }
        Ok(Tensor::from_vec(v, (ids.len(), READOUT_DIM), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Frame indices of the batch at `step`: consecutive slices of per-epoch
    /// permutations seeded by `(seed, tag, epoch)`.
    pub fn batch(&self, seed: u64, tag: &str, step: u64, batch: usize) -> Vec<usize> {
        let n = self.len() as u64;
        let start = step * batch as u64;
        let mut out = Vec::with_capacity(batch);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for p in start..start + batch as u64 {
            let epoch = p / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..self.len()).collect();
                perm.shuffle(&mut stream_rng(seed, &format!("{tag}/epoch"), epoch));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().unwrap().1[(p % n) as usize]);
        }
        out
    }
}

/// Applies `f` to the given frames in chunks and stacks the rows.
pub fn encode_in_chunks(
    ids: &[usize],
    chunk: usize,
    mut f: impl FnMut(&[usize]) -> Result<Tensor>,
) -> Result<Tensor> {
    let parts = ids
        .chunks(chunk.max(1))
        .map(|c| Ok(f(c)?.detach()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_split, Split, WorldConfig};

    fn data() -> TrainData {
        let cfg = WorldConfig {
            identities: 2,
            clips_per_identity: 2,
            clip_length: 5,
            ..Default::default()
        };
        TrainData::new(generate_split(&cfg, Split::Train).unwrap()).unwrap()
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let d = data();
        let mut seen: Vec<usize> = (0..5).flat_map(|s| d.batch(3, "x", s, 4)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        assert_eq!(d.batch(3, "x", 7, 4), d.batch(3, "x", 7, 4));
        assert_ne!(d.batch(3, "x", 0, 20), d.batch(3, "x", 5, 20));
    }

    #[test]
    fn targets_have_expected_ranges() {
        let d = data();
        let kp = d.keypoint_targets(&[0, 7], DType::F32).unwrap();
        assert_eq!(kp.dims(), &[2, 16]);
        let v = kp.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.abs() <= 1.0));
        assert_eq!(d.flat_index(1, 2), 7);
        assert_eq!(d.locate(7), (1, 2));
        assert_eq!(d.audio(&[3], DType::F32).unwrap().dims(), &[1, 100]);
    }
}
