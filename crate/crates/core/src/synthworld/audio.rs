use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const AUDIO_DIM: usize = 20;
/// Frames on each side of `t` that shape `audio[t]`.
pub const AUDIO_CONTEXT: usize = 2;
const TAPS: usize = 2 * AUDIO_CONTEXT + 1;
/// Standard deviation of the per-tap mixing weights; the center tap dominates.
const TAP_SCALE: [f64; TAPS] = [0.3, 0.55, 1.3, 0.55, 0.3];
const WORLD_AUDIO_SEED: u64 = 0x5EED_A0D1_0000_0014;
pub const AUDIO_NOISE_STD: f32 = 0.01;

pub type AudioFeature = [f32; AUDIO_DIM];

/// Fixed nonlinear embedding shared by every clip of the world.
struct AudioEmbedding {
    weights: [[f64; TAPS]; AUDIO_DIM],
    bias: [f64; AUDIO_DIM],
}

impl AudioEmbedding {
    fn world() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(WORLD_AUDIO_SEED);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let mut weights = [[0.0; TAPS]; AUDIO_DIM];
        let mut bias = [0.0; AUDIO_DIM];
        for j in 0..AUDIO_DIM {
            for k in 0..TAPS {
                weights[j][k] = unit.sample(&mut rng) * TAP_SCALE[k];
            }
            bias[j] = 0.4 * unit.sample(&mut rng);
        }
        Self { weights, bias }
    }
}

/// Synthesizes audio features from a lip-aperture trajectory.
///
/// `audio[t] = tanh(W · u[t-2..=t+2] + b) + noise`, with `u = 2·lip − 1` and
/// edge frames clamped. Nothing but the lip trajectory enters the signal.
pub fn synth_audio(lip: &[f32], noise_seed: u64) -> Result<Vec<AudioFeature>> {
    synth_audio_with_noise(lip, noise_seed, AUDIO_NOISE_STD)
}

pub fn synth_audio_with_noise(
    lip: &[f32],
    noise_seed: u64,
    noise_std: f32,
) -> Result<Vec<AudioFeature>> {
    if let Some((t, v)) = lip
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
    {
        return Err(Error::Validation(format!("lip[{t}] = {v} outside [0,1]")));
    }
    let emb = AudioEmbedding::world();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, noise_std.max(0.0) as f64)
        .map_err(|e| Error::Config(format!("audio noise: {e}")))?;
    let n = lip.len() as isize;
    let mut out = Vec::with_capacity(lip.len());
    for t in 0..n {
        let mut u = [0.0f64; TAPS];
        for (k, slot) in u.iter_mut().enumerate() {
            let idx = (t + k as isize - AUDIO_CONTEXT as isize).clamp(0, n - 1);
            *slot = 2.0 * lip[idx as usize] as f64 - 1.0;
        }
        let mut feat = [0f32; AUDIO_DIM];
        for (j, v) in feat.iter_mut().enumerate() {
            let pre: f64 = emb.bias[j]
                + emb.weights[j].iter().zip(&u).map(|(w, x)| w * x).sum::<f64>();
            *v = (pre.tanh() + noise.sample(&mut rng)) as f32;
        }
        out.push(feat);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_lip_gives_constant_audio_up_to_noise() {
        let audio = synth_audio(&[0.0; 50], 3).unwrap();
        for a in &audio[1..] {
            for j in 0..AUDIO_DIM {
                assert!((a[j] - audio[0][j]).abs() < 10.0 * AUDIO_NOISE_STD);
            }
        }
        let clean = synth_audio_with_noise(&[0.0; 50], 3, 0.0).unwrap();
        assert!(clean.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn deterministic_given_seed() {
        let lip: Vec<f32> = (0..40).map(|i| (i as f32 * 0.37).sin().abs()).collect();
        assert_eq!(synth_audio(&lip, 9).unwrap(), synth_audio(&lip, 9).unwrap());
        assert_ne!(synth_audio(&lip, 9).unwrap(), synth_audio(&lip, 10).unwrap());
    }

    #[test]
    fn out_of_range_is_rejected() {
        assert!(matches!(synth_audio(&[0.2, 1.3], 0), Err(Error::Validation(_))));
        assert!(synth_audio(&[f32::NAN], 0).is_err());
    }
}
