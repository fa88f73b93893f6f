use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::factors::{FactorVector, EXPRESSION_DIM, GAZE_DIM, POSE_DIM, POSE_HALF_RANGE};
use crate::error::{Error, Result};

/// A target-chasing process: every `hold_min..=hold_max` frames a new target is
/// drawn uniformly from the factor's range and the value moves toward it by at
/// most `max_delta` (normalized units) per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetDynamics {
    pub max_delta: f32,
    pub hold_min: usize,
    pub hold_max: usize,
}

/// Temporal statistics of every motion factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSpec {
    pub lip: TargetDynamics,
    pub pose: TargetDynamics,
    pub gaze: TargetDynamics,
    /// Probability per open-eye frame of starting a blink.
    pub blink_rate: f32,
    /// Expression is piecewise constant with segment lengths drawn from this range.
    pub expression_segment_min: usize,
    pub expression_segment_max: usize,
}

/// Blink profile played once a blink starts.
const BLINK_PROFILE: [f32; 4] = [0.5, 1.0, 1.0, 0.5];

impl Default for DynamicsSpec {
    fn default() -> Self {
        Self {
            lip: TargetDynamics {
                max_delta: 0.45,
                hold_min: 1,
                hold_max: 3,
            },
            pose: TargetDynamics {
                max_delta: 0.12,
                hold_min: 6,
                hold_max: 16,
            },
            gaze: TargetDynamics {
                max_delta: 0.5,
                hold_min: 3,
                hold_max: 10,
            },
            blink_rate: 0.06,
            expression_segment_min: 16,
            expression_segment_max: 48,
        }
    }
}

impl TargetDynamics {
    fn validate(&self, name: &str) -> Result<()> {
        if !(self.max_delta.is_finite() && self.max_delta > 0.0 && self.max_delta <= 2.0) {
            return Err(Error::Config(format!(
                "{name}.max_delta must lie in (0, 2], got {}",
                self.max_delta
            )));
        }
        if self.hold_min == 0 || self.hold_min > self.hold_max {
            return Err(Error::Config(format!(
                "{name}: need 1 <= hold_min <= hold_max, got {}..{}",
                self.hold_min, self.hold_max
            )));
        }
        Ok(())
    }
}

impl DynamicsSpec {
    pub fn validate(&self) -> Result<()> {
        self.lip.validate("lip")?;
        self.pose.validate("pose")?;
        self.gaze.validate("gaze")?;
        if !(0.0..=1.0).contains(&self.blink_rate) {
            return Err(Error::Config(format!(
                "blink_rate must lie in [0, 1], got {}",
                self.blink_rate
            )));
        }
        if self.expression_segment_min == 0
            || self.expression_segment_min > self.expression_segment_max
        {
            return Err(Error::Config(format!(
                "need 1 <= expression_segment_min <= expression_segment_max, got {}..{}",
                self.expression_segment_min, self.expression_segment_max
            )));
        }
        Ok(())
    }
}

struct Chaser {
    value: f32,
    target: f32,
    hold: usize,
    lo: f32,
    hi: f32,
}

impl Chaser {
    fn new(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Self {
        let value = rng.random_range(lo..=hi);
        Self {
            value,
            target: value,
            hold: 0,
            lo,
            hi,
        }
    }

    /// `max_delta` is expressed in units of the full range.
    fn step(&mut self, rng: &mut ChaCha8Rng, dyn_: &TargetDynamics) -> f32 {
        if self.hold == 0 {
            self.target = rng.random_range(self.lo..=self.hi);
            self.hold = rng.random_range(dyn_.hold_min..=dyn_.hold_max);
        }
        self.hold -= 1;
        let limit = dyn_.max_delta * (self.hi - self.lo) * 0.5;
        let delta = (self.target - self.value).clamp(-limit, limit);
        self.value = (self.value + delta).clamp(self.lo, self.hi);
        self.value
    }
}

fn substream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Samples a factor trajectory of `length` frames for one identity.
///
/// Every motion factor is driven by its own RNG stream, so the streams are
/// independent by construction.
pub fn sample_factors(
    identity_seed: u64,
    rng_seed: u64,
    spec: &DynamicsSpec,
    length: usize,
) -> Result<Vec<FactorVector>> {
    spec.validate()?;
    if length == 0 {
        return Err(Error::Config("trajectory length must be positive".into()));
    }
    let base = FactorVector::neutral(identity_seed);

    let mut lip_rng = substream(rng_seed, 1);
    let mut pose_rng = substream(rng_seed, 2);
    let mut gaze_rng = substream(rng_seed, 3);
    let mut blink_rng = substream(rng_seed, 4);
    let mut exp_rng = substream(rng_seed, 5);

    let mut lip = Chaser::new(&mut lip_rng, 0.0, 1.0);
    let mut pose: Vec<Chaser> = POSE_HALF_RANGE
        .iter()
        .map(|&h| Chaser::new(&mut pose_rng, -h, h))
        .collect();
    let mut gaze: Vec<Chaser> = (0..GAZE_DIM)
        .map(|_| Chaser::new(&mut gaze_rng, -1.0, 1.0))
        .collect();
    let mut blink_phase: Option<usize> = None;
    let mut exp_value = [0f32; EXPRESSION_DIM];
    let mut exp_left = 0usize;

    let mut out = Vec::with_capacity(length);
    for t in 0..length {
        let mut f = base.clone();
        // The first frame takes the freshly drawn initial values.
        f.lip_aperture = if t == 0 { lip.value } else { lip.step(&mut lip_rng, &spec.lip) };
        for (i, c) in pose.iter_mut().enumerate().take(POSE_DIM) {
            f.pose[i] = if t == 0 { c.value } else { c.step(&mut pose_rng, &spec.pose) };
        }
        for (i, c) in gaze.iter_mut().enumerate() {
            f.gaze[i] = if t == 0 { c.value } else { c.step(&mut gaze_rng, &spec.gaze) };
        }

        let start_blink = blink_rng.random::<f32>() < spec.blink_rate;
        f.blink = match blink_phase {
            Some(p) if p < BLINK_PROFILE.len() => {
                blink_phase = Some(p + 1);
                BLINK_PROFILE[p]
            }
            _ => {
                blink_phase = None;
                if start_blink && t > 0 {
                    blink_phase = Some(1);
                    BLINK_PROFILE[0]
                } else {
                    0.0
                }
            }
        };

        if exp_left == 0 {
            for v in exp_value.iter_mut() {
                *v = exp_rng.random_range(-1.0f32..=1.0);
            }
            exp_left =
                exp_rng.random_range(spec.expression_segment_min..=spec.expression_segment_max);
        }
        exp_left -= 1;
        f.expression = exp_value;
        out.push(f);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_is_in_range() {
        let f = sample_factors(0, 0, &DynamicsSpec::default(), 1).unwrap();
        assert_eq!(f.len(), 1);
        f[0].validate().unwrap();
    }

    #[test]
    fn same_seed_same_sequence() {
        let spec = DynamicsSpec::default();
        assert_eq!(
            sample_factors(3, 11, &spec, 64).unwrap(),
            sample_factors(3, 11, &spec, 64).unwrap()
        );
    }

    #[test]
    fn different_seeds_differ_in_lip() {
        let spec = DynamicsSpec::default();
        let a = sample_factors(0, 0, &spec, 32).unwrap();
        let b = sample_factors(0, 1, &spec, 32).unwrap();
        let differing = a
            .iter()
            .zip(&b)
            .filter(|(x, y)| x.lip_aperture != y.lip_aperture)
            .count();
        assert!(differing >= 1);
    }

    #[test]
    fn per_step_deltas_are_bounded() {
        let spec = DynamicsSpec::default();
        for seed in 0..20 {
            let seq = sample_factors(seed, seed * 7 + 1, &spec, 200).unwrap();
            for w in seq.windows(2) {
                let (a, b) = (&w[0], &w[1]);
                b.validate().unwrap();
                assert!((b.lip_aperture - a.lip_aperture).abs() <= spec.lip.max_delta * 0.5 + 1e-6);
                for i in 0..POSE_DIM {
                    let lim = spec.pose.max_delta * POSE_HALF_RANGE[i] + 1e-6;
                    assert!((b.pose[i] - a.pose[i]).abs() <= lim);
                }
                for i in 0..GAZE_DIM {
                    assert!((b.gaze[i] - a.gaze[i]).abs() <= spec.gaze.max_delta + 1e-6);
                }
                assert!((b.blink - a.blink).abs() <= 0.5 + 1e-6);
            }
        }
    }

    #[test]
    fn expression_segments_respect_minimum_length() {
        let spec = DynamicsSpec::default();
        for seed in 0..20 {
            let seq = sample_factors(1, seed, &spec, 400).unwrap();
            let mut run = 1;
            let mut runs = Vec::new();
            for w in seq.windows(2) {
                if w[0].expression == w[1].expression {
                    run += 1;
                } else {
                    runs.push(run);
                    run = 1;
                }
            }
            // Every completed segment (the trailing one may be cut by the clip end).
            assert!(runs.iter().all(|&r| r >= spec.expression_segment_min), "{runs:?}");
        }
    }

    #[test]
    fn invalid_spec_is_a_config_error() {
        let mut spec = DynamicsSpec::default();
        spec.expression_segment_min = 0;
        assert!(matches!(sample_factors(0, 0, &spec, 4), Err(Error::Config(_))));
        let mut spec = DynamicsSpec::default();
        spec.lip.max_delta = -1.0;
        assert!(matches!(sample_factors(0, 0, &spec, 4), Err(Error::Config(_))));
    }
}
