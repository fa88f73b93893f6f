use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const APPEARANCE_DIM: usize = 16;
pub const POSE_DIM: usize = 4;
pub const GAZE_DIM: usize = 2;
pub const EXPRESSION_DIM: usize = 4;

/// Width of the flat float encoding of a [`FactorVector`] (identity seed excluded).
pub const FACTOR_FLAT_DIM: usize = APPEARANCE_DIM + 1 + POSE_DIM + GAZE_DIM + 1 + EXPRESSION_DIM;

/// Half-ranges of the pose components: in-plane rotation (rad), translation x/y
/// (fraction of the frame size) and log-scale.
pub const POSE_HALF_RANGE: [f32; POSE_DIM] = [0.3, 0.06, 0.06, 0.08];

/// Ground-truth latent factors of one synthetic frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorVector {
    pub identity_seed: u64,
    /// Face shape and palette, each component in `[0, 1]`.
    pub appearance: [f32; APPEARANCE_DIM],
    /// 0 closed, 1 fully open.
    pub lip_aperture: f32,
    /// (rotation, tx, ty, log-scale), bounded by [`POSE_HALF_RANGE`].
    pub pose: [f32; POSE_DIM],
    /// (yaw, pitch) offsets in `[-1, 1]`.
    pub gaze: [f32; GAZE_DIM],
    /// 0 open, 1 closed.
    pub blink: f32,
    /// (brow raise, brow furrow, mouth-corner curl, cheek raise), each in `[-1, 1]`.
    pub expression: [f32; EXPRESSION_DIM],
}

/// Which motion factor a readout or control refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFactor {
    Lip,
    Pose,
    Blink,
    Gaze,
    Expression,
}

impl MotionFactor {
    pub const ALL: [MotionFactor; 5] = [
        MotionFactor::Lip,
        MotionFactor::Pose,
        MotionFactor::Blink,
        MotionFactor::Gaze,
        MotionFactor::Expression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionFactor::Lip => "lip",
            MotionFactor::Pose => "pose",
            MotionFactor::Blink => "blink",
            MotionFactor::Gaze => "gaze",
            MotionFactor::Expression => "exp",
        }
    }
}

/// Number of entries in the normalized motion readout (pose, gaze, blink, expression, lip).
pub const READOUT_DIM: usize = POSE_DIM + GAZE_DIM + 1 + EXPRESSION_DIM + 1;

/// Column range of each factor inside the normalized readout vector.
pub fn readout_slice(factor: MotionFactor) -> std::ops::Range<usize> {
    match factor {
        MotionFactor::Pose => 0..4,
        MotionFactor::Gaze => 4..6,
        MotionFactor::Blink => 6..7,
        MotionFactor::Expression => 7..11,
        MotionFactor::Lip => 11..12,
    }
}

impl FactorVector {
    /// Appearance sampled from the identity seed; all motion factors at their canonical value.
    pub fn neutral(identity_seed: u64) -> Self {
        Self {
            identity_seed,
            appearance: sample_appearance(identity_seed),
            lip_aperture: 0.0,
            pose: [0.0; POSE_DIM],
            gaze: [0.0; GAZE_DIM],
            blink: 0.0,
            expression: [0.0; EXPRESSION_DIM],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f32, lo: f32, hi: f32| v.is_finite() && v >= lo && v <= hi;
        for (i, &a) in self.appearance.iter().enumerate() {
            if !in_range(a, 0.0, 1.0) {
                return Err(Error::Validation(format!("appearance[{i}] = {a} outside [0,1]")));
            }
        }
        if !in_range(self.lip_aperture, 0.0, 1.0) {
            return Err(Error::Validation(format!(
                "lip_aperture = {} outside [0,1]",
                self.lip_aperture
            )));
        }
        for (i, (&p, &h)) in self.pose.iter().zip(&POSE_HALF_RANGE).enumerate() {
            // Small slack so that composed augmentation transforms remain renderable.
            if !in_range(p, -1.5 * h, 1.5 * h) {
                return Err(Error::Validation(format!("pose[{i}] = {p} outside ±{}", 1.5 * h)));
            }
        }
        for (i, &g) in self.gaze.iter().enumerate() {
            if !in_range(g, -1.0, 1.0) {
                return Err(Error::Validation(format!("gaze[{i}] = {g} outside [-1,1]")));
            }
        }
        if !in_range(self.blink, 0.0, 1.0) {
            return Err(Error::Validation(format!("blink = {} outside [0,1]", self.blink)));
        }
        for (i, &e) in self.expression.iter().enumerate() {
            if !in_range(e, -1.0, 1.0) {
                return Err(Error::Validation(format!("expression[{i}] = {e} outside [-1,1]")));
            }
        }
        Ok(())
    }

    /// Motion factors in normalized units (each roughly in `[-1, 1]`), laid out as
    /// described by [`readout_slice`].
    pub fn normalized_readout(&self) -> [f32; READOUT_DIM] {
        let mut out = [0f32; READOUT_DIM];
        for i in 0..POSE_DIM {
            out[i] = self.pose[i] / POSE_HALF_RANGE[i];
        }
        out[4] = self.gaze[0];
        out[5] = self.gaze[1];
        out[6] = 2.0 * self.blink - 1.0;
        out[7..11].copy_from_slice(&self.expression);
        out[11] = 2.0 * self.lip_aperture - 1.0;
        out
    }

    pub fn to_flat(&self) -> [f32; FACTOR_FLAT_DIM] {
        let mut out = [0f32; FACTOR_FLAT_DIM];
        out[..16].copy_from_slice(&self.appearance);
        out[16] = self.lip_aperture;
        out[17..21].copy_from_slice(&self.pose);
        out[21..23].copy_from_slice(&self.gaze);
        out[23] = self.blink;
        out[24..28].copy_from_slice(&self.expression);
        out
    }

    pub fn from_flat(identity_seed: u64, flat: &[f32]) -> Result<Self> {
        if flat.len() != FACTOR_FLAT_DIM {
            return Err(Error::Shape(format!(
                "factor row has {} values, expected {FACTOR_FLAT_DIM}",
                flat.len()
            )));
        }
        let mut f = Self::neutral(identity_seed);
        f.appearance.copy_from_slice(&flat[..16]);
        f.lip_aperture = flat[16];
        f.pose.copy_from_slice(&flat[17..21]);
        f.gaze.copy_from_slice(&flat[21..23]);
        f.blink = flat[23];
        f.expression.copy_from_slice(&flat[24..28]);
        Ok(f)
    }
}

/// Identity appearance parameters, a pure function of the identity seed.
pub fn sample_appearance(identity_seed: u64) -> [f32; APPEARANCE_DIM] {
    let mut rng = ChaCha8Rng::seed_from_u64(identity_seed ^ 0xA11E_A2A2_0000_0001);
    let mut out = [0f32; APPEARANCE_DIM];
    for v in out.iter_mut() {
        *v = rng.random::<f32>();
    }
    out
}
