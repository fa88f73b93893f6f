//! Deterministic parametric face world: factor dynamics, rendering, synthetic
//! audio and dataset persistence.

mod audio;
mod clip;
mod dataset;
mod dynamics;
mod factors;
mod render;

pub use audio::{synth_audio, synth_audio_with_noise, AudioFeature, AUDIO_CONTEXT, AUDIO_DIM, AUDIO_NOISE_STD};
pub use clip::{generate_clip, generate_split, Clip, Split, WorldConfig};
pub use dataset::{
    decode_f32_array, encode_f32_array, read_dataset, read_manifest, render_config_hash, sha256_hex,
    write_dataset, ClipEntry, DatasetManifest, WORLD_VERSION,
};
pub use dynamics::{sample_factors, DynamicsSpec, TargetDynamics};
pub use factors::{
    readout_slice, sample_appearance, FactorVector, MotionFactor, APPEARANCE_DIM, EXPRESSION_DIM,
    FACTOR_FLAT_DIM, GAZE_DIM, POSE_DIM, POSE_HALF_RANGE, READOUT_DIM,
};
pub use render::{
    compose_pose, eye_polygon, eye_region_contains, eye_region_mask, face_transform, keypoints,
    normalized_pose, render_float, render_frame, Keypoints, FRAME_SIZE, MOUTH_KEYPOINTS,
    NUM_KEYPOINTS,
};
