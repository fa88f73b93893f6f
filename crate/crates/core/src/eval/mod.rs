//! Evaluation protocols and metrics.
//!
//! Frames are read back through the frozen factor probe of the checkpoint, and
//! lip sync is scored with the frozen stage-2 lip and audio encoders. The
//! generator always receives per-frame expression codes here.

mod ablation;
mod heads;
mod metrics;
mod model;
mod protocol;

use candle_core::Tensor;

pub use ablation::{ablation_csv, run_ablation, score_variant, variants, AblationRow, AblationStudy, Variant};
pub use heads::{eye_triplet_accuracy, lip_retrieval_accuracy, pose_head_mse, probe_validation, ProbeValidation};
pub use metrics::{
    control_mse, factor_deviation, interpolation_alphas, is_monotone, lmd, matrix_from_readouts, nlsec, psnr,
    sync_confidence, DisentanglementMatrix, Readout,
};
pub use model::{
    audio_windows, AudioSignal, ControllableModel, Controls, FactorReader, OracleRenderer, ProbeReader, Readings,
    Signal, TrainedModel, EVAL_CHUNK,
};
pub use protocol::{
    controlled_readouts, disentanglement_matrix, run_protocol, single_factor_frames, EvalPair, Evaluator,
    ExpressionDrive, MetricsReport, ProtocolMode, ProtocolSpec,
};

use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::synthworld::{Clip, MotionFactor};

/// Expression codes on the straight line from `a` to `b`, `[steps, D]`.
pub fn interpolate_expression(a: &Tensor, b: &Tensor, steps: usize) -> Result<Tensor> {
    let (a, b) = (a.flatten_all()?, b.flatten_all()?);
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("expression codes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let rows = interpolation_alphas(steps)?
        .into_iter()
        .map(|t| Ok(((&a * (1.0 - t))? + (&b * t)?)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&rows, 0)?)
}

/// Frames of clip `a`'s identity whose expression moves from that of frame
/// `frame_a` to that of `b`'s frame `frame_b`; every other factor canonical.
pub fn expression_path(
    model: &TrainedModel,
    a: &Clip,
    frame_a: usize,
    b: &Clip,
    frame_b: usize,
    steps: usize,
) -> Result<Vec<FloatImage>> {
    let fa = model.expression_codes(&[a.frames[frame_a].to_float()])?;
    let fb = model.expression_codes(&[b.frames[frame_b].to_float()])?;
    let exp = interpolate_expression(&fa, &fb, steps)?;
    let cfg = &model.nets.cfg;
    let z = |d: usize| Tensor::zeros((steps, d), model.dtype(), &candle_core::Device::Cpu);
    model.render_codes(
        &model.appearance(&a.frames[0].to_float())?,
        &z(cfg.lip_dim)?,
        &z(cfg.eye_dim)?,
        &z(cfg.pose_dim)?,
        &exp,
    )
}

/// Disentanglement of the oracle renderer read with exact ground truth
/// instead of a probe.
pub fn oracle_matrix(clips: &[Clip]) -> Result<DisentanglementMatrix> {
    let per_clip = clips
        .iter()
        .map(|clip| {
            let app = clip.frames[0].to_float();
            let mut out: [Vec<Readout>; 5] = Default::default();
            for (j, &factor) in MotionFactor::ALL.iter().enumerate() {
                let (frames, factors) = single_factor_frames(clip, factor);
                let sig = Signal { frames: &frames, factors: &factors };
                let mut c = Controls {
                    appearance: (&app, &clip.factors[0]),
                    lip: None,
                    eye: None,
                    pose: None,
                    expression: None,
                    len: clip.len(),
                };
                match factor {
                    MotionFactor::Lip => c.lip = Some(AudioSignal { audio: &clip.audio, factors: &clip.factors }),
                    MotionFactor::Pose => c.pose = Some(sig),
                    MotionFactor::Blink | MotionFactor::Gaze => c.eye = Some(sig),
                    MotionFactor::Expression => c.expression = Some(sig),
                }
                out[j] = OracleRenderer::factors(&c)?.iter().map(|f| f.normalized_readout()).collect();
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    matrix_from_readouts(&per_clip)
}
