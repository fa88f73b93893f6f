use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::synthworld::{render_frame, Clip, FactorVector, MotionFactor};

use super::metrics::{
    control_mse, csv_err, lmd, matrix_from_readouts, nlsec, psnr, sync_confidence, DisentanglementMatrix, Readout,
};
use super::model::{to_rows, AudioSignal, ControllableModel, Controls, FactorReader, ProbeReader, Signal, TrainedModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    /// Appearance is frame 0 of the clip; its own frames and audio drive it.
    SelfDriving,
    /// Motion comes from a clip of another identity; audio from the appearance clip.
    CrossVideo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpressionDrive {
    PerFrame,
    /// Every frame takes its expression from the first driving frame.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub mode: ProtocolMode,
    pub expression: ExpressionDrive,
}

impl ProtocolSpec {
    pub const SELF_DRIVING: Self = Self { mode: ProtocolMode::SelfDriving, expression: ExpressionDrive::PerFrame };
    pub const CROSS_VIDEO: Self = Self { mode: ProtocolMode::CrossVideo, expression: ExpressionDrive::PerFrame };
    pub const CROSS_VIDEO_FIXED_EXP: Self = Self { mode: ProtocolMode::CrossVideo, expression: ExpressionDrive::Fixed };

    pub fn name(&self) -> String {
        let mode = match self.mode {
            ProtocolMode::SelfDriving => "self_driving",
            ProtocolMode::CrossVideo => "cross_video",
        };
        match self.expression {
            ExpressionDrive::PerFrame => mode.to_string(),
            ExpressionDrive::Fixed => format!("{mode}_fixed_exp"),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        [Self::SELF_DRIVING, Self::CROSS_VIDEO, Self::CROSS_VIDEO_FIXED_EXP]
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown protocol `{name}`")))
    }

    pub fn check_pair(&self, clips: &[Clip], pair: EvalPair) -> Result<()> {
        let (a, d) = (&clips[pair.appearance], &clips[pair.driver]);
        match self.mode {
            ProtocolMode::SelfDriving if pair.appearance != pair.driver => Err(Error::Validation(
                "self-driving uses the appearance clip as its own driver".into(),
            )),
            ProtocolMode::CrossVideo if pair.appearance == pair.driver || a.identity_seed() == d.identity_seed() => {
                Err(Error::Validation(format!(
                    "cross-video pairs need clips of different identities, got {} and {}",
                    a.clip_id, d.clip_id
                )))
            }
            _ => Ok(()),
        }
    }

    /// One pair per clip; cross-video drives clip `i` with the next clip of another identity.
    pub fn pairs(&self, clips: &[Clip]) -> Result<Vec<EvalPair>> {
        let n = clips.len();
        let pairs = (0..n)
            .map(|i| match self.mode {
                ProtocolMode::SelfDriving => Ok(EvalPair { appearance: i, driver: i }),
                ProtocolMode::CrossVideo => (1..n)
                    .map(|k| (i + k) % n)
                    .find(|&j| clips[j].identity_seed() != clips[i].identity_seed())
                    .map(|j| EvalPair { appearance: i, driver: j })
                    .ok_or_else(|| Error::Data("cross-video needs at least two identities".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        for &p in &pairs {
            self.check_pair(clips, p)?;
        }
        Ok(pairs)
    }
}

/// Clip indices of one evaluated video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub appearance: usize,
    pub driver: usize,
}

/// Per-protocol metrics averaged over clips. Fields that need ground truth
/// frames are absent in the cross-video setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub clips: usize,
    pub frames: usize,
    pub psnr: Option<f64>,
    pub lmd: Option<f64>,
    pub lmd_m: Option<f64>,
    pub sync_confidence: f64,
    pub reference_sync_confidence: Option<f64>,
    /// Empty without a positive reference score.
    pub nlsec: Option<f64>,
    pub exp_mse: f64,
    pub pose_mse: f64,
}

impl MetricsReport {
    pub const COLUMNS: [&str; 11] = [
        "protocol",
        "clips",
        "frames",
        "psnr",
        "lmd",
        "lmd_m",
        "sync_confidence",
        "reference_sync_confidence",
        "nlsec",
        "exp_mse",
        "pose_mse",
    ];

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn csv_record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.protocol.clone(),
            self.clips.to_string(),
            self.frames.to_string(),
            opt(self.psnr),
            opt(self.lmd),
            opt(self.lmd_m),
            self.sync_confidence.to_string(),
            opt(self.reference_sync_confidence),
            opt(self.nlsec),
            self.exp_mse.to_string(),
            self.pose_mse.to_string(),
        ]
    }

    pub fn to_csv(reports: &[MetricsReport]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::COLUMNS).map_err(csv_err)?;
        for r in reports {
            w.write_record(r.csv_record()).map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
            .map_err(|e| Error::Data(e.to_string()))
    }
}

/// Frozen networks used to score generated frames: the probe and the stage-2
/// lip and audio encoders.
pub struct Evaluator<'a> {
    pub model: &'a TrainedModel,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a TrainedModel) -> Self {
        Self { model }
    }

    pub fn reader(&self) -> ProbeReader<'a> {
        ProbeReader { nets: &self.model.nets, dtype: self.model.dtype() }
    }

    pub fn sync(&self, frames: &[FloatImage], audio: &[crate::synthworld::AudioFeature]) -> Result<f64> {
        let lip = to_rows(&self.model.lip_codes(frames)?)?;
        let aud = to_rows(&self.model.audio_codes(audio, frames.len())?)?;
        sync_confidence(&lip, &aud)
    }

    /// Sync confidence of real frames, the reference for NLSE-C.
    pub fn reference_sync(&self, clips: &[Clip]) -> Result<f64> {
        let mut s = 0.0;
        for c in clips {
            s += self.sync(&float_frames(c), &c.audio)?;
        }
        Ok(s / clips.len().max(1) as f64)
    }
}

pub(crate) fn float_frames(c: &Clip) -> Vec<FloatImage> {
    c.frames.iter().map(|f| f.to_float()).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn run_protocol(
    spec: &ProtocolSpec,
    model: &dyn ControllableModel,
    eval: &Evaluator,
    clips: &[Clip],
    reference_sync: Option<f64>,
) -> Result<MetricsReport> {
    if clips.is_empty() {
        return Err(Error::Data("no test clips".into()));
    }
    let reader = eval.reader();
    let (mut ps, mut lm, mut lmm, mut sync, mut exp, mut pose) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    let mut frames = 0;
    for pair in spec.pairs(clips)? {
        let (a, d) = (&clips[pair.appearance], &clips[pair.driver]);
        let len = a.len().min(d.len());
        let app = a.frames[0].to_float();
        let drv: Vec<FloatImage> = d.frames[..len].iter().map(|f| f.to_float()).collect();
        let (exp_frames, exp_factors): (Vec<FloatImage>, Vec<FactorVector>) = match spec.expression {
            ExpressionDrive::PerFrame => (drv.clone(), d.factors[..len].to_vec()),
            ExpressionDrive::Fixed => (vec![drv[0].clone(); len], vec![d.factors[0].clone(); len]),
        };
        let drive = Signal { frames: &drv, factors: &d.factors[..len] };
        let controls = Controls {
            appearance: (&app, &a.factors[0]),
            lip: Some(AudioSignal { audio: &a.audio, factors: &a.factors }),
            eye: Some(drive),
            pose: Some(drive),
            expression: Some(Signal { frames: &exp_frames, factors: &exp_factors }),
            len,
        };
        let gen = model.generate(&controls)?;
        let g = reader.read(&gen)?;
        let r_drv = reader.read(&drv)?;
        let r_exp: Vec<Readout> = match spec.expression {
            ExpressionDrive::PerFrame => r_drv.readouts.clone(),
            ExpressionDrive::Fixed => vec![r_drv.readouts[0]; len],
        };
        if spec.mode == ProtocolMode::SelfDriving {
            ps.push(mean(&gen.iter().zip(&drv).map(|(x, y)| psnr(x, y)).collect::<Result<Vec<_>>>()?));
            let (l, m) = lmd(&g.keypoints, &r_drv.keypoints)?;
            lm.push(l);
            lmm.push(m);
        }
        sync.push(eval.sync(&gen, &a.audio)?);
        exp.push(control_mse(MotionFactor::Expression, &g.readouts, &r_exp)?);
        pose.push(control_mse(MotionFactor::Pose, &g.readouts, &r_drv.readouts)?);
        frames += len;
    }
    let opt = |v: &[f64]| (!v.is_empty()).then(|| mean(v));
    let sync_confidence = mean(&sync);
    Ok(MetricsReport {
        protocol: spec.name(),
        clips: clips.len(),
        frames,
        psnr: opt(&ps),
        lmd: opt(&lm),
        lmd_m: opt(&lmm),
        sync_confidence,
        reference_sync_confidence: reference_sync,
        nlsec: match reference_sync.map(|r| nlsec(sync_confidence, r)) {
            Some(Err(Error::UndefinedMetric(m))) => {
                log::warn!("NLSE-C left empty: {m}");
                None
            }
            r => r.transpose()?,
        },
        exp_mse: mean(&exp),
        pose_mse: mean(&pose),
    })
}

/// Frames of `clip` with only `factor` following its track and every other
/// motion factor canonical.
pub fn single_factor_frames(clip: &Clip, factor: MotionFactor) -> (Vec<FloatImage>, Vec<FactorVector>) {
    let factors: Vec<FactorVector> = clip
        .factors
        .iter()
        .map(|src| {
            let mut f = FactorVector { appearance: src.appearance, ..FactorVector::neutral(src.identity_seed) };
            match factor {
                MotionFactor::Lip => f.lip_aperture = src.lip_aperture,
                MotionFactor::Pose => f.pose = src.pose,
                MotionFactor::Blink => f.blink = src.blink,
                MotionFactor::Gaze => f.gaze = src.gaze,
                MotionFactor::Expression => f.expression = src.expression,
            }
            f
        })
        .collect();
    (factors.iter().map(|f| render_frame(f).to_float()).collect(), factors)
}

/// Readouts of generated frames per clip and controlled factor, only that
/// factor driven and every other latent at zero.
pub fn controlled_readouts(
    model: &dyn ControllableModel,
    reader: &dyn FactorReader,
    clips: &[Clip],
) -> Result<Vec<[Vec<Readout>; 5]>> {
    clips
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
                out[j] = reader.read(&model.generate(&c)?)?.readouts;
            }
            Ok(out)
        })
        .collect()
}

pub fn disentanglement_matrix(
    model: &dyn ControllableModel,
    reader: &dyn FactorReader,
    clips: &[Clip],
) -> Result<DisentanglementMatrix> {
    matrix_from_readouts(&controlled_readouts(model, reader, clips)?)
}
